"""Physics-informed shallow operator with a ReLU^3 trunk.

PDE on (0, T) x Gamma, query vectors ``y = (y0, y1..yd)`` with time first:

    L v = dv/dy0 - sum_i d^2 v / dy_i^2 + v = f      in the interior
    v = g                                          on {0} x Gamma and [0, T] x dGamma

Residuals per input function u_i, stacked as ``[s_i, h_i]``:

    s(u_i)(y_j)  = (L G(u_i)(y_j) - f_ij) / sqrt(n2)
    h(u_i)(yb_j) = (G(u_i)(yb_j) - g_ij) / sqrt(n3)

and the loss is ``|s|^2 + |h|^2``. Descent moves along ``-J^T [s, h]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numkit
from .ntk_kernels import (
    BlockGram,
    arccos_kernel_order0,
    arccos_kernel_order1,
    branch_gram,
    kernel_matrix,
    mc_pinn_factor,
    parallel_violations,
    pinn_trunk_grad,
    pinn_trunk_value,
    trunk_gram,
)
from .numkit import SeededRng
from .operator_net import (
    OperatorDataset,
    OperatorWeights,
    branch_preactivations,
    branch_values,
    relu3,
    step,
)
from .trainer import FeatureCache, TrainingTrace, run_descent

KINK_RTOL = 1e-3


def apply_L_to_trunk(w, y) -> float:
    """L applied to y -> relu3(w.y): 3 w0 relu2 - 6 |w_s|^2 relu + relu3."""
    return float(pinn_trunk_value(np.asarray(w, float), np.asarray(y, float), True))


def grad_L_trunk(w, y) -> np.ndarray:
    """Gradient with respect to ``w`` of :func:`apply_L_to_trunk`."""
    return pinn_trunk_grad(np.asarray(w, float), np.asarray(y, float), True)


def is_kink(w, y, rtol: float = KINK_RTOL) -> bool:
    w, y = np.asarray(w, float), np.asarray(y, float)
    return abs(w @ y) < rtol * np.linalg.norm(w) * np.linalg.norm(y)


@dataclass
class PdeProblem:
    """Source values ``f`` (n1, n2) at interior points and boundary data ``g``
    (n1, n3). Points themselves live on the paired :class:`OperatorDataset`.
    Gamma is the open unit ball of the spatial dimension."""

    source: np.ndarray
    boundary_values: np.ndarray
    horizon: float = 1.0
    spatial_dim: int = 2
    mode: str = "teacher"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.source = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        self.boundary_values = np.atleast_2d(np.asarray(self.boundary_values,
                                                        dtype=np.float64))

    def validate(self, data: OperatorDataset, tol: float = 1e-9) -> list[str]:
        problems = []
        ds = self.spatial_dim
        if data.d != ds + 1:
            problems.append(f"queries have dimension {data.d}, expected {ds + 1}")
            return problems
        if self.source.shape != (data.n1, data.n2):
            problems.append(f"source has shape {self.source.shape}, "
                            f"expected {(data.n1, data.n2)}")
        if self.boundary_values.shape != (data.n1, data.n3):
            problems.append(f"boundary values have shape {self.boundary_values.shape}, "
                            f"expected {(data.n1, data.n3)}")
        y = data.queries
        if np.any(y[:, 0] <= 0) or np.any(y[:, 0] >= self.horizon):
            problems.append("interior time coordinate outside (0, T)")
        if np.any(np.linalg.norm(y[:, 1:], axis=1) >= 1.0):
            problems.append("interior spatial point outside the open unit ball")
        if data.boundary is not None:
            b = data.boundary
            r = np.linalg.norm(b[:, 1:], axis=1)
            initial = (np.abs(b[:, 0]) <= tol) & (r <= 1.0 + tol)
            lateral = (b[:, 0] >= -tol) & (b[:, 0] <= self.horizon + tol) & (
                np.abs(r - 1.0) <= tol)
            if not np.all(initial | lateral):
                problems.append("boundary point off {0} x Gamma and [0, T] x dGamma")
        problems += parallel_violations(data)
        return problems


class PinnObjective:
    """Residual vector [s_1, h_1, ..., s_n1, h_n1] of the physics-informed loss."""

    loss_scale = 1.0
    extra_columns = ("s_norm", "h_norm")

    def __init__(self, problem: PdeProblem, data: OperatorDataset):
        if data.boundary is None:
            raise ValueError("physics-informed training needs boundary points")
        self.problem = problem
        self.data = data
        n2, n3 = data.n2, data.n3
        self.point_scale = np.concatenate([np.full(n2, 1 / math.sqrt(n2)),
                                           np.full(n3, 1 / math.sqrt(n3))])
        self.targets = np.hstack([problem.source, problem.boundary_values]) * self.point_scale
        self.features = FeatureCache(self._features)

    def _features(self, w: OperatorWeights) -> dict:
        if w.activation != "relu3":
            raise ValueError("physics-informed operator needs a relu3 trunk")
        d = self.data
        if d.q != w.q or d.d != w.d:
            raise ValueError(f"dataset (q={d.q}, d={d.d}) does not match weights "
                             f"(q={w.q}, d={w.d})")
        pre_b = branch_preactivations(w, d.inputs)
        val = np.concatenate([_values(w.trunk, d.queries, True),
                              _values(w.trunk, d.boundary, False)], axis=1)
        grad = np.concatenate([_grads(w.trunk, d.queries, True),
                               _grads(w.trunk, d.boundary, False)], axis=1)
        return dict(
            on=step(pre_b),
            beta=branch_values(w, d.inputs, pre_b),
            feat=val * self.point_scale,                            # (m, b)
            grad=grad * self.point_scale[None, :, None],            # (m, b, D)
            pre_t=w.trunk @ np.vstack([d.queries, d.boundary]).T,
        )

    def error(self, w: OperatorWeights) -> np.ndarray:
        f = self.features(w)
        return (f["beta"].T @ f["feat"] / math.sqrt(w.m) - self.targets).ravel()

    def vjp(self, w: OperatorWeights, e: np.ndarray):
        d = self.data
        f = self.features(w)
        res = e.reshape(d.n1, -1)
        coef = f["beta"] @ res                                      # (m, b)
        g_trunk = np.einsum("ra,rad->rd", coef, f["grad"]) / math.sqrt(w.m)
        e_r = f["feat"] @ res.T                                     # (m, n1)
        coef_b = w.signs[:, :, None] * (e_r[:, None, :] / math.sqrt(w.m * w.p))
        g_branch = ((f["on"] * coef_b).reshape(-1, d.n1) @ d.inputs).reshape(w.m, w.p, w.q)
        return g_trunk, g_branch

    def jvp(self, w: OperatorWeights, d_trunk: np.ndarray, d_branch: np.ndarray):
        d = self.data
        f = self.features(w)
        dfeat = np.einsum("rad,rd->ra", f["grad"], d_trunk)
        trunk_part = f["beta"].T @ dfeat
        dpre = (d_branch.reshape(-1, w.q) @ d.inputs.T).reshape(w.m, w.p, d.n1)
        dbeta = np.einsum("rk,rki->ri", w.signs, f["on"] * dpre) / math.sqrt(w.p)
        branch_part = dbeta.T @ f["feat"]
        return ((trunk_part + branch_part) / math.sqrt(w.m)).ravel()

    def grams(self, w: OperatorWeights, t=None):
        d = self.data
        f = self.features(w)
        b = d.n2 + d.n3
        H = BlockGram(trunk_gram(f["beta"], f["grad"]), d.n1, b, "empirical", t)
        Ht = BlockGram(branch_gram(f["on"], d.inputs, f["feat"]), d.n1, b, "empirical", t)
        return H, Ht

    def split(self, e: np.ndarray):
        res = e.reshape(self.data.n1, -1)
        return res[:, :self.data.n2], res[:, self.data.n2:]

    def extras(self, e: np.ndarray) -> dict:
        s, h = self.split(e)
        return {"s_norm": float(np.linalg.norm(s)), "h_norm": float(np.linalg.norm(h))}

    def preactivation_max(self, w: OperatorWeights) -> float:
        return float(np.max(np.abs(self.features(w)["pre_t"])))


def _values(trunk: np.ndarray, points: np.ndarray, interior: bool) -> np.ndarray:
    return np.stack([pinn_trunk_value(trunk, y, interior) for y in points], axis=1)


def _grads(trunk: np.ndarray, points: np.ndarray, interior: bool) -> np.ndarray:
    return np.stack([pinn_trunk_grad(trunk, y, interior) for y in points], axis=1)


def pinn_residuals(weights: OperatorWeights, problem: PdeProblem,
                   data: OperatorDataset) -> np.ndarray:
    """Stacked residual vector, length n1 * (n2 + n3)."""
    return PinnObjective(problem, data).error(weights)


def pinn_loss(weights: OperatorWeights, problem: PdeProblem, data: OperatorDataset) -> float:
    """Direct summation of the physics-informed loss, independent of the residual stacking."""
    n2, n3 = data.n2, data.n3
    total = 0.0
    for i, u in enumerate(data.inputs):
        beta = branch_values(weights, u[None, :])[:, 0]
        for j, y in enumerate(data.queries):
            lg = beta @ pinn_trunk_value(weights.trunk, y, True) / math.sqrt(weights.m)
            total += (lg - problem.source[i, j]) ** 2 / n2
        for j, y in enumerate(data.boundary):
            gval = beta @ relu3(weights.trunk @ y) / math.sqrt(weights.m)
            total += (gval - problem.boundary_values[i, j]) ** 2 / n3
    return float(total)


def pinn_gram(weights: OperatorWeights, problem: PdeProblem, data: OperatorDataset,
              t: Optional[int] = None) -> tuple[BlockGram, BlockGram]:
    return PinnObjective(problem, data).grams(weights, t)


def pinn_jacobians(weights: OperatorWeights, problem: PdeProblem, data: OperatorDataset):
    """Explicit stacked Jacobians (rows: residual entries) for small problems."""
    obj = PinnObjective(problem, data)
    f = obj.features(weights)
    m, p = weights.m, weights.p
    jt = np.einsum("ri,rad->iard", f["beta"], f["grad"]) / math.sqrt(m)
    jb = np.einsum("rk,rki,ra,iq->iarkq", weights.signs, f["on"], f["feat"],
                   data.inputs) / math.sqrt(m * p)
    rows = data.n1 * (data.n2 + data.n3)
    return jt.reshape(rows, -1), jb.reshape(rows, -1)


@dataclass
class PinnInfiniteGrams:
    H: BlockGram
    Ht: BlockGram
    samples: int

    @property
    def lambda0(self) -> float:
        return self.H.min_eigenvalue()

    @property
    def lambda0_tilde(self) -> float:
        return self.Ht.min_eigenvalue()


def pinn_infinite_grams(data: OperatorDataset, samples: int, rng: SeededRng) -> PinnInfiniteGrams:
    """Infinite-width Gram matrices; the trunk factors have no closed form and
    come from Monte Carlo, the input-function factors from the arc-cosine kernels."""
    pts = np.vstack([data.queries, data.boundary])
    interior = np.r_[np.ones(data.n2, bool), np.zeros(data.n3, bool)]
    scale = np.r_[np.full(data.n2, 1 / math.sqrt(data.n2)),
                  np.full(data.n3, 1 / math.sqrt(data.n3))]
    h2, h2_se = mc_pinn_factor(pts, interior, scale, "pinn_grad", samples, rng.substream(0))
    ht2, ht2_se = mc_pinn_factor(pts, interior, scale, "pinn_value", samples,
                                 rng.substream(1))
    h1 = kernel_matrix(arccos_kernel_order1, data.inputs)
    ht1 = kernel_matrix(arccos_kernel_order0, data.inputs)
    b = data.n2 + data.n3
    H = BlockGram(numkit.kron(h1, h2), data.n1, b, "monte-carlo",
                  stderr=numkit.kron(np.abs(h1), h2_se), factors=(h1, h2))
    Ht = BlockGram(numkit.kron(ht1, ht2), data.n1, b, "monte-carlo",
                   stderr=numkit.kron(np.abs(ht1), ht2_se), factors=(ht1, ht2))
    return PinnInfiniteGrams(H, Ht, samples)


def pinn_train(weights: OperatorWeights, problem: PdeProblem, data: OperatorDataset,
               eta="auto", steps: int = 200, cadence: int = 1, delta: float = 0.05,
               check_recursion: bool = False) -> TrainingTrace:
    obj = PinnObjective(problem, data)
    trace = run_descent(obj, weights, eta, steps, cadence, delta, check_recursion)
    m, n1 = weights.m, data.n1
    nb = data.n2 + data.n3
    b1 = 2.0 * math.sqrt(weights.d * math.log(m / delta))
    b2 = 2.0 * math.sqrt(math.log(m * nb / delta))
    g0 = trace.meta["init_res_norm"]
    lam = trace.meta["lam_hat"]
    trace.meta.update(
        B1=b1, B2=b2,
        max_trunk_norm=float(np.max(np.linalg.norm(trace.weights.trunk, axis=1))),
        radius_branch=math.sqrt(n1) * b1 ** 2 * b2 * g0 / (math.sqrt(m * weights.p) * lam),
        radius_trunk=(math.sqrt(n1) * b1 * b2 * g0 / (math.sqrt(m * weights.p) * lam)
                      * math.sqrt(math.log(m * n1 / delta))),
    )
    return trace
