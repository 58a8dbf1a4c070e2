"""Empirical and infinite-width Gram matrices of the shallow operator.

Trunk Gram ``H`` pairs trunk-weight gradients, branch Gram ``Ht`` pairs
branch-weight gradients. Both are ``n1 x n1`` grids of ``b x b`` blocks,
with flat index ``i * b + a`` for input ``i`` and query ``a``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numkit
from .numkit import SeededRng
from .operator_net import (
    PARALLEL_TOL,
    OperatorDataset,
    OperatorWeights,
    branch_preactivations,
    branch_values,
    parallel_pair,
    relu,
    relu2,
    relu3,
    step,
)

PSD_RTOL = 1e-9


class ParallelSamplesWarning(UserWarning):
    pass


@dataclass
class BlockGram:
    matrix: np.ndarray
    n1: int
    block: int
    provenance: str = "empirical"
    t: Optional[int] = None
    stderr: Optional[np.ndarray] = None
    factors: Optional[tuple] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        size = self.n1 * self.block
        if self.matrix.shape != (size, size):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({size}, {size})")

    def blk(self, i: int, j: int) -> np.ndarray:
        b = self.block
        return self.matrix[i * b:(i + 1) * b, j * b:(j + 1) * b]

    def min_eigenvalue(self) -> float:
        return numkit.min_eigenvalue(self.matrix)

    def eigenvalues(self) -> np.ndarray:
        return numkit.eigenvalues(self.matrix)

    def spectral_norm(self) -> float:
        return numkit.spectral_norm_sym(self.matrix)

    def is_psd(self, rtol: float = PSD_RTOL) -> bool:
        vals = self.eigenvalues()
        return bool(vals[0] >= -rtol * max(np.max(np.abs(vals)), 1e-300))


# ---------------------------------------------------------------- assembly

def trunk_gram(beta: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """(1/m) sum_r beta_ri beta_rj <g_ra, g_rb>.

    beta: (m, n1) branch features; grads: (m, b, d) per-neuron trunk factors.
    """
    m, n1 = beta.shape
    b = grads.shape[1]
    inner = (grads @ grads.transpose(0, 2, 1)).reshape(m, b * b)
    outer = (beta[:, :, None] * beta[:, None, :]).reshape(m, n1 * n1)
    return _blocks(outer.T @ inner / m, n1, b)


def branch_gram(on: np.ndarray, inputs: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """(1/(m p)) sum_{r,k} u_i.u_j 1_rki 1_rkj f_ra f_rb.

    on: (m, p, n1) branch indicators; feats: (m, b) trunk factors.
    """
    m, p, n1 = on.shape
    b = feats.shape[1]
    both = (on.transpose(0, 2, 1) @ on).reshape(m, n1 * n1)
    ff = (feats[:, :, None] * feats[:, None, :]).reshape(m, b * b)
    out = _blocks(both.T @ ff / (m * p), n1, b)
    return out * np.repeat(np.repeat(inputs @ inputs.T, b, axis=0), b, axis=1)


def _blocks(flat: np.ndarray, n1: int, b: int) -> np.ndarray:
    # (i j, a c) -> (i a, j c)
    return flat.reshape(n1, n1, b, b).transpose(0, 2, 1, 3).reshape(n1 * b, n1 * b)


def _require_relu(weights: OperatorWeights):
    if weights.activation != "relu":
        raise ValueError("supervised Gram matrices need a ReLU trunk")


def _check_data(weights: OperatorWeights, data: OperatorDataset):
    if data.q != weights.q or data.d != weights.d:
        raise ValueError(
            f"dataset (q={data.q}, d={data.d}) does not match weights "
            f"(q={weights.q}, d={weights.d})")


def empirical_H(weights: OperatorWeights, data: OperatorDataset,
                t: Optional[int] = None) -> BlockGram:
    _require_relu(weights)
    _check_data(weights, data)
    beta = branch_values(weights, data.inputs)
    dact = step(weights.trunk @ data.queries.T)                    # (m, n2)
    grads = dact[:, :, None] * data.queries[None, :, :]
    return BlockGram(trunk_gram(beta, grads), data.n1, data.n2, "empirical", t)


def empirical_Htilde(weights: OperatorWeights, data: OperatorDataset,
                     t: Optional[int] = None) -> BlockGram:
    _require_relu(weights)
    _check_data(weights, data)
    on = step(branch_preactivations(weights, data.inputs))
    tau = relu(weights.trunk @ data.queries.T)
    return BlockGram(branch_gram(on, data.inputs, tau), data.n1, data.n2, "empirical", t)


# ------------------------------------------------------- closed-form kernels

def _angle(a: np.ndarray, b: np.ndarray, na, nb):
    # 2*atan2(|a^ - b^|, |a^ + b^|) stays accurate near 0 and pi
    ah = a / na[..., None]
    bh = b / nb[..., None]
    return 2.0 * np.arctan2(np.linalg.norm(ah - bh, axis=-1),
                            np.linalg.norm(ah + bh, axis=-1))


def _pairwise(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("arc-cosine kernels are undefined for zero vectors")
    theta = _angle(a, b, na, nb)
    return na, nb, theta


def arccos_kernel_order1(a, b):
    """E[relu(w.a) relu(w.b)] for w ~ N(0, I)."""
    na, nb, th = _pairwise(a, b)
    val = na * nb * (np.sin(th) + (np.pi - th) * np.cos(th)) / (2.0 * np.pi)
    return float(val) if np.ndim(val) == 0 else val


def arccos_kernel_order0(a, b):
    """E[a.b 1{w.a >= 0} 1{w.b >= 0}] for w ~ N(0, I)."""
    na, nb, th = _pairwise(a, b)
    dot = np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64), axis=-1)
    val = dot * (np.pi - th) / (2.0 * np.pi)
    return float(val) if np.ndim(val) == 0 else val


def kernel_matrix(kernel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    n = x.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.asarray(kernel(x[ii], x[jj])).reshape(n, n)


@dataclass
class InfiniteWidthGrams:
    H: BlockGram
    Ht: BlockGram
    violations: list = field(default_factory=list)

    @property
    def lambda0(self) -> float:
        return self.H.min_eigenvalue()

    @property
    def lambda0_tilde(self) -> float:
        return self.Ht.min_eigenvalue()


def parallel_violations(data: OperatorDataset, tol: float = PARALLEL_TOL) -> list[str]:
    out = []
    pair = parallel_pair(data.inputs, tol)
    if pair is not None:
        out.append(f"inputs {pair[0]} and {pair[1]} are parallel")
    pts = data.queries if data.boundary is None else np.vstack([data.queries, data.boundary])
    pair = parallel_pair(pts, tol)
    if pair is not None:
        out.append(f"queries {pair[0]} and {pair[1]} are parallel")
    return out


def analytic_Hinf(data: OperatorDataset, strict: bool = False) -> InfiniteWidthGrams:
    """H_inf = H1 (x) H2 and Ht_inf = Ht1 (x) Ht2 from the arc-cosine closed forms."""
    violations = parallel_violations(data)
    if violations:
        msg = "; ".join(violations) + " (positive definiteness not guaranteed)"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, ParallelSamplesWarning, stacklevel=2)
    h1 = kernel_matrix(arccos_kernel_order1, data.inputs)
    h2 = kernel_matrix(arccos_kernel_order0, data.queries)
    ht1 = kernel_matrix(arccos_kernel_order0, data.inputs)
    ht2 = kernel_matrix(arccos_kernel_order1, data.queries)
    H = BlockGram(numkit.kron(h1, h2), data.n1, data.n2, "infinite-width", factors=(h1, h2))
    Ht = BlockGram(numkit.kron(ht1, ht2), data.n1, data.n2, "infinite-width",
                   factors=(ht1, ht2))
    return InfiniteWidthGrams(H, Ht, violations)


# ------------------------------------------------------------- Monte Carlo

def pinn_trunk_value(w: np.ndarray, y: np.ndarray, interior: bool) -> np.ndarray:
    """L(relu3(w.y)) for interior points, relu3(w.y) on the boundary.

    ``w`` has shape (..., D); the time coordinate is index 0.
    """
    z = w @ y
    if not interior:
        return relu3(z)
    w0 = w[..., 0]
    ws2 = np.sum(w[..., 1:] ** 2, axis=-1)
    return 3.0 * w0 * relu2(z) - 6.0 * ws2 * relu(z) + relu3(z)


def pinn_trunk_grad(w: np.ndarray, y: np.ndarray, interior: bool) -> np.ndarray:
    """Gradient in ``w`` of :func:`pinn_trunk_value`, shape (..., D)."""
    z = w @ y
    s1, s2 = relu(z)[..., None], relu2(z)[..., None]
    if not interior:
        return 3.0 * s2 * y
    w0 = w[..., 0][..., None]
    spatial = np.concatenate([np.zeros_like(w[..., :1]), w[..., 1:]], axis=-1)
    ws2 = np.sum(w[..., 1:] ** 2, axis=-1)[..., None]
    e0 = np.zeros(w.shape[-1])
    e0[0] = 1.0
    return (3.0 * s2 * e0 + 6.0 * w0 * s1 * y - 12.0 * s1 * spatial
            - 6.0 * ws2 * step(z)[..., None] * y + 3.0 * s2 * y)


@dataclass(frozen=True)
class Expectation:
    """A Gaussian expectation over one weight vector w ~ N(0, I).

    kind:
      order1      relu(w.a) relu(w.b)
      order0      a.b 1{w.a >= 0} 1{w.b >= 0}
      pinn_grad   <grad_w psi_a(w), grad_w psi_b(w)>
      pinn_value  psi_a(w) psi_b(w)
    where psi is L(relu3(w.y)) for interior points and relu3(w.y) otherwise.
    """

    kind: str
    a: tuple
    b: tuple
    a_interior: bool = True
    b_interior: bool = True

    def integrand(self, w: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if self.kind == "order1":
            return relu(w @ a) * relu(w @ b)
        if self.kind == "order0":
            return (a @ b) * step(w @ a) * step(w @ b)
        if self.kind == "pinn_grad":
            ga = pinn_trunk_grad(w, a, self.a_interior)
            gb = pinn_trunk_grad(w, b, self.b_interior)
            return np.sum(ga * gb, axis=-1)
        if self.kind == "pinn_value":
            return (pinn_trunk_value(w, a, self.a_interior)
                    * pinn_trunk_value(w, b, self.b_interior))
        raise ValueError(f"unknown expectation kind {self.kind!r}")


MC_CHUNK = 1 << 16


def _combine(stats, chunk: np.ndarray):
    # Chan et al. pairwise update of (count, mean, M2), elementwise
    n, mean, m2 = stats
    k = chunk.shape[0]
    cm = chunk.mean(axis=0)
    cm2 = np.sum((chunk - cm) ** 2, axis=0)
    if n == 0:
        return k, cm, cm2
    delta = cm - mean
    tot = n + k
    return tot, mean + delta * k / tot, m2 + cm2 + delta ** 2 * n * k / tot


def _mc_run(fn, dim: int, samples: int, rng: SeededRng):
    stats = (0, 0.0, 0.0)
    done = 0
    while done < samples:
        k = min(MC_CHUNK, samples - done)
        stats = _combine(stats, fn(rng.gaussian((k, dim))))
        done += k
    n, mean, m2 = stats
    stderr = np.sqrt(m2 / (n - 1) / n)
    return mean, stderr


def mc_kernel(f: Expectation, samples: int, rng: SeededRng) -> tuple[float, float]:
    """Monte Carlo mean and standard error of a Gaussian expectation."""
    if samples < 10_000:
        raise ValueError("mc_kernel needs at least 1e4 samples")
    mean, se = _mc_run(f.integrand, len(f.a), samples, rng)
    return float(mean), float(se)


def mc_pairs(kind: str, a: np.ndarray, b: np.ndarray, samples: int,
             rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """order0/order1 expectations for many pairs (rows of a, b) on shared draws."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    dots = np.sum(a * b, axis=1)

    def fn(w):
        pa, pb = w @ a.T, w @ b.T
        if kind == "order1":
            return relu(pa) * relu(pb)
        if kind == "order0":
            return dots * step(pa) * step(pb)
        raise ValueError(kind)

    return _mc_run(fn, a.shape[1], samples, rng)


def mc_pinn_factor(points: np.ndarray, interior: np.ndarray, weights: np.ndarray,
                   kind: str, samples: int, rng: SeededRng):
    """Matrix of weights_a * weights_b * E[...] over all point pairs.

    kind is ``pinn_grad`` (trunk factor of H) or ``pinn_value`` (trunk factor
    of Ht). Returns (mean, stderr) matrices.
    """
    points = np.atleast_2d(points)
    n, dim = points.shape
    scale = np.outer(weights, weights).ravel()
    iu = np.asarray(interior, dtype=bool)

    def fn(w):
        if kind == "pinn_grad":
            g = np.stack([pinn_trunk_grad(w, points[a], iu[a]) for a in range(n)], axis=1)
            vals = np.einsum("sad,sbd->sab", g, g)
        elif kind == "pinn_value":
            v = np.stack([pinn_trunk_value(w, points[a], iu[a]) for a in range(n)], axis=1)
            vals = v[:, :, None] * v[:, None, :]
        else:
            raise ValueError(kind)
        return vals.reshape(w.shape[0], -1) * scale

    mean, se = _mc_run(fn, dim, samples, rng)
    return mean.reshape(n, n), se.reshape(n, n)


# ------------------------------------------------------------- diagnostics

def indicator_flip_fraction(weights0: OperatorWeights, data: OperatorDataset,
                            radius: float) -> np.ndarray:
    """Per query y_j, fraction of neurons r with |w_r(0).y_j| < |y_j| * radius.

    That is the empirical frequency of the event that some trunk vector within
    ``radius`` of its initialization flips the activation pattern on y_j.
    """
    if not 0.0 <= radius < 1.0:
        raise ValueError("radius must lie in [0, 1)")
    proj = np.abs(weights0.trunk @ data.queries.T)
    norms = np.linalg.norm(data.queries, axis=1)
    return np.mean(proj < norms[None, :] * radius, axis=0)


def branch_flip_fraction(weights0: OperatorWeights, data: OperatorDataset,
                         radius: float) -> np.ndarray:
    """Per input u_i, fraction of (r, k) with |wt_rk(0).u_i| < |u_i| * radius."""
    if not 0.0 <= radius < 1.0:
        raise ValueError("radius must lie in [0, 1)")
    proj = np.abs(branch_preactivations(weights0, data.inputs))
    norms = np.linalg.norm(data.inputs, axis=1)
    return np.mean(proj < norms * radius, axis=(0, 1))


# ---------------------------------------------------------------- export

def write_matrix(path, a: np.ndarray) -> None:
    """Plain text: ``rows cols`` then one matrix row per line, 17 significant digits."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    rows, cols = int(tokens[0]), int(tokens[1])
    vals = np.array([float(x) for x in tokens[2:]])
    if vals.size != rows * cols:
        raise ValueError(f"expected {rows * cols} entries, found {vals.size}")
    return vals.reshape(rows, cols)
