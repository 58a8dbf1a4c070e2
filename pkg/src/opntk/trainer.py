"""Full-batch gradient descent and gradient flow for the shallow operator.

The engine here is shared with the physics-informed variant: an *objective*
exposes an error vector ``e(W)`` with loss ``loss_scale * |e|^2``, the
Jacobian products ``J^T e`` and ``J dW``, and the two Gram matrices. Updates
are ``W <- W - eta * J^T e``, so that ``e`` obeys

    e(t+1) = (I - eta (H(t) + Ht(t))) e(t) + I(t)

with ``I(t)`` the second-order remainder. For supervised training
``e = G - z`` and the loss is ``|e|^2 / 2``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ntk_kernels import BlockGram, branch_gram, trunk_gram
from .operator_net import (
    OperatorDataset,
    OperatorWeights,
    branch_preactivations,
    branch_values,
    step,
    trunk_act,
    trunk_act_deriv,
)

CSV_COLUMNS = ["iter", "loss", "res_norm", "drift_w", "drift_wt",
               "lam_H", "lam_Ht", "I_norm", "bound"]
DIVERGENCE_FACTOR = 10.0


class NumericalError(RuntimeError):
    """Non-finite values or divergence during training."""


class DivergenceError(NumericalError):
    pass


# ------------------------------------------------------------ objective

class FeatureCache:
    """Forward features of the last few weight objects seen.

    Weights are treated as immutable once built, so identity is a safe key;
    the cache holds a reference to each key to keep ids from being reused.
    """

    def __init__(self, compute, size: int = 3):
        self._compute = compute
        self._size = size
        self._items: list = []

    def __call__(self, w):
        for key, val in self._items:
            if key is w:
                return val
        val = self._compute(w)
        self._items.append((w, val))
        if len(self._items) > self._size:
            self._items.pop(0)
        return val


class SupervisedObjective:
    """Squared loss 0.5 * sum_ij (G(u_i)(y_j) - z_ij)^2."""

    loss_scale = 0.5
    extra_columns: tuple = ()

    def __init__(self, data: OperatorDataset):
        if data.targets is None:
            raise ValueError("supervised loss needs targets")
        self.data = data
        self.features = FeatureCache(self._features)

    def _features(self, w: OperatorWeights) -> dict:
        d = self.data
        if d.q != w.q or d.d != w.d:
            raise ValueError(f"dataset (q={d.q}, d={d.d}) does not match weights "
                             f"(q={w.q}, d={w.d})")
        pre_b = branch_preactivations(w, d.inputs)                  # (m, p, n1)
        pre_t = w.trunk @ d.queries.T                               # (m, n2)
        return dict(
            on=step(pre_b),
            beta=branch_values(w, d.inputs, pre_b),                 # (m, n1)
            tau=trunk_act(w.activation, pre_t),
            dact=trunk_act_deriv(w.activation, pre_t),
            pre_t=pre_t,
        )

    def error(self, w: OperatorWeights) -> np.ndarray:
        f = self.features(w)
        pred = f["beta"].T @ f["tau"] / math.sqrt(w.m)
        return (pred - self.data.targets).ravel()

    def vjp(self, w: OperatorWeights, e: np.ndarray):
        d = self.data
        f = self.features(w)
        res = e.reshape(d.n1, d.n2)
        g_trunk = ((f["beta"] @ res) * f["dact"]) @ d.queries / math.sqrt(w.m)
        e_r = f["tau"] @ res.T                                      # (m, n1)
        coef_b = w.signs[:, :, None] * (e_r[:, None, :] / math.sqrt(w.m * w.p))
        g_branch = ((f["on"] * coef_b).reshape(-1, d.n1) @ d.inputs).reshape(w.m, w.p, w.q)
        return g_trunk, g_branch

    def jvp(self, w: OperatorWeights, d_trunk: np.ndarray, d_branch: np.ndarray):
        d = self.data
        f = self.features(w)
        trunk_part = f["beta"].T @ (f["dact"] * (d_trunk @ d.queries.T))
        dpre = (d_branch.reshape(-1, w.q) @ d.inputs.T).reshape(w.m, w.p, d.n1)
        dbeta = np.einsum("rk,rki->ri", w.signs, f["on"] * dpre) / math.sqrt(w.p)
        branch_part = dbeta.T @ f["tau"]
        return ((trunk_part + branch_part) / math.sqrt(w.m)).ravel()

    def grams(self, w: OperatorWeights, t=None):
        d = self.data
        if w.activation != "relu":
            raise ValueError("supervised Gram matrices need a ReLU trunk")
        f = self.features(w)
        grads = f["dact"][:, :, None] * d.queries[None, :, :]
        H = BlockGram(trunk_gram(f["beta"], grads), d.n1, d.n2, "empirical", t)
        Ht = BlockGram(branch_gram(f["on"], d.inputs, f["tau"]), d.n1, d.n2, "empirical", t)
        return H, Ht

    def extras(self, e: np.ndarray) -> dict:
        return {}

    def preactivation_max(self, w: OperatorWeights) -> float:
        return float(np.max(np.abs(self.features(w)["pre_t"])))


# ------------------------------------------------------------ public ops

def residual(weights: OperatorWeights, data: OperatorDataset) -> np.ndarray:
    """z - G(u), flattened row-major."""
    return -SupervisedObjective(data).error(weights)


def loss(weights: OperatorWeights, data: OperatorDataset) -> float:
    e = SupervisedObjective(data).error(weights)
    return 0.5 * float(e @ e)


def loss_gradients(weights: OperatorWeights, data: OperatorDataset):
    obj = SupervisedObjective(data)
    return obj.vjp(weights, obj.error(weights))


def _step(obj, w: OperatorWeights, e: np.ndarray, eta: float):
    g_trunk, g_branch = obj.vjp(w, e)
    if not (np.all(np.isfinite(g_trunk)) and np.all(np.isfinite(g_branch))):
        raise NumericalError("non-finite gradient; reduce the learning rate")
    return w.moved(w.trunk - eta * g_trunk, w.branch - eta * g_branch)


def gd_step(weights: OperatorWeights, data: OperatorDataset, eta: float) -> OperatorWeights:
    """One simultaneous gradient step on trunk and branch weights."""
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    obj = SupervisedObjective(data)
    return _step(obj, weights, obj.error(weights), eta)


def remainder(obj, w_t: OperatorWeights, w_t1: OperatorWeights,
              e_t: Optional[np.ndarray] = None, e_t1: Optional[np.ndarray] = None):
    """I(t) = e(t+1) - e(t) - J(t) (W(t+1) - W(t))."""
    e_t = obj.error(w_t) if e_t is None else e_t
    e_t1 = obj.error(w_t1) if e_t1 is None else e_t1
    lin = obj.jvp(w_t, w_t1.trunk - w_t.trunk, w_t1.branch - w_t.branch)
    return e_t1 - e_t - lin


def residual_term(weights_t: OperatorWeights, weights_t1: OperatorWeights,
                  data: OperatorDataset) -> np.ndarray:
    """Remainder of one step beyond its linearization, in prediction space."""
    return remainder(SupervisedObjective(data), weights_t, weights_t1)


def auto_eta(obj, w: OperatorWeights) -> float:
    H, Ht = obj.grams(w)
    return 1.0 / (H.spectral_norm() + Ht.spectral_norm())


def drift(w: OperatorWeights, w0: OperatorWeights) -> tuple[float, float]:
    dw = w.trunk - w0.trunk
    dwt = (w.branch - w0.branch).reshape(-1, w.q)
    return (math.sqrt(np.max(np.einsum("ij,ij->i", dw, dw))),
            math.sqrt(np.max(np.einsum("ij,ij->i", dwt, dwt))))


# ------------------------------------------------------------ bounds

def activation_bound(m: int, n2: int, delta: float) -> float:
    """B = 2 sqrt(log(m n2 / delta))."""
    return 2.0 * math.sqrt(math.log(m * n2 / delta))


def drift_radii(m: int, p: int, n1: int, n2: int, init_res_norm: float,
                lam_sum: float, delta: float) -> tuple[float, float]:
    """Lazy-training radii (R', Rt') for trunk and branch weights, constants dropped."""
    base = math.sqrt(n1 * n2) * init_res_norm / (math.sqrt(m) * lam_sum)
    r = base * math.sqrt(math.log(m / delta))
    return r, r / math.sqrt(p)


def remainder_bound(m: int, n1: int, n2: int, eta: float, init_res_norm: float,
                    lam_sum: float, delta: float) -> float:
    """Rbar: |I(s)| <~ Rbar |z - G^s|, constants dropped."""
    return (eta * (n1 * n2) ** 1.5 * init_res_norm / (math.sqrt(m) * lam_sum)
            * math.log(m / delta) ** 1.5)


# ------------------------------------------------------------ trace

@dataclass
class TrainingTrace:
    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    recursion_errors: list = field(default_factory=list)
    weights: Optional[OperatorWeights] = None

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([row[k] for row in self.rows], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns)
        for row in self.rows:
            wr.writerow([str(int(row[0]))] + [_fmt(x) for x in row[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(x: float) -> str:
    if x is None or not math.isfinite(x):
        return "nan"
    return f"{x:.17g}"


def read_trace_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    return {name: np.array([float(r[k]) for r in body]) for k, name in enumerate(head)}


# ------------------------------------------------------------ engine

def run_descent(obj, weights: OperatorWeights, eta, steps: int, cadence: int = 1,
                delta: float = 0.05, check_recursion: bool = False,
                lam_sum: Optional[float] = None) -> TrainingTrace:
    """Gradient descent on ``obj``. Every iteration gets a trace row; Gram
    spectra and recursion checks run every ``cadence`` iterations (and at the
    first and last one), other rows carry NaN in the spectrum columns."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    w0 = weights
    H0, Ht0 = obj.grams(w0, 0)
    lam_h0, lam_ht0 = H0.min_eigenvalue(), Ht0.min_eigenvalue()
    if eta == "auto" or eta is None:
        eta = 1.0 / (H0.spectral_norm() + Ht0.spectral_norm())
    eta = float(eta)
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    lam_hat = lam_h0 + lam_ht0

    e = obj.error(w0)
    res0 = float(np.linalg.norm(e))
    columns = CSV_COLUMNS + list(obj.extra_columns)
    trace = TrainingTrace(columns)
    w = w0
    pending = None
    pre_max = obj.preactivation_max(w0)

    def log_row(t, w, e, grams, i_norm):
        lam_h = lam_ht = float("nan")
        if grams is not None:
            lam_h, lam_ht = grams[0].min_eigenvalue(), grams[1].min_eigenvalue()
        dw, dwt = drift(w, w0)
        rn = float(np.linalg.norm(e))
        bound = (1.0 - eta * lam_hat / 2.0) ** t * res0 ** 2
        row = [t, obj.loss_scale * rn * rn, rn, dw, dwt, lam_h, lam_ht, i_norm, bound]
        ex = obj.extras(e)
        row += [ex[c] for c in obj.extra_columns]
        trace.rows.append(row)

    for t in range(steps + 1):
        logged = t % cadence == 0 or t == steps
        grams = None
        if logged:
            grams = (H0, Ht0) if t == 0 else obj.grams(w, t)
        if t == steps:
            log_row(t, w, e, grams, float("nan"))
            break
        w_next = _step(obj, w, e, eta)
        e_next = obj.error(w_next)
        if not np.all(np.isfinite(e_next)):
            raise NumericalError(f"non-finite predictions at iteration {t + 1}")
        rem = remainder(obj, w, w_next, e, e_next)
        log_row(t, w, e, grams, float(np.linalg.norm(rem)))
        if logged:
            if check_recursion:
                K = grams[0].matrix + grams[1].matrix
                rhs = e - eta * (K @ e) + rem
                trace.recursion_errors.append((t, float(np.max(np.abs(e_next - rhs)))))
        rn_next, rn = np.linalg.norm(e_next), np.linalg.norm(e)
        if rn_next > DIVERGENCE_FACTOR * max(rn, 1e-300) or rn_next > DIVERGENCE_FACTOR * res0:
            raise DivergenceError(
                f"residual grew from {rn:.3e} to {rn_next:.3e} at iteration {t + 1}; "
                f"eta={eta:.3e} is too large")
        pre_max = max(pre_max, obj.preactivation_max(w_next))
        w, e = w_next, e_next

    lam_ref = lam_hat if lam_sum is None else lam_sum
    data = obj.data
    r_trunk, r_branch = drift_radii(w.m, w.p, data.n1, data.n2, res0, lam_ref, delta)
    trace.meta.update(
        eta=eta, steps=steps, cadence=cadence, delta=delta, m=w.m, p=w.p,
        lam_H0=lam_h0, lam_Ht0=lam_ht0, lam_hat=lam_hat, lam_ref=lam_ref,
        init_res_norm=res0, final_res_norm=float(np.linalg.norm(e)),
        radius_trunk=r_trunk, radius_branch=r_branch,
        activation_bound=activation_bound(w.m, data.n2, delta),
        max_preactivation=pre_max,
        remainder_bound_factor=remainder_bound(w.m, data.n1, data.n2, eta, res0,
                                               lam_ref, delta),
    )
    trace.weights = w
    return trace


def run_flow(obj, weights: OperatorWeights, duration: float, dt: float,
             cadence: int = 1, grams_every: int = 0) -> TrainingTrace:
    """Explicit Euler integration of the gradient flow dW/dt = -J^T e."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration < 0:
        raise ValueError("duration must be non-negative")
    n_steps = int(round(duration / dt))
    w0 = w = weights
    e = obj.error(w)
    res0 = float(np.linalg.norm(e))
    H0, Ht0 = obj.grams(w0, 0)
    lam_hat = H0.min_eigenvalue() + Ht0.min_eigenvalue()
    trace = TrainingTrace(CSV_COLUMNS + list(obj.extra_columns))

    def log_row(k, w, e):
        lam_h = lam_ht = float("nan")
        if k == 0:
            lam_h, lam_ht = H0.min_eigenvalue(), Ht0.min_eigenvalue()
        elif grams_every and k % grams_every == 0:
            H, Ht = obj.grams(w, k)
            lam_h, lam_ht = H.min_eigenvalue(), Ht.min_eigenvalue()
        dw, dwt = drift(w, w0)
        rn = float(np.linalg.norm(e))
        bound = math.exp(-lam_hat * k * dt) * res0 ** 2
        row = [k, obj.loss_scale * rn * rn, rn, dw, dwt, lam_h, lam_ht,
               float("nan"), bound]
        ex = obj.extras(e)
        row += [ex[c] for c in obj.extra_columns]
        trace.rows.append(row)

    log_row(0, w, e)
    for k in range(1, n_steps + 1):
        w_next = _step(obj, w, e, dt)
        e_next = obj.error(w_next)
        rn, rn_next = np.linalg.norm(e), np.linalg.norm(e_next)
        if not np.isfinite(rn_next) or rn_next > DIVERGENCE_FACTOR * max(rn, 1e-300):
            raise DivergenceError(
                f"residual grew from {rn:.3e} to {rn_next:.3e} in one Euler step; "
                f"reduce dt (currently {dt:.3e})")
        w, e = w_next, e_next
        if k % cadence == 0 or k == n_steps:
            log_row(k, w, e)
    trace.meta.update(dt=dt, duration=n_steps * dt, lam_hat=lam_hat,
                      init_res_norm=res0, final_res_norm=float(np.linalg.norm(e)))
    trace.weights = w
    return trace


def train(weights: OperatorWeights, data: OperatorDataset, eta="auto", steps: int = 200,
          cadence: int = 1, delta: float = 0.05, check_recursion: bool = False,
          lam_sum: Optional[float] = None) -> TrainingTrace:
    return run_descent(SupervisedObjective(data), weights, eta, steps, cadence, delta,
                       check_recursion, lam_sum)


def flow_integrate(weights: OperatorWeights, data: OperatorDataset, duration: float,
                   dt: float, cadence: int = 1, grams_every: int = 0) -> TrainingTrace:
    return run_flow(SupervisedObjective(data), weights, duration, dt, cadence, grams_every)
