"""Shallow branch/trunk neural operator.

    G(u)(y) = 1/sqrt(m) * sum_r [1/sqrt(p) * sum_k a_rk relu(wt_rk . u)] * act(w_r . y)

``act`` is ReLU for supervised training and ReLU^3 for the physics-informed
variant. The signs ``a_rk`` are drawn once and never trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .numkit import SeededRng

ACTIVATIONS = ("relu", "relu3")
PARALLEL_TOL = 1e-6


def relu(x):
    return np.maximum(x, 0.0)


def relu2(x):
    return np.maximum(x, 0.0) ** 2


def relu3(x):
    return np.maximum(x, 0.0) ** 3


def step(x):
    # closed indicator 1{x >= 0}
    return (np.asarray(x) >= 0.0).astype(np.float64)


def trunk_act(tag: str, x):
    return relu(x) if tag == "relu" else relu3(x)


def trunk_act_deriv(tag: str, x):
    return step(x) if tag == "relu" else 3.0 * relu2(x)


@dataclass
class OperatorWeights:
    """Trunk ``(m, d)``, branch ``(m, p, q)`` and frozen signs ``(m, p)``."""

    trunk: np.ndarray
    branch: np.ndarray
    signs: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.trunk = np.asarray(self.trunk, dtype=np.float64)
        self.branch = np.asarray(self.branch, dtype=np.float64)
        self.signs = np.asarray(self.signs, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        m, _ = self.trunk.shape
        if self.branch.ndim != 3 or self.branch.shape[0] != m:
            raise ValueError("branch must have shape (m, p, q)")
        if self.signs.shape != self.branch.shape[:2]:
            raise ValueError("signs must have shape (m, p)")
        if not np.all(np.abs(self.signs) == 1.0):
            raise ValueError("signs must be +-1")

    @property
    def m(self) -> int:
        return self.trunk.shape[0]

    @property
    def d(self) -> int:
        return self.trunk.shape[1]

    @property
    def p(self) -> int:
        return self.branch.shape[1]

    @property
    def q(self) -> int:
        return self.branch.shape[2]

    def copy(self) -> "OperatorWeights":
        return replace(self, trunk=self.trunk.copy(), branch=self.branch.copy(),
                       signs=self.signs.copy())

    def moved(self, trunk: np.ndarray, branch: np.ndarray) -> "OperatorWeights":
        """Same signs and activation, new trainable weights."""
        return OperatorWeights(trunk, branch, self.signs, self.activation)


@dataclass
class OperatorDataset:
    """Sensor vectors ``inputs`` (n1, q), interior queries (n2, d), optional
    boundary queries (n3, d) and optional supervised targets (n1, n2)."""

    inputs: np.ndarray
    queries: np.ndarray
    boundary: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        if self.boundary is not None:
            self.boundary = np.atleast_2d(np.asarray(self.boundary, dtype=np.float64))
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64).reshape(
                self.n1, self.n2)

    @property
    def n1(self) -> int:
        return self.inputs.shape[0]

    @property
    def n2(self) -> int:
        return self.queries.shape[0]

    @property
    def n3(self) -> int:
        return 0 if self.boundary is None else self.boundary.shape[0]

    @property
    def q(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    def validate(self, norm_range=(0.5, 2.0), parallel_tol=PARALLEL_TOL) -> list[str]:
        """Return a list of violated hypotheses (empty when the data is clean)."""
        problems = []
        groups = [("inputs", self.inputs), ("queries", self.queries)]
        lo, hi = norm_range
        for name, x in groups:
            norms = np.linalg.norm(x, axis=1)
            if np.any(norms < lo) or np.any(norms > hi):
                problems.append(f"{name}: norms outside [{lo}, {hi}]")
        pts = self.queries if self.boundary is None else np.vstack(
            [self.queries, self.boundary])
        for name, x in (("inputs", self.inputs), ("queries", pts)):
            pair = parallel_pair(x, parallel_tol)
            if pair is not None:
                problems.append(f"{name}: samples {pair[0]} and {pair[1]} are parallel")
        return problems


def parallel_pair(x: np.ndarray, tol: float = PARALLEL_TOL):
    """First pair (i, j) with |cos angle| > 1 - tol, or None."""
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        return (int(np.argmin(norms)), int(np.argmin(norms)))
    c = np.abs(x @ x.T) / np.outer(norms, norms)
    np.fill_diagonal(c, 0.0)
    hits = np.argwhere(c > 1.0 - tol)
    if len(hits):
        return int(hits[0][0]), int(hits[0][1])
    return None


def lift_bias(x: np.ndarray) -> np.ndarray:
    """Append a constant 1 coordinate, the usual way of absorbing a bias."""
    x = np.atleast_2d(x)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def init_weights(m: int, p: int, q: int, d: int, rng: SeededRng,
                 activation: str = "relu") -> OperatorWeights:
    if min(m, p, q, d) < 1:
        raise ValueError(f"all dimensions must be >= 1, got m={m} p={p} q={q} d={d}")
    trunk = rng.gaussian((m, d))
    branch = rng.gaussian((m, p, q))
    signs = rng.rademacher((m, p))
    return OperatorWeights(trunk, branch, signs, activation)


def branch_value(weights: OperatorWeights, r: int, u) -> float:
    u = np.asarray(u, dtype=np.float64)
    pre = weights.branch[r] @ u
    return float(weights.signs[r] @ relu(pre) / np.sqrt(weights.p))


def branch_preactivations(weights: OperatorWeights, inputs: np.ndarray) -> np.ndarray:
    """wt_rk . u_i, shape (m, p, n1)."""
    inputs = np.atleast_2d(inputs)
    flat = weights.branch.reshape(-1, weights.q) @ inputs.T
    return flat.reshape(weights.m, weights.p, inputs.shape[0])


def branch_values(weights: OperatorWeights, inputs: np.ndarray, pre=None) -> np.ndarray:
    """All branch features, shape (m, n1)."""
    if pre is None:
        pre = branch_preactivations(weights, inputs)
    return np.einsum("rk,rki->ri", weights.signs, relu(pre)) / np.sqrt(weights.p)


def _check_dims(weights: OperatorWeights, u, y):
    if np.shape(u)[-1] != weights.q:
        raise ValueError(f"input has {np.shape(u)[-1]} sensors, weights expect q={weights.q}")
    if np.shape(y)[-1] != weights.d:
        raise ValueError(f"query has dimension {np.shape(y)[-1]}, weights expect d={weights.d}")


def forward(weights: OperatorWeights, u, y) -> float:
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_dims(weights, u, y)
    beta = branch_values(weights, u[None, :])[:, 0]
    tau = trunk_act(weights.activation, weights.trunk @ y)
    return float(beta @ tau / np.sqrt(weights.m))


def predict(weights: OperatorWeights, inputs, queries) -> np.ndarray:
    """G(u_i)(y_j) for all pairs, shape (n1, n2)."""
    inputs = np.atleast_2d(inputs)
    queries = np.atleast_2d(queries)
    _check_dims(weights, inputs, queries)
    beta = branch_values(weights, inputs)
    tau = trunk_act(weights.activation, weights.trunk @ queries.T)
    return beta.T @ tau / np.sqrt(weights.m)


def grad_trunk(weights: OperatorWeights, u, y, r: int) -> np.ndarray:
    """dG(u)(y)/dw_r."""
    y = np.asarray(y, dtype=np.float64)
    z = weights.trunk[r] @ y
    scale = branch_value(weights, r, u) * float(trunk_act_deriv(weights.activation, z))
    return scale * y / np.sqrt(weights.m)


def grad_branch(weights: OperatorWeights, u, y, r: int, k: int) -> np.ndarray:
    """dG(u)(y)/dwt_rk."""
    u = np.asarray(u, dtype=np.float64)
    on = float(step(weights.branch[r, k] @ u))
    tau = float(trunk_act(weights.activation, weights.trunk[r] @ np.asarray(y)))
    coef = weights.signs[r, k] / np.sqrt(weights.p) * on * tau / np.sqrt(weights.m)
    return coef * u


def trunk_jacobian(weights: OperatorWeights, inputs, queries) -> np.ndarray:
    """Rows indexed by flat sample i*n2+j, columns by flattened trunk weights."""
    beta = branch_values(weights, inputs)                          # (m, n1)
    dact = trunk_act_deriv(weights.activation, weights.trunk @ np.atleast_2d(queries).T)
    jac = np.einsum("ri,rj,jd->ijrd", beta, dact, np.atleast_2d(queries))
    n1, n2 = beta.shape[1], dact.shape[1]
    return jac.reshape(n1 * n2, -1) / np.sqrt(weights.m)


def branch_jacobian(weights: OperatorWeights, inputs, queries) -> np.ndarray:
    inputs = np.atleast_2d(inputs)
    on = step(branch_preactivations(weights, inputs))
    tau = trunk_act(weights.activation, weights.trunk @ np.atleast_2d(queries).T)
    jac = np.einsum("rk,rki,rj,iq->ijrkq", weights.signs, on, tau, inputs)
    n1, n2 = inputs.shape[0], tau.shape[1]
    return jac.reshape(n1 * n2, -1) / np.sqrt(weights.m * weights.p)


# Binary weight record, little-endian:
#   8 bytes  magic b"OPNTKW01"
#   4 x u64  m, p, q, d
#   8 bytes  activation tag, ASCII, NUL padded
#   f64      trunk (m*d), branch (m*p*q), signs (m*p), all row-major
_MAGIC = b"OPNTKW01"
_HEADER = struct.Struct("<8s4Q8s")


def weights_to_bytes(weights: OperatorWeights) -> bytes:
    head = _HEADER.pack(_MAGIC, weights.m, weights.p, weights.q, weights.d,
                        weights.activation.encode("ascii").ljust(8, b"\0"))
    body = np.concatenate([weights.trunk.ravel(), weights.branch.ravel(),
                           weights.signs.ravel()]).astype("<f8").tobytes()
    return head + body


def weights_from_bytes(blob: bytes) -> OperatorWeights:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated weight record")
    if (len(blob) - _HEADER.size) % 8:
        raise ValueError("truncated weight record")
    magic, m, p, q, d, tag = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise ValueError("not an operator weight record")
    vals = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    sizes = [m * d, m * p * q, m * p]
    if vals.size != sum(sizes):
        raise ValueError("truncated weight record")
    trunk, branch, signs = np.split(vals.astype(np.float64), np.cumsum(sizes)[:-1])
    return OperatorWeights(trunk.reshape(m, d), branch.reshape(m, p, q),
                           signs.reshape(m, p), tag.rstrip(b"\0").decode("ascii"))


def save_weights(weights: OperatorWeights, path) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path) -> OperatorWeights:
    return weights_from_bytes(Path(path).read_bytes())
