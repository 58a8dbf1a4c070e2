"""Dense linear algebra and seeded randomness used by every other module.

Matrices are plain ``float64`` numpy arrays. Flattening of a two-index sample
``(i, j)`` is row-major, ``i * n2 + j``, everywhere in the package.
"""

from __future__ import annotations

import numpy as np

SYM_RTOL = 1e-12
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


class NotSymmetricError(ValueError):
    """Raised when a matrix that must be symmetric is not."""

    def __init__(self, worst: float, index: tuple[int, int]):
        self.worst = worst
        self.index = index
        super().__init__(
            f"matrix is not symmetric: worst |A[i,j]-A[j,i]| = {worst:.3e} at {index}"
        )


class SeededRng:
    """Counter-based (Philox) generator addressed by ``(seed, stream)``.

    Distinct stream ids give statistically independent sequences; the same
    pair always reproduces the same sequence.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def substream(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)

    def gaussian(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def rademacher(self, shape) -> np.ndarray:
        return np.where(self._gen.integers(0, 2, size=shape) == 1, 1.0, -1.0)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)


def sample_gaussian_vector(rng: SeededRng, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.gaussian(dim)


def sample_rademacher(rng: SeededRng, count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.rademacher(count)


def kron(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ra, ca = a.shape
    rb, cb = b.shape
    out = a[:, None, :, None] * b[None, :, None, :]
    return out.reshape(ra * rb, ca * cb)


def check_symmetric(a: np.ndarray, rtol: float = SYM_RTOL) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    diff = np.abs(a - a.T)
    scale = np.maximum(1.0, np.abs(a))
    excess = diff - rtol * scale
    if np.any(excess > 0):
        idx = np.unravel_index(np.argmax(excess), a.shape)
        raise NotSymmetricError(float(diff[idx]), (int(idx[0]), int(idx[1])))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # n even; each round pairs every index exactly once
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([players[k] for k in range(n // 2)])
        q = np.array([players[n - 1 - k] for k in range(n // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the ``n/2`` rotations of a round act on disjoint rows and can be
    applied together. Iterates until the off-diagonal Frobenius norm drops
    below ``tol * ||A||_F``.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    check_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    a = 0.5 * (a + a.T)
    if n % 2:
        a = np.pad(a, ((0, 1), (0, 1)))
    size = a.shape[0]
    v = np.eye(size)
    total = np.linalg.norm(a)
    if total == 0.0:
        return np.zeros(n), np.eye(n)
    rounds = _round_robin(size)

    def off_norm(m):
        return np.linalg.norm(m - np.diag(np.diag(m)))

    for _ in range(max_sweeps):
        if off_norm(a) <= tol * total:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            # tau and tau**2 may overflow for negligible apq; t -> 0 is the right limit
            with np.errstate(over="ignore"):
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    else:
        if off_norm(a) > tol * total:
            raise RuntimeError("Jacobi eigensolver did not converge")

    vals = np.diag(a)[:n] if size == n else np.diag(a)
    vecs = v
    if size != n:
        # drop the padding coordinate: it stays decoupled with eigenvalue 0
        keep = np.argsort(np.abs(v[n, :]))[:n]
        vals = np.diag(a)[keep]
        vecs = v[:n, keep]
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def eigenvalues(a) -> np.ndarray:
    return jacobi_eigh(a)[0]


def min_eigenvalue(a) -> float:
    return float(jacobi_eigh(a)[0][0])


def spectral_norm_sym(a) -> float:
    vals = jacobi_eigh(a)[0]
    return float(np.max(np.abs(vals)))
