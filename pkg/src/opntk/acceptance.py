"""The ten acceptance checks, shared by ``lab_cli selftest`` and the test suite.

Each check returns a :class:`CriterionResult`; none of them raises on a
failed comparison. Widths, step counts and tolerances are fixed here.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lab import (DEFAULT_SWEEP_M, DEFAULT_SWEEP_SEEDS, REMAINDER_SLOPE_BAND, SLOPE_BAND,
                  STREAM_DATA, STREAM_STUDENT, ExperimentConfig, envelope_ok,
                  fit_scaling_slope, synthesize_dataset, trace_metrics)
from .ntk_kernels import (analytic_Hinf, arccos_kernel_order0, arccos_kernel_order1,
                          empirical_H, empirical_Htilde, indicator_flip_fraction, mc_pairs)
from .numkit import SeededRng
from .operator_net import init_weights
from .pinn import (apply_L_to_trunk, grad_L_trunk, is_kink, pinn_loss, pinn_residuals,
                   pinn_train)
from .trainer import flow_integrate, train

RECURSION_TOL = 1e-8
SLACK = 0.9
SEED = 0


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0
    budget: Optional[float] = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = "shared" if self.budget is None else f"{self.budget:.0f}s"
        return (f"[{status}] {self.number:>2}. {self.name}: {self.detail} "
                f"({self.elapsed:.1f}s, budget {budget})")


def _supervised(seed: int = SEED):
    cfg = ExperimentConfig()
    data, _ = synthesize_dataset(cfg, SeededRng(seed, STREAM_DATA), seed)
    return cfg, data


def _pinn(seed: int = SEED):
    cfg = ExperimentConfig(mode="pinn")
    data, problem = synthesize_dataset(cfg, SeededRng(seed, STREAM_DATA), seed)
    return cfg, data, problem


def _student(cfg, m, seed=SEED, activation="relu"):
    return init_weights(m, cfg.p, cfg.q, cfg.query_dim, SeededRng(seed, STREAM_STUDENT),
                        activation)


# ------------------------------------------------------------ criteria

def recursion_identities() -> tuple[bool, str]:
    """One-step recursions e(t+1) = (I - eta K(t)) e(t) + I(t), with K assembled
    from the Gram formulas and I(t) from per-weight Jacobian products."""
    cfg, data = _supervised()
    tr = train(_student(cfg, 2048), data, steps=200, cadence=1, check_recursion=True)
    sup = max(e for _, e in tr.recursion_errors)
    pcfg, pdata, problem = _pinn()
    ptr = pinn_train(_student(pcfg, 2048, activation="relu3"), problem, pdata, steps=200,
                     cadence=1, check_recursion=True)
    pin = max(e for _, e in ptr.recursion_errors)
    n = len(tr.recursion_errors), len(ptr.recursion_errors)
    ok = sup <= RECURSION_TOL and pin <= RECURSION_TOL and n == (200, 200)
    return ok, (f"max entrywise error supervised {sup:.2e}, pinn {pin:.2e} over "
                f"{n[0]}+{n[1]} steps (tol {RECURSION_TOL:g})")


def kernel_closed_forms(pairs: int = 100, samples: int = 1_000_000) -> tuple[bool, str]:
    rng = SeededRng(SEED, 11)
    dim = 16
    a = rng.gaussian((pairs, dim))
    b = rng.gaussian((pairs, dim))
    # norms spread over [0.5, 2]
    a *= (rng.uniform(0.5, 2.0, (pairs, 1)) / np.linalg.norm(a, axis=1, keepdims=True))
    b *= (rng.uniform(0.5, 2.0, (pairs, 1)) / np.linalg.norm(b, axis=1, keepdims=True))
    worst = 0.0
    for kind, fn, stream in (("order1", arccos_kernel_order1, 12),
                             ("order0", arccos_kernel_order0, 13)):
        mean, se = mc_pairs(kind, a, b, samples, rng.substream(stream))
        z = np.abs(fn(a, b) - mean) / se
        worst = max(worst, float(z.max()))
    return worst <= 4.0, f"largest deviation {worst:.2f} standard errors over {pairs} pairs, both kernels"


def concentration_scaling(widths=DEFAULT_SWEEP_M, seeds=DEFAULT_SWEEP_SEEDS) -> tuple[bool, str]:
    cfg = ExperimentConfig()
    pts_h, pts_ht = [], []
    for seed in seeds:
        data, _ = synthesize_dataset(cfg, SeededRng(seed, STREAM_DATA), seed)
        inf = analytic_Hinf(data, strict=True)
        for m in widths:
            w = _student(cfg, m, seed)
            pts_h.append((m, np.linalg.norm(empirical_H(w, data).matrix - inf.H.matrix)))
            pts_ht.append((m, np.linalg.norm(empirical_Htilde(w, data).matrix - inf.Ht.matrix)))
    fh, fht = fit_scaling_slope(pts_h), fit_scaling_slope(pts_ht)
    ok = fh.within(SLOPE_BAND) and fht.within(SLOPE_BAND)
    return ok, (f"slope H {fh.slope:.3f} [{fh.ci_low:.3f}, {fh.ci_high:.3f}], "
                f"Ht {fht.slope:.3f} [{fht.ci_low:.3f}, {fht.ci_high:.3f}], band {list(SLOPE_BAND)}")


def discrete_convergence() -> tuple[bool, str]:
    cfg, data = _supervised()
    tr = train(_student(cfg, 4096), data, steps=200, cadence=10)
    loss = tr.column("loss")
    env = envelope_ok(tr, SLACK, 200)
    ratio = loss[-1] / loss[0]
    return env and ratio < 1e-3, (f"envelope {'holds' if env else 'violated'} for t<=200, "
                                  f"final/initial loss {ratio:.2e} (need < 1e-3)")


def flow_decay() -> tuple[bool, str]:
    cfg, data = _supervised()
    w = _student(cfg, 4096)
    probe = train(w, data, steps=0)
    eta = probe.meta["eta"]
    tr = flow_integrate(w, data, duration=200 * eta, dt=0.1 * eta, cadence=1)
    lam = tr.meta["lam_hat"]
    t = tr.column("iter") * tr.meta["dt"]
    loss = tr.column("loss")
    env = np.exp(-SLACK * lam * t) * loss[0]
    ok = bool(np.all(loss <= env * (1 + 1e-12)))
    worst = float(np.max(loss / env))
    return ok, (f"{len(loss) - 1} Euler steps, max loss/envelope {worst:.4f}, "
                f"final/initial {loss[-1] / loss[0]:.2e}")


_SWEEP_CACHE: dict = {}


def lazy_sweep(widths=DEFAULT_SWEEP_M, seeds=DEFAULT_SWEEP_SEEDS) -> list:
    """Train every (m, seed) cell for 200 steps. Gram spectra are taken at
    every step where the stability check needs them (m >= 2048), every tenth
    step otherwise."""
    key = (tuple(widths), tuple(seeds))
    if key in _SWEEP_CACHE:
        return _SWEEP_CACHE[key]
    rows = []
    cfg = ExperimentConfig(cadence=1)
    for seed in seeds:
        data, _ = synthesize_dataset(cfg, SeededRng(seed, STREAM_DATA), seed)
        for m in widths:
            cadence = 1 if m >= 2048 else 10
            tr = train(_student(cfg, m, seed), data, steps=200, cadence=cadence)
            rows.append({"m": m, "seed": seed, **trace_metrics(tr, cfg)})
    _SWEEP_CACHE[key] = rows
    return rows


def lazy_training() -> tuple[bool, str]:
    rows = lazy_sweep()
    ft = fit_scaling_slope([(r["m"], r["max_drift_trunk"]) for r in rows])
    fb = fit_scaling_slope([(r["m"], r["max_drift_branch"]) for r in rows])
    wide = min(r["min_lam_H_ratio"] for r in rows if r["m"] >= 2048)
    ok = ft.within(SLOPE_BAND) and fb.within(SLOPE_BAND) and wide >= 0.5
    return ok, (f"drift slopes trunk {ft.slope:.3f}, branch {fb.slope:.3f} "
                f"(band {list(SLOPE_BAND)}); min lam_H(t)/lam_H(0) for m>=2048 {wide:.3f}")


def remainder_scaling() -> tuple[bool, str]:
    rows = lazy_sweep()
    f = fit_scaling_slope([(r["m"], r["mean_remainder_ratio"]) for r in rows])
    return f.within(REMAINDER_SLOPE_BAND), (
        f"slope {f.slope:.3f} [{f.ci_low:.3f}, {f.ci_high:.3f}], band {list(REMAINDER_SLOPE_BAND)}")


def fd_L_trunk(w, y, h: float = 1e-4) -> float:
    """Centered differences of y -> relu3(w.y) in y, combined as d/dy0 - sum d2/dyi2 + id."""
    def f(v):
        return max(float(w @ v), 0.0) ** 3

    e = np.eye(len(y))
    val = f(y)
    dt = (f(y + h * e[0]) - f(y - h * e[0])) / (2 * h)
    lap = sum((f(y + h * e[i]) - 2 * val + f(y - h * e[i])) / h ** 2 for i in range(1, len(y)))
    return dt - lap + val


def fd_grad(fun, w, h: float = 1e-6) -> np.ndarray:
    e = np.eye(len(w))
    return np.array([(fun(w + h * e[k]) - fun(w - h * e[k])) / (2 * h) for k in range(len(w))])


def pinn_calculus(points: int = 100) -> tuple[bool, str]:
    rng = SeededRng(SEED, 21)
    worst_v = worst_g = 0.0
    done = 0
    while done < points:
        w = rng.gaussian(3)
        y = np.r_[rng.uniform(0.0, 1.0), rng.uniform(-1.0, 1.0, 2)]
        # skip kinks and points where the value or gradient vanishes identically
        if is_kink(w, y) or w @ y <= 0:
            continue
        exact = apply_L_to_trunk(w, y)
        worst_v = max(worst_v, abs(fd_L_trunk(w, y) - exact) / abs(exact))
        g = grad_L_trunk(w, y)
        fd = fd_grad(lambda v: apply_L_to_trunk(v, y), w)
        worst_g = max(worst_g, float(np.linalg.norm(fd - g) / np.linalg.norm(g)))
        done += 1
    cfg, data, problem = _pinn()
    wts = _student(cfg, 256, activation="relu3")
    r = pinn_residuals(wts, problem, data)
    direct = pinn_loss(wts, problem, data)
    loss_err = abs(float(r @ r) - direct) / direct
    ok = worst_v < 1e-4 and worst_g < 1e-5 and loss_err < 1e-12
    return ok, (f"max rel err L {worst_v:.1e} (<1e-4), grad {worst_g:.1e} (<1e-5), "
                f"loss identity {loss_err:.1e} (<1e-12)")


PINN_STEPS = 1000


def pinn_convergence() -> tuple[bool, str]:
    cfg, data, problem = _pinn()
    tr = pinn_train(_student(cfg, 4096, activation="relu3"), problem, data,
                    steps=PINN_STEPS, cadence=50)
    env = envelope_ok(tr, SLACK, 200)
    loss = tr.column("loss")
    red = loss[0] / loss[-1]
    return env and red >= 1e3, (f"envelope {'holds' if env else 'violated'} for t<=200, "
                                f"|G|^2 reduced {red:.3g}x after {PINN_STEPS} steps")


def anti_concentration() -> tuple[bool, str]:
    cfg, data = _supervised()
    w = _student(cfg, 8192)
    bad = []
    parts = []
    for r in (0.01, 0.05, 0.1):
        frac = indicator_flip_fraction(w, data, r)
        se = np.sqrt(np.maximum(frac * (1 - frac), 1e-300) / w.m)
        lo, hi = 2 * r / 3 - 3 * se, 4 * r / 5 + 3 * se
        if np.any(frac <= lo) or np.any(frac >= hi):
            bad.append(r)
        parts.append(f"R={r}: {frac.min() / r:.3f}..{frac.max() / r:.3f} R")
    return not bad, "; ".join(parts) + (f"; outside at R={bad}" if bad else "")


CRITERIA = [
    (1, "recursion identities", recursion_identities, 120),
    (2, "kernel closed forms vs Monte Carlo", kernel_closed_forms, 60),
    (3, "concentration scaling", concentration_scaling, 300),
    (4, "discrete linear convergence", discrete_convergence, 180),
    (5, "gradient-flow decay", flow_decay, 180),
    (6, "lazy training", lazy_training, 300),
    (7, "residual-term scaling", remainder_scaling, None),
    (8, "physics-informed calculus", pinn_calculus, 60),
    (9, "physics-informed convergence", pinn_convergence, 300),
    (10, "anti-concentration", anti_concentration, 60),
]


def run_criterion(number: int) -> CriterionResult:
    for num, name, fn, budget in CRITERIA:
        if num == number:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failed check, reported as such
                ok, detail = False, f"error: {type(exc).__name__}: {exc}"
            elapsed = time.perf_counter() - t0
            if budget is not None and elapsed > budget:
                ok, detail = False, detail + f"; over the {budget:.0f}s runtime budget"
            return CriterionResult(num, name, bool(ok), detail, elapsed, budget)
    raise KeyError(f"no criterion {number}")


def run_all(numbers=None, echo=None) -> list[CriterionResult]:
    out = []
    for num, *_ in CRITERIA:
        if numbers and num not in numbers:
            continue
        res = run_criterion(num)
        out.append(res)
        if echo:
            echo(res.line())
    return out
