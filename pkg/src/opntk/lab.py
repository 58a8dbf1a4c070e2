"""Experiment plumbing: configuration, dataset synthesis, width/seed sweeps
and the JSON summary.

Configuration files are flat ``key = value`` text, ``#`` starts a comment.
List values are comma separated. Precedence, lowest first: built-in
defaults, subcommand defaults (``sweep-m`` widens ``m`` and ``seeds``), the
config file, command-line flags.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
from scipy import stats

from .ntk_kernels import analytic_Hinf, pinn_trunk_value, write_matrix
from .numkit import SeededRng
from .operator_net import (OperatorDataset, branch_values, init_weights, lift_bias,
                           parallel_pair, predict, relu3)
from .pinn import PdeProblem, PinnObjective, pinn_infinite_grams, pinn_train
from .trainer import SupervisedObjective, TrainingTrace, train

SCHEMA_VERSION = "1.0"
MODES = ("supervised", "pinn", "kernel-only")
MAX_ATTEMPTS = 1000
DEFAULT_SWEEP_M = (256, 512, 1024, 2048, 4096, 8192)
DEFAULT_SWEEP_SEEDS = (0, 1, 2, 3, 4)
SLOPE_BAND = (-0.65, -0.35)
REMAINDER_SLOPE_BAND = (-0.7, -0.3)

# stream ids under one seed
STREAM_DATA = 0
STREAM_TEACHER = 1
STREAM_STUDENT = 2
STREAM_MC = 3


class ConfigError(ValueError):
    """Invalid configuration or a dataset that cannot satisfy its hypotheses."""


@dataclass
class ExperimentConfig:
    mode: str = "supervised"
    n1: int = 4
    n2: int = 4
    n3: int = 4
    d: int = 2              # query dimension (supervised) or spatial dimension (pinn)
    q: int = 16
    p: int = 16
    m: list = field(default_factory=lambda: [4096])
    eta: object = "auto"
    steps: int = 200
    seeds: list = field(default_factory=lambda: [0])
    delta: float = 0.05
    out: str = "runs"
    cadence: int = 10
    mc_samples: int = 1_000_000
    teacher_m: int = 32
    cosine_modes: int = 8
    separation: float = 0.9  # max |cos| between two inputs or two supervised queries
    pde_source: str = "teacher"
    manufactured: str = "exp(-t)*cos(x1)*cos(x2)"
    horizon: float = 1.0
    envelope_steps: int = 200
    slack: float = 0.9
    check_recursion: bool = False
    lift_bias: bool = False  # append a constant 1 to inputs and queries (supervised)
    export_grams: bool = False
    workers: int = 1

    @property
    def query_dim(self) -> int:
        return self.d + 1 if self.mode == "pinn" or self.lift_bias else self.d

    @property
    def input_dim(self) -> int:
        return self.q + 1 if self.lift_bias and self.mode != "pinn" else self.q

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n1", "n2", "d", "q", "p", "steps", "cadence", "teacher_m",
                     "cosine_modes", "workers", "envelope_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mode == "pinn" and self.n3 < 2:
            raise ConfigError("pinn mode needs n3 >= 2 (initial and lateral boundary)")
        if not self.m or not self.seeds:
            raise ConfigError("m and seeds must be nonempty")
        if any(v < 1 for v in self.m) or any(s < 0 for s in self.seeds):
            raise ConfigError("widths must be >= 1 and seeds >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.eta != "auto" and not (isinstance(self.eta, float) and self.eta > 0):
            raise ConfigError("eta must be 'auto' or a positive number")
        if self.mc_samples < 10_000:
            raise ConfigError("mc_samples must be >= 10000")
        if not 0.0 < self.separation <= 1.0:
            raise ConfigError("separation must lie in (0, 1]")
        if self.pde_source not in ("teacher", "manufactured"):
            raise ConfigError("pde_source must be 'teacher' or 'manufactured'")
        if self.lift_bias and self.mode == "pinn":
            raise ConfigError("lift_bias applies to supervised data only")
        if not 0.0 < self.slack <= 1.0:
            raise ConfigError("slack must lie in (0, 1]")
        return self


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if name == "eta":
            return "auto" if raw.lower() == "auto" else float(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.split(",") if v.strip()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def apply_overrides(config: ExperimentConfig, values: dict) -> ExperimentConfig:
    """Return a copy with string values parsed against the field types."""
    known = {f.name for f in fields(ExperimentConfig)}
    base = ExperimentConfig()
    out = ExperimentConfig(**asdict(config))
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        val = raw if not isinstance(raw, str) else _parse_value(key, raw, getattr(base, key))
        setattr(out, key, val)
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def load_config(path=None, overrides: Optional[dict] = None,
                base: Optional[dict] = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if base:
        cfg = apply_overrides(cfg, base)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        cfg = apply_overrides(cfg, parse_config_text(text))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


# ------------------------------------------------------------ datasets

def _max_abs_cos(x: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    n = np.linalg.norm(x, axis=1)
    c = np.abs(x @ x.T) / np.outer(n, n)
    np.fill_diagonal(c, 0.0)
    return float(c.max())


def _resample(draw, ok, what: str):
    for _ in range(MAX_ATTEMPTS):
        x = draw()
        if ok(x):
            return x
    raise ConfigError(f"could not draw {what} satisfying the separation hypotheses "
                      f"after {MAX_ATTEMPTS} attempts")


def cosine_series_inputs(n: int, q: int, modes: int, rng: SeededRng) -> np.ndarray:
    """Random smooth functions sum_k c_k cos(k pi x) sampled at q equispaced
    sensors on [0, 1], normalized to unit length."""
    x = np.linspace(0.0, 1.0, q)
    basis = np.cos(np.pi * np.outer(np.arange(modes), x))        # (modes, q)
    coef = rng.gaussian((n, modes)) / (1.0 + np.arange(modes))
    u = coef @ basis
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def unit_directions(n: int, d: int, rng: SeededRng) -> np.ndarray:
    y = rng.gaussian((n, d))
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def ball_points(n: int, d: int, rng: SeededRng) -> np.ndarray:
    """Uniform in the open unit ball of R^d."""
    v = unit_directions(n, d, rng)
    r = rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / d)
    return v * r


def pde_points(n2: int, n3: int, ds: int, horizon: float, rng: SeededRng):
    """Interior points in (0, T) x Gamma; boundary points split between the
    initial slice {0} x Gamma and the lateral surface [0, T] x dGamma."""
    interior = np.hstack([rng.uniform(0.0, horizon, (n2, 1)), ball_points(n2, ds, rng)])
    n_init = n3 // 2
    initial = np.hstack([np.zeros((n_init, 1)), ball_points(n_init, ds, rng)])
    lateral = np.hstack([rng.uniform(0.0, horizon, (n3 - n_init, 1)),
                         unit_directions(n3 - n_init, ds, rng)])
    return interior, np.vstack([initial, lateral])


def _inputs(cfg: ExperimentConfig, rng: SeededRng) -> np.ndarray:
    return _resample(lambda: cosine_series_inputs(cfg.n1, cfg.q, cfg.cosine_modes, rng),
                     lambda u: _max_abs_cos(u) <= cfg.separation, "input functions")


def teacher_weights(cfg: ExperimentConfig, seed: int, activation: str):
    return init_weights(cfg.teacher_m, cfg.p, cfg.input_dim, cfg.query_dim,
                        SeededRng(seed, STREAM_TEACHER), activation)


def manufactured_data(expr: str, ds: int, interior: np.ndarray, boundary: np.ndarray):
    """Values of L u* at interior points and of u* on the boundary, from a
    closed-form u*(t, x1..xd) given as a sympy expression."""
    import sympy as sp

    t = sp.Symbol("t")
    xs = sp.symbols(" ".join(f"x{i}" for i in range(1, ds + 1)), seq=True)
    try:
        u = sp.sympify(expr, locals={"t": t, **{str(x): x for x in xs}})
    except (sp.SympifyError, TypeError) as exc:
        raise ConfigError(f"cannot parse manufactured solution {expr!r}: {exc}") from None
    extra = u.free_symbols - {t, *xs}
    if extra:
        raise ConfigError(f"manufactured solution uses unknown symbols {sorted(map(str, extra))}")
    lu = sp.diff(u, t) - sum(sp.diff(u, x, 2) for x in xs) + u
    f_num = sp.lambdify((t, *xs), lu, "numpy")
    g_num = sp.lambdify((t, *xs), u, "numpy")
    f = np.broadcast_to(f_num(*interior.T), (interior.shape[0],)).astype(np.float64)
    g = np.broadcast_to(g_num(*boundary.T), (boundary.shape[0],)).astype(np.float64)
    return f, g


def synthesize_dataset(cfg: ExperimentConfig, rng: SeededRng, seed: Optional[int] = None):
    """Dataset for one seed. Returns ``(data, problem)``; ``problem`` is None
    outside pinn mode. ``seed`` selects the teacher stream (default rng.seed)."""
    seed = rng.seed if seed is None else seed
    u = _inputs(cfg, rng)
    if cfg.mode != "pinn":
        y = _resample(lambda: unit_directions(cfg.n2, cfg.d, rng),
                      lambda y: _max_abs_cos(y) <= cfg.separation, "query directions")
        if cfg.lift_bias:
            u, y = lift_bias(u), lift_bias(y)
            if parallel_pair(u) is not None or parallel_pair(y) is not None:
                raise ConfigError("bias lift produced parallel samples")
        data = OperatorDataset(u, y)
        teacher = teacher_weights(cfg, seed, "relu")
        data.targets = predict(teacher, u, y)
        data.meta = {"seed": seed, "teacher_m": cfg.teacher_m}
        return data, None

    ds = cfg.d

    def draw():
        return pde_points(cfg.n2, cfg.n3, ds, cfg.horizon, rng)

    def ok(pts):
        return parallel_pair(np.vstack(pts)) is None

    interior, boundary = _resample(draw, ok, "collocation points")
    data = OperatorDataset(u, interior, boundary, meta={"seed": seed})
    if cfg.pde_source == "teacher":
        teacher = teacher_weights(cfg, seed, "relu3")
        beta = branch_values(teacher, u)
        lt = np.stack([pinn_trunk_value(teacher.trunk, y, True) for y in interior], axis=1)
        f = beta.T @ lt / math.sqrt(teacher.m)
        g = beta.T @ relu3(teacher.trunk @ boundary.T) / math.sqrt(teacher.m)
    else:
        fv, gv = manufactured_data(cfg.manufactured, ds, interior, boundary)
        f = np.tile(fv, (cfg.n1, 1))
        g = np.tile(gv, (cfg.n1, 1))
    problem = PdeProblem(f, g, cfg.horizon, ds, cfg.pde_source)
    bad = problem.validate(data)
    if bad:
        raise ConfigError("; ".join(bad))
    return data, problem


def dataset_bytes(data: OperatorDataset, problem: Optional[PdeProblem] = None) -> bytes:
    parts = [data.inputs, data.queries]
    for extra in (data.boundary, data.targets):
        if extra is not None:
            parts.append(extra)
    if problem is not None:
        parts += [problem.source, problem.boundary_values]
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in parts)


# ------------------------------------------------------------ slopes

@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int

    def within(self, band) -> bool:
        return band[0] <= self.slope <= band[1]


def fit_scaling_slope(points) -> SlopeFit:
    """Least-squares slope of log(value) against log(m), with a t-based 95%
    interval from the slope's standard error."""
    pts = [(float(m), float(v)) for m, v in points]
    if any(v <= 0 or not math.isfinite(v) for _, v in pts):
        raise ValueError("scaling fit needs positive finite values")
    if any(m <= 0 for m, _ in pts):
        raise ValueError("widths must be positive")
    if len({m for m, _ in pts}) < 4:
        raise ValueError("scaling fit needs at least 4 distinct widths")
    x = np.log([m for m, _ in pts])
    y = np.log([v for _, v in pts])
    res = stats.linregress(x, y)
    se = float(res.stderr)
    half = float(stats.t.ppf(0.975, len(pts) - 2)) * se
    return SlopeFit(float(res.slope), float(res.intercept), se,
                    float(res.slope) - half, float(res.slope) + half, len(pts))


# ------------------------------------------------------------ runs

def envelope_ok(trace: TrainingTrace, slack: float, horizon: int) -> bool:
    it = trace.column("iter")
    loss = trace.column("loss")
    eta, lam = trace.meta["eta"], trace.meta["lam_hat"]
    env = (1.0 - slack * eta * lam / 2.0) ** it * loss[0]
    sel = it <= horizon
    return bool(np.all(loss[sel] <= env[sel] * (1.0 + 1e-12)))


def trace_metrics(trace: TrainingTrace, cfg: ExperimentConfig) -> dict:
    loss = trace.column("loss")
    res = trace.column("res_norm")
    inorm = trace.column("I_norm")
    lam_h = trace.column("lam_H")
    lam_h = lam_h[np.isfinite(lam_h)]
    ok = np.isfinite(inorm) & (res > 0)
    ratio = float(np.mean(inorm[ok] / res[ok])) if np.any(ok) else float("nan")
    meta = trace.meta
    out = {
        "initial_loss": float(loss[0]),
        "final_loss": float(loss[-1]),
        "loss_ratio": float(loss[-1] / loss[0]) if loss[0] > 0 else 0.0,
        "eta": meta["eta"],
        "lam_H0": meta["lam_H0"],
        "lam_Ht0": meta["lam_Ht0"],
        "lam_hat": meta["lam_hat"],
        "max_drift_trunk": float(trace.column("drift_w")[-1]),
        "max_drift_branch": float(trace.column("drift_wt")[-1]),
        "radius_trunk": meta["radius_trunk"],
        "radius_branch": meta["radius_branch"],
        "min_lam_H_ratio": float(np.min(lam_h) / meta["lam_H0"]),
        "mean_remainder_ratio": ratio,
        "envelope_ok": envelope_ok(trace, cfg.slack, cfg.envelope_steps),
    }
    if trace.recursion_errors:
        out["recursion_max_error"] = max(e for _, e in trace.recursion_errors)
    return out


def _cell(args):
    """One (m, seed) training run. Module level so worker processes can run it."""
    cfg, m, seed = args
    rng = SeededRng(seed, STREAM_DATA)
    data, problem = synthesize_dataset(cfg, rng, seed)
    eta = cfg.eta
    student_rng = SeededRng(seed, STREAM_STUDENT)
    if cfg.mode == "pinn":
        w = init_weights(m, cfg.p, data.q, data.d, student_rng, "relu3")
        obj = PinnObjective(problem, data)
        trace = pinn_train(w, problem, data, eta, cfg.steps, cfg.cadence, cfg.delta,
                           cfg.check_recursion)
    else:
        w = init_weights(m, cfg.p, data.q, data.d, student_rng, "relu")
        obj = SupervisedObjective(data)
        trace = train(w, data, eta, cfg.steps, cfg.cadence, cfg.delta, cfg.check_recursion)
    H0, Ht0 = obj.grams(w, 0)
    return {"m": m, "seed": seed, "csv": trace.to_csv(),
            "metrics": trace_metrics(trace, cfg),
            "H0": H0.matrix, "Ht0": Ht0.matrix}


def infinite_grams(cfg: ExperimentConfig, seed: int):
    data, problem = synthesize_dataset(cfg, SeededRng(seed, STREAM_DATA), seed)
    if cfg.mode == "pinn":
        g = pinn_infinite_grams(data, cfg.mc_samples, SeededRng(seed, STREAM_MC))
        return g.H, g.Ht
    g = analytic_Hinf(data, strict=True)
    return g.H, g.Ht


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "mode", "complete", "config", "runs", "kernels",
                 "slopes", "checks"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mode": {"enum": list(MODES)},
        "complete": {"type": "boolean"},
        "error": {"type": ["string", "null"]},
        "elapsed_s": {"type": "number"},
        "config": {"type": "object"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["m", "seed", "trace", "initial_loss", "final_loss",
                             "lam_H0", "lam_Ht0", "eta"],
                "properties": {
                    "m": {"type": "integer", "minimum": 1},
                    "seed": {"type": "integer", "minimum": 0},
                    "trace": {"type": "string"},
                    "initial_loss": {"type": "number"},
                    "final_loss": {"type": "number"},
                    "lam_H0": {"type": "number"},
                    "lam_Ht0": {"type": "number"},
                    "eta": {"type": "number", "exclusiveMinimum": 0},
                    "conc_H": {"type": "number"},
                    "conc_Ht": {"type": "number"},
                },
            },
        },
        "kernels": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "lambda0", "lambda0_tilde"],
                "properties": {
                    "seed": {"type": "integer"},
                    "lambda0": {"type": "number"},
                    "lambda0_tilde": {"type": "number"},
                    "inv_min_lambda": {"type": ["number", "null"]},
                    "inv_max_lambda": {"type": ["number", "null"]},
                    "files": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "slopes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["slope", "ci_low", "ci_high", "stderr", "n"],
                "properties": {
                    "slope": {"type": "number"},
                    "ci_low": {"type": "number"},
                    "ci_high": {"type": "number"},
                    "stderr": {"type": "number"},
                    "n": {"type": "integer"},
                },
            },
        },
        "checks": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["passed", "detail"],
                "properties": {"passed": {"type": "boolean"}, "detail": {"type": "string"}},
            },
        },
    },
}


def validate_summary(summary: dict) -> None:
    jsonschema.validate(summary, SUMMARY_SCHEMA)


def _finite(x) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _check(passed: bool, detail: str) -> dict:
    return {"passed": bool(passed), "detail": detail}


def _sweep_checks(runs: list, cfg: ExperimentConfig, slopes: dict) -> dict:
    checks = {}
    if runs:
        bad = [f"m={r['m']} seed={r['seed']}" for r in runs if not r["envelope_ok"]]
        checks["rate_envelope"] = _check(not bad, "violations: " + (", ".join(bad) or "none"))
    for name, band in (("conc_H", SLOPE_BAND), ("conc_Ht", SLOPE_BAND),
                       ("drift_trunk", SLOPE_BAND), ("drift_branch", SLOPE_BAND),
                       ("remainder_ratio", REMAINDER_SLOPE_BAND)):
        if name in slopes:
            s = slopes[name]["slope"]
            checks[f"slope_{name}"] = _check(band[0] <= s <= band[1],
                                             f"slope {s:.3f}, band {list(band)}")
    wide = [r for r in runs if r["m"] >= 2048]
    if wide:
        worst = min(r["min_lam_H_ratio"] for r in wide)
        checks["gram_stability"] = _check(worst >= 0.5,
                                          f"min lam_H(t)/lam_H(0) over m>=2048: {worst:.3f}")
    return checks


def _fit_all(runs: list) -> dict:
    slopes = {}
    keys = {"conc_H": "conc_H", "conc_Ht": "conc_Ht", "drift_trunk": "max_drift_trunk",
            "drift_branch": "max_drift_branch", "remainder_ratio": "mean_remainder_ratio"}
    for name, key in keys.items():
        pts = [(r["m"], r[key]) for r in runs if r.get(key) is not None]
        if len({m for m, _ in pts}) >= 4 and all(v > 0 for _, v in pts):
            slopes[name] = asdict(fit_scaling_slope(pts))
    return slopes


def run(cfg: ExperimentConfig, progress=None) -> dict:
    """Run every (m, seed) cell of ``cfg`` and write traces, Gram exports and
    ``summary.json`` under ``cfg.out``. Returns the summary."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = {"schema_version": SCHEMA_VERSION, "mode": cfg.mode, "complete": False,
               "error": None, "config": asdict(cfg), "runs": [], "kernels": [],
               "slopes": {}, "checks": {}}
    try:
        infinite = {}
        need_inf = cfg.mode == "kernel-only" or cfg.mode == "supervised" or cfg.export_grams
        kernel_mode = "supervised" if cfg.mode == "kernel-only" else cfg.mode
        kcfg = ExperimentConfig(**{**asdict(cfg), "mode": kernel_mode})
        if need_inf or cfg.mode == "pinn":
            for seed in cfg.seeds:
                H, Ht = infinite_grams(kcfg, seed)
                infinite[seed] = (H, Ht)
                lam0, lam0t = H.min_eigenvalue(), Ht.min_eigenvalue()
                # width hints m ~ poly(1/lambda) with either the smaller or the larger eigenvalue
                entry = {"seed": seed, "lambda0": lam0, "lambda0_tilde": lam0t,
                         "inv_min_lambda": 1.0 / min(lam0, lam0t) if min(lam0, lam0t) > 0 else None,
                         "inv_max_lambda": 1.0 / max(lam0, lam0t) if max(lam0, lam0t) > 0 else None,
                         "files": []}
                if cfg.mode == "kernel-only" or cfg.export_grams:
                    for tag, g in (("Hinf", H), ("Htinf", Ht)):
                        name = f"{tag}_seed{seed}.txt"
                        write_matrix(out / name, g.matrix)
                        entry["files"].append(name)
                summary["kernels"].append(entry)
        if cfg.mode != "kernel-only":
            cells = [(kcfg, m, s) for m in cfg.m for s in cfg.seeds]
            if cfg.workers > 1 and len(cells) > 1:
                with ProcessPoolExecutor(cfg.workers) as pool:
                    results = list(pool.map(_cell, cells))
            else:
                results = []
                for c in cells:
                    results.append(_cell(c))
                    if progress:
                        progress(c[1], c[2])
            for res in results:
                m, seed = res["m"], res["seed"]
                name = f"trace_m{m}_seed{seed}.csv"
                (out / name).write_text(res["csv"])
                row = {"m": m, "seed": seed, "trace": name, **res["metrics"]}
                if seed in infinite:
                    H, Ht = infinite[seed]
                    row["conc_H"] = float(np.linalg.norm(res["H0"] - H.matrix))
                    row["conc_Ht"] = float(np.linalg.norm(res["Ht0"] - Ht.matrix))
                if cfg.export_grams:
                    write_matrix(out / f"H0_m{m}_seed{seed}.txt", res["H0"])
                    write_matrix(out / f"Ht0_m{m}_seed{seed}.txt", res["Ht0"])
                summary["runs"].append({k: (_finite(v) if isinstance(v, float) else v)
                                        for k, v in row.items()})
            summary["slopes"] = _fit_all(summary["runs"])
            summary["checks"] = _sweep_checks(summary["runs"], cfg, summary["slopes"])
        summary["complete"] = True
    except Exception as exc:
        summary["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        summary["elapsed_s"] = time.perf_counter() - t0
        validate_summary(summary)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def format_report(summary: dict) -> str:
    lines = [f"mode: {summary['mode']}   complete: {summary['complete']}"]
    if summary.get("error"):
        lines.append(f"error: {summary['error']}")
    for k in summary["kernels"]:
        hint = ""
        if k.get("inv_min_lambda") is not None and k.get("inv_max_lambda") is not None:
            hint = (f", 1/min = {k['inv_min_lambda']:.4g}, "
                    f"1/max = {k['inv_max_lambda']:.4g}")
        lines.append(f"seed {k['seed']}: lambda0 = {k['lambda0']:.6g}, "
                     f"lambda0~ = {k['lambda0_tilde']:.6g}{hint}")
    if summary["runs"]:
        lines.append(f"{'m':>6} {'seed':>4} {'loss0':>11} {'lossT':>11} {'lam_H0':>10} "
                     f"{'lam_Ht0':>10} {'drift_w':>10}")
        for r in summary["runs"]:
            lines.append(f"{r['m']:>6} {r['seed']:>4} {r['initial_loss']:>11.4e} "
                         f"{r['final_loss']:>11.4e} {r['lam_H0']:>10.4g} "
                         f"{r['lam_Ht0']:>10.4g} {r['max_drift_trunk']:>10.4g}")
    for name, s in summary["slopes"].items():
        lines.append(f"slope {name}: {s['slope']:.3f}  95% CI [{s['ci_low']:.3f}, "
                     f"{s['ci_high']:.3f}]  n={s['n']}")
    for name, c in summary["checks"].items():
        lines.append(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c['detail']}")
    return "\n".join(lines)
