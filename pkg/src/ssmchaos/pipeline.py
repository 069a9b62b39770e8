"""End-to-end experiment stages: generate, embed, fit SSM, fit reduced model,
forecast and diagnose. Every stage writes its artifacts into the run
directory with the config hash in a header comment; earlier-stage files
with a matching hash are reused instead of recomputed."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, make_rng
from .diagnostics import (DensityComparison, LyapunovEstimate, attractor_diameter,
                          density_compare, mle_ensemble, nmte, prediction_horizon)
from .dynamics import (ForcedPolyFlow, KnnModel, PolyFlowModel, calibrate_forcing,
                       fit_poly_flow, fit_poly_map, knn_build, modal_transform, propagate)
from .embedding import DelaySpec, FnnReport, ami_lag, delay_embed, fnn_dimension, takens_dimension
from .manifold import FitReport, SsmModel, fit_ssm, fit_ssm_fast, invariance_error
from .systems import (SystemSpec, continue_map_fixed_point, integrate, integrate_batch,
                      integrate_ks, ks_grid)
from .trajectory import TrajectorySet, read_csv, write_csv

log = logging.getLogger(__name__)

STAGES = ("generate", "embed", "fit-ssm", "fit-model", "forecast", "diagnose")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the partial manifest."""

    def __init__(self, stage: str, cause: BaseException, manifest: dict):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.manifest = manifest


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    threads: int = 1
    write_large: bool = True
    files: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    # stage products
    full_train: TrajectorySet | None = None
    full_test: TrajectorySet | None = None
    anchor: np.ndarray | None = None
    delay: DelaySpec | None = None
    fnn: FnnReport | None = None
    Y_train: TrajectorySet | None = None
    Y_test: TrajectorySet | None = None
    ssm: SsmModel | None = None
    scan: dict = field(default_factory=dict)      # order -> (train error, test error)
    eta_train: TrajectorySet | None = None
    eta_test: TrajectorySet | None = None
    model: object = None
    base_model: PolyFlowModel | None = None
    spectrum: np.ndarray | None = None
    horizons: list[float] = field(default_factory=list)
    nmte_curve: np.ndarray | None = None
    forecast_lifted: np.ndarray | None = None
    mle_system: LyapunovEstimate | None = None
    mle_model: LyapunovEstimate | None = None
    density: DensityComparison | None = None

    def __post_init__(self):
        self.out = Path(self.out)
        self.hash = self.cfg.config_hash()
        self.rng = make_rng(self.cfg.seed)

    # -- file helpers -------------------------------------------------------

    def header(self) -> list[str]:
        return [f"config_hash={self.hash}", f"artifact=ssmchaos {__version__}",
                f"experiment={self.cfg.name} scale={self.cfg.scale} seed={self.cfg.seed}"]

    def _record(self, rel: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return path

    def write_text(self, rel: str, text: str) -> Path:
        path = self._record(rel)
        path.write_text("".join(f"# {h}\n" for h in self.header()) + text)
        return path

    def write_traj(self, rel: str, traj: TrajectorySet) -> Path:
        path = self._record(rel)
        write_csv(traj, path, self.header())
        return path

    def write_columns(self, rel: str, names: list[str], columns: list) -> Path:
        """Plot-ready table: one named column per array, full precision."""
        block = np.column_stack([np.asarray(c, dtype=float) for c in columns])
        lines = [",".join(names)] + [",".join(f"{v:.17g}" for v in row) for row in block]
        return self.write_text(rel, "\n".join(lines) + "\n")

    def cached(self, rel: str) -> Path | None:
        """Path of an existing artifact produced under the same config hash."""
        path = self.out / rel
        if not path.is_file():
            return None
        with path.open() as fh:
            first = fh.readline().strip()
        if first != f"# config_hash={self.hash}":
            return None
        if rel not in self.files:
            self.files.append(rel)
        return path

    def manifest(self) -> dict:
        import numba
        import scipy
        return {"config_hash": self.hash, "experiment": self.cfg.name, "scale": self.cfg.scale,
                "seed": self.cfg.seed,
                "versions": {"ssmchaos": __version__, "numpy": np.__version__,
                             "scipy": scipy.__version__, "numba": numba.__version__,
                             "python": platform.python_version()},
                "files": list(self.files), "timings_s": dict(self.timings),
                "metrics": _jsonable(self.metrics)}

    def write_manifest(self) -> Path:
        path = self.out / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    """Column names and values of a table written by ``RunContext.write_text``."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    names = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return names, rows.reshape(len(lines) - 1, len(names))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# --------------------------------------------------------------------------
# generate


def _random_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    X = rng.standard_normal((n, dim))
    X *= (radius * rng.uniform(size=n) ** (1.0 / dim) / np.linalg.norm(X, axis=1))[:, None]
    return X


def _smooth_profile(rng: np.random.Generator, x: np.ndarray, L: float, n_waves: int = 5,
                    amplitude: float = 0.1) -> np.ndarray:
    u = np.zeros_like(x)
    for k in range(1, n_waves + 1):
        u += amplitude * rng.standard_normal() * np.cos(2 * np.pi * k * x / L + rng.uniform(0, 2 * np.pi))
    return u


def initial_conditions(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[list, list]:
    d, spec = cfg.data, cfg.system
    out = []
    for which, n in (("train_ic", d.n_random_train), ("test_ic", d.n_random_test)):
        ics = getattr(d, which)
        if ics == "random":
            if spec.name == "KuramotoSivashinsky":
                x = ks_grid(spec.parameters["L"], int(spec.parameters["n_grid"]))
                ics = [_smooth_profile(rng, x, spec.parameters["L"]) for _ in range(n)]
            elif d.random_box is not None:
                box = np.asarray(d.random_box, dtype=float)
                ics = list(box[:, 0] + (box[:, 1] - box[:, 0]) * rng.uniform(size=(n, spec.dim)))
            else:
                ics = list(_random_ball(rng, n, spec.dim, d.random_radius))
        elif ics is None:
            raise ConfigError(f"[data]: {which} is required")
        else:
            ics = [np.asarray(v, dtype=float) for v in ics]
            for v in ics:
                if v.shape != (spec.dim,):
                    raise ConfigError(f"[data]: {which} entries need {spec.dim} components")
        out.append(ics)
    return out[0], out[1]


def _rossler_center(spec: SystemSpec) -> np.ndarray:
    a, b, c = (spec.parameters[k] for k in ("a", "b", "c"))
    x0 = 0.5 * (c - math.sqrt(c * c - 4 * a * b))
    return np.array([x0, -x0 / a, x0 / a])


def _forcing_step(cfg: ExperimentConfig) -> float:
    """Sampling interval, snapped so that the forcing period is a whole number of samples."""
    f = cfg.system.forcing
    if f is None or cfg.data.poincare:
        return cfg.data.dt
    n = max(1, int(round(f.period / cfg.data.dt)))
    return f.period / n


def simulate(cfg: ExperimentConfig, spec: SystemSpec, ics: list, t_end: float) -> TrajectorySet:
    """Integrate every initial condition and drop the transient."""
    d = cfg.data
    if spec.name == "KuramotoSivashinsky":
        p = spec.parameters
        trajs = [integrate_ks(p["L"], int(p["n_modes"]), int(p["n_grid"]), u0, (0.0, t_end),
                              d.dt, d.substeps).drop_before(d.discard) for u0 in ics]
        return TrajectorySet([t[0] for t in trajs], d.dt, t0=trajs[0].t0)
    if d.poincare:
        T = spec.forcing.period
        n = int(round(t_end / T))
        skip = int(round(d.discard / T))
        P = integrate_batch(spec, np.array(ics), 0.0, T, n, d.substeps)
        if not np.all(np.isfinite(P)):
            raise FloatingPointError("Poincare record diverged")
        return TrajectorySet([P[skip:, i] for i in range(len(ics))], T, t0=skip * T)
    dt = _forcing_step(cfg)
    trajs = [integrate(spec, x0, (0.0, t_end), dt, d.substeps).drop_before(d.discard) for x0 in ics]
    return TrajectorySet([t[0] for t in trajs], dt, t0=trajs[0].t0)


def training_spec(cfg: ExperimentConfig) -> SystemSpec:
    if cfg.data.unforced_training:
        return SystemSpec(cfg.system.name, cfg.system.parameters, None)
    return cfg.system


def stage_generate(ctx: RunContext) -> None:
    cfg = ctx.cfg
    ptrain, ptest = ctx.cached("data/train_full.csv"), ctx.cached("data/test_full.csv")
    panchor = ctx.cached("data/anchor.csv")
    if ptrain and ptest and panchor:
        ctx.full_train, ctx.full_test = read_csv(ptrain), read_csv(ptest)
        ctx.anchor = read_table(panchor)[1][:, 0]
        return
    train_ics, test_ics = initial_conditions(cfg, ctx.rng)
    d = cfg.data
    ctx.full_train = simulate(cfg, training_spec(cfg), train_ics, d.t_end)
    ctx.full_test = simulate(cfg, cfg.system, test_ics, d.test_t_end or d.t_end)
    ctx.anchor = _anchor(cfg)
    if np.any(ctx.anchor != 0):
        ctx.full_train = ctx.full_train.map(lambda s: s - ctx.anchor)
        ctx.full_test = ctx.full_test.map(lambda s: s - ctx.anchor)
    if ctx.write_large:
        ctx.write_traj("data/train_full.csv", ctx.full_train)
        ctx.write_traj("data/test_full.csv", ctx.full_test)
    ctx.write_text("data/anchor.csv", "anchor\n" + "\n".join(f"{v:.17g}" for v in ctx.anchor) + "\n")


def _anchor(cfg: ExperimentConfig) -> np.ndarray:
    shift = cfg.data.shift
    spec = cfg.system
    if shift == "none":
        return np.zeros(spec.dim)
    if shift == "rossler-center":
        if spec.name != "Rossler":
            raise ConfigError("[data]: shift 'rossler-center' applies to the Rossler system only")
        return _rossler_center(spec)
    if shift == "map-fixed-point":
        if spec.forcing is None:
            raise ConfigError("[data]: shift 'map-fixed-point' needs a forced system")
        fp = continue_map_fixed_point(spec, spec.forcing.period, substeps=max(cfg.data.substeps, 100))
        log.info("period-map fixed point: residual %.2e, %d unstable multipliers",
                 fp.residual_norm, fp.n_unstable)
        return fp.state
    v = np.asarray(shift, dtype=float)
    if v.shape != (spec.dim,):
        raise ConfigError(f"[data]: shift vector needs {spec.dim} components")
    return v


# --------------------------------------------------------------------------
# embed


def observe(cfg: ExperimentConfig, full: TrajectorySet) -> TrajectorySet:
    obs = cfg.data.observable
    return full if obs == "full-state" else full.select(obs)


def stage_embed(ctx: RunContext) -> None:
    cfg, e = ctx.cfg, ctx.cfg.embedding
    obs_train, obs_test = observe(cfg, ctx.full_train), observe(cfg, ctx.full_test)
    if e.dim is None:
        ctx.Y_train, ctx.Y_test = obs_train, obs_test
        if "fnn" in cfg.diagnostics.requested:
            raise ConfigError("[diagnostics]: 'fnn' needs a delay embedding")
        return
    if obs_train.state_dim != 1:
        raise ConfigError("[embedding]: delay embedding needs a scalar observable")
    lag = e.lag_steps
    if lag == "auto":
        lag, found = ami_lag(obs_train, max_lag=max(2, len(obs_train[0]) // 20))
        if not found:
            log.warning("no mutual-information minimum found; using lag %d", lag)
    ctx.metrics["lag_steps"] = lag
    fnn_lag = e.fnn_lag_steps or lag
    dim = e.dim
    if "fnn" in cfg.diagnostics.requested or dim == "auto" or cfg.ssm.d == "auto":
        series = obs_train if e.fnn_data == "train" else obs_test
        ctx.fnn = fnn_dimension(series, fnn_lag, e.fnn_dims, threshold_pct=e.fnn_threshold,
                                max_points=e.fnn_max_points)
        ctx.write_text("reports/fnn.csv", ctx.fnn.to_csv())
        ctx.metrics["fnn_percentage"] = dict(zip(ctx.fnn.dims_tested, ctx.fnn.fnn_percentage))
        if ctx.fnn.chosen_dim is None and (dim == "auto" or cfg.ssm.d == "auto"):
            raise FloatingPointError("FNN percentage never fell below the threshold")
    if dim == "auto":
        dim = takens_dimension(ctx.fnn.chosen_dim)
    ctx.delay = DelaySpec(0, int(dim), int(lag))
    ctx.metrics["embedding_dim"] = int(dim)
    ctx.Y_train, ctx.Y_test = delay_embed(obs_train, ctx.delay), delay_embed(obs_test, ctx.delay)
    if ctx.write_large:
        ctx.write_traj("data/train_embedded.csv", ctx.Y_train)
        ctx.write_traj("data/test_embedded.csv", ctx.Y_test)


# --------------------------------------------------------------------------
# fit-ssm


def ssm_dimension(ctx: RunContext) -> int:
    d = ctx.cfg.ssm.d
    if d == "auto":
        if ctx.fnn is None or ctx.fnn.chosen_dim is None:
            raise ConfigError("[ssm]: d = 'auto' needs an FNN estimate")
        return ctx.fnn.chosen_dim
    return int(d)


def fitting_data(ctx: RunContext) -> TrajectorySet:
    n = ctx.cfg.ssm.max_points
    Y = ctx.Y_train
    if Y.total_samples() <= n:
        return Y
    return TrajectorySet([Y.stacked()[:n]], Y.dt, t0=Y.t0)


def fit_one(ctx: RunContext, d: int, order: int, data=None) -> tuple[SsmModel, FitReport]:
    s = ctx.cfg.ssm
    fitter = fit_ssm if s.method == "optimized" else fit_ssm_fast
    return fitter(fitting_data(ctx) if data is None else data, d, order, constant=s.constant)


def stage_fit_ssm(ctx: RunContext) -> None:
    s = ctx.cfg.ssm
    want_report = "invariance" in ctx.cfg.diagnostics.requested
    pmodel, pscan = ctx.cached("models/ssm.txt"), ctx.cached("reports/invariance.csv")
    if pmodel and (pscan or not want_report):
        ctx.ssm = SsmModel.from_text(pmodel.read_text())
        if pscan:
            rows = read_table(pscan)[1]
            ctx.scan = {int(r[0]): (float(r[1]), float(r[2])) for r in rows}
        return
    d = ssm_dimension(ctx)
    data = fitting_data(ctx)
    for order in s.orders:
        t = time.perf_counter()
        model, rep = fit_one(ctx, d, order, data)
        err_test = invariance_error(model, ctx.Y_test)
        ctx.scan[order] = (rep.invariance_error, err_test)
        log.info("SSM d=%d order=%d: invariance error %.4g%% (test %.4g%%) in %.1fs",
                 d, order, 100 * rep.invariance_error, 100 * err_test, time.perf_counter() - t)
        if order == s.order:
            ctx.ssm = model
    if want_report:
        lines = ["order,invariance_error_train_pct,invariance_error_test_pct"]
        lines += [f"{k},{100 * a:.17g},{100 * b:.17g}" for k, (a, b) in sorted(ctx.scan.items())]
        ctx.write_text("reports/invariance.csv", "\n".join(lines) + "\n")
    ctx.metrics["invariance_error_pct"] = {k: 100 * a for k, (a, _) in sorted(ctx.scan.items())}
    ctx.write_text("models/ssm.txt", ctx.ssm.to_text())


# --------------------------------------------------------------------------
# fit-model


def _limit(traj: TrajectorySet, n: int | None) -> TrajectorySet:
    if n is None or traj.total_samples() <= n:
        return traj
    out, left = [], n
    for s in traj.states:
        if left <= 1:
            break
        out.append(s[:left])
        left -= len(out[-1])
    return TrajectorySet(out, traj.dt, t0=traj.t0)


def calibration_trajectory(ctx: RunContext) -> TrajectorySet:
    """Reduced coordinates of one forced trajectory used to calibrate the forcing."""
    cfg = ctx.cfg
    ic = cfg.data.calibration_ic
    if ic is None:
        raise ConfigError("[data]: calibration_ic is required for forced models")
    T = cfg.system.forcing.period
    dt = _forcing_step(cfg)
    traj = integrate(cfg.system, np.asarray(ic, float) + 0.0, (0.0, cfg.data.calibration_periods * T),
                     dt, cfg.data.substeps)
    traj = traj.map(lambda s: s - ctx.anchor)
    Y = observe(cfg, traj)
    if ctx.delay is not None:
        Y = delay_embed(Y, ctx.delay)
    return ctx.ssm.reduce(Y)


def stage_fit_model(ctx: RunContext) -> None:
    cfg, m = ctx.cfg, ctx.cfg.model
    ctx.eta_train, ctx.eta_test = ctx.ssm.reduce(ctx.Y_train), ctx.ssm.reduce(ctx.Y_test)
    if m.kind == "none":
        return
    if ctx.write_large:
        ctx.write_traj("data/train_reduced.csv", ctx.eta_train)
        ctx.write_traj("data/test_reduced.csv", ctx.eta_test)
    train = _limit(ctx.eta_train, m.max_points)
    rel = "models/reduced_knn.txt" if m.kind == "knn" else "models/reduced_poly.txt"
    cached = ctx.cached(rel)
    if m.kind == "knn":
        ctx.model = KnnModel.from_text(cached.read_text()) if cached else knn_build(train, m.k)
    elif m.kind == "poly-map":
        ctx.model = PolyFlowModel.from_text(cached.read_text()) if cached else fit_poly_map(train, m.order)
    else:
        ctx.model = (PolyFlowModel.from_text(cached.read_text()) if cached
                     else modal_transform(fit_poly_flow(train, m.order)))
    if not cached and (m.kind != "knn" or ctx.write_large):
        ctx.write_text(rel, ctx.model.to_text())
    if m.kind == "forced":
        ctx.base_model = ctx.model
        ctx.model = calibrate_forcing(ctx.base_model, calibration_trajectory(ctx), cfg.system.forcing.frequency)
        ctx.metrics["calibrated_amplitude"] = ctx.model.A
        ctx.metrics["calibrated_phase"] = ctx.model.phi
        ctx.write_text("models/forcing_calibration.csv",
                       f"amplitude,phase,frequency\n{ctx.model.A:.17g},{ctx.model.phi:.17g},"
                       f"{ctx.model.omega:.17g}\n")
    if isinstance(ctx.model, PolyFlowModel) and ctx.model.modal is not None:
        ctx.spectrum = ctx.model.modal.eigenvalues
    if m.spectrum_order is not None:
        ctx.spectrum = modal_transform(fit_poly_flow(train, m.spectrum_order)).modal.eigenvalues
    if ctx.spectrum is not None:
        ev = np.asarray(ctx.spectrum)
        ctx.metrics["linear_spectrum"] = [[float(v.real), float(v.imag)] for v in ev]
    if ctx.spectrum is not None and "spectrum" in cfg.diagnostics.requested:
        ctx.write_columns("reports/spectrum.csv", ["real", "imag"], [ev.real, ev.imag])


# --------------------------------------------------------------------------
# forecast


def model_step(ctx: RunContext) -> float:
    return ctx.eta_train.dt


def blowup_bound(ctx: RunContext) -> float:
    return ctx.cfg.diagnostics.blowup_factor * float(np.max(np.linalg.norm(ctx.eta_train.stacked(), axis=1)))


def _lyapunov_rate(ctx: RunContext) -> float | None:
    est = ctx.mle_system or ctx.mle_model
    return est.mle if est is not None and est.mle > 0 else None


def stage_forecast(ctx: RunContext) -> None:
    cfg, dg = ctx.cfg, ctx.cfg.diagnostics
    eta, Y = ctx.eta_test[0], ctx.Y_test[0]
    n = min(dg.forecast_steps, len(eta) - 1)
    room = len(eta) - 1 - n
    starts = np.linspace(0, room, dg.horizon_starts).astype(int) if dg.horizon_starts > 1 else np.array([0])
    dt = model_step(ctx)
    t0s = ctx.eta_test.t0 + starts * dt
    if isinstance(ctx.model, ForcedPolyFlow):
        preds = [propagate(ctx.model, eta[s:s + 1], n, dt, t0=t, bound=blowup_bound(ctx))[:, 0]
                 for s, t in zip(starts, t0s)]
    else:
        P = propagate(ctx.model, eta[starts], n, dt, bound=blowup_bound(ctx))
        preds = [P[:, j] for j in range(len(starts))]
    ctx.horizons = []
    for j, (s, pred) in enumerate(zip(starts, preds)):
        ok = np.all(np.isfinite(pred), axis=1)
        m = int(np.argmin(ok)) if not ok.all() else len(pred)
        lifted = ctx.ssm.lift(pred[:m])
        curve = nmte(Y[s:s + m], lifted)
        if m < len(pred):  # blown-up forecast counts as failed from the blow-up on
            curve = np.concatenate([curve, np.full(len(pred) - m, np.inf)])
        ctx.horizons.append(prediction_horizon(curve, dt, dg.horizon_threshold))
        if j == 0:
            ctx.nmte_curve = curve
            ctx.forecast_lifted = lifted
    ctx.metrics["horizon_time"] = float(np.median(ctx.horizons))
    ctx.metrics["horizon_time_per_start"] = ctx.horizons
    t = dt * np.arange(len(ctx.nmte_curve))
    ctx.write_columns("reports/nmte.csv", ["t", "nmte"], [t, ctx.nmte_curve])
    k = len(ctx.forecast_lifted)
    ctx.write_columns("reports/forecast_first_coordinate.csv", ["t", "reference", "prediction"],
                      [t[:k], Y[:k, 0], ctx.forecast_lifted[:, 0]])


# --------------------------------------------------------------------------
# diagnose


def _phase_locked_points(ctx: RunContext, full: TrajectorySet) -> tuple[np.ndarray, float]:
    """States sampled at whole forcing periods, and their common start time."""
    f = ctx.cfg.system.forcing
    if f is None or ctx.cfg.data.poincare:
        return full.stacked(), 0.0
    stride = int(round(f.period / full.dt))
    first = int(round((math.ceil(full.t0 / f.period - 1e-9) * f.period - full.t0) / full.dt))
    return np.vstack([s[first::stride] for s in full.states]), 0.0


def system_mle(ctx: RunContext) -> LyapunovEstimate:
    cfg, dg = ctx.cfg, ctx.cfg.diagnostics
    spec = cfg.system
    if spec.name == "KuramotoSivashinsky" or cfg.data.poincare:
        raise ConfigError("[diagnostics]: full-system MLE is available for flows only")
    base, t0 = _phase_locked_points(ctx, ctx.full_test)
    base = base + ctx.anchor
    step = dg.mle_dt or ctx.full_test.dt
    fine = ctx.full_test.dt / cfg.data.substeps
    sub = max(1, int(round(step / fine)))
    D = attractor_diameter(base)
    eps0 = None if dg.mle_eps0_rel is None else dg.mle_eps0_rel * D

    def prop(Z, n):
        return integrate_batch(spec, Z, t0, step, n, sub)

    return mle_ensemble(prop, base[:: max(1, len(base) // (20 * dg.mle_trials))], dg.mle_trials,
                        dg.mle_steps, step, eps0=eps0, fit_window=dg.mle_window,
                        rng=make_rng(cfg.seed + 1), diameter=D)


def model_mle(ctx: RunContext) -> LyapunovEstimate:
    cfg, dg = ctx.cfg, ctx.cfg.diagnostics
    model = ctx.model
    if isinstance(model, KnnModel) or (isinstance(model, PolyFlowModel) and model.kind == "discrete"):
        step = model_step(ctx)
    else:
        step = dg.mle_dt or model_step(ctx)
    if isinstance(model, ForcedPolyFlow):
        if ctx.delay is not None:
            raise ConfigError("forced models need full-state or scalar observations without delays")
        full, _ = _phase_locked_points(ctx, ctx.full_test)
        base = ctx.ssm.project(observe(cfg, TrajectorySet([full], ctx.full_test.dt))[0])
    else:
        base = ctx.eta_test.stacked()
    D = attractor_diameter(base)
    rel = dg.model_mle_eps0_rel if dg.model_mle_eps0_rel is not None else dg.mle_eps0_rel
    eps0 = None if rel is None else rel * D
    window = dg.model_mle_window if dg.model_mle_window is not None else dg.mle_window
    bound = blowup_bound(ctx)

    def prop(Z, n):
        return propagate(model, Z, n, step, t0=0.0, bound=bound)

    n_steps = int(round(dg.mle_steps * (dg.mle_dt or ctx.full_test.dt) / step))
    return mle_ensemble(prop, base[:: max(1, len(base) // (20 * dg.mle_trials))], dg.mle_trials,
                        n_steps, step, eps0=eps0, fit_window=window, rng=make_rng(cfg.seed + 2),
                        diameter=D)


def stage_diagnose(ctx: RunContext) -> None:
    cfg, dg = ctx.cfg, ctx.cfg.diagnostics
    req = dg.requested
    if "mle" in req:
        if cfg.system.name != "KuramotoSivashinsky" and not cfg.data.poincare:
            ctx.mle_system = system_mle(ctx)
            ctx.write_text("reports/mle_system.csv", ctx.mle_system.to_csv())
            ctx.metrics["mle_system"] = ctx.mle_system.mle
            ctx.metrics["mle_system_failed_trials"] = ctx.mle_system.n_failed
        ctx.mle_model = model_mle(ctx)
        ctx.write_text("reports/mle_model.csv", ctx.mle_model.to_csv())
        ctx.metrics["mle_model"] = ctx.mle_model.mle
        ctx.metrics["mle_model_failed_trials"] = ctx.mle_model.n_failed
    if "density" in req:
        ref = ctx.Y_test
        n = len(ref[0]) - 1
        pred = propagate(ctx.model, ctx.eta_test[0][:1], n, model_step(ctx),
                         t0=ctx.eta_test.t0, bound=blowup_bound(ctx))[:, 0]
        pred = pred[np.all(np.isfinite(pred), axis=1)]
        ctx.density = density_compare(ref, ctx.ssm.lift(pred), n_grid=dg.density_grid)
        ctx.write_text("reports/density.csv", ctx.density.to_csv())
        ctx.write_text("reports/density_summary.csv", ctx.density.summary_csv())
        ctx.metrics["density_l1"] = ctx.density.l1_distances


# --------------------------------------------------------------------------
# orchestration


_STAGE_FUNCS = {"generate": stage_generate, "embed": stage_embed, "fit-ssm": stage_fit_ssm,
                "fit-model": stage_fit_model, "forecast": stage_forecast, "diagnose": stage_diagnose}


def run_pipeline(cfg: ExperimentConfig, out: str | Path | None = None, until: str = "diagnose",
                 threads: int = 1, write_large: bool = True) -> RunContext:
    """Execute the stages up to and including ``until`` and write the manifest.

    Forecast and diagnostics run only when requested in the config; the
    full-system MLE runs before the forecast so horizons can be quoted in
    Lyapunov times.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    ctx = RunContext(cfg, Path(out or cfg.output_dir), threads, write_large)
    last = STAGES.index(until)
    req = cfg.diagnostics.requested
    order = list(STAGES[: last + 1])
    if "diagnose" in order and "forecast" in order:
        order.remove("forecast")
        order.insert(order.index("diagnose") + 1, "forecast")
    for stage in order:
        if stage == "forecast" and "forecast" not in req:
            continue
        if stage == "diagnose" and not (set(req) & {"mle", "density", "forecast"}):
            continue
        t = time.perf_counter()
        try:
            _STAGE_FUNCS[stage](ctx)
        except (ConfigError, KeyboardInterrupt):
            raise
        except Exception as exc:
            ctx.timings[stage] = time.perf_counter() - t
            ctx.write_manifest()
            raise StageError(stage, exc, ctx.manifest()) from exc
        ctx.timings[stage] = time.perf_counter() - t
    if "forecast" in order and "forecast" in req:
        rate = _lyapunov_rate(ctx)
        if rate:
            ctx.metrics["horizon_lyapunov_times"] = ctx.metrics["horizon_time"] * rate
    ctx.write_manifest()
    return ctx
