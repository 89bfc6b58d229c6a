"""
Paired-trial experiments, convergence/gain metrics and reports

Every trial draws an initial and a post-switch primary position on the
segment plus one noise vector; every controller then runs on exactly that
realization. The report carries per-trial metrics, per-controller means,
mean traces and (for acceptance configs) the pass/fail evaluation.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .acoustics import RoomSpec, build_room, simulate_rir
from .anc import (AdaptiveController, ErrorTrace, FxLMSController, NoiseSource, NullController,
                  generate_noise, perturb_secondary_path, run_anc_trial)
from .config import ANC, EXPERIMENT, GEOMETRY, LATENT
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .latent import LatentFxLMSController, ProbeScenario, ProbeTrial, tune_step_size
from .logger import get_logger
from .neural import load_model
from .storage import realization_hash

SCHEMA_VERSION = 1
CONTROLLER_KINDS = ("fxlms", "latent", "off")


# =============================================================================
# METRICS
# =============================================================================

def _mse(trace: Union[ErrorTrace, np.ndarray]) -> np.ndarray:
    return trace.block_mse if isinstance(trace, ErrorTrace) else np.asarray(trace, dtype=np.float64)


def convergence_time(trace: Union[ErrorTrace, np.ndarray], rho: float = EXPERIMENT["rho"],
                     steady_window: int = EXPERIMENT["steady_window"]) -> Optional[int]:
    """
    Earliest block k with e_k^2 <= (1 + rho) e_inf^2.

    e_inf^2 is the mean of the last steady_window blocks. None means the
    trace never reaches the threshold.
    """
    mse = _mse(trace)
    if mse.size <= steady_window:
        raise ShapeError(f"Trace of {mse.size} blocks is not longer than the {steady_window}-block window")
    steady = mse[-steady_window:].mean()
    hits = np.flatnonzero(mse <= (1.0 + rho) * steady)
    return int(hits[0]) if hits.size else None


def steady_state(trace: Union[ErrorTrace, np.ndarray], steady_window: int = EXPERIMENT["steady_window"]) -> float:
    return float(_mse(trace)[-steady_window:].mean())


def anc_gain_db(trace_on: Union[ErrorTrace, np.ndarray], trace_off: Union[ErrorTrace, np.ndarray],
                steady_window: int = EXPERIMENT["steady_window"]) -> float:
    """10 log10(OFF steady state / ON steady state); +inf when ON reaches 0"""
    on, off = _mse(trace_on), _mse(trace_off)
    if on.size != off.size:
        raise ShapeError(f"Traces differ in length: {on.size} vs {off.size}")
    on_ss, off_ss = on[-steady_window:].mean(), off[-steady_window:].mean()
    if on_ss == 0:
        return 0.0 if off_ss == 0 else math.inf
    return float(10.0 * np.log10(off_ss / on_ss))


def average_traces(traces: Sequence[Union[ErrorTrace, np.ndarray]]) -> ErrorTrace:
    """Elementwise mean, accumulated in the given order"""
    if not traces:
        raise DomainError("Cannot average an empty set of traces")
    first = traces[0]
    total = np.zeros_like(_mse(first))
    for trace in traces:
        mse = _mse(trace)
        if mse.size != total.size:
            raise ShapeError(f"Trace lengths differ: {mse.size} vs {total.size}")
        total += mse
    if isinstance(first, ErrorTrace):
        return ErrorTrace(total / len(traces), first.block_size, first.sample_rate)
    return ErrorTrace(total / len(traces))


# =============================================================================
# CONFIG
# =============================================================================

@dataclass
class ControllerSpec:
    name: str
    kind: str = "fxlms"
    mu: Union[float, str] = ANC["mu"]          # "auto" = tune before running
    scheme: str = LATENT["scheme"]
    model: Optional[str] = None
    variant: Optional[str] = None
    mixup: bool = False
    denominator_mode: str = LATENT["denominator_mode"]
    epsilon: float = ANC["epsilon"]

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ConfigError(f"Controller '{self.name}': kind must be one of {CONTROLLER_KINDS}")
        if self.kind == "latent" and not self.model:
            raise ConfigError(f"Latent controller '{self.name}' needs a model path")
        if self.mu != "auto" and float(self.mu) < 0:
            raise ConfigError(f"Controller '{self.name}': step size must be >= 0")

    @property
    def needs_tuning(self) -> bool:
        return self.mu == "auto"


@dataclass
class ExperimentConfig:
    room: RoomSpec = field(default_factory=RoomSpec)
    speaker: Sequence[float] = tuple(GEOMETRY["speaker"])
    error_mic: Sequence[float] = tuple(GEOMETRY["error_mic"])
    segment: Sequence[Sequence[float]] = tuple(tuple(p) for p in GEOMETRY["segment"])
    positions: Optional[List[List[List[float]]]] = None   # fixed [initial, post] pairs per trial
    n_trials: int = EXPERIMENT["n_trials"]
    n_blocks: int = EXPERIMENT["n_blocks"]
    switch_block: int = EXPERIMENT["switch_block"]
    block_size: int = ANC["block_size"]
    steady_window: int = EXPERIMENT["steady_window"]
    rho: float = EXPERIMENT["rho"]
    controllers: List[ControllerSpec] = field(default_factory=list)
    seed: int = EXPERIMENT["seed"]
    noise_kind: str = ANC["noise_kind"]
    noise_variance: float = ANC["noise_variance"]
    g_hat_perturbation: float = ANC["g_hat_perturbation"]
    divergence_factor: float = ANC["divergence_factor"]
    workers: int = EXPERIMENT["workers"]

    def __post_init__(self):
        if not 0 < self.switch_block < self.n_blocks:
            raise ConfigError(f"switch_block must lie in (0, n_blocks), got {self.switch_block}/{self.n_blocks}")
        if not 0 < self.steady_window < self.n_blocks - self.switch_block:
            raise ConfigError("steady_window must be shorter than the post-switch segment")
        if self.steady_window >= self.switch_block:
            raise ConfigError("steady_window must be shorter than the pre-switch segment")
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        names = [c.name for c in self.controllers]
        if len(names) != len(set(names)):
            raise ConfigError(f"Controller names must be unique: {names}")


def build_controller_specs(entries: Sequence[Dict[str, Any]]) -> List[ControllerSpec]:
    known = ControllerSpec.__dataclass_fields__
    specs = []
    for entry in entries:
        unknown = set(entry) - set(known)
        if unknown:
            raise ConfigError(f"Unknown controller fields {sorted(unknown)} in {entry.get('name')}")
        if "name" not in entry:
            raise ConfigError("Every controller needs a name")
        specs.append(ControllerSpec(**entry))
    return specs


def build_experiment_config(config: Dict[str, Any], seed: Optional[int] = None) -> ExperimentConfig:
    """ExperimentConfig from a merged config document"""
    exp, anc, geometry = config["experiment"], config["anc"], config["geometry"]
    return ExperimentConfig(
        room=build_room(config["room"]),
        speaker=tuple(geometry["speaker"]),
        error_mic=tuple(geometry["error_mic"]),
        segment=tuple(tuple(p) for p in geometry["segment"]),
        positions=exp.get("positions"),
        n_trials=int(exp["n_trials"]),
        n_blocks=int(exp["n_blocks"]),
        switch_block=int(exp["switch_block"]),
        block_size=int(anc["block_size"]),
        steady_window=int(exp["steady_window"]),
        rho=float(exp["rho"]),
        controllers=build_controller_specs(exp["controllers"]),
        seed=int(exp["seed"] if seed is None else seed),
        noise_kind=anc["noise_kind"],
        noise_variance=float(anc["noise_variance"]),
        g_hat_perturbation=float(anc["g_hat_perturbation"]),
        divergence_factor=float(anc["divergence_factor"]),
        workers=int(exp.get("workers", 1)),
    )


# =============================================================================
# TRIALS
# =============================================================================

@dataclass
class TrialRealization:
    index: int
    initial: np.ndarray
    post_switch: np.ndarray
    noise_seed: int


def draw_realizations(cfg: ExperimentConfig, count: int, seed: int) -> List[TrialRealization]:
    """Seeded (initial, post-switch, noise) draws; one independent stream per trial"""
    start, end = (np.asarray(p, dtype=np.float64) for p in cfg.segment)
    realizations = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        if cfg.positions:
            initial, post = (np.asarray(p, dtype=np.float64) for p in cfg.positions[i % len(cfg.positions)])
        else:
            u = rng.uniform(0.0, 1.0, 2)
            initial, post = start + u[0] * (end - start), start + u[1] * (end - start)
        realizations.append(TrialRealization(i, initial, post, int(rng.integers(0, 2 ** 63 - 1))))
    return realizations


def _secondary_paths(cfg: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray]:
    g = simulate_rir(cfg.room, cfg.speaker, cfg.error_mic).taps
    return g, perturb_secondary_path(g, cfg.g_hat_perturbation, cfg.seed)


def _check_distance(cfg: ExperimentConfig, position: np.ndarray, index: int):
    mic = np.asarray(cfg.error_mic)
    if np.linalg.norm(position - mic) <= np.linalg.norm(np.asarray(cfg.speaker) - mic):
        raise ConfigError(f"Trial {index}: primary source {position.tolist()} is not farther "
                          f"from the error mic than the speaker")


def build_controller(spec: ControllerSpec, length: int, g_hat: np.ndarray,
                     models: Dict[str, Any]) -> AdaptiveController:
    """Instantiate a controller; latent models come from the preloaded map"""
    if spec.needs_tuning:
        raise ConfigError(f"Controller '{spec.name}' still has step size 'auto'; tune it first")
    if spec.kind == "off":
        return NullController(length, spec.name)
    if spec.kind == "fxlms":
        return FxLMSController(length, g_hat, mu=float(spec.mu), epsilon=spec.epsilon, name=spec.name)
    model = models[spec.model]
    scale = float(model.metadata.get("dataset_scale", 1.0)) if hasattr(model, "metadata") else 1.0
    return LatentFxLMSController(model, scale, spec.scheme, float(spec.mu), spec.epsilon,
                                 spec.denominator_mode, name=spec.name)


def load_models(cfg: ExperimentConfig) -> Dict[str, Any]:
    models = {}
    for spec in cfg.controllers:
        if spec.kind == "latent" and spec.model not in models:
            models[spec.model] = load_model(spec.model)
    return models


def run_trial(cfg: ExperimentConfig, realization: TrialRealization, g: np.ndarray,
              g_hat: np.ndarray, models: Dict[str, Any]) -> Dict[str, Any]:
    """All controllers on one shared realization"""
    logger = get_logger()
    index = realization.index
    for position in (realization.initial, realization.post_switch):
        _check_distance(cfg, position, index)
    p_initial = simulate_rir(cfg.room, realization.initial, cfg.error_mic).taps
    p_post = simulate_rir(cfg.room, realization.post_switch, cfg.error_mic).taps
    schedule = [(0, p_initial), (cfg.switch_block, p_post)]
    noise = NoiseSource(cfg.noise_kind, cfg.noise_variance, realization.noise_seed)
    x = generate_noise(noise, cfg.n_blocks * cfg.block_size)
    logger.trial(index, "start", positions=[realization.initial.tolist(), realization.post_switch.tolist()])

    results = {"trial": index, "off": None, "controllers": {}}
    for spec in cfg.controllers:
        record: Dict[str, Any] = {
            "realization": realization_hash(x, realization.initial, realization.post_switch),
        }
        controller = build_controller(spec, cfg.room.rir_length, g_hat, models)
        try:
            trace = run_anc_trial(schedule, g, g_hat, x, controller, cfg.n_blocks, cfg.block_size,
                                  cfg.room.sample_rate, divergence_factor=cfg.divergence_factor)
        except NumericError as e:
            logger.warning(f"trial {index} [{spec.name}] failed: {e}")
            record.update({"failed": True, "error": str(e), "block": e.block_index})
            results["controllers"][spec.name] = record
            continue

        if results["off"] is None:
            results["off"] = ErrorTrace(trace.off_mse, cfg.block_size, cfg.room.sample_rate)
        record.update(trial_metrics(cfg, trace, results["off"]))
        record["failed"] = False
        record["trace"] = trace
        results["controllers"][spec.name] = record
        logger.controller_result(index, spec.name, {k: v for k, v in record.items() if k != "trace"})

    logger.trial(index, "end", realization=realization_hash(x, realization.initial, realization.post_switch))
    return results


def trial_metrics(cfg: ExperimentConfig, trace: ErrorTrace, off: ErrorTrace) -> Dict[str, Any]:
    mse = trace.block_mse
    switch = cfg.switch_block
    return {
        "convergence_initial": convergence_time(mse[:switch], cfg.rho, cfg.steady_window),
        "convergence_post_switch": convergence_time(mse[switch:], cfg.rho, cfg.steady_window),
        "steady_mse": steady_state(mse, cfg.steady_window),
        "gain_db": anc_gain_db(mse, off.block_mse, cfg.steady_window),
    }


def _trial_job(args):
    cfg, realization, g, g_hat, models = args
    return run_trial(cfg, realization, g, g_hat, models)


# =============================================================================
# REPORT
# =============================================================================

def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    """Mean of the defined entries; a +inf entry makes the mean +inf"""
    defined = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(defined)) if defined else None


@dataclass
class MetricsReport:
    config: Dict[str, Any]
    summary: Dict[str, Dict[str, Any]]
    trials: List[Dict[str, Any]]
    mean_traces: Dict[str, ErrorTrace]
    trial_traces: Dict[str, List[ErrorTrace]] = field(default_factory=dict)
    acceptance: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "summary": self.summary,
            "trials": self.trials,
            "acceptance": self.acceptance,
        }

    def table(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_dict(self.summary, orient="index")
        frame.index.name = "controller"
        return frame

    def write(self, output_dir: Union[str, Path]) -> Path:
        """report.json, report.txt, trials.csv and traces/*.csv"""
        out = Path(output_dir)
        traces_dir = out / "traces"
        traces_dir.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        with open(out / "report.txt", "w") as f:
            f.write(format_report(self))
        pd.DataFrame(self.trials).to_csv(out / "trials.csv", index=False)
        for name, trace in self.mean_traces.items():
            trace.write_csv(traces_dir / f"{name}_mean.csv")
        for name, traces in self.trial_traces.items():
            for i, trace in enumerate(traces):
                trace.write_csv(traces_dir / f"{name}_trial{i:03d}.csv")
        return out


def format_report(report: MetricsReport) -> str:
    lines = ["=" * 60, "LATENT FxLMS EXPERIMENT", "=" * 60]
    cfg = report.config
    lines.append(f"Trials: {cfg['n_trials']} | Blocks: {cfg['n_blocks']} | Switch: {cfg['switch_block']} "
                 f"| rho: {cfg['rho']} | seed: {cfg['seed']}")
    lines.append("")
    lines.append(report.table().to_string(float_format=lambda v: f"{v:.2f}"))
    if report.acceptance:
        lines += ["", "=" * 60, "ACCEPTANCE", "=" * 60]
        for item in report.acceptance["criteria"]:
            status = "PASS" if item["passed"] else ("FAIL" if item["gating"] else "info")
            lines.append(f"  [{status:<4}] {item['name']}: {item['detail']}")
        lines.append(f"  overall: {'PASS' if report.acceptance['passed'] else 'FAIL'}")
    return "\n".join(lines) + "\n"


def _config_echo(cfg: ExperimentConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg), default=str))


def aggregate(cfg: ExperimentConfig, trial_results: List[Dict[str, Any]]) -> MetricsReport:
    """Per-controller means over successful trials, in trial order"""
    rows, summary, mean_traces, trial_traces = [], {}, {}, {}
    offs = [r["off"] for r in trial_results if r["off"] is not None]
    if offs:
        mean_traces["anc_off"] = average_traces(offs)

    for spec in cfg.controllers:
        records = [r["controllers"][spec.name] for r in trial_results]
        ok = [rec for rec in records if not rec["failed"]]
        traces = [rec["trace"] for rec in ok]
        for r in trial_results:
            rec = r["controllers"][spec.name]
            rows.append({"trial": r["trial"], "controller": spec.name,
                         **{k: v for k, v in rec.items() if k != "trace"}})
        entry = {
            "mean_convergence_initial": _mean_or_none([rec["convergence_initial"] for rec in ok]),
            "mean_convergence_post_switch": _mean_or_none([rec["convergence_post_switch"] for rec in ok]),
            "mean_steady_mse": _mean_or_none([rec["steady_mse"] for rec in ok]),
            "mean_gain_db": _mean_or_none([rec["gain_db"] for rec in ok]),
            "failures": len(records) - len(ok),
            "infinite_gain": sum(1 for rec in ok if rec["gain_db"] == math.inf),
            "not_converged": sum(1 for rec in ok if rec["convergence_initial"] is None
                                 or rec["convergence_post_switch"] is None),
            "mu": spec.mu,
        }
        if traces:
            mean_trace = average_traces(traces)
            mean_traces[spec.name] = mean_trace
            trial_traces[spec.name] = traces
            if "anc_off" in mean_traces:
                entry["gain_db_mean_trace"] = anc_gain_db(mean_trace, mean_traces["anc_off"], cfg.steady_window)
        summary[spec.name] = entry

    return MetricsReport(_config_echo(cfg), summary, rows, mean_traces, trial_traces)


def run_experiment(cfg: ExperimentConfig, models: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """Run every controller over n_trials paired realizations"""
    logger = get_logger()
    if not cfg.controllers:
        raise ConfigError("Experiment lists no controllers")
    models = load_models(cfg) if models is None else models
    g, g_hat = _secondary_paths(cfg)
    realizations = draw_realizations(cfg, cfg.n_trials, cfg.seed)
    logger.info(f"Running {cfg.n_trials} trials x {len(cfg.controllers)} controllers "
                f"({cfg.n_blocks} blocks, switch at {cfg.switch_block}, workers={cfg.workers})")

    jobs = [(cfg, r, g, g_hat, models) for r in realizations]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(job) for job in jobs]

    report = aggregate(cfg, results)
    logger.experiment_summary(report.summary)
    return report


# =============================================================================
# STEP-SIZE RESOLUTION
# =============================================================================

def probe_scenario(cfg: ExperimentConfig, n_trials: int = LATENT["probe_trials"],
                   n_blocks: int = LATENT["probe_blocks"]) -> ProbeScenario:
    """Probe trials on realizations disjoint from the experiment's (seed + 1)"""
    g, g_hat = _secondary_paths(cfg)
    switch = min(cfg.switch_block, n_blocks // 2)
    trials = []
    for r in draw_realizations(cfg, n_trials, cfg.seed + 1):
        schedule = [(0, simulate_rir(cfg.room, r.initial, cfg.error_mic).taps),
                    (switch, simulate_rir(cfg.room, r.post_switch, cfg.error_mic).taps)]
        trials.append(ProbeTrial(schedule, g, g_hat, NoiseSource(cfg.noise_kind, cfg.noise_variance, r.noise_seed)))
    return ProbeScenario(trials, n_blocks, cfg.block_size, cfg.divergence_factor)


def default_grid(spec: ControllerSpec, latent_cfg: Dict[str, Any] = LATENT) -> List[float]:
    if spec.kind == "fxlms":
        return list(latent_cfg["fxlms_grid"])
    return list(latent_cfg["latent_grid"] if spec.scheme == "latent" else latent_cfg["data_grid"])


def tune_controller(cfg: ExperimentConfig, spec: ControllerSpec, models: Dict[str, Any],
                    grid: Optional[Sequence[float]] = None,
                    scenario: Optional[ProbeScenario] = None) -> float:
    """Largest stable step size for one controller spec"""
    scenario = scenario or probe_scenario(cfg)
    grid = grid or default_grid(spec)
    g_hat = scenario.trials[0].g_hat

    def factory(step: float) -> AdaptiveController:
        return build_controller(ControllerSpec(**{**asdict(spec), "mu": step}), cfg.room.rir_length, g_hat, models)

    return tune_step_size(factory, scenario, grid)


def resolve_step_sizes(cfg: ExperimentConfig, models: Dict[str, Any],
                       latent_cfg: Dict[str, Any] = LATENT) -> Dict[str, float]:
    """Replace every 'auto' step size in place; returns the chosen values"""
    pending = [spec for spec in cfg.controllers if spec.needs_tuning]
    if not pending:
        return {}
    scenario = probe_scenario(cfg, latent_cfg["probe_trials"], latent_cfg["probe_blocks"])
    chosen = {}
    for spec in pending:
        spec.mu = tune_controller(cfg, spec, models, default_grid(spec, latent_cfg), scenario)
        chosen[spec.name] = spec.mu
        get_logger().info(f"Tuned {spec.name}: mu={spec.mu:g}")
    return chosen


# =============================================================================
# ACCEPTANCE
# =============================================================================

def _paired_wins(report: MetricsReport, name: str, baseline: str, key: str) -> Tuple[int, int]:
    by_trial: Dict[int, Dict[str, Any]] = {}
    for row in report.trials:
        by_trial.setdefault(row["trial"], {})[row["controller"]] = row
    wins = total = 0
    for rows in by_trial.values():
        a, b = rows.get(name), rows.get(baseline)
        if not a or not b or a["failed"] or b["failed"]:
            continue
        total += 1
        if a[key] is not None and (b[key] is None or a[key] < b[key]):
            wins += 1
    return wins, total


def evaluate_acceptance(report: MetricsReport, specs: Sequence[ControllerSpec],
                        baseline: str = "fxlms", win_fraction: float = 0.8,
                        parity_db: float = 5.0, vae_gap_db: float = 3.0,
                        fxlms_floor_db: float = 25.0) -> Dict[str, Any]:
    """Desk-scale pass/fail checks of the latent controllers against the FxLMS baseline"""
    if baseline not in report.summary:
        raise ConfigError(f"Acceptance needs a baseline controller named '{baseline}'")
    base = report.summary[baseline]
    latent = [s for s in specs if s.kind == "latent"]
    criteria = []

    def add(name: str, passed: bool, detail: str, gating: bool = True):
        criteria.append({"name": name, "passed": bool(passed), "gating": gating, "detail": detail})

    def gain(name):
        return report.summary[name]["mean_gain_db"]

    for spec in latent:
        if spec.variant == "vae":
            continue
        row = report.summary[spec.name]
        wins_i, total = _paired_wins(report, spec.name, baseline, "convergence_initial")
        wins_p, _ = _paired_wins(report, spec.name, baseline, "convergence_post_switch")
        need = math.ceil(win_fraction * total) if total else 1
        faster = (row["mean_convergence_initial"] is not None and base["mean_convergence_initial"] is not None
                  and row["mean_convergence_initial"] < base["mean_convergence_initial"]
                  and row["mean_convergence_post_switch"] is not None
                  and base["mean_convergence_post_switch"] is not None
                  and row["mean_convergence_post_switch"] < base["mean_convergence_post_switch"])
        add(f"faster_than_{baseline}:{spec.name}", faster and wins_i >= need and wins_p >= need,
            f"initial {row['mean_convergence_initial']} vs {base['mean_convergence_initial']}, "
            f"post {row['mean_convergence_post_switch']} vs {base['mean_convergence_post_switch']}, "
            f"paired wins {wins_i}/{total} and {wins_p}/{total} (need {need})")

        g_latent, g_base = gain(spec.name), gain(baseline)
        parity = g_latent is not None and g_base is not None and g_base - g_latent <= parity_db
        add(f"steady_state_parity:{spec.name}", parity,
            f"gain {g_latent} dB vs {g_base} dB (tolerance {parity_db} dB)")

    for variant in ("plain", "infovae"):
        for spec in latent:
            if spec.variant != variant or not spec.mixup:
                continue
            partner = next((s for s in latent if s.variant == variant and not s.mixup
                            and s.scheme == spec.scheme), None)
            if partner is None:
                continue
            with_mix = report.summary[spec.name]["mean_convergence_initial"]
            without = report.summary[partner.name]["mean_convergence_initial"]
            add(f"mixup_benefit:{spec.name}", with_mix is not None and without is not None and with_mix <= without,
                f"{with_mix} (mixup) vs {without} ({partner.name})")

    for spec in latent:
        if spec.variant == "vae":
            g_vae, g_base = gain(spec.name), gain(baseline)
            worse = g_vae is None or (g_base is not None and g_base - g_vae >= vae_gap_db)
            add(f"vae_degradation:{spec.name}", worse, f"gain {g_vae} dB vs {g_base} dB", gating=False)

    g_base = gain(baseline)
    add(f"{baseline}_gain_floor", g_base is not None and g_base >= fxlms_floor_db,
        f"{g_base} dB (floor {fxlms_floor_db} dB)")

    return {"criteria": criteria, "passed": all(c["passed"] for c in criteria if c["gating"])}
