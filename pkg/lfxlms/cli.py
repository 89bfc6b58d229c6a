"""
Command-line surface

    gen-rirs      primary-path RIR bank along the source segment (+ secondary path)
    gen-dataset   converged FxLMS filters for the autoencoder
    train         fit a plain / vae / infovae autoencoder
    tune-step     largest stable step size per controller
    run           full pipeline: build what is missing, run the experiment, write the report
    report        print a written report

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 tuning failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .acoustics import build_room, segment_positions, simulate_rir, simulate_rir_bank, write_rir_bank
from .config import load_config
from .errors import ConfigError, LfxlmsError
from .harness import (MetricsReport, build_experiment_config, default_grid, evaluate_acceptance,
                      format_report, load_models, probe_scenario, resolve_step_sizes, run_experiment,
                      tune_controller)
from .logger import configure_logger, get_logger
from .neural import AutoencoderModel, save_model
from .training import build_training_config, generate_dataset, read_dataset, train, write_dataset


def _seed(config: Dict[str, Any], args) -> int:
    return int(config["experiment"]["seed"] if args.seed is None else args.seed)


def _output_dir(config: Dict[str, Any], args) -> Path:
    return Path(getattr(args, "out_dir", None) or config["experiment"]["output_dir"])


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_gen_rirs(args, config: Dict[str, Any]) -> int:
    room = build_room(config["room"])
    geometry = config["geometry"]
    n = args.n or config["experiment"]["n_positions"]
    out = Path(args.out or _output_dir(config, args) / "rirs.bin")
    positions = segment_positions(geometry["segment"], n)
    irs = simulate_rir_bank(room, positions, geometry["error_mic"], workers=args.workers or 1)
    write_rir_bank(out, irs, positions, room.sample_rate)
    secondary = simulate_rir(room, geometry["speaker"], geometry["error_mic"]).taps
    write_rir_bank(out.with_name(out.stem + "_secondary.bin"), secondary[None, :],
                   np.asarray(geometry["speaker"])[None, :], room.sample_rate)
    print(f"Wrote {n} primary paths (L={room.rir_length}) to {out}")
    return 0


def _build_dataset(config: Dict[str, Any], seed: int, out: Path, n: Optional[int] = None,
                   workers: Optional[int] = None):
    room = build_room(config["room"])
    dataset = generate_dataset(room, config["geometry"]["segment"], n or config["experiment"]["n_positions"],
                               config["anc"], config["geometry"], seed=seed,
                               workers=workers or config["experiment"]["workers"])
    write_dataset(out, dataset)
    return dataset


def cmd_gen_dataset(args, config: Dict[str, Any]) -> int:
    out = Path(args.out or config["experiment"]["dataset"])
    dataset = _build_dataset(config, _seed(config, args), out, args.n, args.workers)
    print(f"Wrote {len(dataset)} converged filters to {out} (scale {dataset.scale:.4g})")
    return 0


def _train_model(config: Dict[str, Any], dataset, variant: str, mixup: bool, seed: int,
                 out: Path, epochs: Optional[int] = None, lr: Optional[float] = None):
    model_cfg = config["model"]
    model = AutoencoderModel.initialize(dataset.filter_len, model_cfg["hidden_dim"], model_cfg["latent_dim"],
                                        variant, seed=seed, ln_epsilon=model_cfg["ln_epsilon"])
    training = build_training_config(config["training"], mixup=mixup, epochs=epochs,
                                     learning_rate=lr, seed=seed)
    trained, history = train(model, dataset, training)
    save_model(trained, out)
    history.to_csv(out.with_name(out.stem + "_history.csv"), index=False)
    return trained, history


def cmd_train(args, config: Dict[str, Any]) -> int:
    dataset_path = Path(args.dataset or config["experiment"]["dataset"])
    dataset = read_dataset(dataset_path)
    variant = args.variant or config["model"]["variant"]
    mixup = config["training"]["mixup"] if args.mixup is None else args.mixup == "on"
    out = Path(args.out or Path(config["experiment"]["models_dir"]) / f"{variant}{'_mixup' if mixup else ''}.json")
    seed = config["model"]["seed"] if args.seed is None else args.seed
    _, history = _train_model(config, dataset, variant, mixup, seed, out, args.epochs, args.lr)

    print("\n" + "=" * 60)
    print(f"TRAINED {variant.upper()}{' + MIXUP' if mixup else ''}")
    print("=" * 60)
    if len(history):
        last = history.iloc[-1]
        print(f"Epochs:      {len(history)}")
        print(f"Total loss:  {last['total']:.4e}")
        print(f"Recon loss:  {last['recon']:.4e}")
        if pd.notna(last["validation"]):
            print(f"Validation:  {last['validation']:.4e}")
    print(f"Model:       {out}")
    return 0


def cmd_tune_step(args, config: Dict[str, Any]) -> int:
    exp = build_experiment_config(config, _seed(config, args))
    specs = [s for s in exp.controllers if s.kind != "off" and (not args.controller or s.name in args.controller)]
    if not specs:
        raise ConfigError(f"No controllers match {args.controller}")
    models = load_models(exp)
    latent_cfg = config["latent"]
    scenario = probe_scenario(exp, latent_cfg["probe_trials"], latent_cfg["probe_blocks"])
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    chosen = {}
    for spec in specs:
        chosen[spec.name] = tune_controller(exp, spec, models, grid or default_grid(spec, latent_cfg), scenario)
        print(f"{spec.name:<28} mu = {chosen[spec.name]:g}")
    out = _output_dir(config, args) / "step_sizes.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(chosen, f, indent=2)
    return 0


def prepare_artifacts(config: Dict[str, Any], exp, seed: int) -> Dict[str, Any]:
    """Build the dataset and any latent model the experiment needs but lacks"""
    logger = get_logger()
    missing = [s for s in exp.controllers if s.kind == "latent" and not Path(s.model).exists()]
    if not missing:
        return load_models(exp)

    dataset_path = Path(config["experiment"]["dataset"])
    if dataset_path.exists():
        dataset = read_dataset(dataset_path)
    else:
        logger.info(f"Dataset {dataset_path} missing; generating")
        dataset = _build_dataset(config, seed, dataset_path)

    built = set()
    for spec in missing:
        if spec.model in built:
            continue
        logger.info(f"Model {spec.model} missing; training {spec.variant or 'plain'} (mixup={spec.mixup})")
        _train_model(config, dataset, spec.variant or "plain", spec.mixup, config["model"]["seed"], Path(spec.model))
        built.add(spec.model)
    return load_models(exp)


def cmd_run(args, config: Dict[str, Any]) -> int:
    seed = _seed(config, args)
    exp = build_experiment_config(config, seed)
    models = prepare_artifacts(config, exp, seed)
    resolve_step_sizes(exp, models, config["latent"])

    report = run_experiment(exp, models)
    if config["experiment"].get("acceptance"):
        report.acceptance = evaluate_acceptance(report, exp.controllers)
    out = report.write(_output_dir(config, args))
    print(format_report(report))
    print(f"Report written to {out}")
    return 0


def cmd_report(args, config: Dict[str, Any]) -> int:
    path = _output_dir(config, args) / "report.json"
    if not path.exists():
        raise ConfigError(f"No report at {path}; run the experiment first")
    with open(path) as f:
        document = json.load(f)
    report = MetricsReport(document["config"], document["summary"], document["trials"], {},
                           acceptance=document.get("acceptance"))
    print(format_report(report))
    return 0


# =============================================================================
# ARGUMENTS
# =============================================================================

def parse_args(argv: Optional[List[str]] = None):
    parser = argparse.ArgumentParser(prog="lfxlms", description="Latent FxLMS active noise control simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument('--config', type=str, default=None, help='JSON config (merged over defaults)')
        p.add_argument('--seed', type=int, default=None, help='Master seed override')
        return p

    p = common(sub.add_parser('gen-rirs', help='Simulate the primary-path RIR bank'))
    p.add_argument('--n', type=int, default=None, help='Number of positions')
    p.add_argument('--out', type=str, default=None, help='Output container path')
    p.add_argument('--workers', type=int, default=None, help='Worker processes')
    p.set_defaults(func=cmd_gen_rirs)

    p = common(sub.add_parser('gen-dataset', help='Converge FxLMS filters along the segment'))
    p.add_argument('--n', type=int, default=None, help='Number of positions')
    p.add_argument('--out', type=str, default=None, help='Output dataset path')
    p.add_argument('--workers', type=int, default=None, help='Worker processes')
    p.set_defaults(func=cmd_gen_dataset)

    p = common(sub.add_parser('train', help='Train an autoencoder on the dataset'))
    p.add_argument('--variant', choices=['plain', 'vae', 'infovae'], default=None)
    p.add_argument('--mixup', choices=['on', 'off'], default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--lr', type=float, default=None, help='Learning rate')
    p.add_argument('--dataset', type=str, default=None, help='Dataset path')
    p.add_argument('--out', type=str, default=None, help='Model manifest path (.json)')
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser('tune-step', help='Largest stable step size per controller'))
    p.add_argument('--controller', action='append', default=None, help='Controller name (repeatable)')
    p.add_argument('--grid', type=str, default=None, help='Comma-separated candidate step sizes')
    p.add_argument('--out-dir', type=str, default=None)
    p.set_defaults(func=cmd_tune_step)

    p = common(sub.add_parser('run', help='Build missing artefacts and run the experiment'))
    p.add_argument('--out-dir', type=str, default=None)
    p.set_defaults(func=cmd_run)

    p = common(sub.add_parser('report', help='Print a written report'))
    p.add_argument('--out-dir', type=str, default=None)
    p.set_defaults(func=cmd_report)

    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    try:
        config = load_config(args.config)
        configure_logger(config["logging"])
        return args.func(args, config)
    except LfxlmsError as e:
        get_logger().error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
