#!/usr/bin/env python3
"""
Connectome Behavior Prediction System
Command-line entry point: connectome-predict <simulate|fit|cv|analyze> [flags]
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

sys.path.insert(0, str(Path(__file__).parent))

from src.analysis import analyze_run
from src.data_manager import DataManager
from src.errors import ConfigError, ConnectomePredictError
from src.models import METHODS, SELECT_MODES, CVConfig, RunConfig, RunResults, SamplerConfig
from src.prediction_engine import PredictionEngine
from src.report import emit_run, load_run, read_manifest
from src.simulation import default_params, simulate, write_synthetic_dataset

logger = logging.getLogger("connectome_predict")


def load_env_file(path: str = ".env"):
    """Load environment variables from a .env file if it exists"""
    env_path = Path(path)
    if env_path.exists():
        with open(env_path, "r") as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    key, value = line.split("=", 1)
                    os.environ.setdefault(key.strip(), value.strip())


class WarningCounter(logging.Handler):
    """Counts WARNING records so the run manifest can report them"""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record: logging.LogRecord):
        if record.levelno == logging.WARNING:
            self.count += 1


def setup_logging(log_dir: str = "logs", verbose: bool = False) -> WarningCounter:
    """Setup logging configuration"""
    path = Path(log_dir)
    path.mkdir(parents=True, exist_ok=True)
    counter = WarningCounter()

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(path / 'connectome_predict.log'),
            logging.StreamHandler(),
            counter,
        ],
        force=True,
    )
    return counter


def _csv_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in _csv_list(text) or []]
    except ValueError:
        raise ConfigError(f"Expected comma-separated numbers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="connectome-predict",
        description="Joint latent-space modeling of functional connectomes and behavior",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--out", help="Output directory")
        sub.add_argument("--seed", type=int, help="Run seed (overrides CP_SEED)")
        sub.add_argument("--threads", type=int, help="Concurrent tasks (overrides CP_THREADS)")
        sub.add_argument("--verbose", action="store_true", help="Debug logging")

    def sampler(sub):
        defaults = SamplerConfig()
        sub.add_argument("--manifest", required=True, help="Dataset manifest JSON")
        sub.add_argument("--conditions", help="Comma-separated condition filter")
        sub.add_argument("--categories", help="Comma-separated behavior category filter")
        sub.add_argument("--burn-in", type=int, default=defaults.burn_in)
        sub.add_argument("--samples", type=int, default=defaults.samples)
        sub.add_argument("--thin", type=int, default=defaults.thin)
        sub.add_argument("--chains", type=int, default=defaults.chains)
        sub.add_argument("--inits", type=int, default=defaults.inits)
        sub.add_argument("--sign-anchor", choices=["latent_mean", "behavior"], default=defaults.sign_anchor)

    simulate_parser = subparsers.add_parser("simulate", help="Write a synthetic dataset")
    common(simulate_parser)
    simulate_parser.add_argument("--V", type=int, default=30, help="Number of nodes")
    simulate_parser.add_argument("--subjects", type=int, default=80)
    simulate_parser.add_argument("--P", type=int, default=4, help="Indicators per category")
    simulate_parser.add_argument("--conditions", default="Rest1", help="Comma-separated conditions")
    simulate_parser.add_argument("--signal-nodes", default="0.4,-0.4,0.3,-0.3,0.2,-0.2",
                                 help="Cross-covariances of nodes 1..k")
    simulate_parser.add_argument("--cross-scale", type=float, default=1.0)
    simulate_parser.add_argument("--node-var", type=float, default=1.0)
    simulate_parser.add_argument("--sigma2-c", type=float, default=0.25)
    simulate_parser.add_argument("--sigma2-b", type=float, default=0.5)
    simulate_parser.add_argument("--latent-mean", type=float, default=1.5)

    fit_parser = subparsers.add_parser("fit", help="Full-sample fit of every (condition, category)")
    common(fit_parser)
    sampler(fit_parser)

    cv_parser = subparsers.add_parser("cv", help="Cross-validated prediction")
    common(cv_parser)
    sampler(cv_parser)
    cv_defaults = CVConfig()
    cv_parser.add_argument("--train-fraction", type=float, default=cv_defaults.train_fraction)
    cv_parser.add_argument("--repeats", type=int, default=cv_defaults.repeats)
    cv_parser.add_argument("--partitioned", action="store_true", help="True K-fold partitions")
    cv_parser.add_argument("--methods", default=",".join(cv_defaults.methods),
                           help=f"Comma-separated subset of {','.join(METHODS)}")
    cv_parser.add_argument("--select-by", choices=list(SELECT_MODES), default=cv_defaults.select_by)
    cv_parser.add_argument("--cpm-threshold", type=float, default=cv_defaults.cpm_threshold)

    analyze_parser = subparsers.add_parser("analyze", help="Biomarkers, regressions and diagnostics of a run")
    common(analyze_parser)
    analyze_parser.add_argument("--run", required=True, help="Run directory of a prior fit or cv")
    analyze_parser.add_argument("--manifest", help="Dataset manifest (defaults to the one the run used)")
    analyze_parser.add_argument("--top-k", type=int, default=10)
    return parser


def _env_int(name: str, default: int) -> int:
    value = os.environ.get(name)
    if value is None or value.strip() == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got '{value}'") from None


def create_config(args: argparse.Namespace) -> RunConfig:
    """Create configuration from environment variables overlaid by flags"""
    seed = args.seed if args.seed is not None else _env_int("CP_SEED", 0)
    threads = args.threads if args.threads is not None else _env_int("CP_THREADS", os.cpu_count() or 1)
    sampler = SamplerConfig(seed=seed)
    if hasattr(args, "burn_in"):
        sampler = SamplerConfig(burn_in=args.burn_in, samples=args.samples, thin=args.thin,
                                chains=args.chains, inits=args.inits, seed=seed,
                                sign_anchor=args.sign_anchor)
    cv = CVConfig()
    if args.command == "cv":
        cv = CVConfig(train_fraction=args.train_fraction, repeats=args.repeats, partitioned=args.partitioned,
                      select_by=args.select_by, methods=tuple(_csv_list(args.methods) or ()),
                      cpm_threshold=args.cpm_threshold)
    return RunConfig(
        command=args.command,
        manifest_path=getattr(args, "manifest", None),
        out_dir=args.out or "runs/latest",
        conditions=_csv_list(getattr(args, "conditions", None)) if args.command != "simulate" else None,
        categories=_csv_list(getattr(args, "categories", None)),
        sampler=sampler,
        cv=cv,
        threads=threads,
        run_dir=getattr(args, "run", None),
        log_dir=os.environ.get("CP_LOG_DIR", "logs"),
        verbose=args.verbose,
    )


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> Path:
    """Write a synthetic dataset with ground truth"""
    params = default_params(
        V=args.V, n_subjects=args.subjects, P=args.P, cross=_float_list(args.signal_nodes),
        cross_scale=args.cross_scale, node_var=args.node_var, latent_mean=args.latent_mean,
        sigma2_c=args.sigma2_c, sigma2_b=args.sigma2_b, conditions=_csv_list(args.conditions) or ["Rest1"],
        seed=config.sampler.seed,
    )
    dataset, truth = simulate(params, config.sampler.seed)
    out = args.out or "data/synthetic"
    manifest_path = write_synthetic_dataset(dataset, truth, out)
    print(f"Synthetic dataset written: {manifest_path}")
    return manifest_path


def cmd_run(config: RunConfig, counter: WarningCounter):
    """fit or cv: load, run the engine, emit the run directory"""
    timings = {}
    started = time.perf_counter()
    manager = DataManager(config.manifest_path)
    timings["load"] = time.perf_counter() - started
    logger.info(f"Dataset: {manager.get_summary_stats()}")

    engine = PredictionEngine(config, manager.dataset)
    started = time.perf_counter()
    results = engine.run_cv() if config.command == "cv" else engine.run_fit()
    timings[config.command] = time.perf_counter() - started

    echo = config.to_dict()
    echo["manifest_path"] = str(Path(config.manifest_path).resolve())
    echo.pop("log_dir", None)
    echo.pop("out_dir", None)
    manifest = emit_run(results, config.out_dir, command=config.command, config=echo,
                        input_files=manager.input_files, timings=timings,
                        warning_count=counter.count)
    print(f"{config.command} finished: {len(manifest.outputs)} files in {config.out_dir}")
    return manifest


def cmd_analyze(args: argparse.Namespace, config: RunConfig, counter: WarningCounter):
    """Analyze a prior fit or cv run"""
    run_dir = Path(config.run_dir)
    results = load_run(run_dir)
    manifest_path = args.manifest or read_manifest(run_dir).get("config", {}).get("manifest_path")
    if not manifest_path:
        raise ConfigError(f"Run {run_dir} does not record a dataset manifest; pass --manifest")
    manager = DataManager(manifest_path)

    started = time.perf_counter()
    outputs = analyze_run(results.summaries, results.records, results.traces,
                          manager.dataset.atlas, manager.dataset, k=args.top_k)
    timings = {"analyze": time.perf_counter() - started}

    out_dir = Path(args.out) if args.out else run_dir / "analysis"
    echo = {"run_dir": str(run_dir), "manifest_path": str(manifest_path), "top_k": args.top_k}
    manifest = emit_run(RunResults(), out_dir, command="analyze", config=echo,
                        input_files=manager.input_files, extra=outputs, timings=timings,
                        warning_count=counter.count)
    print(f"analyze finished: {len(manifest.outputs)} files in {out_dir}, {manifest.warning_count} warnings")
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    load_env_file()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = create_config(args)
    except ConnectomePredictError as e:
        print(f"Invalid configuration: {e}", file=sys.stderr)
        return 1
    counter = setup_logging(config.log_dir, config.verbose)

    try:
        if args.command == "simulate":
            cmd_simulate(args, config)
        elif args.command == "analyze":
            cmd_analyze(args, config, counter)
        else:
            cmd_run(config, counter)
    except ConnectomePredictError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
