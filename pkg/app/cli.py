"""
Command-line front end: generate | tune | run | sweep | schema

Exit codes: 0 success, 1 stability guarantee violated, 2 usage or config error
"""

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError

from app.config import settings
from app.schemas import ExperimentConfig, GenerationMetadata, RunSummary
from app.services.controller import DirectInverseController
from app.services.kernel_dictionary import KernelSpec
from app.services.plants import (
    ExcitationPolicy,
    PlantModel,
    ReferenceSignal,
    UnsupportedPlantError,
    build_plant,
    generate_training_data,
)
from app.services.projection_learning import SlabEmptyError
from app.services.set_membership import (
    Norm,
    TrainingData,
    TrainingDataError,
    read_training_csv,
    write_training_csv,
)
from app.services.simulation import run_closed_loop
from app.services.tuning import Tuning, TuningError, design_tuning, validate_theorem2_hypotheses

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Missing or unusable inputs"""


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        raise UsageError("--config is required")
    config_path = Path(path)
    if not config_path.exists():
        raise UsageError(f"Config file not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"Config file {config_path} is not valid JSON: {e}") from e
    return ExperimentConfig.model_validate(payload)


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(config: ExperimentConfig, out: Optional[str]) -> Path:
    if out:
        return Path(out)
    if config.paths.out:
        return Path(config.paths.out)
    return Path(settings.OUTPUT_DIR) / config.name


def _norm(config: ExperimentConfig) -> Norm:
    return Norm(config.norm)


def _reference(config: ExperimentConfig) -> ReferenceSignal:
    ref = config.reference
    return ReferenceSignal(
        kind=ref.kind,
        n_x=config.plant.n_x,
        r_bar=config.tuning.r_bar,
        value=ref.value,
        segments=[(s.t, s.value) for s in ref.segments],
        amplitude=ref.amplitude,
        offset=ref.offset,
        period=ref.period,
        phase=ref.phase,
        norm=_norm(config),
    )


def _x0(config: ExperimentConfig) -> List[float]:
    return list(config.x0) if config.x0 is not None else [0.0] * config.plant.n_x


def generate(config: ExperimentConfig, out_dir: Path) -> Tuple[TrainingData, Path]:
    plant = build_plant(config.plant, _norm(config))
    exc = config.excitation
    policy = ExcitationPolicy(
        kind=exc.kind, length=exc.length, seed=config.excitation_seed,
        grid_x=exc.grid_x, grid_u=exc.grid_u, levels=exc.levels, hold=exc.hold,
    )
    data, metadata = generate_training_data(plant, policy)
    metadata = GenerationMetadata(**metadata, config_name=config.name)
    data_path = write_training_csv(data, out_dir / "training.csv")
    _write_json(out_dir / "generation.json", metadata.model_dump())
    logger.info(f"Training data written to {data_path}")
    return data, data_path


def tune(config: ExperimentConfig, data: TrainingData, out_dir: Path) -> Tuple[Tuning, bool]:
    plant = build_plant(config.plant, _norm(config))
    tuning, _ = design_tuning(data, config.tuning, norm=_norm(config),
                              x_cap=plant.state_radius, seed=config.seed)
    report = validate_theorem2_hypotheses(
        tuning, data, x0=_x0(config), r_first=_reference(config)(1),
        x_box_radius=plant.state_radius, u_box=plant.input_box,
    )
    _write_json(out_dir / "tuning.json", tuning.to_dict())
    _write_json(out_dir / "validation.json", report.to_dict())
    if report.passed:
        logger.info("All stability hypotheses hold")
    else:
        logger.error(f"Stability hypotheses violated: {[c.name for c in report.failures if c.severity == 'error']}")
    return tuning, report.passed


def run(config: ExperimentConfig, data: TrainingData, tuning: Tuning, out_dir: Path,
        mode: Optional[str] = None, force: bool = False, timing: bool = False) -> RunSummary:
    plant: PlantModel = build_plant(config.plant, _norm(config))
    reference = _reference(config)
    report = validate_theorem2_hypotheses(
        tuning, data, x0=_x0(config), r_first=reference(1),
        x_box_radius=plant.state_radius, u_box=plant.input_box,
    )
    if not report.passed and not force:
        raise TuningError(
            f"Tuning fails the stability hypotheses ({[c.name for c in report.failures]}); rerun with --force to override"
        )
    if not report.passed:
        logger.warning("Running with a tuning that fails the stability hypotheses (--force)")

    controller = DirectInverseController(
        data, tuning, KernelSpec(width=config.kernel.width),
        mode=mode or config.mode, empty_slab_policy=config.empty_slab_policy,
    )
    controller.train()
    result = run_closed_loop(plant, controller, reference, config.horizon,
                             x0=_x0(config), seed=config.seed, timing=timing)

    out_dir.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(out_dir / "trace.csv", index=False, float_format="%.17g")
    summary = RunSummary(**result.summary, forced=force, hypotheses_passed=report.passed)
    _write_json(out_dir / "summary.json", summary.model_dump())
    controller.save(out_dir / "controller.joblib")
    return summary


def run_pipeline(config: ExperimentConfig, out_dir: Path, force: bool = False) -> Dict[str, Any]:
    """generate → tune → run in one directory; returns a summary row"""
    row: Dict[str, Any] = {"out": str(out_dir)}
    try:
        data, _ = generate(config, out_dir)
        tuning, passed = tune(config, data, out_dir)
        if not passed and not force:
            row.update(exit_code=EXIT_VIOLATION, stable=False)
            return row
        summary = run(config, data, tuning, out_dir, force=force)
        row.update(summary.model_dump())
        row["exit_code"] = EXIT_OK if summary.stable else EXIT_VIOLATION
    except (TuningError, SlabEmptyError) as e:
        logger.error(f"{out_dir}: {e}")
        row.update(exit_code=EXIT_VIOLATION, stable=False, error=str(e))
    return row


def _set_dotted(payload: Dict[str, Any], dotted: str, value: Any):
    keys = dotted.split(".")
    node = payload
    for key in keys[:-1]:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def sweep_cells(config: ExperimentConfig) -> List[Tuple[Dict[str, Any], ExperimentConfig]]:
    """Cartesian product of the sweep section, one validated config per cell"""
    parameters = config.sweep.parameters if config.sweep else {}
    names = sorted(parameters)
    cells = []
    for values in itertools.product(*(parameters[n] for n in names)):
        payload = config.model_dump()
        payload["sweep"] = None
        assignment = dict(zip(names, values))
        for name, value in assignment.items():
            _set_dotted(payload, name, value)
        cells.append((assignment, ExperimentConfig.model_validate(payload)))
    return cells


def _configure_logging(level: Optional[str]):
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inverse-control",
        description="Online direct data-driven inverse controller design and simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    common(sub.add_parser("generate", help="generate training data D_N"))

    p_tune = sub.add_parser("tune", help="estimate, select and validate the tuning")
    common(p_tune)
    p_tune.add_argument("--data", help="training CSV")

    p_run = sub.add_parser("run", help="train the controller and run the closed loop")
    common(p_run)
    p_run.add_argument("--data", help="training CSV")
    p_run.add_argument("--tuning", help="tuning JSON")
    p_run.add_argument("--mode", choices=["static", "adaptive"])
    p_run.add_argument("--force", action="store_true", help="run even if the tuning fails validation")
    p_run.add_argument("--timing", action="store_true", help="record per-step wallclock in the trace")

    p_sweep = sub.add_parser("sweep", help="run generate/tune/run over a parameter grid")
    common(p_sweep)
    p_sweep.add_argument("--workers", type=int, help="parallel workers (-1 for all cores)")
    p_sweep.add_argument("--force", action="store_true")

    p_schema = sub.add_parser("schema", help="print the experiment config JSON schema")
    p_schema.add_argument("--out", help="write the schema to this file")
    p_schema.add_argument("--log-level")
    return parser


def _cmd_generate(args, config: ExperimentConfig) -> int:
    generate(config, _out_dir(config, args.out))
    return EXIT_OK


def _data_path(args, config: ExperimentConfig, out_dir: Path) -> Path:
    path = Path(args.data or config.paths.data or out_dir / "training.csv")
    if not path.exists():
        raise UsageError(f"Training data file not found: {path}")
    return path


def _cmd_tune(args, config: ExperimentConfig) -> int:
    out_dir = _out_dir(config, args.out)
    data = read_training_csv(_data_path(args, config, out_dir))
    _, passed = tune(config, data, out_dir)
    return EXIT_OK if passed else EXIT_VIOLATION


def _cmd_run(args, config: ExperimentConfig) -> int:
    out_dir = _out_dir(config, args.out)
    data = read_training_csv(_data_path(args, config, out_dir))
    tuning_path = Path(args.tuning or config.paths.tuning or out_dir / "tuning.json")
    if not tuning_path.exists():
        raise UsageError(f"Tuning file not found: {tuning_path}")
    try:
        tuning = Tuning.from_dict(json.loads(tuning_path.read_text()))
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise UsageError(f"Could not read tuning file {tuning_path}: {e}") from e
    summary = run(config, data, tuning, out_dir, mode=args.mode, force=args.force, timing=args.timing)
    return EXIT_OK if summary.stable else EXIT_VIOLATION


def _cmd_sweep(args, config: ExperimentConfig) -> int:
    out_dir = _out_dir(config, args.out)
    cells = sweep_cells(config)
    workers = args.workers or (config.sweep.workers if config.sweep else None) or settings.SWEEP_WORKERS
    logger.info(f"Sweeping {len(cells)} cells with {workers} workers")
    rows = Parallel(n_jobs=workers)(
        delayed(run_pipeline)(cell, out_dir / f"cell_{i:03d}", args.force)
        for i, (_, cell) in enumerate(cells)
    )
    records = [{**assignment, **row} for (assignment, _), row in zip(cells, rows)]
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records).to_csv(out_dir / "sweep_summary.csv", index=False)
    return max((r["exit_code"] for r in records), default=EXIT_OK)


def _cmd_schema(args) -> int:
    schema = json.dumps(ExperimentConfig.model_json_schema(), indent=2)
    if args.out:
        Path(args.out).write_text(schema + "\n")
    else:
        print(schema)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    _configure_logging(args.log_level)

    if args.command == "schema":
        return _cmd_schema(args)

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.model_copy(update={"seed": args.seed})
        handler = {
            "generate": _cmd_generate,
            "tune": _cmd_tune,
            "run": _cmd_run,
            "sweep": _cmd_sweep,
        }[args.command]
        return handler(args, config)
    except (UsageError, ValidationError, TrainingDataError, UnsupportedPlantError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (TuningError, SlabEmptyError) as e:
        logger.error(str(e))
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
