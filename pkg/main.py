"""
Command-line entry point for sentinel.

    sentinel <command> [--config PATH] [--seed N] [--out DIR] [--set section.key=value ...]

Commands: synth, train, smooth, advtrain, anomaly, cascade, attack, eval,
pipeline, search. Exit codes: 0 success, 2 invalid input or missing
artifact, 1 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from sqlalchemy.exc import SQLAlchemyError

from config import ExperimentConfig, load_config, load_settings
from database import create_ledger_engine, init_db, resolve_database_url, session_scope
from models import AttackRecordRow, Run, Trial as TrialRow
from pipeline import (
    DETECTORS,
    REPORT_TABLE,
    STAGES,
    RunContext,
    manifest,
    read_attack_summary,
    run_advtrain,
    run_anomaly,
    run_attack,
    run_cascade,
    run_eval,
    run_pipeline,
    run_search,
    run_smooth,
    run_synth,
    run_train,
    write_manifest,
)
from search import Trial
from utils import EXIT_OK, SentinelError, canonical_json, handle_command_error

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="run directory (default: $SENTINEL_OUT_DIR or ./runs)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set mlp.epochs=5 (repeatable)")
    common.add_argument("--no-ledger", action="store_true", help="do not record the run in the ledger database")

    parser = argparse.ArgumentParser(prog="sentinel", description="Multi-step adversarially robust malware detection")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate and export the synthetic train/test split")
    sub.add_parser("train", parents=[common], help="train the vanilla (non-adversarial) MLP")
    sub.add_parser("smooth", parents=[common], help="train the teacher forest and export smoothed labels")
    advtrain = sub.add_parser("advtrain", parents=[common], help="adversarially train one detector")
    advtrain.add_argument("--detector", choices=DETECTORS, required=True)
    sub.add_parser("anomaly", parents=[common], help="fit the isolation forest on benign wAdvNet embeddings")
    sub.add_parser("cascade", parents=[common], help="assemble the multi-step cascade from saved models")
    attack = sub.add_parser("attack", parents=[common], help="run the genetic feature-space attack")
    attack.add_argument("--model", help="model or cascade file to attack (default: the run's cascade)")
    evaluate = sub.add_parser("eval", parents=[common], help="write the robustness report")
    evaluate.add_argument("--model", help="model or cascade file to evaluate (default: the run's cascade)")
    sub.add_parser("pipeline", parents=[common], help="full staged build, attack and report")
    search = sub.add_parser("search", parents=[common], help="random hyperparameter search for one stage")
    search.add_argument("--stage", choices=STAGES, required=True)
    search.add_argument("--trials", type=int, help="override the configured trial count")
    return parser


def dispatch(args: argparse.Namespace, ctx: RunContext, trials: List[Trial]):
    command = args.command
    if command == "synth":
        return run_synth(ctx)
    if command == "train":
        return run_train(ctx)
    if command == "smooth":
        return run_smooth(ctx)
    if command == "advtrain":
        return run_advtrain(ctx, args.detector)
    if command == "anomaly":
        return run_anomaly(ctx)
    if command == "cascade":
        return run_cascade(ctx)
    if command == "attack":
        return run_attack(ctx, args.model)
    if command == "eval":
        report = run_eval(ctx, args.model)
        print(ctx.path(REPORT_TABLE).read_text(encoding="utf-8"), end="")
        return report
    if command == "pipeline":
        report = run_pipeline(ctx)
        print(ctx.path(REPORT_TABLE).read_text(encoding="utf-8"), end="")
        return report
    if command == "search":
        result = run_search(ctx, args.stage, args.trials, on_trial=trials.append)
        print(json.dumps({"best_params": result.best_params, "objective": result.best.objective}, sort_keys=True))
        return result
    raise ValueError(f"unknown command {command!r}")


def record_run(database_url: Optional[str], ctx: RunContext, command: str, exit_code: int,
               trials: List[Trial], stage: Optional[str] = None) -> None:
    """Append the run to the ledger. Ledger failures never change the exit code."""
    try:
        engine = create_ledger_engine(resolve_database_url(database_url, ctx.out_dir))
        init_db(engine)
        with session_scope(engine) as session:
            run = Run(
                command=command,
                config_hash=ctx.config.hash(),
                seed=ctx.config.seed,
                out_dir=str(ctx.out_dir),
                exit_code=exit_code,
                manifest=canonical_json(manifest(ctx, command)),
            )
            for trial in trials:
                run.trials.append(TrialRow(stage=stage, number=trial.number, params=canonical_json(trial.params),
                                           objective=trial.objective))
            attack_file = ctx.artifacts.get("attack")
            if attack_file and exit_code == EXIT_OK:
                _, summary = read_attack_summary(ctx.path(attack_file))
                for record in summary.records:
                    run.attack_records.append(AttackRecordRow(
                        sample_id=record.sample_id, budget=record.budget, evaded=record.evaded,
                        detected=record.detected, score=record.score, queries=record.queries,
                        generations=record.generations,
                    ))
            session.add(run)
    except (SQLAlchemyError, SentinelError) as e:
        logger.warning(f"Could not record run in the ledger: {e}")


def main(argv: Optional[List[str]] = None) -> int:
    settings = load_settings()
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO), format=LOG_FORMAT)
    args = build_parser().parse_args(argv)

    ctx: Optional[RunContext] = None
    trials: List[Trial] = []
    try:
        config: ExperimentConfig = load_config(args.config, args.overrides, args.seed)
        ctx = RunContext(config, Path(args.out or settings.out_dir))
        ctx.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Running %s into %s (seed=%d)", args.command, ctx.out_dir, config.seed)
        dispatch(args, ctx, trials)
        write_manifest(ctx, args.command)
        exit_code = EXIT_OK
    except Exception as e:
        exit_code = handle_command_error(e, args.command)

    if ctx is not None and not args.no_ledger:
        record_run(settings.database_url, ctx, args.command, exit_code, trials, getattr(args, "stage", None))
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
