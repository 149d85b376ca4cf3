import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import config
from kembench.exceptions import ConfigError, ContractError, CorrectnessGateError, KemBenchError
from kembench.models import GradcheckSuiteReport, ImbalanceSpec, RunReport
from kembench.services.dataset_service import dump_sort_of_clevr
from kembench.services.experiment_service import load_config, run_experiment, run_gradcheck_suite
from kembench.services.report_service import ReportService, resolve_output_root

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_GATE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kembench",
                                     description="KEM / sKEM slot-memory attention verification harness")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", default=None, help="flat key=value experiment file")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", default=None, help=f"output root (default ${config.OUTPUT_DIR_ENV} or "
                                                     f"{config.DEFAULT_OUTPUT_DIR})")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="override one config key; repeatable")

    run = verbs.add_parser("run", help="run the experiment described by --config")
    common(run)
    run.add_argument("--mechanism", choices=["cross-attention", "kem", "skem"], default=None)

    sweep = verbs.add_parser("sweep", help="cost-model sweep with the measured/symbolic gate")
    common(sweep)

    gradcheck = verbs.add_parser("gradcheck", help="finite-difference gradient suite")
    common(gradcheck)

    report = verbs.add_parser("report", help="list saved runs and re-render plots")
    report.add_argument("--out", default=None)

    dataset = verbs.add_parser("dataset", help="dump Sort-of-CLEVR splits to disk")
    dataset.add_argument("--out", required=True)
    dataset.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    dataset.add_argument("--train", type=int, default=config.CLEVR_TRAIN_COUNT)
    dataset.add_argument("--test", type=int, default=config.IMBALANCE_DEFAULTS["eval_size"])
    dataset.add_argument("--imbalance-exponent", type=float, default=None,
                         help="skew the train split's queried colors by this power law")
    dataset.add_argument("--previews", type=int, default=config.CLEVR_PREVIEW_COUNT)
    return parser


def _summarize(result) -> None:
    if isinstance(result, RunReport):
        print(f"{result.run_id}")
        for name, value in sorted(result.final_metrics.items()):
            print(f"  {name}: {value:.6g}")
    elif isinstance(result, GradcheckSuiteReport):
        print(f"gradcheck: {len(result.results)} checks, {'passed' if result.passed else 'FAILED'}")
    elif isinstance(result, tuple) and hasattr(result[1], "best_value"):
        summary = result[1]
        print(f"grid {summary.param}: best {summary.best_value} by {summary.metric}; ranking {summary.ranking}")
    elif isinstance(result, tuple):
        sweep, csv_path = result
        print(f"cost sweep: {len(sweep)} configurations -> {csv_path}")


def cmd_experiment(args: argparse.Namespace, kind: Optional[str] = None) -> int:
    try:
        cfg = load_config(args.config, args.override, seed=args.seed, mechanism=getattr(args, "mechanism", None),
                          kind=kind, out=args.out)
        logger.info(f"Effective config: {cfg.model_dump(mode='json')}")
        _summarize(run_experiment(cfg))
        return EXIT_OK
    except (ConfigError, ContractError) as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    except CorrectnessGateError as e:
        logger.error(f"Correctness gate failed: {str(e)}")
        return EXIT_GATE


def cmd_gradcheck(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, args.override, seed=args.seed, kind="gradcheck", out=args.out)
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    reports = ReportService(resolve_output_root(cfg.out_dir), plots=False)
    suite = run_gradcheck_suite(cfg, reports)
    _summarize(suite)
    for name in suite.failures:
        print(f"  FAILED {name}")
    return EXIT_OK if suite.passed else EXIT_GATE


def cmd_report(args: argparse.Namespace) -> int:
    reports = ReportService(resolve_output_root(args.out))
    runs = reports.list_runs()
    if not runs:
        logger.warning(f"No runs found below {reports.out_root}")
    for run in runs:
        _summarize(run)
    for plot in reports.render_saved_plots():
        logger.info(f"Rendered {plot}")
    return EXIT_OK


def cmd_dataset(args: argparse.Namespace) -> int:
    try:
        imbalance = ImbalanceSpec(exponent=args.imbalance_exponent) if args.imbalance_exponent is not None else None
        manifest = dump_sort_of_clevr(Path(args.out), args.seed, {"train": args.train, "test": args.test},
                                      imbalance=imbalance, previews=args.previews)
    except ContractError as e:
        logger.error(f"Dataset dump failed: {str(e)}")
        return EXIT_CONFIG
    print(f"dataset: {manifest.counts} -> {args.out}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            return cmd_experiment(args)
        if args.verb == "sweep":
            return cmd_experiment(args, kind="cost-sweep")
        if args.verb == "gradcheck":
            return cmd_gradcheck(args)
        if args.verb == "report":
            return cmd_report(args)
        return cmd_dataset(args)
    except KemBenchError as e:
        logger.error(f"{args.verb} failed: {str(e)}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
