"""Experiment runners behind the command line: toys, grids, seed robustness, cost sweep and gradcheck suite."""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

import config
from kembench.exceptions import ConfigError, ContractError, CorrectnessGateError
from kembench.models import (
    CostReport, ExperimentConfig, GradcheckResult, GradcheckSuiteReport, GridSummary, ImbalanceSpec, RunReport,
    TaskLossSpec, TaskScore,
)
from kembench.services.attention_service import (
    CrossAttentionParams, KemParams, MemorySlots, TaskFeatureBlock,
    cross_attention, kem_forward,
)
from kembench.services.cost_service import (
    EXPECTED_ORDERING, cost_sweep, mismatches, validate_regime, write_cost_csv,
)
from kembench.services.dataset_service import (
    ANSWER_VOCABULARY, NOISE_EVAL_INDEX, QUESTION_LENGTH, SortOfClevrDataset, gen_noise_toy, gen_sort_of_clevr,
)
from kembench.services.etf_service import build_etf
from kembench.services.network_service import ClevrModel, NoiseToyModel, select_predictions, split_by_task
from kembench.services.report_service import ReportService, resolve_output_root
from kembench.services.training_service import AdamW, train, weighted_task_loss
from kembench.utils.autodiff import Tensor, cross_entropy, index_select, mse_loss, mul, tensor_sum
from kembench.utils.file_utils import config_hash, write_csv, write_json
from kembench.utils.gradcheck import check_parameters, finite_diff_check
from kembench.utils.metric_utils import accuracy, delta_m
from kembench.utils.rng_utils import STREAM_BATCHES, STREAM_FEATURES, glorot_uniform, make_rng, slot_normal

logger = logging.getLogger(__name__)

DESIGN_NOTES = {
    "width": "single width d shared by the pre-attention, embedding and slot spaces",
    "projection_init": "uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))",
    "slot_init": "normal(0, 1/sqrt(d))",
    "topk_tie_break": "lowest index wins; selection constant in backward",
    "etf_mixing": "retrieve logits mixed along the task axis by the ETF Gram matrix",
    "encoders": "per-task encoders are one linear layer plus tanh",
    "loss_weights": "static; dynamic weighting hook uses the identity policy",
    "sort_of_clevr": "64x64 images, 6 objects, imbalance on the queried color",
    "rng": "numpy Philox4x64 keyed by (seed, stream)",
}

IMBALANCE_TASKS = ["nonrelational", "relational"]
NOISE_TASKS = ["task1", "task2"]
SUPERVISED_LOSS_KINDS = ["cross-entropy", "cross-entropy"]
EVAL_CHUNK = 250
TABLE_COLUMNS = ["row", "method", "use_nc", "balance", "imbalance", "accuracy"]

# keys that never change results
_UNHASHED = {"out_dir", "plots", "grid_workers"}


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None,
                mechanism: Optional[str] = None, kind: Optional[str] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    """Merge defaults < config file < command-line flags into a validated config."""
    values: Dict[str, str] = {}
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key, value in (("seed", seed), ("mechanism", mechanism), ("kind", kind), ("out_dir", out)):
        if value is not None:
            values[key] = value

    try:
        cfg = ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    is_valid, message = validate_config(cfg)
    if not is_valid:
        raise ConfigError(message)
    return cfg


def validate_config(cfg: ExperimentConfig) -> tuple[bool, str]:
    """Cross-field checks that pydantic field validation cannot express."""
    if cfg.kind == "seeds":
        target = "noise-toy"
    else:
        target = cfg.grid_target if cfg.kind in ("grid-L", "grid-K") else cfg.kind
    if target == "noise-toy" and cfg.n_tasks != 3:
        return False, f"noise-toy needs n_tasks=3, got {cfg.n_tasks}"
    if target == "imbalance":
        if cfg.n_tasks != 2:
            return False, f"imbalance needs n_tasks=2, got {cfg.n_tasks}"
        if cfg.mechanism not in ("kem", "skem"):
            return False, f"imbalance compares kem and skem, got mechanism={cfg.mechanism}"
    if cfg.mechanism == "skem" and not 2 <= cfg.n_tasks <= cfg.d:
        return False, f"skem needs 2 <= n_tasks <= d, got n_tasks={cfg.n_tasks}, d={cfg.d}"
    if cfg.kind in ("noise-toy", "imbalance", "grid-L", "grid-K", "seeds") and cfg.top_k > cfg.n_s:
        return False, f"top_k={cfg.top_k} exceeds n_s={cfg.n_s}"
    if cfg.loss_weights is not None and len(cfg.loss_weights) != 2:
        return False, f"both toy experiments supervise 2 tasks, got {len(cfg.loss_weights)} loss weights"
    if cfg.kind in ("grid-L", "grid-K") and not cfg.grid_values:
        return False, "grid needs at least one value"
    if cfg.kind == "seeds":
        if cfg.mechanism not in ("kem", "skem"):
            return False, f"seed robustness compares a slot mechanism with cross-attention, got {cfg.mechanism}"
        if not cfg.robustness_seeds:
            return False, "seed robustness needs at least one seed"
    return True, "Configuration is valid"


def effective_config(cfg: ExperimentConfig) -> Dict:
    return cfg.model_dump(mode="json")


def hash_config(cfg: ExperimentConfig) -> str:
    return config_hash(cfg.model_dump(mode="json", exclude=_UNHASHED))


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.kind}_{cfg.mechanism}_seed{cfg.seed}_{hash_config(cfg)}"


def _new_report(cfg: ExperimentConfig) -> RunReport:
    return RunReport(
        run_id=run_id_for(cfg),
        kind=cfg.kind,
        mechanism=cfg.mechanism,
        config=effective_config(cfg),
        config_hash=hash_config(cfg),
        design_notes=dict(DESIGN_NOTES),
    )


def _warn_regime(cfg: ExperimentConfig) -> None:
    if cfg.mechanism == "cross-attention":
        return
    in_regime, message = validate_regime(cfg.n_s, cfg.d, cfg.L)
    if not in_regime:
        logger.warning(f"Config {run_id_for(cfg)}: {message}")


def _optimizer(model, cfg: ExperimentConfig) -> AdamW:
    return AdamW(model.parameters(), cfg.lr, total_steps=max(cfg.steps, 1), weight_decay=cfg.weight_decay,
                 beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, power=cfg.poly_power)


# noise toy

def evaluate_noise_toy(model: NoiseToyModel, cfg: ExperimentConfig) -> Tuple[Dict[str, float], float]:
    """Held-out task accuracies and how much attention lands on the noise task's tokens."""
    batch = gen_noise_toy(cfg.seed, cfg.eval_size, cfg.m, cfg.d, index=NOISE_EVAL_INDEX)
    logits = model(batch.task_tokens())
    metrics = {
        "task1_accuracy": accuracy(np.argmax(logits[0].data, axis=-1), batch.labels1),
        "task2_accuracy": accuracy(np.argmax(logits[1].data, axis=-1), batch.labels2),
    }
    noise = slice(2 * cfg.m, 3 * cfg.m)
    if cfg.mechanism == "cross-attention":
        masses = [layer.last_weights[..., :2 * cfg.m, noise].sum(axis=-1).mean() for layer in model.mechanism]
        noise_mass = float(np.mean(masses))
    else:
        rates = [layer.last_selection[..., noise].sum() / layer.last_selection.sum() for layer in model.mechanism]
        masses = [layer.last_retrieve_weights[..., noise].sum(axis=-1).mean() for layer in model.mechanism]
        metrics["noise_selection_rate"] = float(np.mean(rates))
        noise_mass = float(np.mean(masses))
    metrics["noise_mass"] = noise_mass
    return metrics, noise_mass


def run_noise_toy(cfg: ExperimentConfig, reports: Optional[ReportService] = None) -> RunReport:
    if cfg.n_tasks != 3:
        raise ContractError(f"the noise toy has exactly 3 tasks, got n_tasks={cfg.n_tasks}")
    start = time.perf_counter()
    report = _new_report(cfg)
    _warn_regime(cfg)
    logger.info(f"Starting {report.run_id}")

    model = NoiseToyModel(cfg)
    optimizer = _optimizer(model, cfg)

    def step_fn(step: int, weights: List[float]):
        batch = gen_noise_toy(cfg.seed, cfg.batch_size, cfg.m, cfg.d, index=step)
        logits = model(batch.task_tokens())
        losses = TaskLossSpec(weights=weights, kinds=SUPERVISED_LOSS_KINDS)
        return weighted_task_loss(losses, logits[:2], [batch.labels1, batch.labels2])

    weights = cfg.loss_weights or [1.0, 1.0]
    report.epoch_losses[cfg.mechanism] = train(step_fn, optimizer, cfg.steps, cfg.steps_per_epoch, weights,
                                               label=report.run_id)
    metrics, noise_mass = evaluate_noise_toy(model, cfg)
    report.final_metrics = metrics
    report.task_metrics = {task: metrics[f"{task}_accuracy"] for task in NOISE_TASKS}
    report.noise_mass = noise_mass
    report.wall_clock_seconds = time.perf_counter() - start
    logger.info(f"Finished {report.run_id}: noise mass {noise_mass:.4f}, "
                f"accuracies {metrics['task1_accuracy']:.3f}/{metrics['task2_accuracy']:.3f}")
    if reports is not None:
        reports.save_run(report)
    return report


# imbalance

def _clevr_step_loss(model: ClevrModel, dataset: SortOfClevrDataset, cfg: ExperimentConfig, step: int,
                     weights: List[float]):
    indices = make_rng(cfg.seed, STREAM_BATCHES, step).integers(0, len(dataset), size=cfg.batch_size)
    batch = dataset.batch(indices)
    logits = model(batch["images"], batch["questions"])
    task_of_sample = batch["relational"].astype(np.int64)
    # a batch may hold a single question type; only present tasks contribute
    present, outputs, targets = [], [], []
    for task, rows in split_by_task(task_of_sample, 2):
        present.append(task)
        outputs.append(index_select(logits[task], rows, axis=0))
        targets.append(batch["answers"][rows])
    losses = TaskLossSpec(weights=[weights[t] for t in present], kinds=["cross-entropy"] * len(present))
    loss, values = weighted_task_loss(losses, outputs, targets)
    task_losses = [0.0, 0.0]
    for task, value in zip(present, values):
        task_losses[task] = value
    return loss, task_losses


def evaluate_clevr(model: ClevrModel, dataset: SortOfClevrDataset) -> Dict[str, float]:
    predictions, answers, task_of_sample = [], [], []
    for start in range(0, len(dataset), EVAL_CHUNK):
        batch = dataset.batch(range(start, min(start + EVAL_CHUNK, len(dataset))))
        tasks = batch["relational"].astype(np.int64)
        predictions.append(select_predictions(model(batch["images"], batch["questions"]), tasks))
        answers.append(batch["answers"])
        task_of_sample.append(tasks)
    predictions, answers, task_of_sample = (np.concatenate(a) for a in (predictions, answers, task_of_sample))
    metrics = {"accuracy": accuracy(predictions, answers)}
    for task, name in enumerate(IMBALANCE_TASKS):
        rows = task_of_sample == task
        if rows.any():
            metrics[f"{name}_accuracy"] = accuracy(predictions[rows], answers[rows])
    return metrics


def train_clevr(cfg: ExperimentConfig, dataset: SortOfClevrDataset, label: str) -> Tuple[ClevrModel, List[float]]:
    model = ClevrModel(cfg, answer_classes=len(ANSWER_VOCABULARY), question_length=QUESTION_LENGTH)
    optimizer = _optimizer(model, cfg)
    losses = train(lambda step, w: _clevr_step_loss(model, dataset, cfg, step, w), optimizer, cfg.steps,
                   cfg.steps_per_epoch, cfg.loss_weights or [1.0, 1.0], label=label)
    return model, losses


def imbalance_table(metrics: Dict[str, float]) -> List[List]:
    """Rows of the KEM/sKEM x balanced/long-tail comparison that were actually run."""
    rows = []
    for distribution in ("balanced", "long-tail"):
        for mechanism in ("kem", "skem"):
            key = f"{mechanism}_{distribution}_accuracy"
            if key in metrics:
                rows.append([len(rows) + 1, mechanism.upper() if mechanism == "kem" else "sKEM",
                             int(mechanism == "skem"), int(distribution == "balanced"),
                             int(distribution == "long-tail"), metrics[key]])
    return rows


def run_imbalance(cfg: ExperimentConfig, reports: Optional[ReportService] = None) -> RunReport:
    if cfg.mechanism not in ("kem", "skem"):
        raise ContractError(f"the imbalance experiment runs kem or skem, got {cfg.mechanism}")
    start = time.perf_counter()
    report = _new_report(cfg)
    _warn_regime(cfg)
    logger.info(f"Starting {report.run_id}")

    mechanisms = ["kem", "skem"] if cfg.compare_mechanisms else [cfg.mechanism]
    test_set = gen_sort_of_clevr(cfg.seed, cfg.eval_size, imbalance=None, split="test")
    metrics: Dict[str, float] = {}
    for distribution in cfg.distributions:
        skew = ImbalanceSpec(exponent=cfg.imbalance_exponent) if distribution == "long-tail" else None
        split = "train" if distribution == "balanced" else "long-tail"
        train_set = gen_sort_of_clevr(cfg.seed, cfg.train_count, imbalance=skew, split=split)
        for mechanism in mechanisms:
            name = f"{mechanism}_{distribution}"
            variant = cfg.model_copy(update={"mechanism": mechanism})
            model, losses = train_clevr(variant, train_set, label=f"{report.run_id}:{name}")
            report.epoch_losses[name] = losses
            for metric, value in evaluate_clevr(model, test_set).items():
                metrics[f"{name}_{metric}"] = value
            logger.info(f"{report.run_id}: {name} accuracy {metrics[f'{name}_accuracy']:.4f}")

    for mechanism in mechanisms:
        if {"balanced", "long-tail"} <= set(cfg.distributions):
            metrics[f"{mechanism}_drop"] = (metrics[f"{mechanism}_balanced_accuracy"]
                                            - metrics[f"{mechanism}_long-tail_accuracy"])
    primary = f"{cfg.mechanism}_{cfg.distributions[0]}"
    report.final_metrics = metrics
    report.task_metrics = {task: metrics[f"{primary}_{task}_accuracy"] for task in IMBALANCE_TASKS
                           if f"{primary}_{task}_accuracy" in metrics}

    if reports is not None:
        table = imbalance_table(metrics)
        report.artifacts.append(str(write_csv(reports.run_dir(report.run_id) / "imbalance_table.csv",
                                              TABLE_COLUMNS, table)))
    report.wall_clock_seconds = time.perf_counter() - start
    if reports is not None:
        reports.save_run(report)
    return report


# grid search

def _cell_config(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    values = cfg.model_dump()
    values.update(kind=cfg.grid_target, grid_values=None, compare_mechanisms=False, **updates)
    return ExperimentConfig(**values)


def _runner(target: str) -> Callable[[ExperimentConfig, Optional[ReportService]], RunReport]:
    return run_noise_toy if target == "noise-toy" else run_imbalance


def run_grid(cfg: ExperimentConfig, reports: Optional[ReportService] = None) -> Tuple[List[RunReport], GridSummary]:
    """One run per grid value (seed = base + cell index), ranked by ``cfg.grid_metric``.

    Delta-m compares every cell against a single-task reference run at the cell's
    own seed with the residual exchange switched off; ``reference_metrics`` is
    the mean of those references.
    """
    if cfg.kind not in ("grid-L", "grid-K"):
        raise ContractError(f"run_grid needs a grid kind, got {cfg.kind}")
    if not cfg.grid_values:
        raise ContractError("grid has no values")
    param = "L" if cfg.kind == "grid-L" else "top_k"
    column = "L" if param == "L" else "K"
    runner = _runner(cfg.grid_target)
    cells = [_cell_config(cfg, seed=cfg.seed + i, **{param: value}) for i, value in enumerate(cfg.grid_values)]
    references = [_cell_config(cfg, seed=cell.seed, residual_weight=0.0) for cell in cells]

    logger.info(f"Grid {cfg.kind} over {cfg.grid_values} on {cfg.grid_target} with {cfg.grid_workers} worker(s)")
    if cfg.grid_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.grid_workers) as pool:
            futures = [pool.submit(runner, cell, reports) for cell in cells + references]
            results = [future.result() for future in futures]
    else:
        results = [runner(cell, reports) for cell in cells + references]
    runs, reference_runs = results[:len(cells)], results[len(cells):]

    tasks = sorted(reference_runs[0].task_metrics)
    rows = []
    for value, cell, run, reference in zip(cfg.grid_values, cells, runs, reference_runs):
        row = {param: value, "seed": cell.seed, **{t: run.task_metrics[t] for t in tasks}}
        row["delta_m"] = delta_m([TaskScore(value=run.task_metrics[t]) for t in tasks],
                                 [TaskScore(value=reference.task_metrics[t]) for t in tasks])
        for key, metric in run.final_metrics.items():
            row.setdefault(key, metric)
        rows.append(row)

    if any(cfg.grid_metric not in row for row in rows):
        raise ContractError(f"grid metric '{cfg.grid_metric}' is not reported by {cfg.grid_target} runs")
    order = sorted(range(len(rows)), key=lambda i: -rows[i][cfg.grid_metric])
    for rank, i in enumerate(order, start=1):
        rows[i]["rank"] = rank

    summary = GridSummary(
        param=param,
        metric=cfg.grid_metric,
        values=list(cfg.grid_values),
        seeds=[cell.seed for cell in cells],
        ranking=[cfg.grid_values[i] for i in order],
        best_value=cfg.grid_values[order[0]],
        reference_metrics={t: float(np.mean([r.task_metrics[t] for r in reference_runs])) for t in tasks},
        rows=rows,
    )
    extra = [] if cfg.grid_metric in tasks + ["delta_m"] else [cfg.grid_metric]
    header = [column] + tasks + ["delta_m"] + extra + ["seed", "rank"]
    table = [[row[param]] + [row[t] for t in tasks] + [row["delta_m"]] + [row[e] for e in extra]
             + [row["seed"], row["rank"]] for row in rows]
    if reports is not None:
        reports.save_grid(summary, f"{cfg.kind}_{cfg.grid_target}_seed{cfg.seed}_{hash_config(cfg)}", header, table)
    logger.info(f"Grid {cfg.kind} best {param}={summary.best_value} by {cfg.grid_metric}")
    return runs, summary


# seed robustness

ROBUSTNESS_FILE = "robustness.csv"
ROBUSTNESS_COLUMNS = ["seed"] + NOISE_TASKS + ["delta_m"]


def _noise_toy_config(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    values = cfg.model_dump()
    values.update(kind="noise-toy", grid_values=None, **updates)
    return ExperimentConfig(**values)


def run_robustness(cfg: ExperimentConfig, reports: Optional[ReportService] = None) -> RunReport:
    """Noise toy per seed: delta-m of the slot mechanism against cross-attention at the same seed.

    ``robustness.csv`` holds one row per seed followed by ``mean`` and ``std``
    rows (population std over seeds).
    """
    if cfg.kind != "seeds":
        raise ContractError(f"run_robustness needs kind 'seeds', got {cfg.kind}")
    if cfg.mechanism not in ("kem", "skem"):
        raise ContractError(f"seed robustness compares kem or skem with cross-attention, got {cfg.mechanism}")
    if not cfg.robustness_seeds:
        raise ContractError("seed robustness needs at least one seed")
    start = time.perf_counter()
    report = _new_report(cfg)
    logger.info(f"Seed robustness of {cfg.mechanism} over seeds {cfg.robustness_seeds}")

    rows = []
    for seed in cfg.robustness_seeds:
        slot = run_noise_toy(_noise_toy_config(cfg, seed=seed), reports)
        cross = run_noise_toy(_noise_toy_config(cfg, seed=seed, mechanism="cross-attention"), reports)
        gain = delta_m([TaskScore(value=slot.task_metrics[t]) for t in NOISE_TASKS],
                       [TaskScore(value=cross.task_metrics[t]) for t in NOISE_TASKS])
        rows.append([seed] + [slot.task_metrics[t] for t in NOISE_TASKS] + [gain])
        logger.info(f"Seed {seed}: delta_m {gain:+.4f}")

    values = np.asarray([row[1:] for row in rows], dtype=np.float64)
    means, stds = values.mean(axis=0), values.std(axis=0)
    report.final_metrics = {"delta_m_mean": float(means[-1]), "delta_m_std": float(stds[-1]),
                            "seeds": float(len(rows))}
    report.task_metrics = {t: float(means[i]) for i, t in enumerate(NOISE_TASKS)}
    report.wall_clock_seconds = time.perf_counter() - start
    if reports is not None:
        table = rows + [["mean"] + means.tolist(), ["std"] + stds.tolist()]
        report.artifacts.append(str(write_csv(reports.run_dir(report.run_id) / ROBUSTNESS_FILE,
                                              ROBUSTNESS_COLUMNS, table)))
        reports.save_run(report)
    logger.info(f"Seed robustness: delta_m {means[-1]:+.4f} +/- {stds[-1]:.4f} over {len(rows)} seeds")
    return report


# cost sweep

def run_cost_sweep(cfg: ExperimentConfig,
                   reports: Optional[ReportService] = None) -> Tuple[List[CostReport], Optional[Path]]:
    """Sweep the cost model; any measured/symbolic disagreement fails the run before writing."""
    start = time.perf_counter()
    sweep = cost_sweep(cfg.sweep_n_s, cfg.sweep_d, cfg.sweep_L, top_k=cfg.top_k, seed=cfg.seed, measure=True)
    failures = [(r, mismatches(r)) for r in sweep if mismatches(r)]
    if failures:
        detail = "; ".join(f"(n_s={r.n_s}, d={r.d}, L={r.L}): {', '.join(kinds)}" for r, kinds in failures)
        logger.error(f"Cost model mismatch: {detail}")
        raise CorrectnessGateError(f"measured counts differ from the symbolic cost model at {detail}")

    in_regime = [r for r in sweep if r.in_regime]
    for r in in_regime:
        if r.ratio >= 1.0:
            # n_s barely above d: the 3 n_s d^2 projection term dominates both sides
            logger.warning(f"KEM not cheaper at (n_s={r.n_s}, d={r.d}, L={r.L}): ratio {r.ratio:.3f}")

    csv_path = None
    if reports is not None:
        report = _new_report(cfg)
        csv_path = write_cost_csv(sweep, reports.run_dir(report.run_id) / "cost_sweep.csv")
        report.final_metrics = {
            "configs": float(len(sweep)),
            "out_of_regime": float(len(sweep) - len(in_regime)),
            "max_in_regime_ratio": max((r.ratio for r in in_regime), default=0.0),
            "ordering_violations": float(sum(1 for r in in_regime
                                             if r.symbolic_skem is not None and r.ordering != EXPECTED_ORDERING)),
        }
        report.artifacts.append(str(csv_path))
        reports.line_plot(csv_path.with_suffix(".png"), {"kem/cross": [r.ratio for r in sweep]},
                          xlabel="sweep point", ylabel="cost ratio", title="cost sweep")
        report.wall_clock_seconds = time.perf_counter() - start
        reports.save_run(report)
    logger.info(f"Cost sweep passed the correctness gate on {len(sweep)} configurations")
    return sweep, csv_path


# gradient suite

def _gradcheck_cases(seed: int, step: float, rtol: float, atol: float) -> List[GradcheckResult]:
    n, m, d, L, top_k = 2, 3, 4, 2, 3
    rng = make_rng(seed, STREAM_FEATURES, 7)
    x0 = rng.standard_normal((n * m, d))
    readout = Tensor(rng.standard_normal((n * m, d)))
    cross = CrossAttentionParams(*(glorot_uniform(rng, d, d) for _ in range(3)))
    kem = KemParams(*(glorot_uniform(rng, d, d) for _ in range(6)), top_k=top_k)
    memory = MemorySlots(slot_normal(rng, L, d))
    etf = build_etf(n, d, seed)

    def block(x: Tensor) -> TaskFeatureBlock:
        return TaskFeatureBlock(x, n_tasks=n, tokens_per_task=m)

    def readout_loss(out: Tensor) -> Tensor:
        return tensor_sum(mul(out, readout))

    forwards = {
        "cross_attention": (lambda x: readout_loss(cross_attention(block(x), cross)), cross.parameters()),
        "kem_forward": (lambda x: readout_loss(kem_forward(block(x), memory, kem).features),
                        {"slots": memory.slots, **kem.parameters()}),
        "kem_forward[etf]": (lambda x: readout_loss(kem_forward(block(x), memory, kem, etf=etf).features),
                             {"slots": memory.slots, **kem.parameters()}),
    }
    results = []
    for name, (loss, params) in forwards.items():
        results.append(finite_diff_check(loss, Tensor(x0), step, rtol, atol, name=f"{name}.features"))
        results.extend(check_parameters(lambda: loss(Tensor(x0)), params, step, rtol, atol, prefix=name).values())

    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    target = Tensor(rng.standard_normal((4, 3)))
    mixed_losses = TaskLossSpec(weights=[1.0, 2.0], kinds=["cross-entropy", "mean-squared-error"])
    losses = {
        "cross_entropy": lambda x: cross_entropy(x, labels),
        "mean_squared_error": lambda x: mse_loss(x, target),
        "mtl_loss": lambda x: weighted_task_loss(mixed_losses, [x, x], [labels, target])[0],
    }
    for name, loss in losses.items():
        results.append(finite_diff_check(loss, Tensor(logits), step, rtol, atol, name=name))

    for result in results:
        result.seed = seed
    return results


def run_gradcheck_suite(cfg: ExperimentConfig, reports: Optional[ReportService] = None,
                        step: float = config.GRADCHECK_STEP, rtol: float = config.GRADCHECK_RTOL,
                        atol: float = config.GRADCHECK_ATOL) -> GradcheckSuiteReport:
    results: List[GradcheckResult] = []
    for seed in cfg.gradcheck_seeds:
        results.extend(_gradcheck_cases(seed, step, rtol, atol))
    suite = GradcheckSuiteReport(seeds=list(cfg.gradcheck_seeds), step=step, rtol=rtol, atol=atol, results=results)
    if reports is not None:
        write_json(reports.out_root / f"gradcheck_{hash_config(cfg)}.json", suite)
    if suite.passed:
        logger.info(f"Gradient suite passed: {len(results)} checks over seeds {suite.seeds}")
    else:
        logger.error(f"Gradient suite failed: {suite.failures}")
    return suite


def run_experiment(cfg: ExperimentConfig, reports: Optional[ReportService] = None):
    """Dispatch on ``cfg.kind``; correctness gates raise ``CorrectnessGateError``."""
    if reports is None:
        reports = ReportService(resolve_output_root(cfg.out_dir), plots=cfg.plots)
    if cfg.kind == "noise-toy":
        return run_noise_toy(cfg, reports)
    if cfg.kind == "imbalance":
        return run_imbalance(cfg, reports)
    if cfg.kind in ("grid-L", "grid-K"):
        return run_grid(cfg, reports)
    if cfg.kind == "seeds":
        return run_robustness(cfg, reports)
    if cfg.kind == "cost-sweep":
        return run_cost_sweep(cfg, reports)
    suite = run_gradcheck_suite(cfg, reports)
    if not suite.passed:
        raise CorrectnessGateError(f"gradient checks failed: {', '.join(suite.failures)}")
    return suite
