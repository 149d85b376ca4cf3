import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# Plotting imports
try:
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib.figure import Figure
    PLOTTING_AVAILABLE = True
except ImportError as e:
    logging.warning(f"Plotting dependencies not available: {e}")
    PLOTTING_AVAILABLE = False
    matplotlib = None
    Figure = None

import config
from kembench.models import GridSummary, MetricRecord, RunReport
from kembench.utils.file_utils import ensure_dir, read_csv, write_csv, write_json, write_json_lines

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
METRICS_FILE = "metrics.jsonl"
LOSS_FILE = "epoch_losses.csv"


def resolve_output_root(out: Optional[str] = None) -> Path:
    """--out, else $KEM_OUTPUT_DIR, else ./runs."""
    return Path(out or os.getenv(config.OUTPUT_DIR_ENV) or config.DEFAULT_OUTPUT_DIR)


def metric_records(report: RunReport) -> List[MetricRecord]:
    records = []
    for name, value in sorted(report.final_metrics.items()):
        task, _, metric = name.rpartition("_") if name.endswith("_accuracy") else ("all", "", name)
        records.append(MetricRecord(metric=metric, task=task or "all", value=value,
                                    config_hash=report.config_hash))
    return records


class ReportService:
    def __init__(self, out_root: Path, plots: bool = True):
        self.out_root = ensure_dir(str(out_root))
        self.plots = plots and PLOTTING_AVAILABLE
        if plots and not PLOTTING_AVAILABLE:
            logger.warning("Plots requested but matplotlib is not installed - skipping plot artifacts")

    def run_dir(self, run_id: str) -> Path:
        return ensure_dir(str(self.out_root / run_id))

    def save_run(self, report: RunReport) -> Path:
        """Write report.json, metrics.jsonl, the loss CSV and (optionally) a loss plot."""
        directory = self.run_dir(report.run_id)
        artifacts = list(report.artifacts)

        if report.epoch_losses:
            series = sorted(report.epoch_losses)
            epochs = max(len(v) for v in report.epoch_losses.values())
            rows = [[epoch + 1] + [report.epoch_losses[s][epoch] if epoch < len(report.epoch_losses[s]) else ""
                                   for s in series] for epoch in range(epochs)]
            artifacts.append(str(write_csv(directory / LOSS_FILE, ["epoch"] + series, rows)))
            plot = self.line_plot(directory / "epoch_losses.png", {s: report.epoch_losses[s] for s in series},
                                  xlabel="epoch", ylabel="loss", title=report.run_id)
            if plot:
                artifacts.append(plot)

        artifacts.append(str(write_json_lines(directory / METRICS_FILE, metric_records(report))))
        report.artifacts = artifacts + [str(directory / REPORT_FILE)]
        write_json(directory / REPORT_FILE, report)
        logger.info(f"Saved run {report.run_id} to {directory}")
        return directory

    def save_grid(self, summary: GridSummary, name: str, header: Sequence[str], rows: List[Sequence]) -> Path:
        path = write_csv(self.out_root / f"{name}.csv", header, rows)
        summary.csv_path = str(path)
        write_json(self.out_root / f"{name}_summary.json", summary)
        self.line_plot(self.out_root / f"{name}.png",
                       {summary.metric: [row[summary.metric] for row in summary.rows]},
                       xlabel=summary.param, ylabel=summary.metric, title=name,
                       x=[row[summary.param] for row in summary.rows])
        return path

    def line_plot(self, path: Path, series: Dict[str, Sequence[float]], xlabel: str, ylabel: str,
                  title: str = "", x: Optional[Sequence[float]] = None) -> Optional[str]:
        if not self.plots:
            return None
        try:
            figure = Figure(figsize=(5, 3.5))
            axes = figure.add_subplot(1, 1, 1)
            for label, values in series.items():
                xs = x if x is not None else list(range(1, len(values) + 1))
                axes.plot(xs, values, marker="o", label=label)
            axes.set_xlabel(xlabel)
            axes.set_ylabel(ylabel)
            if title:
                axes.set_title(title)
            if len(series) > 1:
                axes.legend()
            figure.tight_layout()
            figure.savefig(path)
            return str(path)
        except Exception as e:
            logger.warning(f"Plot {path} failed: {str(e)}")
            return None

    def list_runs(self) -> List[RunReport]:
        reports = []
        for path in sorted(self.out_root.glob(f"*/{REPORT_FILE}")):
            try:
                reports.append(RunReport.model_validate_json(path.read_text()))
            except Exception as e:
                logger.warning(f"Skipping unreadable report {path}: {str(e)}")
        return reports

    def render_saved_plots(self) -> List[str]:
        """Re-plot every saved loss CSV and cost-sweep CSV below the output root."""
        rendered = []
        for csv_path in sorted(self.out_root.rglob(LOSS_FILE)):
            rows = read_csv(csv_path)
            series = {k: [float(r[k]) for r in rows if r[k] != ""] for k in rows[0] if k != "epoch"} if rows else {}
            plot = self.line_plot(csv_path.with_suffix(".png"), series, xlabel="epoch", ylabel="loss",
                                  title=csv_path.parent.name)
            if plot:
                rendered.append(plot)
        for csv_path in sorted(self.out_root.rglob("cost_sweep.csv")):
            rows = read_csv(csv_path)
            plot = self.line_plot(csv_path.with_suffix(".png"), {"kem/cross": [float(r["ratio"]) for r in rows]},
                                  xlabel="sweep point", ylabel="cost ratio", title="cost sweep")
            if plot:
                rendered.append(plot)
        return rendered
