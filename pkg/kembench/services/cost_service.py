"""Symbolic and measured multiply/softmax counts for cross-attention, KEM and sKEM."""
import itertools
import logging
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional

from kembench.exceptions import ContractError
from kembench.models import CostModel, CostReport
from kembench.services.attention_service import (
    CrossAttentionParams, KemParams, MemorySlots, TaskFeatureBlock, cross_attention, kem_forward,
)
from kembench.services.etf_service import build_etf
from kembench.utils.autodiff import CostCounter, Tensor, instrument
from kembench.utils.file_utils import write_csv
from kembench.utils.rng_utils import STREAM_FEATURES, glorot_uniform, make_rng, slot_normal

logger = logging.getLogger(__name__)

# the first eight columns are the fixed sweep schema; the rest are diagnostics
COST_CSV_COLUMNS = [
    "n_s", "d", "L", "cross_mults", "cross_softmax", "kem_mults", "kem_softmax", "ratio",
    "kem_attention_term", "kem_projection_term", "skem_mults", "skem_softmax", "ordering", "flag",
]

EXPECTED_ORDERING = "kem<skem<cross"


def _require_positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ContractError(f"{name} must be positive, got {value}")


def symbolic_cost_cross_attention(n_s: int, d: int) -> CostModel:
    _require_positive(n_s=n_s, d=d)
    return CostModel(matmul_multiplies=2 * n_s * n_s * d + 3 * n_s * d * d, softmax_entries=n_s * n_s)


def symbolic_cost_kem(n_s: int, d: int, L: int) -> CostModel:
    """4L*n_s*d + 3n_s*d^2 + 3L*d^2 multiplies, 2L*n_s softmax entries (retrieve and write)."""
    _require_positive(n_s=n_s, d=d)
    if L < 0:
        raise ContractError(f"L must be non-negative, got {L}")
    return CostModel(
        matmul_multiplies=4 * L * n_s * d + 3 * n_s * d * d + 3 * L * d * d,
        softmax_entries=2 * L * n_s,
    )


def symbolic_cost_skem(n_s: int, d: int, L: int, n_tasks: int) -> CostModel:
    """KEM plus the task-axis Gram mixing of the L x n_s retrieve logits."""
    _require_positive(n_tasks=n_tasks)
    if n_s % n_tasks:
        raise ContractError(f"n_s={n_s} is not a multiple of n_tasks={n_tasks}")
    return symbolic_cost_kem(n_s, d, L) + CostModel(matmul_multiplies=L * n_tasks * n_s)


def measure_counts(run: Callable[[], Any], counter: Optional[CostCounter] = None) -> CostModel:
    """Counts recorded while ``run`` executes its forward passes."""
    counter = counter if counter is not None else CostCounter()
    with instrument(counter):
        run()
    return CostModel(matmul_multiplies=counter.matmul_multiplies, softmax_entries=counter.softmax_entries)


def profile_n_tasks(n_s: int) -> int:
    return 2 if n_s % 2 == 0 else 1


def _instance(n_s: int, d: int, L: int, top_k: int, n_tasks: int, seed: int):
    rng = make_rng(seed, STREAM_FEATURES, n_s, d, L)
    features = Tensor(rng.standard_normal((n_s, d)))
    block = TaskFeatureBlock(features, n_tasks=n_tasks, tokens_per_task=n_s // n_tasks)
    cross = CrossAttentionParams(*(glorot_uniform(rng, d, d, requires_grad=False) for _ in range(3)))
    kem = KemParams(*(glorot_uniform(rng, d, d, requires_grad=False) for _ in range(6)),
                    top_k=min(top_k, n_s))
    memory = MemorySlots(slot_normal(rng, L, d, requires_grad=False))
    return block, cross, kem, memory


def cost_report(n_s: int, d: int, L: int, top_k: int = 3, seed: int = 0, measure: bool = True) -> CostReport:
    """Symbolic counts at ``(n_s, d, L)`` and, with ``measure``, instrumented counts of real forwards."""
    n_tasks = profile_n_tasks(n_s)
    symbolic_cross = symbolic_cost_cross_attention(n_s, d)
    symbolic_kem = symbolic_cost_kem(n_s, d, L)
    symbolic_skem = symbolic_cost_skem(n_s, d, L, n_tasks) if n_tasks >= 2 and d >= n_tasks else None

    measured_cross = measured_kem = measured_skem = None
    if measure:
        if L < 1:
            raise ContractError("measured KEM runs need at least one memory slot")
        block, cross, kem, memory = _instance(n_s, d, L, top_k, n_tasks, seed)
        measured_cross = measure_counts(lambda: cross_attention(block, cross))
        measured_kem = measure_counts(lambda: kem_forward(block, memory, kem))
        if symbolic_skem is not None:
            etf = build_etf(n_tasks, d, seed)
            measured_skem = measure_counts(lambda: kem_forward(block, memory, kem, etf=etf))

    in_regime, _ = validate_regime(n_s, d, L)
    return CostReport(
        n_s=n_s, d=d, L=L, top_k=min(top_k, n_s), n_tasks=n_tasks,
        symbolic_cross=symbolic_cross, symbolic_kem=symbolic_kem, symbolic_skem=symbolic_skem,
        measured_cross=measured_cross, measured_kem=measured_kem, measured_skem=measured_skem,
        ratio=symbolic_kem.total / symbolic_cross.total,
        in_regime=in_regime,
        kem_attention_term=4 * L * n_s * d,
        kem_projection_term=3 * n_s * d * d,
    )


def validate_regime(n_s: int, d: int, L: int) -> tuple[bool, str]:
    if n_s > d > L:
        return True, "n_s > d > L"
    return False, f"out of regime: expected n_s > d > L, got n_s={n_s}, d={d}, L={L}"


def cost_sweep(n_s_values: Iterable[int], d_values: Iterable[int], L_values: Iterable[int], top_k: int = 3,
               seed: int = 0, measure: bool = True, csv_path: Optional[Path] = None) -> List[CostReport]:
    """One report per grid point; out-of-regime points are flagged, not rejected."""
    reports = []
    for n_s, d, L in itertools.product(n_s_values, d_values, L_values):
        report = cost_report(n_s, d, L, top_k=top_k, seed=seed, measure=measure)
        if not report.in_regime:
            logger.warning(f"Sweep point (n_s={n_s}, d={d}, L={L}) is out of regime")
        elif report.symbolic_skem is not None and report.ordering != EXPECTED_ORDERING:
            logger.warning(f"Sweep point (n_s={n_s}, d={d}, L={L}) orders costs {report.ordering}")
        reports.append(report)
    logger.info(f"Cost sweep evaluated {len(reports)} configurations")
    if csv_path is not None:
        write_cost_csv(reports, csv_path)
    return reports


def mismatches(report: CostReport) -> List[str]:
    """Names of attention kinds whose measured counts differ from the symbolic model."""
    pairs = [
        ("cross-attention", report.symbolic_cross, report.measured_cross),
        ("kem", report.symbolic_kem, report.measured_kem),
        ("skem", report.symbolic_skem, report.measured_skem),
    ]
    return [name for name, symbolic, measured in pairs
            if measured is not None and symbolic is not None and measured != symbolic]


def write_cost_csv(reports: List[CostReport], path: Path) -> Path:
    rows = []
    for r in reports:
        rows.append([
            r.n_s, r.d, r.L,
            r.symbolic_cross.matmul_multiplies, r.symbolic_cross.softmax_entries,
            r.symbolic_kem.matmul_multiplies, r.symbolic_kem.softmax_entries,
            repr(r.ratio),
            r.kem_attention_term, r.kem_projection_term,
            r.symbolic_skem.matmul_multiplies if r.symbolic_skem else "",
            r.symbolic_skem.softmax_entries if r.symbolic_skem else "",
            r.ordering,
            r.flag,
        ])
    return write_csv(Path(path), COST_CSV_COLUMNS, rows)
