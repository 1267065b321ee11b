"""Per-iteration solve records and their CSV export.

The CSV column set is part of the external interface. Timing columns hold
measured wall-clock milliseconds; they can be suppressed (written as 0.0) so
that repeated runs of a deterministic solve produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

LM_COLUMNS = ("iter", "cost_before", "cost_after", "lambda", "accepted",
              "step_norm", "grad_norm", "t_jacobian_ms", "t_assembly_ms",
              "t_clustering_ms", "t_rcs_ms", "t_backsub_ms", "t_correction_ms")
STBA_COLUMNS = LM_COLUMNS + ("n_clusters", "max_cluster_size", "n_constraints",
                             "correction_applied")
TIMING_COLUMNS = frozenset(c for c in LM_COLUMNS if c.startswith("t_"))


@dataclass
class IterationRecord:
    iteration: int
    cost_before: float = 0.0
    cost_after: float = 0.0
    lam: float = 0.0
    accepted: bool = False
    step_norm: float = 0.0
    grad_norm: float = 0.0
    t_jacobian_ms: float = 0.0
    t_assembly_ms: float = 0.0
    t_clustering_ms: float = 0.0
    t_rcs_ms: float = 0.0
    t_backsub_ms: float = 0.0
    t_correction_ms: float = 0.0
    t_iter_ms: float = 0.0          # full iteration wall clock, not exported
    n_clusters: int = 1
    max_cluster_size: int = 0
    n_constraints: int = 0
    correction_applied: bool = False
    n_degenerate: int = 0
    n_dropped_split: int = 0

    def value(self, column: str):
        if column == "iter":
            return self.iteration
        if column == "lambda":
            return self.lam
        return getattr(self, column)


@dataclass
class SolveTrace:
    """Iteration history of one solve."""

    solver: str
    records: list[IterationRecord] = field(default_factory=list)
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "max_iterations"
    total_ms: float = 0.0
    seed: int = 0
    clusterings: list = field(default_factory=list)   # when log_clusterings is set

    @property
    def columns(self) -> tuple[str, ...]:
        return STBA_COLUMNS if self.solver.startswith("stba") else LM_COLUMNS

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def accepted_costs(self) -> list[float]:
        return [r.cost_after for r in self.records if r.accepted]

    def cumulative_times_ms(self) -> list[float]:
        out, acc = [], 0.0
        for r in self.records:
            acc += r.t_iter_ms
            out.append(acc)
        return out

    def to_csv(self, include_timings: bool = True) -> str:
        lines = [",".join(self.columns)]
        for r in self.records:
            cells = []
            for col in self.columns:
                val = r.value(col)
                if col in TIMING_COLUMNS and not include_timings:
                    val = 0.0
                if isinstance(val, bool):
                    cells.append(str(int(val)))
                elif isinstance(val, float):
                    cells.append(repr(val))
                else:
                    cells.append(str(val))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path, include_timings: bool = True) -> None:
        Path(path).write_text(self.to_csv(include_timings=include_timings))


def write_assignments_csv(path, assignments: list) -> None:
    """Dump per-iteration clusterings as camera_index,cluster_id rows."""
    lines = ["iteration,camera_index,cluster_id"]
    for it, assignment in enumerate(assignments, start=1):
        for cam, cl in enumerate(assignment.cluster_of):
            lines.append(f"{it},{cam},{int(cl)}")
    Path(path).write_text("\n".join(lines) + "\n")
