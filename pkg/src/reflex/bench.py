"""Benchmark harness: seeded rounds per task and variant, metrics, and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Sequence

from reflex.errors import ReflexError
from reflex.llm import BackendConfig, LlmBackend, make_backend
from reflex.metacog import EpisodeOptions, EpisodeResult, run_episode
from reflex.skills import LibraryStore, load, save
from reflex.world import TASK_IDS, TaskSpec, load_task

log = logging.getLogger(__name__)

VARIANTS: dict[str, EpisodeOptions] = {
    "reflex": EpisodeOptions(),
    "reflex_no_reflection": EpisodeOptions(reflection_enabled=False),
    "no_metacog": EpisodeOptions(reflection_enabled=False, retrieval_enabled=False),
    "central_plan": EpisodeOptions(reflection_enabled=False, central_full_state=True),
}

CSV_COLUMNS = (
    "task",
    "variant",
    "rounds",
    "success_rate",
    "success_stderr",
    "avg_env_steps",
    "avg_replans",
    "reflection_success_rate",
)

TASKS_DIR = Path(__file__).resolve().parents[2] / "tasks"


def round_half_up(x: float, places: int) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


# -------------------------------------------------------------------------- metrics


def success_rate(results: Sequence[EpisodeResult], places: int | None = 2) -> tuple[float, float]:
    """Success fraction and its binomial standard error sqrt(p(1-p)/n)."""
    if not results:
        raise ValueError("success rate needs at least one result")
    n = len(results)
    p = sum(r.success for r in results) / n
    se = math.sqrt(p * (1.0 - p) / n)
    if places is None:
        return p, se
    return round_half_up(p, places), round_half_up(se, places)


def avg_env_steps(results: Sequence[EpisodeResult], places: int | None = 1) -> float | None:
    """Mean steps over successful runs only; None when nothing succeeded."""
    steps = [r.env_steps for r in results if r.success]
    if not steps:
        return None
    m = sum(steps) / len(steps)
    return m if places is None else round_half_up(m, places)


def avg_replans(results: Sequence[EpisodeResult], places: int | None = 1) -> float:
    """Mean replan attempts over all runs, failures included."""
    if not results:
        raise ValueError("average replans needs at least one result")
    m = sum(r.replan_attempts for r in results) / len(results)
    return m if places is None else round_half_up(m, places)


def reflection_success_rate(results: Sequence[EpisodeResult], places: int | None = 2) -> float | None:
    """Valid regenerations over all reflections, counted only in episodes that succeeded."""
    records = [rec for r in results if r.success for rec in r.reflections]
    if not records:
        return None
    v = sum(rec.regenerated_plan_valid for rec in records) / len(records)
    return v if places is None else round_half_up(v, places)


@dataclass(frozen=True)
class MetricsSummary:
    task: str
    variant: str
    rounds: int
    success_rate: float
    success_stderr: float
    avg_env_steps: float | None
    avg_replans: float
    reflection_success_rate: float | None


def summarize(task: str, variant: str, results: Sequence[EpisodeResult]) -> MetricsSummary:
    sr, se = success_rate(results)
    return MetricsSummary(
        task, variant, len(results), sr, se, avg_env_steps(results), avg_replans(results),
        reflection_success_rate(results),
    )


def _exact(results: Sequence[EpisodeResult]) -> dict[str, float | None]:
    p, se = success_rate(results, None)
    return {
        "success_rate": p,
        "success_stderr": se,
        "avg_env_steps": avg_env_steps(results, None),
        "avg_replans": avg_replans(results, None),
        "reflection_success_rate": reflection_success_rate(results, None),
    }


# ---------------------------------------------------------------------------- runs


@dataclass(frozen=True)
class RunConfig:
    tasks: tuple[str, ...]
    variant: str
    backend: BackendConfig
    rounds: int = 20
    base_seed: int = 0
    freeze_library: bool = False
    output_dir: str = "results"
    library_path: str | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not self.tasks:
            raise ValueError("at least one task is required")

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.rounds)]


def resolve_task(ref: str) -> TaskSpec:
    """Load a task from a file path, or by id from the bundled tasks directory."""
    path = Path(ref)
    if not path.is_file():
        if ref not in TASK_IDS:
            raise FileNotFoundError(f"no task file or known task id {ref!r}")
        path = Path("tasks") / f"{ref}.json"
        if not path.is_file():
            path = TASKS_DIR / f"{ref}.json"
    return load_task(path.read_text(encoding="utf-8"))


def run_bench(
    config: RunConfig,
    backend_factory: Callable[[], LlmBackend] | None = None,
    write: bool = True,
) -> tuple[list[MetricsSummary], list[EpisodeResult]]:
    """Run every task for ``config.rounds`` seeded rounds; one fresh backend per round."""
    factory = backend_factory or (lambda: make_backend(config.backend))
    options = VARIANTS[config.variant]
    options = EpisodeOptions(**{**asdict(options), "freeze_library": config.freeze_library})
    store = LibraryStore(load(config.library_path) if config.library_path else None)
    out = Path(config.output_dir)
    summaries: list[MetricsSummary] = []
    raw: list[EpisodeResult] = []
    for ref in config.tasks:
        task = resolve_task(ref)
        per_task = []
        for i, seed in enumerate(config.seeds()):
            transcript = out / "transcripts" / f"{task.task_id}-{config.variant}-r{i:02d}.jsonl" if write else None
            try:
                result = run_episode(task.with_seed(seed), store, factory(), options, transcript)
            except (ReflexError, OSError) as exc:
                # a broken round still counts, as a failure carrying the reason
                log.warning("round %d of %s failed: %s", i, task.task_id, exc)
                result = EpisodeResult(
                    task.task_id, False, 0, 0, (), str(transcript) if transcript else None, seed,
                    f"{type(exc).__name__}: {exc}",
                )
            per_task.append(result)
        summaries.append(summarize(task.task_id, config.variant, per_task))
        raw.extend(per_task)
    if write:
        emit_report(summaries, raw, out)
        if config.library_path and not config.freeze_library:
            save(store.snapshot, out / "library.json")
    return summaries, raw


# ------------------------------------------------------------------------- reports


def _fmt(v: float | None, places: int) -> str:
    return "n/a" if v is None else f"{v:.{places}f}"


def table_cells(s: MetricsSummary) -> tuple[str, str]:
    """Success cell and the "steps, replans" cell of the markdown table."""
    return (
        f"{s.success_rate:.2f} ± {s.success_stderr:.2f}",
        f"{_fmt(s.avg_env_steps, 1)}, {s.avg_replans:.1f}",
    )


def render_report(summaries: Sequence[MetricsSummary]) -> str:
    tasks = list(dict.fromkeys(s.task for s in summaries))
    variants = list(dict.fromkeys(s.variant for s in summaries))
    by = {(s.task, s.variant): s for s in summaries}
    head = "| variant | " + " | ".join(f"{t} success | {t} steps, replans" for t in tasks) + " |"
    sep = "|---|" + "---|---|" * len(tasks)
    lines = ["# Benchmark results", "", head, sep]
    for v in variants:
        cells = []
        for t in tasks:
            s = by.get((t, v))
            cells.extend(table_cells(s) if s else ("n/a", "n/a"))
        lines.append(f"| {v} | " + " | ".join(cells) + " |")
    rsr = [s for s in summaries if s.reflection_success_rate is not None]
    if rsr:
        lines += ["", "| task | variant | reflection success rate |", "|---|---|---|"]
        lines += [f"| {s.task} | {s.variant} | {s.reflection_success_rate:.2f} |" for s in rsr]
    return "\n".join(lines) + "\n"


def render_csv(summaries: Sequence[MetricsSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in summaries:
        w.writerow(["" if getattr(s, c) is None else getattr(s, c) for c in CSV_COLUMNS])
    return buf.getvalue()


def metrics_document(summaries: Sequence[MetricsSummary], raw: Sequence[EpisodeResult]) -> dict:
    rows = []
    for s in summaries:
        mine = [r for r in raw if r.task_id == s.task]
        rows.append({**asdict(s), "exact": _exact(mine)})
    return {"summaries": rows, "results": [r.to_dict() for r in raw]}


def emit_report(summaries: Sequence[MetricsSummary], raw: Sequence[EpisodeResult], output_dir: str | Path) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = metrics_document(summaries, raw)
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(render_csv(summaries), encoding="utf-8")
    (out / "report.md").write_text(render_report(summaries), encoding="utf-8")
