"""Dataset manifests, batch evaluation, metric reports, and ablation sweeps."""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backend import ModelBackend
from .controller import EpisodeConfig, ItemError, PromptTemplate, QAItem, Trajectory, run_batch
from .protocol import resolve_answer
from .video import open_frame_dir


class EmptyDataset(ValueError):
    pass


class ManifestError(ValueError):
    pass


REQUIRED_FIELDS = ("id", "video_path", "question", "options", "answer")


def read_manifest(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in REQUIRED_FIELDS if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{n}: missing field(s) {missing}")
            options = rec["options"]
            if not isinstance(options, list) or len(options) < 2:
                raise ManifestError(f"{path}:{n}: need at least two options")
            label = resolve_answer(str(rec["answer"]), options)
            if label is None:
                raise ManifestError(f"{path}:{n}: answer {rec['answer']!r} is not one of the options")
            rec["answer"] = label
            records.append(rec)
    return records


def items_from_records(records: Iterable[Mapping[str, Any]], root: str | Path) -> list[QAItem]:
    """Items whose videos open lazily, so a broken path only fails its own item."""
    base = Path(root)
    items = []
    for rec in records:
        video_path = Path(rec["video_path"])
        if not video_path.is_absolute():
            video_path = base / video_path
        items.append(QAItem(str(rec["id"]), (lambda p=video_path: open_frame_dir(p)),
                            rec["question"], tuple(rec["options"]), rec["answer"],
                            rec.get("category")))
    return items


def load_manifest(path: str | Path) -> list[QAItem]:
    return items_from_records(read_manifest(path), Path(path).parent)


# -- metrics -------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_items: int
    n_scored: int
    n_errors: int
    accuracy: float  # percent over all items; errors count as wrong
    mean_frames: float
    mean_rounds: float
    mean_prompt_tokens: float
    mean_wall_ms: float
    median_wall_ms: float
    early_stop_rate: float  # percent of scored episodes answered before the last round
    per_category: dict[str, float] = field(default_factory=dict)
    max_rounds: int = 0
    name: str = ""

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def deterministic_view(self) -> dict[str, Any]:
        """Everything except wall-clock timings."""
        d = self.to_json()
        d.pop("mean_wall_ms")
        d.pop("median_wall_ms")
        return d

    def to_text(self) -> str:
        rows = [
            ("items", f"{self.n_items}"),
            ("scored / errors", f"{self.n_scored} / {self.n_errors}"),
            ("accuracy (%)", f"{self.accuracy:.2f}"),
            ("mean frames", f"{self.mean_frames:.3f}"),
            ("mean rounds", f"{self.mean_rounds:.3f}"),
            ("mean prompt tokens", f"{self.mean_prompt_tokens:.1f}"),
            ("wall ms (mean / median)", f"{self.mean_wall_ms:.1f} / {self.median_wall_ms:.1f}"),
            ("early stop (%)", f"{self.early_stop_rate:.2f}"),
        ]
        rows += [(f"  category {k}", f"{v:.2f}") for k, v in sorted(self.per_category.items())]
        width = max(len(k) for k, _ in rows)
        head = [f"[{self.name}]"] if self.name else []
        return "\n".join(head + [f"{k:<{width}}  {v}" for k, v in rows])


def _mean(xs: Sequence[float]) -> float:
    return float(sum(xs) / len(xs)) if xs else 0.0


def report_from_log(log: Sequence[Mapping[str, Any]], max_rounds: int, name: str = "") -> MetricsReport:
    """Aggregate trajectory-log records (successful trajectories and error records)."""
    if not log:
        raise EmptyDataset("no records to aggregate")
    scored = [r for r in log if "error" not in r]
    errors = [r for r in log if "error" in r]
    correct = sum(1 for r in scored if r.get("correct"))
    cats: dict[str, list[bool]] = {}
    for r in log:
        cat = r.get("category")
        if cat is not None:
            cats.setdefault(str(cat), []).append("error" not in r and bool(r.get("correct")))
    walls = [float(r.get("wall_ms", 0.0)) for r in scored]
    early = [r for r in scored if r.get("answer") is not None and r["tau"] < max_rounds]
    return MetricsReport(
        n_items=len(log),
        n_scored=len(scored),
        n_errors=len(errors),
        accuracy=100.0 * correct / len(log),
        mean_frames=_mean([r["frames_used"] for r in scored]),
        mean_rounds=_mean([r["tau"] for r in scored]),
        mean_prompt_tokens=_mean([r["prompt_tokens"] for r in scored]),
        mean_wall_ms=_mean(walls),
        median_wall_ms=float(statistics.median(walls)) if walls else 0.0,
        early_stop_rate=100.0 * len(early) / len(scored) if scored else 0.0,
        per_category={k: 100.0 * sum(v) / len(v) for k, v in cats.items()},
        max_rounds=max_rounds,
        name=name,
    )


def log_record(result: Trajectory | ItemError, category: str | None = None) -> dict[str, Any]:
    if isinstance(result, ItemError):
        rec = result.to_json()
        if category is not None:
            rec["category"] = category
        return rec
    return result.to_json()


@dataclass
class EvalResult:
    report: MetricsReport
    log: list[dict[str, Any]]
    results: list[Trajectory | ItemError]

    def write(self, out_dir: str | Path, stem: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}_trajectories.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")
        (out / f"{stem}_report.json").write_text(json.dumps(self.report.to_json(), indent=2) + "\n",
                                                 encoding="utf-8")
        (out / f"{stem}_report.txt").write_text(self.report.to_text() + "\n", encoding="utf-8")


def evaluate(items: Sequence[QAItem], backend: ModelBackend, config: EpisodeConfig | None = None,
             *, parallelism: int = 1, template: PromptTemplate | None = None,
             name: str = "") -> EvalResult:
    if not items:
        raise EmptyDataset("manifest has no items")
    cfg = config or EpisodeConfig()
    results = run_batch(items, backend, cfg, parallelism, template)
    log = [log_record(r, it.category) for r, it in zip(results, items)]
    return EvalResult(report_from_log(log, cfg.max_rounds, name or cfg.name), log, results)


# -- sweeps --------------------------------------------------------------------------

FRONTIER_FIELDS = ("config", "accuracy", "mean_frames", "mean_rounds", "runtime")


def sweep(items: Sequence[QAItem], backend: ModelBackend, grid: Sequence[tuple[int, int]],
          base: EpisodeConfig | None = None, *, parallelism: int = 1,
          template: PromptTemplate | None = None) -> list[EvalResult]:
    """One evaluation per ``(max_rounds, max_frames_per_round)`` cell, named ``TT_CC``."""
    if not grid:
        raise ValueError("sweep grid is empty")
    base = base or EpisodeConfig()
    out = []
    for T, cap in grid:
        cfg = replace(base, max_rounds=T, max_frames_per_round=cap,
                      initial_frame_count=min(base.initial_frames, cap)
                      if base.initial_frame_count is not None else None)
        out.append(evaluate(items, backend, cfg, parallelism=parallelism, template=template,
                            name=cfg.name))
    return out


def frontier_rows(results: Sequence[EvalResult]) -> list[dict[str, Any]]:
    return [{
        "config": r.report.name,
        "accuracy": round(r.report.accuracy, 4),
        "mean_frames": round(r.report.mean_frames, 4),
        "mean_rounds": round(r.report.mean_rounds, 4),
        "runtime": round(r.report.mean_wall_ms / 1000.0, 6),
    } for r in results]


def write_frontier_csv(results: Sequence[EvalResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=FRONTIER_FIELDS)
        w.writeheader()
        w.writerows(frontier_rows(results))


VARIANTS: dict[str, dict[str, bool]] = {
    "full": {"carry_state": True, "structured_summary": True},
    "no_state_carryover": {"carry_state": False, "structured_summary": True},
    "no_structured_fields": {"carry_state": True, "structured_summary": False},
    "neither": {"carry_state": False, "structured_summary": False},
}


def ablate_components(items: Sequence[QAItem], backend: ModelBackend,
                      base: EpisodeConfig | None = None,
                      variants: Sequence[str] = tuple(VARIANTS), *, parallelism: int = 1,
                      template: PromptTemplate | None = None) -> dict[str, EvalResult]:
    base = base or EpisodeConfig()
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
    return {v: evaluate(items, backend, replace(base, **VARIANTS[v]), parallelism=parallelism,
                        template=template, name=v) for v in variants}


def comparison_table(reports: Mapping[str, MetricsReport], label: str = "variant") -> str:
    header = (label, "acc (%)", "frames", "rounds", "early stop (%)", "errors")
    rows = [header] + [(name, f"{r.accuracy:.2f}", f"{r.mean_frames:.2f}", f"{r.mean_rounds:.2f}",
                        f"{r.early_stop_rate:.2f}", str(r.n_errors)) for name, r in reports.items()]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)


__all__ = [
    "EmptyDataset", "ManifestError", "read_manifest", "items_from_records", "load_manifest",
    "MetricsReport", "report_from_log", "EvalResult", "evaluate", "sweep", "frontier_rows",
    "write_frontier_csv", "VARIANTS", "ablate_components", "comparison_table",
]
