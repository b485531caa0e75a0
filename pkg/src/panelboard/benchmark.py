"""Benchmark file handling and the per-story evaluation harness."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .diversity import Detector, DiversityReport, detect, minmax_normalize, normalize_reports, raw_scores

logger = logging.getLogger(__name__)

PANELS_PER_STORY = 7


class BenchmarkParseError(ValueError):
    pass


class BenchmarkValidationError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class BenchmarkLookupError(LookupError):
    pass


@dataclass
class BenchmarkEntry:
    story_id: str
    full_story: str
    character_description: str
    is_human: bool
    panel_prompts: list[str]
    annotations: Optional[str] = None

    def problems(self) -> list[str]:
        errs = []
        if not self.story_id:
            errs.append("missing story_id")
        if not self.full_story.strip():
            errs.append(f"{self.story_id}: empty story")
        if len(self.panel_prompts) != PANELS_PER_STORY:
            errs.append(
                f"{self.story_id}: expected {PANELS_PER_STORY} panel prompts, got {len(self.panel_prompts)}"
            )
        if any(not p.strip() for p in self.panel_prompts):
            errs.append(f"{self.story_id}: empty panel prompt")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["annotations"] is None:
            del d["annotations"]
        return d


def _entry_from_dict(d: Any, index: int) -> BenchmarkEntry:
    if not isinstance(d, dict):
        raise BenchmarkValidationError([f"entry {index}: not an object"])
    missing = [k for k in ("story_id", "full_story", "panel_prompts") if k not in d]
    if missing:
        raise BenchmarkValidationError([f"entry {index} ({d.get('story_id', '?')}): missing {missing}"])
    return BenchmarkEntry(
        story_id=str(d["story_id"]),
        full_story=str(d["full_story"]),
        character_description=str(d.get("character_description", "")),
        is_human=bool(d.get("is_human", False)),
        panel_prompts=[str(p) for p in d["panel_prompts"]],
        annotations=d.get("annotations"),
    )


def parse_benchmark(text: str, source: str = "<string>") -> list[BenchmarkEntry]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BenchmarkParseError(f"{source}: {exc}") from exc
    if not isinstance(data, list):
        raise BenchmarkParseError(f"{source}: expected a JSON array of entries")
    entries, errors = [], []
    for i, d in enumerate(data):
        try:
            entry = _entry_from_dict(d, i)
        except BenchmarkValidationError as exc:
            errors.extend(exc.errors)
            continue
        errors.extend(entry.problems())
        entries.append(entry)
    ids = [e.story_id for e in entries]
    errors.extend(f"{sid}: duplicate story_id" for sid in sorted({s for s in ids if ids.count(s) > 1}))
    if errors:
        raise BenchmarkValidationError(errors)
    return entries


def load_benchmark(path) -> list[BenchmarkEntry]:
    path = Path(path)
    return parse_benchmark(path.read_text(), str(path))


def dump_benchmark(entries: Sequence[BenchmarkEntry]) -> str:
    return json.dumps([e.to_dict() for e in entries], indent=2, ensure_ascii=False) + "\n"


def save_benchmark(entries: Sequence[BenchmarkEntry], path) -> None:
    Path(path).write_text(dump_benchmark(entries))


def sample_benchmark_path() -> Path:
    return Path(__file__).parent / "data" / "benchmark_sample.json"


# -- scorers -----------------------------------------------------------------


class Scorer:
    """Per-story metric. ``score`` may return any raw value; ``finalize``
    turns the raw values of all successful stories into floats (this is where
    set-level normalisation happens)."""

    name = "metric"

    def score(self, story_id: str, panels: Sequence[np.ndarray], entry: BenchmarkEntry) -> Any:
        raise NotImplementedError

    def finalize(self, raw: Mapping[str, Any]) -> dict[str, float]:
        return {k: float(v) for k, v in raw.items()}

    def details(self) -> Optional[dict]:
        return None


class FunctionScorer(Scorer):
    """Wrap a plain ``fn(panels, entry) -> float``; optionally min-max
    normalise over the evaluated set. This is the adapter point for external
    metrics such as prompt-alignment or identity-similarity models."""

    def __init__(self, name: str, fn: Callable[[Sequence[np.ndarray], BenchmarkEntry], float], normalize: bool = False):
        self.name = name
        self.fn = fn
        self.normalize = normalize

    def score(self, story_id, panels, entry):
        return float(self.fn(panels, entry))

    def finalize(self, raw):
        if not self.normalize or not raw:
            return super().finalize(raw)
        keys = list(raw)
        return dict(zip(keys, minmax_normalize([raw[k] for k in keys])))


class SceneDiversityScorer(Scorer):
    name = "scene_diversity"

    def __init__(self, detector: Detector, threshold: float = 0.35):
        self.detector = detector
        self.threshold = threshold
        self._reports: dict[str, DiversityReport] = {}

    def score(self, story_id, panels, entry):
        subject = entry.character_description or entry.story_id
        anns = detect(panels, subject, self.detector, story_id=story_id, threshold=self.threshold)
        return raw_scores(story_id, anns, entry.is_human)

    def finalize(self, raw):
        reports = normalize_reports(raw.values())
        self._reports = {r.story_id: r for r in reports}
        return {r.story_id: r.final for r in reports}

    def details(self):
        return {
            "normalized_over": sorted(self._reports),
            "reports": {k: r.to_dict() for k, r in sorted(self._reports.items())},
        }


# -- evaluation --------------------------------------------------------------


@dataclass
class EvaluationReport:
    scores: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregates: dict[str, float] = field(default_factory=dict)
    failures: dict[str, dict[str, str]] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(
    storyboards: Mapping[str, Sequence[np.ndarray]],
    entries: Sequence[BenchmarkEntry],
    scorers: Sequence[Scorer],
    provenance: Optional[dict] = None,
) -> EvaluationReport:
    """Score every storyboard with every scorer, then aggregate by mean.

    A scorer that raises on a story records the failure for that story and
    metric only; the story is left out of that metric's normalisation and
    mean.
    """
    by_id = {e.story_id: e for e in entries}
    missing = sorted(sid for sid in storyboards if sid not in by_id)
    if missing:
        raise BenchmarkLookupError(f"no benchmark entry for: {', '.join(missing)}")
    report = EvaluationReport(provenance=dict(provenance or {}))
    story_ids = sorted(storyboards)
    for scorer in scorers:
        raw, failed = {}, {}
        for sid in story_ids:
            try:
                raw[sid] = scorer.score(sid, storyboards[sid], by_id[sid])
            except Exception as exc:  # recorded, never propagated into other metrics
                logger.warning("%s failed on %s: %s", scorer.name, sid, exc)
                failed[sid] = f"{type(exc).__name__}: {exc}"
        final = scorer.finalize(raw) if raw else {}
        report.scores[scorer.name] = {sid: final[sid] for sid in story_ids if sid in final}
        if report.scores[scorer.name]:
            vals = list(report.scores[scorer.name].values())
            report.aggregates[scorer.name] = sum(vals) / len(vals)
        if failed:
            report.failures[scorer.name] = failed
        extra = scorer.details()
        if extra is not None:
            report.details[scorer.name] = extra
    return report
