"""Scene diversity: how much a subject's box and pose move across panels.

Raw per-story scores are the mean population std of the four normalised bbox
coordinates and the mean per-keypoint variance of 17 pose keypoints. Both
are min-max normalised over the evaluated set of stories, then combined:
the mean of the two for human subjects, the bbox score alone otherwise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

NUM_KEYPOINTS = 17
DEFAULT_CONFIDENCE = 0.35


class InsufficientDetections(ValueError):
    pass


class DetectorConfigError(Exception):
    pass


@dataclass
class PanelAnnotation:
    panel: int
    bbox: Optional[tuple[float, float, float, float]] = None
    keypoints: Optional[list[tuple[float, float]]] = None
    detected: bool = False
    score: Optional[float] = None

    def __post_init__(self):
        if self.bbox is not None:
            self.bbox = tuple(float(c) for c in self.bbox)
            x0, y0, x1, y1 = self.bbox
            if x0 > x1 or y0 > y1:
                raise ValueError(f"panel {self.panel}: malformed bbox {self.bbox}")
        if self.keypoints is not None:
            self.keypoints = [tuple(float(c) for c in kp) for kp in self.keypoints]
            if len(self.keypoints) != NUM_KEYPOINTS or any(len(kp) != 2 for kp in self.keypoints):
                raise ValueError(
                    f"panel {self.panel}: expected {NUM_KEYPOINTS} (x, y) keypoints, "
                    f"got {len(self.keypoints)}"
                )


@dataclass
class DiversityReport:
    story_id: str
    is_human: bool
    raw_bbox_std: float
    raw_pose_var: Optional[float] = None
    s_bbox: float = 0.0
    s_pose: Optional[float] = None
    final: float = 0.0
    detections: int = 0
    panels: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def bbox_std_score(annotations: Sequence[PanelAnnotation]) -> float:
    """Mean over the 4 coordinates of their population std across detected panels."""
    boxes = np.array([a.bbox for a in annotations if a.detected and a.bbox is not None], dtype=np.float64)
    if len(boxes) < 2:
        raise InsufficientDetections(f"need >= 2 detected boxes, got {len(boxes)}")
    # centring on the first panel keeps identical inputs at exactly zero
    return float((boxes - boxes[0]).std(axis=0).mean())


def pose_variance_score(annotations: Sequence[PanelAnnotation]) -> float:
    """Per-keypoint variance (mean of the x and y population variances),
    averaged over the 17 keypoints."""
    for a in annotations:
        if a.keypoints is not None and len(a.keypoints) != NUM_KEYPOINTS:
            raise ValueError(f"panel {a.panel}: expected {NUM_KEYPOINTS} keypoints")
    kps = np.array(
        [a.keypoints for a in annotations if a.detected and a.keypoints is not None], dtype=np.float64
    )
    if len(kps) < 2:
        raise InsufficientDetections(f"need >= 2 keypoint sets, got {len(kps)}")
    return float((kps - kps[0]).var(axis=0).mean(axis=1).mean())


def minmax_normalize(raw: Sequence[float]) -> list[float]:
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValueError("nothing to normalise")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return [0.0] * len(x)
    return ((x - lo) / (hi - lo)).tolist()


def scene_diversity(s_bbox: float, s_pose: Optional[float], is_human: bool) -> float:
    if is_human:
        if s_pose is None:
            raise ValueError("human subjects need a pose score")
        return 0.5 * (s_bbox + s_pose)
    return s_bbox


def raw_scores(story_id: str, annotations: Sequence[PanelAnnotation], is_human: bool) -> DiversityReport:
    """Un-normalised report for one story."""
    report = DiversityReport(
        story_id=story_id,
        is_human=is_human,
        raw_bbox_std=bbox_std_score(annotations),
        detections=sum(a.detected for a in annotations),
        panels=len(annotations),
    )
    if is_human:
        report.raw_pose_var = pose_variance_score(annotations)
    return report


def normalize_reports(reports: Sequence[DiversityReport]) -> list[DiversityReport]:
    """Fill ``s_bbox``, ``s_pose`` and ``final`` by min-max over ``reports``.

    Pose scores are normalised over the human stories only.
    """
    reports = list(reports)
    if not reports:
        return reports
    for r, s in zip(reports, minmax_normalize([r.raw_bbox_std for r in reports])):
        r.s_bbox = s
    humans = [r for r in reports if r.is_human]
    if humans:
        for r, s in zip(humans, minmax_normalize([r.raw_pose_var for r in humans])):
            r.s_pose = s
    for r in reports:
        r.final = scene_diversity(r.s_bbox, r.s_pose, r.is_human)
    return reports


# -- detection backends ----------------------------------------------------


class Detector(Protocol):
    def detect_panel(self, image, subject: str, *, story_id: str, panel_index: int) -> list[dict]:
        """Candidate detections ``{"bbox", "score", optional "keypoints"}``,
        coordinates normalised to [0, 1]."""


class FixtureDetector:
    """Reads detections from a JSON annotation file.

    Layout: ``{story_id: {panel_index: record | [record, ...] | null}}`` with
    ``record = {"bbox": [x0, y0, x1, y1], "keypoints": [[x, y] * 17], "score": s}``.
    A record may carry ``"image_size": [w, h]`` when its coordinates are in
    pixels; they are then divided by the image size.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise DetectorConfigError(f"annotation fixture {self.path} not found")
        self.data = json.loads(self.path.read_text())

    def detect_panel(self, image, subject, *, story_id, panel_index):
        record = self.data.get(story_id, {}).get(str(panel_index))
        if record is None:
            return []
        records = record if isinstance(record, list) else [record]
        return [_normalise(r) for r in records]


def _normalise(record: dict) -> dict:
    record = dict(record)
    size = record.pop("image_size", None)
    if size is not None:
        w, h = size
        if record.get("bbox") is not None:
            x0, y0, x1, y1 = record["bbox"]
            record["bbox"] = [x0 / w, y0 / h, x1 / w, y1 / h]
        if record.get("keypoints") is not None:
            record["keypoints"] = [[x / w, y / h] for x, y in record["keypoints"]]
    return record


def detect(
    panels: Sequence,
    subject: str,
    detector: Detector,
    story_id: str = "",
    threshold: float = DEFAULT_CONFIDENCE,
) -> list[PanelAnnotation]:
    """One annotation per panel from the most confident detection at or
    above ``threshold``; panels without one are marked undetected."""
    out = []
    for i, image in enumerate(panels):
        candidates = [
            c for c in detector.detect_panel(image, subject, story_id=story_id, panel_index=i)
            if c.get("bbox") is not None and c.get("score", 1.0) >= threshold
        ]
        if not candidates:
            out.append(PanelAnnotation(panel=i))
            continue
        best = max(candidates, key=lambda c: c.get("score", 1.0))
        out.append(
            PanelAnnotation(
                panel=i,
                bbox=tuple(best["bbox"]),
                keypoints=best.get("keypoints"),
                detected=True,
                score=best.get("score"),
            )
        )
    return out


def annotations_to_fixture(annotations: dict[str, Sequence[PanelAnnotation]]) -> dict:
    out = {}
    for story_id, anns in annotations.items():
        story = {}
        for a in anns:
            if not a.detected:
                story[str(a.panel)] = None
                continue
            rec = {"bbox": list(a.bbox), "score": 1.0 if a.score is None else a.score}
            if a.keypoints is not None:
                rec["keypoints"] = [list(kp) for kp in a.keypoints]
            story[str(a.panel)] = rec
        out[story_id] = story
    return out


def write_annotations(path, annotations: dict[str, Sequence[PanelAnnotation]]) -> None:
    Path(path).write_text(json.dumps(annotations_to_fixture(annotations), indent=2) + "\n")


def read_annotations(path, panels_per_story: Optional[dict[str, int]] = None) -> dict[str, list[PanelAnnotation]]:
    """Annotations for every story in a fixture file, via ``FixtureDetector``."""
    det = FixtureDetector(path)
    out = {}
    for story_id, story in det.data.items():
        n = (panels_per_story or {}).get(story_id, 1 + max((int(k) for k in story), default=-1))
        out[story_id] = detect([None] * n, "", det, story_id=story_id, threshold=0.0)
    return out
