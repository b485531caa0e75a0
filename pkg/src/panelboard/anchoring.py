"""Two-panel prompt composition, top-half synchronisation and cropping."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

PROMPT_TEMPLATE = "A storyboard of {reference} (top) and {scene} (bottom)"


def compose_prompt(reference: str, scene: str) -> str:
    """Composite prompt placing the reference above the scene."""
    if not reference or not reference.strip():
        raise ValueError("reference prompt is empty")
    if not scene or not scene.strip():
        raise ValueError("scene prompt is empty")
    return PROMPT_TEMPLATE.format(reference=reference, scene=scene)


@dataclass
class StoryboardSpec:
    story_id: str
    reference_prompt: str
    scene_prompts: list[str]
    seed: int = 0
    reuse_reference_scene: Optional[int] = None

    def __post_init__(self):
        if not self.scene_prompts:
            raise ValueError(f"{self.story_id}: at least one scene prompt is required")
        if any(not p or not p.strip() for p in self.scene_prompts):
            raise ValueError(f"{self.story_id}: empty scene prompt")
        r = self.reuse_reference_scene
        if r is not None and not 0 <= r < len(self.scene_prompts):
            raise ValueError(f"{self.story_id}: reuse_reference_scene {r} out of range")
        if r is None and (not self.reference_prompt or not self.reference_prompt.strip()):
            raise ValueError(f"{self.story_id}: empty reference prompt")

    @property
    def n(self) -> int:
        return len(self.scene_prompts)

    @property
    def effective_reference(self) -> str:
        if self.reuse_reference_scene is not None:
            return self.scene_prompts[self.reuse_reference_scene]
        return self.reference_prompt

    def batch_order(self) -> list[int]:
        """Scene indices in batch order; a reused reference scene goes first."""
        order = list(range(self.n))
        if self.reuse_reference_scene is not None:
            order.remove(self.reuse_reference_scene)
            order.insert(0, self.reuse_reference_scene)
        return order

    def composite_prompts(self) -> list[str]:
        """Composite prompts in batch order."""
        ref = self.effective_reference
        return [compose_prompt(ref, self.scene_prompts[i]) for i in self.batch_order()]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StoryboardSpec":
        return cls(
            story_id=str(d["story_id"]),
            reference_prompt=d.get("reference_prompt", ""),
            scene_prompts=list(d["scene_prompts"]),
            seed=int(d.get("seed", 0)),
            reuse_reference_scene=d.get("reuse_reference_scene"),
        )


def load_specs(path) -> list[StoryboardSpec]:
    """Read one spec object or a list of them from a JSON file."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [StoryboardSpec.from_dict(d) for d in data]


@dataclass
class PanelLatentBatch:
    """Stacked two-panel token grids, shape ``(n, 2H, W, d)``."""

    latents: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.latents.ndim != 4 or self.latents.shape[1] % 2:
            raise ValueError(f"expected (n, 2H, W, d) latents, got {self.latents.shape}")

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def half(self) -> int:
        return self.latents.shape[1] // 2

    def top(self, i: int) -> np.ndarray:
        return self.latents[i, : self.half]

    def bottom(self, i: int) -> np.ndarray:
        return self.latents[i, self.half :]

    def tops_synchronized(self) -> bool:
        tops = self.latents[:, : self.half]
        return bool(np.all(tops == tops[:1]))


def broadcast_top_rows(x: np.ndarray, rows: slice) -> np.ndarray:
    """Copy element 0's ``rows`` (along axis 1) to every batch element, in place."""
    x[1:, rows] = x[:1, rows]
    return x


def broadcast_reference(batch: PanelLatentBatch) -> PanelLatentBatch:
    """New batch whose top halves all equal element 0's top half."""
    latents = batch.latents.copy()
    broadcast_top_rows(latents, slice(0, batch.half))
    return replace(batch, latents=latents)


def crop_bottom(image: np.ndarray) -> np.ndarray:
    """Bottom sub-panel of a stacked two-panel image."""
    image = np.asarray(image)
    if image.shape[0] % 2:
        raise ValueError(f"image height {image.shape[0]} is odd")
    return image[image.shape[0] // 2 :].copy()
