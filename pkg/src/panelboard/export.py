"""PNG output, diagnostic sidecars and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 8-bit, clipping anything outside."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")
    return path


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def upscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement so token grids are visible."""
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def write_diagnostic(stem, image: np.ndarray, *, step: int, layer: int, anchor=None, grid=None, scale: int = 8) -> tuple[Path, Path]:
    """Write ``<stem>.png`` and a ``<stem>.json`` sidecar describing it."""
    stem = Path(stem)
    png = save_png(stem.with_suffix(".png"), upscale(image, scale))
    meta = {
        "step": step,
        "layer": layer,
        "anchor": list(anchor) if anchor is not None else None,
        "grid": list(grid) if grid is not None else list(image.shape[:2]),
    }
    side = stem.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2) + "\n")
    return png, side


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # name -> sha256 or snapshot
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    times: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def output_digest(self) -> Optional[str]:
        return sha256_json(self.outputs) if self.outputs else None
