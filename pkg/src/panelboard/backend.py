"""Denoising backend contract and a small deterministic diffusion transformer.

The toy model is only meant to exercise anchoring and value mixing end to
end at desk scale. Its joint sequence per batch element is
``[text tokens | top sub-panel tokens | bottom sub-panel tokens]``.

A real DiT adapter must offer the same two hook points on each dual-stream
block: attention access (read Q/K/V and the attention weights, return the
values to use) and post-block access to the hidden states of the whole
batch. It should default to 28 steps, guidance 3.5 and all 38 dual-stream
blocks.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .anchoring import PanelLatentBatch, StoryboardSpec, broadcast_top_rows, crop_bottom
from .attention import (
    AttentionView,
    ReciprocalState,
    build_correspondence,
    compute_attention,
    extract_cross_blocks,
    mix_values,
    reciprocal_scores,
    update_ema,
)


@dataclass
class BackendConfig:
    steps: int = 28
    guidance: float = 3.5  # stored for adapters; the toy model runs one conditional branch
    lam: float = 0.5
    momentum: float = 0.8
    ravm_blocks: Optional[tuple[int, ...]] = None  # None means every block
    ravm_start: int = 0
    ravm_end: Optional[int] = None  # None means `steps`
    lpa: bool = True
    ravm: bool = True
    H_tok: int = 8
    W_tok: int = 8
    d: int = 32
    heads: int = 2
    blocks: int = 4
    text_tokens: int = 8
    patch: int = 4
    seed: int = 0  # frozen weight seed; noise comes from the storyboard seed
    record_snapshots: bool = False

    def __post_init__(self):
        if self.ravm_blocks is not None:
            self.ravm_blocks = tuple(int(b) for b in self.ravm_blocks)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        start, end = self.ravm_step_range
        if not (0 <= start and end <= self.steps and start <= end):
            raise ValueError(f"ravm step range [{start}, {end}) outside [0, {self.steps})")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.H_tok, self.W_tok, self.blocks, self.text_tokens, self.patch) < 1:
            raise ValueError("toy dimensions must be positive")
        for b in self.ravm_blocks or ():
            if not 0 <= b < self.blocks:
                raise ValueError(f"ravm block {b} outside [0, {self.blocks})")

    @property
    def P(self) -> int:
        return self.H_tok * self.W_tok

    @property
    def ravm_step_range(self) -> tuple[int, int]:
        return self.ravm_start, self.steps if self.ravm_end is None else self.ravm_end

    @property
    def ravm_block_set(self) -> frozenset[int]:
        if self.ravm_blocks is None:
            return frozenset(range(self.blocks))
        return frozenset(self.ravm_blocks)

    def ravm_active(self, step: int, block: int) -> bool:
        start, end = self.ravm_step_range
        return self.ravm and start <= step < end and block in self.ravm_block_set

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["ravm_blocks"] is not None:
            d["ravm_blocks"] = list(d["ravm_blocks"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "BackendConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a key/value mapping")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "BackendConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class RunDiagnostics:
    """Per-site records from one run, all as ``(step, block, element, value)``."""

    snapshots: list = field(default_factory=list)
    correspondence_sizes: list = field(default_factory=list)
    value_distances: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def mean_value_distance(self) -> float:
        if not self.value_distances:
            return float("nan")
        return float(np.mean([r[3] for r in self.value_distances]))

    def summary(self) -> dict:
        sizes = [r[3] for r in self.correspondence_sizes]
        return {
            "ravm_sites": len(sizes),
            "mean_correspondence_size": float(np.mean(sizes)) if sizes else 0.0,
            "mean_value_distance": self.mean_value_distance() if sizes else None,
            "timing": dict(self.timing),
        }


class Hooks:
    """Intervention points. Subclasses override what they need."""

    def on_attention(
        self, element: int, step: int, block: int, view: AttentionView, A: np.ndarray
    ) -> Optional[np.ndarray]:
        """Return replacement values for ``view.V`` or None to leave them."""
        return None

    def on_block_end(self, step: int, block: int, hidden: np.ndarray) -> None:
        """``hidden`` is the batch's joint sequence ``(n, tokens, d)``; edit in place."""


class HookChain(Hooks):
    def __init__(self, hooks: Sequence[Hooks]):
        self.hooks = list(hooks)

    def on_attention(self, element, step, block, view, A):
        changed = False
        for h in self.hooks:
            out = h.on_attention(element, step, block, view, A)
            if out is not None:
                view = replace(view, V=out)
                changed = True
        return view.V if changed else None

    def on_block_end(self, step, block, hidden):
        for h in self.hooks:
            h.on_block_end(step, block, hidden)


class AnchorHook(Hooks):
    """Overwrite every element's top sub-panel tokens with element 0's."""

    def __init__(self, image_start: int, P: int):
        self.rows = slice(image_start, image_start + P)

    def on_block_end(self, step, block, hidden):
        broadcast_top_rows(hidden, self.rows)


class ValueMixingHook(Hooks):
    """Reciprocal attention value mixing with one running state per element."""

    def __init__(self, config: BackendConfig, n: int, diagnostics: Optional[RunDiagnostics] = None):
        self.config = config
        self.grid = (config.H_tok, config.W_tok)
        self.states = [ReciprocalState(momentum=config.momentum) for _ in range(n)]
        self.diagnostics = diagnostics

    def on_attention(self, element, step, block, view, A):
        if not self.config.ravm_active(step, block):
            return None
        A_tb, A_bt = extract_cross_blocks(A, view)
        state = update_ema(self.states[element], reciprocal_scores(A_tb, A_bt))
        self.states[element] = state
        cmap = build_correspondence(state, self.grid, self.config.lam)
        V = mix_values(view.V, cmap, view)
        if self.diagnostics is not None:
            site = (step, block, element)
            self.diagnostics.correspondence_sizes.append((*site, len(cmap)))
            self.diagnostics.value_distances.append((*site, partner_value_distance(V, state, view)))
            if self.config.record_snapshots:
                self.diagnostics.snapshots.append((*site, state.M_bar.copy()))
        return V


def partner_value_distance(V: np.ndarray, state: ReciprocalState, view: AttentionView) -> float:
    """Mean L2 distance between each bottom value and its argmax top partner's
    value, averaged over bottom tokens and heads."""
    partners = state.M_bar.argmax(axis=0)
    bottom = V[:, view.bottom].astype(np.float64)
    top = V[:, view.image_start + partners].astype(np.float64)
    return float(np.linalg.norm(bottom - top, axis=-1).mean())


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + 1e-6)).astype(np.float32)


def _prompt_seed(prompt: str) -> int:
    return int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")


class ToyDiT:
    """Frozen, seeded joint-attention transformer over text and image tokens."""

    def __init__(self, config: BackendConfig):
        self.config = config
        c = config
        rng = np.random.default_rng([c.seed, 0])

        def w(*shape):
            return (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(np.float32)

        self.blocks = [
            {
                "q": w(c.d, c.d),
                "k": w(c.d, c.d),
                "v": w(c.d, c.d),
                "o": w(c.d, c.d),
                "ff1": w(c.d, 2 * c.d),
                "ff2": w(2 * c.d, c.d),
            }
            for _ in range(c.blocks)
        ]
        self.w_out = w(c.d, c.d)
        self.freqs = np.exp(-np.log(100.0) * np.arange(c.d // 2) / max(c.d // 2, 1))

    def text_embedding(self, prompt: str) -> np.ndarray:
        rng = np.random.default_rng([_prompt_seed(prompt), self.config.seed])
        return rng.standard_normal((self.config.text_tokens, self.config.d)).astype(np.float32)

    def time_embedding(self, step: int) -> np.ndarray:
        t = step / self.config.steps
        ang = t * self.freqs * np.pi
        emb = np.zeros(self.config.d, dtype=np.float32)
        emb[: len(ang)] = np.sin(ang)
        emb[len(ang) : 2 * len(ang)] = np.cos(ang)
        return emb

    def _attend(self, blk, h, element, step, b, hooks):
        c = self.config
        dh = c.d // c.heads
        z = _layer_norm(h)

        def split(m):
            return (z @ m).reshape(-1, c.heads, dh).transpose(1, 0, 2)

        view = AttentionView(split(blk["q"]), split(blk["k"]), split(blk["v"]), c.text_tokens, c.P)
        A = compute_attention(view.Q, view.K)
        V = hooks.on_attention(element, step, b, view, A) if hooks else None
        if V is None:
            V = view.V
        out = (A @ V).transpose(1, 0, 2).reshape(-1, c.d)
        return out @ blk["o"]

    def forward(self, x: np.ndarray, text: np.ndarray, step: int, hooks: Optional[Hooks] = None) -> np.ndarray:
        """Clean-latent prediction for a batch of flattened latents ``(n, 2P, d)``."""
        T = self.config.text_tokens
        hidden = np.concatenate([text, x + self.time_embedding(step)], axis=1).astype(np.float32)
        for b, blk in enumerate(self.blocks):
            for e in range(hidden.shape[0]):
                h = hidden[e]
                h = h + self._attend(blk, h, e, step, b, hooks)
                h = h + np.tanh(_layer_norm(h) @ blk["ff1"]) @ blk["ff2"]
                hidden[e] = h
            if hooks:
                hooks.on_block_end(step, b, hidden)
        return _layer_norm(hidden[:, T:]) @ self.w_out


def initial_noise(spec: StoryboardSpec, config: BackendConfig) -> np.ndarray:
    """Independent noise per scene, derived from (seed, scene index), in batch order."""
    shape = (2 * config.H_tok, config.W_tok, config.d)
    return np.stack(
        [
            np.random.default_rng([spec.seed, i]).standard_normal(shape).astype(np.float32)
            for i in spec.batch_order()
        ]
    )


def toy_denoise(
    spec: StoryboardSpec,
    config: BackendConfig,
    hooks: Optional[Hooks] = None,
    diagnostics: Optional[RunDiagnostics] = None,
) -> tuple[PanelLatentBatch, RunDiagnostics]:
    """Run the linear noise-to-prediction sampler over the whole batch.

    Hooks fire once per (step, block, element) in ascending order. When
    ``config.lpa`` is set the latent tops are also re-synchronised at
    initialisation and after each sampler update.
    """
    diagnostics = diagnostics or RunDiagnostics()
    t0 = time.perf_counter()
    model = ToyDiT(config)
    n = spec.n
    text = np.stack([model.text_embedding(p) for p in spec.composite_prompts()])
    x = initial_noise(spec, config).reshape(n, 2 * config.P, config.d)
    top = slice(0, config.P)
    if config.lpa:
        broadcast_top_rows(x, top)
    for step in range(config.steps):
        pred = model.forward(x, text, step, hooks)
        x = x + (pred - x) / np.float32(config.steps - step)
        if config.lpa:
            broadcast_top_rows(x, top)
    diagnostics.timing["denoise_s"] = time.perf_counter() - t0
    latents = x.reshape(n, 2 * config.H_tok, config.W_tok, config.d)
    return PanelLatentBatch(latents, step=config.steps), diagnostics


class ToyDecoder:
    """Fixed seeded linear projection of each token to a ``patch x patch`` RGB block."""

    def __init__(self, config: BackendConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 1])
        k = config.patch * config.patch * 3
        self.weight = (0.25 * rng.standard_normal((config.d, k)) / np.sqrt(config.d)).astype(np.float32)
        self.bias = (0.5 + 0.1 * rng.standard_normal(k)).astype(np.float32)

    def __call__(self, latent: np.ndarray) -> np.ndarray:
        H2, W, d = latent.shape
        p = self.config.patch
        pix = latent.astype(np.float32) @ self.weight + self.bias
        return pix.reshape(H2, W, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(H2 * p, W * p, 3)


def toy_decode(latent: np.ndarray, config: BackendConfig) -> np.ndarray:
    return ToyDecoder(config)(latent)


def build_hooks(spec: StoryboardSpec, config: BackendConfig, diagnostics: RunDiagnostics) -> Optional[Hooks]:
    hooks: list[Hooks] = []
    if config.ravm:
        hooks.append(ValueMixingHook(config, spec.n, diagnostics))
    if config.lpa:
        hooks.append(AnchorHook(config.text_tokens, config.P))
    return HookChain(hooks) if hooks else None


@dataclass
class StoryboardResult:
    panels: list[np.ndarray]  # in scene order
    composites: list[np.ndarray]  # in scene order
    latents: PanelLatentBatch  # in batch order
    diagnostics: RunDiagnostics


def run_storyboard(
    spec: StoryboardSpec, config: BackendConfig, extra_hooks: Sequence[Hooks] = ()
) -> StoryboardResult:
    """Generate, decode and crop one storyboard, returning ``spec.n`` panels."""
    diagnostics = RunDiagnostics()
    hooks = build_hooks(spec, config, diagnostics)
    if extra_hooks:
        hooks = HookChain(([hooks] if hooks else []) + list(extra_hooks))
    latents, diagnostics = toy_denoise(spec, config, hooks, diagnostics)
    decoder = ToyDecoder(config)
    composites_batch = [decoder(latents.latents[i]) for i in range(spec.n)]
    composites: list = [None] * spec.n
    for b, scene in enumerate(spec.batch_order()):
        composites[scene] = composites_batch[b]
    panels = [crop_bottom(img) for img in composites]
    return StoryboardResult(panels, composites, latents, diagnostics)


class CaptureHook(Hooks):
    """Record keys and a reciprocal state for one (step, block, element) site.

    The running state is updated at every site where value mixing would be
    active (ignoring the on/off switch), so heatmaps are available even for
    runs without mixing and match the mixing hook's state when it is on.
    """

    def __init__(self, config: BackendConfig, element: int, step: int, block: int):
        self.config = config
        self.site = (element, step, block)
        self.state = ReciprocalState(momentum=config.momentum)
        self.keys: Optional[np.ndarray] = None
        self.captured: Optional[ReciprocalState] = None

    def on_attention(self, element, step, block, view, A):
        if element != self.site[0]:
            return None
        start, end = self.config.ravm_step_range
        if start <= step < end and block in self.config.ravm_block_set:
            A_tb, A_bt = extract_cross_blocks(A, view)
            self.state = update_ema(self.state, reciprocal_scores(A_tb, A_bt))
        if (step, block) == self.site[1:]:
            img = slice(view.image_start, view.image_end)
            self.keys = view.K[:, img].transpose(1, 0, 2).reshape(2 * view.P, -1).copy()
            self.captured = self.state
        return None
