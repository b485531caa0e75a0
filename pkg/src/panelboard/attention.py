"""Reciprocal attention value mixing over a stacked two-panel token grid.

Everything here is a pure function over numpy arrays. The image part of the
joint token sequence holds ``2P`` tokens: the first ``P`` belong to the top
(reference) sub-panel and the next ``P`` to the bottom (scene) sub-panel.
Reciprocal matrices are always indexed ``[top u, bottom v]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

OTSU_BINS = 256

# 3x3 cross used for the opening
CROSS = ndimage.generate_binary_structure(2, 1)


class DegenerateHistogram(ValueError):
    """Raised when every value falls in one place and no split exists."""


@dataclass
class AttentionView:
    """Per-block Q/K/V of one batch element, with the image-token layout."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    image_start: int
    P: int

    def __post_init__(self):
        if not (self.Q.shape == self.K.shape == self.V.shape):
            raise ValueError(
                f"Q, K, V shapes differ: {self.Q.shape}, {self.K.shape}, {self.V.shape}"
            )
        if self.Q.ndim != 3:
            raise ValueError(f"expected (heads, tokens, d_head), got {self.Q.shape}")
        if self.P < 1 or self.image_start < 0 or self.image_end > self.Q.shape[1]:
            raise ValueError(
                f"image range [{self.image_start}, {self.image_end}) outside "
                f"{self.Q.shape[1]} tokens"
            )

    @property
    def heads(self) -> int:
        return self.Q.shape[0]

    @property
    def d_head(self) -> int:
        return self.Q.shape[2]

    @property
    def image_end(self) -> int:
        return self.image_start + 2 * self.P

    @property
    def image_token_range(self) -> tuple[int, int]:
        return self.image_start, self.image_end

    @property
    def top(self) -> slice:
        return slice(self.image_start, self.image_start + self.P)

    @property
    def bottom(self) -> slice:
        return slice(self.image_start + self.P, self.image_end)


@dataclass
class ReciprocalState:
    """Running average of the reciprocal score matrix for one batch element."""

    momentum: float = 0.8
    M_bar: Optional[np.ndarray] = None
    updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if (self.updates == 0) != (self.M_bar is None):
            raise ValueError("M_bar must be set exactly when updates > 0")


@dataclass
class CorrespondenceMap:
    """Selected bottom tokens and their strongest top-panel partners.

    ``entries`` holds ``(bottom v, top u, score)`` triples sorted by ``v``.
    """

    entries: list[tuple[int, int, float]] = field(default_factory=list)
    lam: float = 0.5
    grid: tuple[int, int] = (1, 1)

    def __len__(self):
        return len(self.entries)

    @property
    def bottom_indices(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries], dtype=np.int64)

    @property
    def top_indices(self) -> np.ndarray:
        return np.array([e[1] for e in self.entries], dtype=np.int64)


def compute_attention(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Row-stochastic ``softmax(Q K^T / sqrt(d))`` per head.

    Accepts ``(N, d)`` or ``(heads, N, d)``. Logits and normalisation are
    accumulated in float64; the result is float32.
    """
    Q = np.asarray(Q)
    K = np.asarray(K)
    if Q.shape != K.shape:
        raise ValueError(f"Q and K shapes differ: {Q.shape} vs {K.shape}")
    if Q.ndim not in (2, 3) or Q.shape[-1] < 1:
        raise ValueError(f"expected (..., N, d) with d >= 1, got {Q.shape}")
    q = Q.astype(np.float64)
    k = K.astype(np.float64)
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w.astype(np.float32)


def extract_cross_blocks(A: np.ndarray, view: AttentionView) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged top->bottom and bottom->top attention blocks, each (P, P)."""
    if A.ndim == 2:
        A = A[None]
    if A.shape[-1] != A.shape[-2] or view.image_end > A.shape[-1]:
        raise ValueError(
            f"image range {view.image_token_range} does not fit attention of shape {A.shape}"
        )
    A_tb = A[:, view.top, view.bottom].astype(np.float64).mean(axis=0)
    A_bt = A[:, view.bottom, view.top].astype(np.float64).mean(axis=0)
    return A_tb.astype(np.float32), A_bt.astype(np.float32)


def reciprocal_scores(A_tb: np.ndarray, A_bt: np.ndarray) -> np.ndarray:
    """``M[u, v] = min(A_tb[u, v], A_bt[v, u])``."""
    A_tb = np.asarray(A_tb)
    A_bt = np.asarray(A_bt)
    if A_tb.ndim != 2 or A_tb.shape != A_bt.T.shape:
        raise ValueError(f"incompatible blocks {A_tb.shape} and {A_bt.shape}")
    return np.minimum(A_tb, A_bt.T)


def update_ema(state: ReciprocalState, M: np.ndarray) -> ReciprocalState:
    """Fold one reciprocal matrix into the running average.

    The first observation initialises the average; later ones blend as
    ``mu * M_bar + (1 - mu) * M``. Returns a new state.
    """
    M = np.asarray(M, dtype=np.float32)
    if state.updates == 0:
        M_bar = M.copy()
    else:
        if M.shape != state.M_bar.shape:
            raise ValueError(f"shape {M.shape} does not match running {state.M_bar.shape}")
        mu = state.momentum
        M_bar = (mu * state.M_bar.astype(np.float64) + (1.0 - mu) * M).astype(np.float32)
    return ReciprocalState(momentum=state.momentum, M_bar=M_bar, updates=state.updates + 1)


def histogram(values: np.ndarray, bins: int = OTSU_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram over [min, max] with right-closed bins.

    Bin ``i`` covers ``(edges[i], edges[i+1]]``; the first bin also takes the
    minimum. With this convention a value lands in bin ``>= k`` exactly when it
    is strictly above ``edges[k]``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(values.min(), values.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return counts, edges


def otsu_split(counts: np.ndarray) -> int:
    """Boundary index ``k`` (classes ``[0, k)`` and ``[k, bins)``) maximising
    the between-class variance of a histogram.

    Comparisons are done in exact integer arithmetic on bin indices (bin
    centres are affine in the index, which leaves the argmax unchanged), so
    ties resolve deterministically to the lowest ``k``.
    """
    counts = [int(c) for c in counts]
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = -1, 0, 1
    n0 = s0 = 0
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_sum - s0
        # sigma_b^2 * total^2 == (n1*s0 - n0*s1)^2 / (n0*n1)
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    if best_k < 0 or best_num == 0:
        raise DegenerateHistogram("histogram has no split with positive between-class variance")
    return best_k


def otsu_threshold(values, bins: int = OTSU_BINS) -> float:
    """Otsu threshold of ``values``; select with ``values > threshold``."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("need at least two values")
    if bins < 2:
        raise ValueError("need at least two bins")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if values.min() == values.max():
        raise DegenerateHistogram("all values identical")
    counts, edges = histogram(values, bins)
    return float(edges[otsu_split(counts)])


def morphological_filter(mask: np.ndarray) -> np.ndarray:
    """Binary opening with a 3x3 cross and zero padding.

    Grids narrower than the kernel in either direction are returned as-is.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    if min(mask.shape) < 3:
        return mask.copy()
    return ndimage.binary_opening(mask, structure=CROSS, border_value=0)


def build_correspondence(
    state: ReciprocalState, grid: tuple[int, int], lam: float = 0.5, bins: int = OTSU_BINS
) -> CorrespondenceMap:
    """Pick bottom tokens with confident reciprocal partners.

    Each bottom token is scored by its column maximum in ``M_bar``. Otsu picks
    the confident ones, the opening cleans the mask on the token grid, and each
    survivor is paired with its argmax top token (lowest index on ties). A
    degenerate histogram yields an empty map.
    """
    if state.updates < 1:
        raise ValueError("reciprocal state has no observations yet")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    M_bar = state.M_bar
    H, W = grid
    if H * W != M_bar.shape[1]:
        raise ValueError(f"grid {grid} does not hold {M_bar.shape[1]} tokens")

    scores = M_bar.max(axis=0)
    try:
        thr = otsu_threshold(scores, bins)
    except DegenerateHistogram:
        return CorrespondenceMap([], lam, (H, W))
    mask = morphological_filter((scores > thr).reshape(H, W)).ravel()
    partners = M_bar.argmax(axis=0)
    entries = [(int(v), int(partners[v]), float(M_bar[partners[v], v])) for v in np.flatnonzero(mask)]
    return CorrespondenceMap(entries, lam, (H, W))


def mix_values(V: np.ndarray, cmap: CorrespondenceMap, view: AttentionView) -> np.ndarray:
    """Blend each selected bottom value with its top partner, in every head.

    ``V'[v] = lam * V[v] + (1 - lam) * V[u*]``; every other row is copied
    untouched.
    """
    out = V.copy()
    if not cmap.entries:
        return out
    v = cmap.bottom_indices
    u = cmap.top_indices
    if v.max() >= view.P or u.max() >= view.P or min(v.min(), u.min()) < 0:
        raise ValueError("correspondence index outside the sub-panel")
    lam = np.float32(cmap.lam)
    rows_b = view.image_start + view.P + v
    rows_t = view.image_start + u
    out[:, rows_b] = lam * V[:, rows_b] + (np.float32(1.0) - lam) * V[:, rows_t]
    return out


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


def key_pca_map(K: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Project the keys of a two-panel region onto three principal components
    and render them as an RGB image of shape ``(2H, W, 3)``.

    Each channel is min-max scaled to [0, 1]. Channels without variance
    (numerically rank-deficient keys) are set to 0.5. Component signs are
    fixed so the largest loading is positive.
    """
    K = np.asarray(K, dtype=np.float64)
    H, W = grid
    if K.ndim != 2 or K.shape[0] != 2 * H * W:
        raise ValueError(f"expected ({2 * H * W}, d) keys, got {K.shape}")
    if K.shape[0] < 3:
        raise ValueError("need at least three tokens")
    X = K - K.mean(axis=0)
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    tol = s.max(initial=0.0) * max(X.shape) * np.finfo(np.float64).eps
    rgb = np.full((X.shape[0], 3), 0.5)
    for c in range(min(3, len(s))):
        if s[c] <= tol or s[c] == 0.0:
            continue
        comp = Vt[c]
        comp = comp * np.sign(comp[np.argmax(np.abs(comp))])
        rgb[:, c] = _minmax(X @ comp)
    return rgb.reshape(2 * H, W, 3)


def reciprocal_heatmap(
    state: ReciprocalState, anchor: tuple[str, int], grid: tuple[int, int]
) -> np.ndarray:
    """Reciprocal scores against one anchor token, min-max scaled on the
    opposite panel's grid.

    A bottom anchor ``v`` reads column ``M_bar[:, v]`` (scores over the top
    panel); a top anchor ``u`` reads row ``M_bar[u, :]``. Constant profiles
    map to zeros.
    """
    if state.updates < 1:
        raise ValueError("reciprocal state has no observations yet")
    panel, index = anchor
    if panel == "bottom":
        profile = state.M_bar[:, index]
    elif panel == "top":
        profile = state.M_bar[index, :]
    else:
        raise ValueError(f"anchor panel must be 'top' or 'bottom', got {panel!r}")
    return _minmax(profile.astype(np.float64)).reshape(grid)
