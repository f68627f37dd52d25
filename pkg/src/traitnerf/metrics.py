"""Image-quality and biometric verification/identification metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InsufficientScoresError, ShapeError, TraitNeRFError

INF_SENTINEL = "inf"


# -- image quality -----------------------------------------------------------

def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only windows fully inside the image."""
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Mean local SSIM over all full windows, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if window % 2 == 0:
        raise ValueError("ssim window must be odd")
    if min(a.shape[:2]) < window:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# -- verification --------------------------------------------------------------

@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()

    def require_both(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InsufficientScoresError(
                f"need genuine and impostor scores, got {self.genuine.size} and {self.impostor.size}")


def _rates(s: ScoreSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.sort(s.genuine)
    imp = np.sort(s.impostor)
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(g, thresholds, side="left") / g.size
    return far, frr


def det_points(s: ScoreSet) -> np.ndarray:
    """``(threshold, FAR, FRR)`` rows for every distinct score plus one value past the maximum.

    Sorted by increasing threshold, so FAR falls and FRR rises down the table.
    """
    s.require_both()
    scores = np.unique(np.concatenate([s.genuine, s.impostor]))
    top = scores[-1] + max(1.0, abs(scores[-1]))
    thresholds = np.append(scores, top)
    far, frr = _rates(s, thresholds)
    return np.column_stack([thresholds, far, frr])


def eer(s: ScoreSet) -> float:
    """Equal error rate by linear interpolation where FAR - FRR changes sign."""
    pts = det_points(s)
    diff = pts[:, 1] - pts[:, 2]
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        return float(pts[zero[0], 1])
    k = int(np.flatnonzero(diff < 0)[0])  # the final row always has FAR 0 and FRR 1
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    far = pts[k - 1, 1] + alpha * (pts[k, 1] - pts[k - 1, 1])
    frr = pts[k - 1, 2] + alpha * (pts[k, 2] - pts[k - 1, 2])
    return float(0.5 * (far + frr))


def tar_at_far(s: ScoreSet, far_target: float) -> float:
    """True accept rate at the most permissive threshold whose FAR does not exceed the target."""
    if not 0.0 < far_target < 1.0:
        raise ValueError(f"far_target must lie in (0, 1), got {far_target}")
    pts = det_points(s)
    ok = np.flatnonzero(pts[:, 1] <= far_target)
    return float(1.0 - pts[ok[0], 2])


# -- identification -------------------------------------------------------------

@dataclass
class IdentificationTrial:
    """Close-set trial: ``similarity[i, j]`` scores probe ``i`` against gallery item ``j``."""

    similarity: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.similarity = np.asarray(self.similarity, dtype=np.float64)
        self.probe_labels = np.asarray(self.probe_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.gallery_labels.size == 0:
            raise InsufficientScoresError("gallery is empty")
        if self.similarity.shape != (self.probe_labels.size, self.gallery_labels.size):
            raise ShapeError(f"similarity {self.similarity.shape} does not match "
                             f"{self.probe_labels.size} probes x {self.gallery_labels.size} gallery items")
        missing = set(self.probe_labels.tolist()) - set(self.gallery_labels.tolist())
        if missing:
            raise TraitNeRFError(f"probe labels absent from gallery: {sorted(missing)}")

    @classmethod
    def from_embeddings(cls, probes, probe_labels, gallery, gallery_labels,
                        similarity: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None):
        sim = (similarity or cosine_similarity)(np.asarray(probes), np.asarray(gallery))
        return cls(sim, probe_labels, gallery_labels)

    def ranked_hits(self) -> np.ndarray:
        """Boolean ``(probes, gallery)``: is the k-th ranked gallery item a correct match."""
        order = np.argsort(-self.similarity, axis=1, kind="stable")
        return self.gallery_labels[order] == self.probe_labels[:, None]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def cmc(trial: IdentificationTrial) -> np.ndarray:
    """Rank-k accuracy for k = 1..len(gallery)."""
    hits = trial.ranked_hits()
    first = np.argmax(hits, axis=1)
    counts = np.bincount(first, minlength=hits.shape[1])
    return np.cumsum(counts) / hits.shape[0]


def rank_k(trial: IdentificationTrial, k: int) -> float:
    curve = cmc(trial)
    return float(curve[min(k, len(curve)) - 1])


def mean_average_precision(trial: IdentificationTrial) -> float:
    hits = trial.ranked_hits()
    positions = np.arange(1, hits.shape[1] + 1)
    aps = []
    for row in hits:
        rank = positions[row]
        aps.append(np.mean(np.arange(1, rank.size + 1) / rank))
    return float(np.mean(aps))


# -- embedding stub and score files ---------------------------------------------

def embed_patches(colors: Sequence[np.ndarray], depths: Sequence[np.ndarray], dim: int = 16, seed: int = 0,
                  grid: int = 4) -> np.ndarray:
    """Deterministic stand-in embedding of rendered views.

    Colour and depth are mean-pooled over a ``grid x grid`` tiling, then
    projected with a seeded Gaussian matrix.
    """
    feats = []
    for color, depth in zip(colors, depths):
        stacked = np.concatenate([np.asarray(color, dtype=np.float64),
                                  np.asarray(depth, dtype=np.float64)[..., None]], axis=2)
        rows = np.array_split(np.arange(stacked.shape[0]), grid)
        cols = np.array_split(np.arange(stacked.shape[1]), grid)
        feats.append(np.concatenate([stacked[np.ix_(r, c)].mean(axis=(0, 1)) for r in rows for c in cols]))
    feats = np.stack(feats)
    proj = np.random.default_rng(seed).standard_normal((feats.shape[1], dim))
    return feats @ proj


def read_score_csv(path) -> tuple[ScoreSet, IdentificationTrial | None]:
    """Read ``label_a,label_b,score`` rows; equal labels are genuine pairs.

    If the file also names ``probe_id`` and ``gallery_id`` columns, the rows
    additionally form a probe-by-gallery similarity matrix for identification.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"label_a", "label_b", "score"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise TraitNeRFError(f"{path}: score CSV needs columns {sorted(needed)}, got {reader.fieldnames}")
        rows = list(reader)
    scores = np.array([float(r["score"]) for r in rows])
    same = np.array([r["label_a"] == r["label_b"] for r in rows], dtype=bool)
    score_set = ScoreSet(scores[same], scores[~same])
    if not rows or "probe_id" not in rows[0] or "gallery_id" not in rows[0]:
        return score_set, None
    probes = list(dict.fromkeys(r["probe_id"] for r in rows))
    gallery = list(dict.fromkeys(r["gallery_id"] for r in rows))
    p_index = {p: i for i, p in enumerate(probes)}
    g_index = {g: j for j, g in enumerate(gallery)}
    sim = np.full((len(probes), len(gallery)), np.nan)
    p_labels = [""] * len(probes)
    g_labels = [""] * len(gallery)
    for r, s in zip(rows, scores):
        i, j = p_index[r["probe_id"]], g_index[r["gallery_id"]]
        sim[i, j] = s
        p_labels[i] = r["label_a"]
        g_labels[j] = r["label_b"]
    if np.isnan(sim).any():
        raise TraitNeRFError(f"{path}: identification rows do not cover every probe/gallery pair")
    return score_set, IdentificationTrial(sim, np.array(p_labels), np.array(g_labels))
