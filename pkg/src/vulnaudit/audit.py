"""Post-training analytics over posterior fields.

Covers compositional distance maps between prior and posterior, thresholded
building-height change maps, regional mean-posterior trends, and soft
first-order transition matrices augmented with a NONE (no building) category,
plus their CSV/DOT/heatmap export formats.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_store import (DEFAULT_NODATA, GridStack, PriorField, RasterGrid,
                         StackKind, StackManifest)
from .model import PosteriorField

NONE_LABEL = "NONE"
DEFAULT_EPSILON = 1e-6
DEFAULT_CHANGE_THRESHOLD_M = 1.5
# codes are -1/0/+1, so the change-map sentinel must live outside that set
CHANGE_NODATA = -9999.0


@dataclass
class AitchisonMap:
    grid: RasterGrid
    epsilon: float


@dataclass
class ChangeMap:
    grid: RasterGrid
    threshold_m: float


@dataclass
class TransitionMatrix:
    """Raw and row-normalized soft transitions over K categories plus NONE."""

    labels: list[str]          # K category labels + NONE
    raw: np.ndarray            # (K+1, K+1) non-negative
    normalized: np.ndarray     # (K+1, K+1) row-stochastic
    period: str                # "t -> t+1" label or "averaged"
    zero_mass_rows: list[str]  # rows that had no raw mass and were pinned to NONE


@dataclass
class RegionalTrend:
    region: tuple[int, int, int, int]  # x, y, width, height
    timesteps: list[str]
    categories: list[str]
    series: np.ndarray                 # (T, K) mean posterior per timestep
    empty: list[bool]                  # True where the region held no node pixel


def _smooth(v: np.ndarray, epsilon: float) -> np.ndarray:
    """Replace zero components with epsilon, then renormalize to the simplex."""
    out = np.where(v == 0.0, epsilon, v)
    return out / out.sum(axis=-1, keepdims=True)


def aitchison_distance(p, q, epsilon: float = DEFAULT_EPSILON) -> float:
    """Compositional distance sqrt(1/(2K) sum_ij (ln(p_i/p_j) - ln(q_i/q_j))^2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1 or p.size < 2:
        raise ValueError("inputs must be equal-length vectors with K >= 2")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = np.log(_smooth(p, epsilon)) - np.log(_smooth(q, epsilon))
    # the double log-ratio sum collapses to the centered-log-ratio norm
    return float(np.sqrt(max((d * d).sum() - d.sum() ** 2 / p.size, 0.0)))


def ad_map(prior: PriorField, posterior: PosteriorField,
           epsilon: float = DEFAULT_EPSILON) -> AitchisonMap:
    """Pixel-wise distance where both a prior and a posterior exist."""
    if (prior.height_px, prior.width) != posterior.shape:
        raise ValueError("prior/posterior dimensions differ")
    if prior.k != posterior.k:
        raise ValueError("prior/posterior category counts differ")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mask = prior.has_prior & posterior.valid
    h, w = posterior.shape
    out = np.full((h, w), DEFAULT_NODATA, dtype=np.float64)
    if mask.any():
        d = np.log(_smooth(prior.proportions[mask], epsilon)) \
            - np.log(_smooth(posterior.probs[mask], epsilon))
        k = prior.k
        vals = np.sqrt(np.maximum((d * d).sum(axis=1) - d.sum(axis=1) ** 2 / k, 0.0))
        out[mask] = vals
    grid = RasterGrid(w, h, out.astype(np.float32), nodata=DEFAULT_NODATA)
    return AitchisonMap(grid, epsilon)


def change_map(h_t: RasterGrid, h_t1: RasterGrid,
               threshold_m: float = DEFAULT_CHANGE_THRESHOLD_M) -> ChangeMap:
    """Code +1/-1 where the height delta strictly exceeds +-threshold, else 0.

    Nodata (absent building) counts as height 0, so demolition registers as a
    decrease.
    """
    if (h_t.width, h_t.height_px) != (h_t1.width, h_t1.height_px):
        raise ValueError("height rasters have different dimensions")
    if threshold_m <= 0:
        raise ValueError("threshold must be positive")
    a = np.where(h_t.valid_mask(), h_t.values.astype(np.float64), 0.0)
    b = np.where(h_t1.valid_mask(), h_t1.values.astype(np.float64), 0.0)
    delta = b - a
    codes = np.zeros_like(delta)
    codes[delta > threshold_m] = 1.0
    codes[delta < -threshold_m] = -1.0
    grid = RasterGrid(h_t.width, h_t.height_px, codes.astype(np.float32),
                      nodata=CHANGE_NODATA)
    return ChangeMap(grid, threshold_m)


def regional_trend(posteriors: list[PosteriorField],
                   region: tuple[int, int, int, int]) -> RegionalTrend:
    """Per-timestep mean posterior over node pixels inside the rectangle."""
    if not posteriors:
        raise ValueError("no posterior fields given")
    x, y, w, h = region
    ph, pw = posteriors[0].shape
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > pw or y + h > ph:
        raise ValueError(f"region {region} out of bounds for {pw}x{ph} raster")
    series = []
    empty = []
    for post in posteriors:
        if post.shape != (ph, pw) or post.categories != posteriors[0].categories:
            raise ValueError("posterior fields disagree on shape or categories")
        sub_valid = post.valid[y:y + h, x:x + w]
        sub_probs = post.probs[y:y + h, x:x + w]
        if sub_valid.any():
            series.append(sub_probs[sub_valid].mean(axis=0))
            empty.append(False)
        else:
            series.append(np.zeros(post.k))
            empty.append(True)
    return RegionalTrend(tuple(region), [p.timestep for p in posteriors],
                         list(posteriors[0].categories), np.array(series), empty)


def _extended_distribution(post: PosteriorField) -> np.ndarray:
    """(H*W, K+1) rows: node pixels get (p, 0); empty pixels are one-hot NONE."""
    h, w, k = post.probs.shape
    ext = np.zeros((h * w, k + 1), dtype=np.float64)
    flat_valid = post.valid.ravel()
    ext[flat_valid, :k] = post.probs.reshape(-1, k)[flat_valid]
    ext[~flat_valid, k] = 1.0
    return ext


def transition_matrix(posteriors: list[PosteriorField],
                      mode: str = "averaged") -> TransitionMatrix:
    """Expected category-to-category transition mass between consecutive steps.

    Raw entries average the per-pixel products of consecutive distributions
    over all H*W pixels and all consecutive pairs; rows are then normalized to
    sum to one. A row with no raw mass has no observed source category and is
    pinned one-hot on NONE (recorded in ``zero_mass_rows``).
    """
    if mode not in ("one_step", "averaged"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(posteriors) < 2:
        raise ValueError("need at least 2 timesteps")
    if mode == "one_step" and len(posteriors) != 2:
        raise ValueError("one_step mode takes exactly one consecutive pair")
    first = posteriors[0]
    for p in posteriors[1:]:
        if p.shape != first.shape or p.categories != first.categories:
            raise ValueError("posterior fields disagree on shape or categories")
    k = first.k
    hw = first.shape[0] * first.shape[1]
    n_pairs = len(posteriors) - 1
    raw = np.zeros((k + 1, k + 1), dtype=np.float64)
    ext_prev = _extended_distribution(posteriors[0])
    for nxt in posteriors[1:]:
        ext_next = _extended_distribution(nxt)
        raw += ext_prev.T @ ext_next
        ext_prev = ext_next
    raw /= hw * n_pairs

    normalized = np.zeros_like(raw)
    row_sums = raw.sum(axis=1)
    zero_rows = row_sums == 0.0
    np.divide(raw, row_sums[:, None], out=normalized, where=~zero_rows[:, None])
    normalized[zero_rows, k] = 1.0

    labels = list(first.categories) + [NONE_LABEL]
    period = "averaged" if mode == "averaged" else \
        f"{posteriors[0].timestep} -> {posteriors[1].timestep}"
    return TransitionMatrix(labels, raw, normalized, period,
                            [labels[i] for i in np.nonzero(zero_rows)[0]])


def transition_to_dot(tm: TransitionMatrix, min_edge: float = 0.0) -> str:
    """DOT digraph with one edge per normalized entry >= min_edge."""
    lines = ["digraph transitions {", "  rankdir=LR;"]
    for label in tm.labels:
        lines.append(f'  "{label}";')
    n = len(tm.labels)
    for i in range(n):
        for j in range(n):
            p = tm.normalized[i, j]
            if p >= min_edge:
                lines.append(f'  "{tm.labels[i]}" -> "{tm.labels[j]}" '
                             f'[label="{p:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_transition_csv(tm: TransitionMatrix, path: str | Path,
                         which: str = "normalized") -> None:
    matrix = tm.normalized if which == "normalized" else tm.raw
    lines = ["from\\to," + ",".join(tm.labels)]
    for label, row in zip(tm.labels, matrix):
        lines.append(label + "," + ",".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trend_csv(trend: RegionalTrend, path: str | Path) -> None:
    lines = ["timestep," + ",".join(trend.categories)]
    for label, row in zip(trend.timesteps, trend.series):
        lines.append(label + "," + ",".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def maps_to_stack(grids: list[RasterGrid], labels: list[str],
                  kind: StackKind) -> GridStack:
    if not grids:
        raise ValueError("no maps to stack")
    manifest = StackManifest(kind, grids[0].width, grids[0].height_px,
                             labels, nodata=grids[0].nodata)
    return GridStack(manifest, grids)


def write_ppm_heatmap(grid: RasterGrid, path: str | Path) -> None:
    """8-bit P6 pixmap: linear blue-to-red ramp over [min, max]; nodata black."""
    valid = grid.valid_mask()
    vals = grid.values.astype(np.float64)
    if valid.any():
        lo = vals[valid].min()
        hi = vals[valid].max()
        t = np.zeros_like(vals) if hi == lo else \
            np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
    else:
        t = np.zeros_like(vals)
    rgb = np.zeros((grid.height_px, grid.width, 3), dtype=np.uint8)
    rgb[:, :, 0] = np.where(valid, np.round(255 * t), 0).astype(np.uint8)
    rgb[:, :, 2] = np.where(valid, np.round(255 * (1.0 - t)), 0).astype(np.uint8)
    header = f"P6\n{grid.width} {grid.height_px}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())
