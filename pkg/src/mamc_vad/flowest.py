"""Dense optical flow by exhaustive block matching (sum of absolute differences)."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BlockMatchParams:
    block_size: int = 7
    search_radius: int = 7
    stride: int = 1

    def validate(self):
        if self.block_size < 3 or self.block_size % 2 == 0:
            raise ConfigError("block_size", f"must be odd and >= 3, got {self.block_size}")
        if self.search_radius < 1:
            raise ConfigError("search_radius", f"must be >= 1, got {self.search_radius}")
        if self.stride < 1:
            raise ConfigError("stride", f"must be >= 1, got {self.stride}")


@dataclass
class FlowField:
    values: np.ndarray      # (H, W, 2) float32, (dx, dy)
    valid_mask: np.ndarray  # (H, W) bool


def displacement_order(radius):
    """Candidate displacements sorted by magnitude, then row-major (dy, dx) scan order.

    Visiting in this order and keeping only strict improvements implements the
    tie-break rule.
    """
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    scan = {c: i for i, c in enumerate(cands)}
    return sorted(cands, key=lambda c: (c[0] ** 2 + c[1] ** 2, scan[c]))


def _box_sum(a, b):
    # separable window sum, identical summation order for identical inputs
    rows = sliding_window_view(a, b, axis=0).sum(axis=-1)
    return sliding_window_view(rows, b, axis=1).sum(axis=-1)


def estimate_flow(prev, next, params=BlockMatchParams()):
    prev = np.asarray(prev, dtype=np.float64)
    next = np.asarray(next, dtype=np.float64)
    if prev.ndim != 2:
        raise ShapeError("prev", "(H, W)", prev.shape)
    if prev.shape != next.shape:
        raise ShapeError("next", prev.shape, next.shape)
    params.validate()
    H, W = prev.shape
    half = params.block_size // 2
    r = params.search_radius
    m = half + r  # centres need the whole search window inside the frame
    values = np.zeros((H, W, 2), dtype=np.float32)
    valid = np.zeros((H, W), dtype=bool)
    if H <= 2 * m or W <= 2 * m:
        return FlowField(values, valid)

    # centre rows/cols that are valid
    cy = np.arange(m, H - m)
    cx = np.arange(m, W - m)
    best = np.full((cy.size, cx.size), np.inf)
    best_d = np.zeros((cy.size, cx.size, 2), dtype=np.int64)
    src = prev[m - half:H - m + half, m - half:W - m + half]
    for dy, dx in displacement_order(r):
        tgt = next[m - half + dy:H - m + half + dy, m - half + dx:W - m + half + dx]
        sad = _box_sum(np.abs(src - tgt), params.block_size)
        better = sad < best
        best[better] = sad[better]
        best_d[better] = (dx, dy)

    if params.stride == 1:
        values[m:H - m, m:W - m] = best_d
        valid[m:H - m, m:W - m] = True
        return FlowField(values, valid)

    # evaluate on a stride grid, fill other valid pixels from the nearest grid centre
    gy = np.arange(0, cy.size, params.stride)
    gx = np.arange(0, cx.size, params.stride)
    ny = gy[np.abs(np.arange(cy.size)[:, None] - gy[None, :]).argmin(axis=1)]
    nx = gx[np.abs(np.arange(cx.size)[:, None] - gx[None, :]).argmin(axis=1)]
    values[m:H - m, m:W - m] = best_d[np.ix_(ny, nx)]
    valid[m:H - m, m:W - m] = True
    return FlowField(values, valid)


def estimate_sequence_flows(frames, params=BlockMatchParams()):
    """Flow between every consecutive pair of a (T, H, W) clip -> (T-1, H, W, 2)."""
    return np.stack([estimate_flow(frames[k], frames[k + 1], params).values
                     for k in range(len(frames) - 1)]) if len(frames) > 1 else \
        np.zeros((0,) + frames.shape[1:3] + (2,), dtype=np.float32)
