"""Foreground boxes and spatio-temporal cubes (STCs).

An STC stacks the same spatial region from frames ``t-4 .. t`` and the four
flows between them, each resized to 32x32. The first four appearance slices
are the model input; slice 4 (frame ``t``) is the prediction target.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .flowest import BlockMatchParams, estimate_sequence_flows
from .synthdata import Box

log = logging.getLogger(__name__)

STC_DEPTH = 5
PATCH = 32


@dataclass
class Stc:
    appearance: np.ndarray  # (5, 32, 32)
    flow: np.ndarray        # (4, 32, 32, 2)
    object_id: int
    frame_index: int
    box: Box
    is_anomalous: bool = False
    clamped: bool = False


@dataclass
class StcSet:
    """Stacked STCs with per-cube bookkeeping, ready for batching."""

    appearance: np.ndarray   # (N, 5, 32, 32) float32
    flow: np.ndarray         # (N, 4, 32, 32, 2) float32
    sequence_index: np.ndarray
    frame_index: np.ndarray
    object_id: np.ndarray
    is_anomalous: np.ndarray
    n_frames: list = field(default_factory=list)   # frames per source sequence
    frame_labels: list = field(default_factory=list)
    kinds: list = field(default_factory=list)      # anomaly kind per source sequence

    def __len__(self):
        return self.appearance.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return StcSet(self.appearance[idx], self.flow[idx], self.sequence_index[idx],
                      self.frame_index[idx], self.object_id[idx], self.is_anomalous[idx],
                      self.n_frames, self.frame_labels, self.kinds)

    @classmethod
    def stack(cls, stcs, sequence_index, n_frames=(), frame_labels=(), kinds=()):
        if not stcs:
            return cls(np.zeros((0, STC_DEPTH, PATCH, PATCH), np.float32),
                       np.zeros((0, STC_DEPTH - 1, PATCH, PATCH, 2), np.float32),
                       np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0, bool),
                       list(n_frames), list(frame_labels), list(kinds))
        return cls(np.stack([s.appearance for s in stcs]).astype(np.float32),
                   np.stack([s.flow for s in stcs]).astype(np.float32),
                   np.asarray(sequence_index, int),
                   np.array([s.frame_index for s in stcs]),
                   np.array([s.object_id for s in stcs]),
                   np.array([s.is_anomalous for s in stcs], dtype=bool),
                   list(n_frames), list(frame_labels), list(kinds))


def resize_bilinear(patch, out=(PATCH, PATCH)):
    """Bilinear resize with corner-aligned sampling (output corners hit input corners)."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ShapeError("patch", "(H, W)", patch.shape)
    h, w = patch.shape
    oh, ow = out

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, oh)
    x0, x1, fx = axis_weights(w, ow)
    rows = patch[y0] * (1 - fy)[:, None] + patch[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def _to_gray(frames):
    return frames if frames.ndim == 3 else frames.mean(axis=-1)


def extract_boxes(sequence, mode="ground_truth", tau=0.1, min_area=16):
    """Per-frame boxes, either stored ground truth or from background subtraction."""
    if mode == "ground_truth":
        return [list(fb) for fb in sequence.boxes]
    if mode != "bg_subtract":
        raise ConfigError("box_mode", f"unknown mode {mode!r}")
    frames = _to_gray(sequence.frames)
    background = np.median(frames, axis=0)
    out = []
    structure = np.ones((3, 3), dtype=bool)
    for frame in frames:
        fg = np.abs(frame - background) > tau
        labels, n = ndimage.label(fg, structure=structure)
        found = []
        for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None or np.count_nonzero(labels[sl] == comp) < min_area:
                continue
            y, x = sl[0].start, sl[1].start
            found.append(Box(len(found), x, y, sl[1].stop - x, sl[0].stop - y, False))
        out.append(found)
    return out


def clamp_box(box, frame_shape):
    """Shift/crop ``box`` to lie inside the frame. Returns (box, was_clamped)."""
    H, W = frame_shape
    w, h = min(box.w, W), min(box.h, H)
    x = min(max(box.x, 0), W - w)
    y = min(max(box.y, 0), H - h)
    clamped = (x, y, w, h) != (box.x, box.y, box.w, box.h)
    return box._replace(x=x, y=y, w=w, h=h), clamped


def context_box(box, frame_shape, scale=2.0, min_side=PATCH):
    """Square region centred on ``box`` large enough to keep the object in view
    over the previous frames; clamped to the frame."""
    side = int(max(min_side, np.ceil(scale * max(box.w, box.h))))
    cx, cy = box.x + box.w / 2.0, box.y + box.h / 2.0
    grown = box._replace(x=int(round(cx - side / 2.0)), y=int(round(cy - side / 2.0)), w=side, h=side)
    return clamp_box(grown, frame_shape)[0]


def build_stc(sequence, box, t, flow_source="gt", flows=None):
    """Crop the same region from frames t-4..t and flows t-4..t-1, resize to 32x32.

    ``flows`` overrides the flow fields (used with ``flow_source="estimated"``,
    computed here when not supplied).
    """
    if t < STC_DEPTH - 1:
        raise ConfigError("t", f"STC needs t >= {STC_DEPTH - 1}, got {t}")
    if t >= sequence.n_frames:
        raise ConfigError("t", f"frame {t} beyond clip of {sequence.n_frames}")
    frames = _to_gray(sequence.frames)
    if flows is None:
        if flow_source == "gt":
            flows = sequence.gt_flows
        elif flow_source == "estimated":
            flows = estimate_sequence_flows(frames[t - 4:t + 1], BlockMatchParams())
            flows = np.concatenate([np.zeros((t - 4,) + flows.shape[1:], np.float32), flows])
        else:
            raise ConfigError("flow_source", f"unknown flow source {flow_source!r}")
    box, clamped = clamp_box(box, frames.shape[1:])
    if clamped:
        log.warning("box %s clamped to frame at t=%d", box, t)
    ys, xs = slice(box.y, box.y + box.h), slice(box.x, box.x + box.w)
    app = np.stack([resize_bilinear(frames[k, ys, xs]) for k in range(t - 4, t + 1)])
    sx, sy = PATCH / box.w, PATCH / box.h
    flo = np.stack([
        np.stack([resize_bilinear(flows[k, ys, xs, 0]) * sx,
                  resize_bilinear(flows[k, ys, xs, 1]) * sy], axis=-1)
        for k in range(t - 4, t)
    ])
    return Stc(np.clip(app, 0.0, 1.0).astype(np.float32), flo.astype(np.float32),
               box.object_id, t, box, bool(box.is_anomalous), clamped)


def sequence_stcs(sequence, box_mode="ground_truth", flow_source="gt", context=2.0,
                  flow_params=BlockMatchParams()):
    """All STCs of a clip: one per (frame t >= 4, box in frame t)."""
    frames = _to_gray(sequence.frames)
    flows = sequence.gt_flows
    if flow_source == "estimated":
        flows = estimate_sequence_flows(frames, flow_params)
    elif flow_source != "gt":
        raise ConfigError("flow_source", f"unknown flow source {flow_source!r}")
    boxes = extract_boxes(sequence, box_mode)
    out = []
    for t in range(STC_DEPTH - 1, sequence.n_frames):
        for box in boxes[t]:
            region = context_box(box, frames.shape[1:], scale=context)
            out.append(build_stc(sequence, region, t, flows=flows))
    return out


def build_stc_set(sequences, box_mode="ground_truth", flow_source="gt", context=2.0,
                  flow_params=BlockMatchParams()):
    stcs, seq_idx = [], []
    for i, seq in enumerate(sequences):
        cubes = sequence_stcs(seq, box_mode, flow_source, context, flow_params)
        stcs.extend(cubes)
        seq_idx.extend([i] * len(cubes))
    return StcSet.stack(stcs, seq_idx,
                        n_frames=[s.n_frames for s in sequences],
                        frame_labels=[np.asarray(s.frame_labels, bool) for s in sequences],
                        kinds=[s.meta.get("anomaly_kind") for s in sequences])


def model_inputs(appearance, flow):
    """Split stacked cubes into (input frames B x 4, flows B x 8, target B x 1)."""
    app_in = appearance[:, :STC_DEPTH - 1]
    target = appearance[:, STC_DEPTH - 1:]
    # (B, 4, H, W, 2) -> (B, 4, 2, H, W) -> (B, 8, H, W): channels dx0, dy0, dx1, ...
    B = flow.shape[0]
    flo = flow.transpose(0, 1, 4, 2, 3) if isinstance(flow, np.ndarray) else flow.permute(0, 1, 4, 2, 3)
    flo = flo.reshape(B, -1, flow.shape[2], flow.shape[3])
    return app_in, flo, target
