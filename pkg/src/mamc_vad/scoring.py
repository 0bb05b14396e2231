"""Anomaly scores, frame aggregation, ROC-AUC and score-curve export."""

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import FormatError, UndefinedMetricError
from .objective import cosine_distance
from .stcpipe import model_inputs

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class ScoreStats:
    u_p: float
    d_p: float
    u_f: float
    d_f: float
    floor: float = 0.0
    w_p: float = 0.2
    w_f: float = 0.8

    def as_dict(self):
        return asdict(self)


@dataclass
class AnomalyRecord:
    sequence_index: int
    frame_index: int
    object_id: int
    s_p: float
    s_f: float
    s: float


@dataclass
class FrameScores:
    scores: np.ndarray   # (T,) fused score, max over objects
    labels: np.ndarray   # (T,) bool

    @property
    def frame_index(self):
        return np.arange(len(self.scores))


def prediction_error(pred, target):
    """Per-sample mean squared error -> (B,)."""
    return ((pred - target) ** 2).flatten(1).mean(dim=1)


def feature_inconsistency(f_a, f_m):
    """Per-sample cosine distance between appearance and motion bottlenecks -> (B,)."""
    return cosine_distance(f_a, f_m)


def fit_stats(s_p, s_f):
    """Population mean / std of training scores, std floored."""
    s_p = np.asarray(s_p, np.float64)
    s_f = np.asarray(s_f, np.float64)
    return (float(s_p.mean()), max(float(s_p.std()), STD_FLOOR),
            float(s_f.mean()), max(float(s_f.std()), STD_FLOOR))


def fuse(s_p, s_f, stats, w_p=None, w_f=None):
    w_p = stats.w_p if w_p is None else w_p
    w_f = stats.w_f if w_f is None else w_f
    d_p, d_f = stats.d_p, stats.d_f
    if d_p < STD_FLOOR or d_f < STD_FLOOR:
        log.warning("score std below floor (%g, %g); using %g", d_p, d_f, STD_FLOOR)
        d_p, d_f = max(d_p, STD_FLOOR), max(d_f, STD_FLOOR)
    z = w_p * (np.asarray(s_p, np.float64) - stats.u_p) / d_p
    if w_f:
        z = z + w_f * (np.asarray(s_f, np.float64) - stats.u_f) / d_f
    return z


def effective_weights(arch, w_p, w_f):
    """Fusion weights a configuration can use: the feature term needs trained alignment."""
    if arch.streams != "both" or not arch.align_enabled:
        return 1.0, 0.0
    return float(w_p), float(w_f)


def raw_scores(model, stcs, batch_size=256):
    """(S_p, S_f) for every cube in ``stcs``; S_f is zero when a stream is missing."""
    model.eval()
    sp, sf = [], []
    with torch.no_grad():
        for start in range(0, len(stcs), batch_size):
            app = torch.from_numpy(stcs.appearance[start:start + batch_size])
            flo = torch.from_numpy(stcs.flow[start:start + batch_size])
            frames, flows, target = model_inputs(app, flo)
            out = model(frames, flows)
            sp.append(prediction_error(out.pred, model.target(target, flows)).double().numpy())
            if out.f_a is not None and out.f_m is not None:
                sf.append(feature_inconsistency(out.f_a, out.f_m).double().numpy())
            else:
                sf.append(np.zeros(out.pred.shape[0]))
    if not sp:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(sp), np.concatenate(sf)


def fit_score_stats(model, stcs, w_p=0.2, w_f=0.8, batch_size=256):
    """Normalisation statistics over the (normal) training cubes.

    The floor score for object-free frames is the smallest fused training
    score minus one.
    """
    w_p, w_f = effective_weights(model.cfg, w_p, w_f)
    s_p, s_f = raw_scores(model, stcs, batch_size)
    u_p, d_p, u_f, d_f = fit_stats(s_p, s_f)
    stats = ScoreStats(u_p, d_p, u_f, d_f, 0.0, w_p, w_f)
    stats.floor = float(fuse(s_p, s_f, stats).min()) - 1.0
    return stats


def score_records(model, stcs, stats, batch_size=256):
    s_p, s_f = raw_scores(model, stcs, batch_size)
    s = fuse(s_p, s_f, stats)
    return [AnomalyRecord(int(stcs.sequence_index[i]), int(stcs.frame_index[i]),
                          int(stcs.object_id[i]), float(s_p[i]), float(s_f[i]), float(s[i]))
            for i in range(len(stcs))]


def frame_aggregate(records, n_frames, floor, labels=None):
    """Per-frame max over object scores; frames without objects get ``floor``."""
    scores = np.full(n_frames, float(floor))
    seen = np.zeros(n_frames, dtype=bool)
    for r in records:
        k = r.frame_index
        scores[k] = r.s if not seen[k] else max(scores[k], r.s)
        seen[k] = True
    labels = np.zeros(n_frames, bool) if labels is None else np.asarray(labels, bool)
    return FrameScores(scores, labels)


def sequence_frame_scores(records, stcs, floor):
    """Group records by source sequence -> list of FrameScores."""
    by_seq = [[] for _ in stcs.n_frames]
    for r in records:
        by_seq[r.sequence_index].append(r)
    return [frame_aggregate(recs, n, floor, stcs.frame_labels[i])
            for i, (recs, n) in enumerate(zip(by_seq, stcs.n_frames))]


def roc_auc(scores, labels):
    """Rank (Mann-Whitney) AUC: P(anomalous frame outscores normal frame), ties count 1/2."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pooled_auc(frame_scores):
    scores = np.concatenate([f.scores for f in frame_scores])
    labels = np.concatenate([f.labels for f in frame_scores])
    return roc_auc(scores, labels)


def export_curve(frame_scores, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_index", "score", "label"])
        for k, (s, lab) in enumerate(zip(frame_scores.scores, frame_scores.labels)):
            writer.writerow([k, repr(float(s)), int(lab)])


def read_curve(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "score", "label"]:
        raise FormatError("score curve missing header", path)
    body = rows[1:]
    for k, row in enumerate(body):
        if len(row) != 3 or int(row[0]) != k:
            raise FormatError(f"bad row {k + 1}", path)
    return FrameScores(np.array([float(r[1]) for r in body]),
                       np.array([int(r[2]) for r in body], dtype=bool))


def auc_summary(frame_scores, kinds):
    """Pooled AUC plus one AUC per anomaly kind (that kind's clips against all normal clips).

    ``kinds[i]`` is the anomaly kind of clip ``i`` or None for a normal clip.
    A subset holding a single class reports None.
    """
    def safe(subset):
        try:
            return pooled_auc(subset)
        except (UndefinedMetricError, ValueError):
            return None

    labels = np.concatenate([f.labels for f in frame_scores]) if frame_scores else np.zeros(0, bool)
    by_kind = {}
    for kind in sorted({k for k in kinds if k is not None}):
        by_kind[kind] = safe([f for f, k in zip(frame_scores, kinds) if k in (None, kind)])
    return {"auc": safe(frame_scores), "auc_by_kind": by_kind,
            "n_frames": int(labels.size), "n_anomalous": int(labels.sum())}
