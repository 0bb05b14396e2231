"""Training losses and their weighted combination."""

from dataclasses import asdict, dataclass

import torch

from .mgsm import nearest_two

TERMS = ("int", "gd", "align", "comp", "diver")


@dataclass
class LossWeights:
    int: float = 1.0
    gd: float = 1.0
    align: float = 1.0
    comp: float = 5e-3
    diver: float = 1e-4
    weight_decay: float = 1e-5

    def as_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    int: float
    gd: float
    align: float
    comp: float
    diver: float
    total: float

    def as_dict(self):
        return asdict(self)


def intensity_loss(pred, target):
    """Mean squared error (per-element mean, averaged over the batch)."""
    return ((pred - target) ** 2).mean()


def gradient_loss(pred, target):
    """Mean absolute mismatch of absolute finite differences along both image axes.

    Differences start at index 1 of each axis; the normaliser is the number
    of such terms, ``(H-1)W + H(W-1)`` per image.
    """
    dy_p = (pred[..., 1:, :] - pred[..., :-1, :]).abs()
    dy_t = (target[..., 1:, :] - target[..., :-1, :]).abs()
    dx_p = (pred[..., :, 1:] - pred[..., :, :-1]).abs()
    dx_t = (target[..., :, 1:] - target[..., :, :-1]).abs()
    total = (dy_p - dy_t).abs().sum() + (dx_p - dx_t).abs().sum()
    return total / (dy_p.numel() + dx_p.numel())


def cosine_distance(a, b, eps=1e-12):
    """Per-sample ``1 - cos(flatten(a), flatten(b))``."""
    a = a.flatten(1)
    b = b.flatten(1)
    denom = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)
    return 1.0 - (a * b).sum(dim=1) / denom


def alignment_loss(f_a, f_m):
    return cosine_distance(f_a, f_m).mean()


def _select(queries, banks):
    for q, m in zip(queries, banks):
        i1, i2, _, _ = nearest_two(q.detach(), m.detach())
        yield q, m[i1], m[i2]


def compactness_loss(queries, banks):
    """Squared distance of each query to its nearest item, averaged over all queries of all levels."""
    total, count = 0.0, 0
    for q, m1, _ in _select(queries, banks):
        total = total + ((q - m1) ** 2).sum()
        count += q.shape[0]
    if count == 0:
        return torch.zeros(())
    return total / count


def diversity_loss(queries, banks, margin=1.0):
    """Hinge ``max(0, |q - m1|^2 - |q - m2|^2 + margin)`` averaged over all queries."""
    total, count = 0.0, 0
    for q, m1, m2 in _select(queries, banks):
        d1 = ((q - m1) ** 2).sum(dim=1)
        d2 = ((q - m2) ** 2).sum(dim=1)
        total = total + torch.relu(d1 - d2 + margin).sum()
        count += q.shape[0]
    if count == 0:
        return torch.zeros(())
    return total / count


def total_loss(terms, weights):
    """Weighted sum of loss terms (a dict keyed by :data:`TERMS`).

    The parameter-norm penalty is applied by the optimiser as decoupled weight
    decay, not here.
    """
    out = 0.0
    for name in TERMS:
        w = getattr(weights, name)
        if w != 0 and name in terms:
            out = out + w * terms[name]
    if not torch.is_tensor(out):
        out = torch.zeros(())
    return out


def compute_terms(out, target, cfg, margin=1.0):
    """All loss terms for one forward pass of the model."""
    terms = {
        "int": intensity_loss(out.pred, target),
        "gd": gradient_loss(out.pred, target),
    }
    if cfg.align_enabled and out.f_a is not None and out.f_m is not None:
        terms["align"] = alignment_loss(out.f_a, out.f_m)
    if out.queries:
        terms["comp"] = compactness_loss(out.queries, out.banks)
        terms["diver"] = diversity_loss(out.queries, out.banks, margin)
    return terms


def make_report(terms, total):
    vals = {k: float(terms[k].detach()) if k in terms else 0.0 for k in TERMS}
    return LossReport(total=float(total.detach()), **vals)
