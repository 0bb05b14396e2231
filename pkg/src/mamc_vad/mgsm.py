"""Memory-guided suppression of skip features.

Each skip level owns a bank of ``N`` learnable prototypes of dimension
``D = C*H*W``. A flattened feature map is addressed against the bank with a
softmax over cosine similarities; the largest attention weight becomes a
per-sample scalar that scales the batch-normalised map before a ReLU.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


class MemoryInitError(RuntimeError):
    """A memory item has zero norm, so cosine addressing is undefined."""


@dataclass
class Attention:
    weights: np.ndarray
    argmax_index: int
    second_index: int
    degenerate: bool = False


def cosine_to_items(query, items, eps=0.0):
    """Cosine similarity of each query row (B, D) to each item (N, D) -> (B, N).

    Zero queries get similarity 0 to every item; the returned mask flags them.
    """
    item_norm = items.norm(dim=1)
    if bool((item_norm == 0).any()):
        bad = int(torch.nonzero(item_norm == 0)[0])
        raise MemoryInitError(f"memory item {bad} has zero norm")
    q_norm = query.norm(dim=1)
    degenerate = q_norm == 0
    safe = torch.where(degenerate, torch.ones_like(q_norm), q_norm)
    cos = (query @ items.t()) / (safe[:, None] * item_norm[None, :])
    return cos.masked_fill(degenerate[:, None], 0.0), degenerate


def attention_weights(query, items):
    cos, degenerate = cosine_to_items(query, items)
    return torch.softmax(cos, dim=1), degenerate


def attend(query, items):
    """Address a single D-vector against an (N, D) bank."""
    q = torch.as_tensor(np.asarray(query, dtype=np.float64) if not torch.is_tensor(query) else query)
    m = torch.as_tensor(np.asarray(items, dtype=np.float64) if not torch.is_tensor(items) else items)
    m = m.to(q.dtype)
    with torch.no_grad():
        w, degenerate = attention_weights(q.reshape(1, -1), m)
    w = w[0].cpu().numpy()
    order = np.argsort(-w, kind="stable")
    return Attention(w, int(order[0]), int(order[1]) if w.size > 1 else int(order[0]),
                     bool(degenerate[0]))


def nearest_two(query, items):
    """Indices of the nearest and second-nearest items by Euclidean distance.

    ``query`` is (B, D) or (D,); ties go to the lower index. Returns
    ``(idx1, idx2, d1_sq, d2_sq)`` as tensors (no gradient).
    """
    squeeze = query.dim() == 1
    q = query.reshape(1, -1) if squeeze else query
    if items.shape[0] < 2:
        raise ConfigError("memory_size", f"need at least 2 memory items, got {items.shape[0]}")
    if q.shape[1] != items.shape[1]:
        raise ShapeError("query", ("B", items.shape[1]), q.shape)
    with torch.no_grad():
        d = torch.cdist(q.unsqueeze(0), items.unsqueeze(0),
                        compute_mode="donot_use_mm_for_euclid_dist")[0]
        order = torch.sort(d, dim=1, stable=True).indices[:, :2]
        i1, i2 = order[:, 0], order[:, 1]
        d1 = d.gather(1, i1[:, None])[:, 0] ** 2
        d2 = d.gather(1, i2[:, None])[:, 0] ** 2
    if squeeze:
        return i1[0], i2[0], d1[0], d2[0]
    return i1, i2, d1, d2


class MemoryBank(nn.Module):
    def __init__(self, n_items, dim, level_index=1):
        super().__init__()
        if n_items < 2:
            raise ConfigError("memory_size", f"need at least 2 memory items, got {n_items}")
        self.level_index = level_index
        self.items = nn.Parameter(torch.empty(n_items, dim))
        self.reset_parameters()

    @property
    def n_items(self):
        return self.items.shape[0]

    @property
    def dim(self):
        return self.items.shape[1]

    def reset_parameters(self):
        std = 1.0 / np.sqrt(self.dim)
        with torch.no_grad():
            nn.init.normal_(self.items, 0.0, std)
            zero = self.items.norm(dim=1) == 0
            while bool(zero.any()):
                self.items[zero] = torch.randn(int(zero.sum()), self.dim) * std
                zero = self.items.norm(dim=1) == 0


class MGSM(nn.Module):
    """Suppress one skip level: ``relu(max(w) * batchnorm(f))``."""

    def __init__(self, channels, height, width, n_items, level_index=1):
        super().__init__()
        self.shape = (channels, height, width)
        self.bank = MemoryBank(n_items, channels * height * width, level_index)
        self.norm = nn.BatchNorm2d(channels)

    def forward(self, feature):
        if tuple(feature.shape[1:]) != self.shape:
            raise ShapeError(f"MGSM level {self.bank.level_index} input", ("B",) + self.shape,
                             feature.shape)
        query = feature.flatten(1)
        w, _ = attention_weights(query, self.bank.items)
        lam = w.max(dim=1).values
        out = F.relu(lam[:, None, None, None] * self.norm(feature))
        return out, lam, query


def suppress(feature_map, module):
    """Functional alias of :class:`MGSM` forward returning only the suppressed map and lambdas."""
    out, lam, _ = module(feature_map)
    return out, lam
