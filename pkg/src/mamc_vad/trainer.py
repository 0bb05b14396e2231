"""Training loop, checkpoints and training-set score statistics."""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, FormatError, NumericalError
from .net import ArchConfig, MAMCNet
from .objective import LossWeights, compute_terms, make_report, total_loss
from .scoring import ScoreStats, fit_score_stats
from .stcpipe import model_inputs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    lr_decay: float = 0.8
    decay_every: int = 10
    batch_size: int = 128
    epochs: int = 60
    max_steps: int = 0          # 0 = no cap
    weights: LossWeights = field(default_factory=LossWeights)
    margin: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    arch: ArchConfig = field(default_factory=ArchConfig)
    seed: int = 0

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "arch" in d:
            d["arch"] = ArchConfig.from_dict(d["arch"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(sorted(set(d) - known)[0], "unknown train setting")
        return cls(**d)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.lr_init <= 0:
            raise ConfigError("lr_init", "must be positive")
        for name, w in self.weights.as_dict().items():
            if w < 0:
                raise ConfigError(f"weights.{name}", "must be nonnegative")
        self.arch.validate()


def lr_at_epoch(cfg, epoch):
    """Learning rate for 0-based ``epoch``: multiplied by ``lr_decay`` every ``decay_every`` epochs."""
    return cfg.lr_init * cfg.lr_decay ** (epoch // cfg.decay_every)


@dataclass
class Checkpoint:
    model: MAMCNet
    config: TrainConfig
    optimizer_state: dict = None
    epoch: int = 0
    step: int = 0
    stats: ScoreStats = None
    run_config: dict = None

    def save(self, path):
        torch.save({
            "format": "mamc-vad-checkpoint",
            "version": 1,
            "arch": self.config.arch.to_dict(),
            "train": self.config.to_dict(),
            "state_dict": self.model.state_dict(),
            "optimizer": self.optimizer_state,
            "epoch": self.epoch,
            "step": self.step,
            "stats": None if self.stats is None else self.stats.as_dict(),
            "run_config": self.run_config,
        }, path)

    @classmethod
    def load(cls, path, expect_arch=None):
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:  # torch raises a zoo of types on corrupt files
            raise FormatError(f"cannot read checkpoint ({exc})", path) from None
        if not isinstance(blob, dict) or blob.get("format") != "mamc-vad-checkpoint":
            raise FormatError("not a checkpoint file", path)
        config = TrainConfig.from_dict(blob["train"])
        arch = ArchConfig.from_dict(blob["arch"])
        if arch != config.arch:
            raise FormatError("embedded arch config disagrees with train config", path)
        if expect_arch is not None and expect_arch != arch:
            raise ConfigError("arch", "checkpoint architecture does not match the requested one")
        model = MAMCNet(arch)
        model.load_state_dict(blob["state_dict"])
        model.eval()
        stats = ScoreStats(**blob["stats"]) if blob.get("stats") else None
        return cls(model, config, blob.get("optimizer"), blob.get("epoch", 0),
                   blob.get("step", 0), stats, blob.get("run_config"))


def _finite(terms, total):
    return math.isfinite(float(total.detach())) and all(math.isfinite(float(v.detach())) for v in terms.values())


def train(stcs, config, log_path=None, run_config=None, progress=None):
    """Fit a model on normal cubes. Returns a :class:`Checkpoint` (stats not yet fitted).

    Every optimiser step appends one JSON line to ``log_path``.
    """
    config.validate()
    if len(stcs) == 0:
        raise ConfigError("dataset", "no training cubes")
    if stcs.is_anomalous.any():
        log.warning("training set contains %d anomalous cubes", int(stcs.is_anomalous.sum()))
    torch.manual_seed(config.seed)
    model = MAMCNet(config.arch)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr_init, betas=config.betas,
                            eps=config.eps, weight_decay=config.weights.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    app_all = torch.from_numpy(stcs.appearance)
    flow_all = torch.from_numpy(stcs.flow)
    n = len(stcs)
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    epoch = 0
    try:
        if logf and run_config is not None:
            logf.write(json.dumps({"run_config": run_config}, sort_keys=True) + "\n")
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                frames, flows, target = model_inputs(app_all[idx], flow_all[idx])
                out = model(frames, flows)
                terms = compute_terms(out, model.target(target, flows), config.arch, config.margin)
                loss = total_loss(terms, config.weights)
                step += 1
                report = make_report(terms, loss)
                if not _finite(terms, loss):
                    raise NumericalError(step, report.as_dict())
                opt.zero_grad()
                loss.backward()
                opt.step()
                if logf:
                    rec = {"step": step, "epoch": epoch + 1, "lr": lr}
                    rec.update(report.as_dict())
                    logf.write(json.dumps(rec) + "\n")
                if progress:
                    progress(step, epoch + 1, report)
                if config.max_steps and step >= config.max_steps:
                    break
            if config.max_steps and step >= config.max_steps:
                break
    finally:
        if logf:
            logf.close()
    model.eval()
    return Checkpoint(model, config, opt.state_dict(), epoch + 1, step, None, run_config)


def fit_checkpoint_stats(ckpt, stcs, w_p=0.2, w_f=0.8):
    ckpt.stats = fit_score_stats(ckpt.model, stcs, w_p, w_f)
    return ckpt.stats


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [r for r in rows if "step" in r]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)
