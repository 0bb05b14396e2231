"""Two-stream encoder / single decoder with memory-guided skip connections.

Appearance encoder: level 1 is conv-BN-ReLU at full resolution, levels 2..4
are maxpool-conv-BN-ReLU. Motion encoder: level 1 is conv-BN-ReLU, levels
2..4 use stride-2 conv-BN-ReLU. The decoder upsamples with stride-2
transposed convolutions, concatenates the (suppressed) appearance skip of the
matching level and fuses with conv-BN-ReLU. Only the appearance encoder has
skips into the decoder.
"""

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .mgsm import MGSM

SKIP_VARIANTS = {
    "full": (1, 2, 3),
    "sc2": (1, 2),
    "sc1": (1,),
    "nosc": (),
}
STREAMS = ("both", "appearance", "motion")


@dataclass
class ArchConfig:
    levels: int = 4
    channels_per_level: tuple = (64, 128, 256, 512)
    kernel: int = 3
    input_size: int = 32
    in_channels_appearance: int = 4
    in_channels_motion: int = 8
    out_channels: int = 1
    skip_variant: str = "full"
    streams: str = "both"
    mgsm_enabled: bool = True
    ffrp_enabled: bool = True
    align_enabled: bool = True
    memory_sizes: tuple = (40, 40, 40)

    def validate(self):
        if self.kernel != 3:
            raise ConfigError("kernel", "kernel size is fixed to 3")
        if len(self.channels_per_level) != self.levels:
            raise ConfigError("channels_per_level", f"need {self.levels} entries")
        if self.input_size % (2 ** (self.levels - 1)):
            raise ConfigError("input_size", f"{self.input_size} not divisible by {2 ** (self.levels - 1)}")
        if self.skip_variant not in SKIP_VARIANTS:
            raise ConfigError("skip_variant", f"unknown variant {self.skip_variant!r}")
        if self.streams not in STREAMS:
            raise ConfigError("streams", f"unknown streams {self.streams!r}")
        if self.streams != "both" and (self.ffrp_enabled or self.align_enabled):
            raise ConfigError("streams", "FFRP and alignment need both streams")
        if self.streams == "motion" and self.mgsm_enabled:
            raise ConfigError("mgsm_enabled", "the motion stream has no skip connections")
        if len(self.memory_sizes) != self.levels - 1:
            raise ConfigError("memory_sizes", f"need {self.levels - 1} entries")
        if min(self.memory_sizes) < 2:
            raise ConfigError("memory_sizes", "each bank needs at least 2 items")

    @property
    def skip_levels(self):
        return () if self.streams == "motion" else SKIP_VARIANTS[self.skip_variant]

    def level_shapes(self):
        """(C, H, W) of every encoder level for the configured input size."""
        return [(c, self.input_size >> i, self.input_size >> i)
                for i, c in enumerate(self.channels_per_level)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        d["memory_sizes"] = list(self.memory_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("channels_per_level", "memory_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(sorted(set(d) - known)[0], "unknown arch setting")
        return cls(**d)


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class AppearanceEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.channels_per_level
        blocks = [conv_bn_relu(cfg.in_channels_appearance, ch[0])]
        for i in range(1, cfg.levels):
            blocks.append(nn.Sequential(nn.MaxPool2d(2), conv_bn_relu(ch[i - 1], ch[i])))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats[:-1], feats[-1]


class MotionEncoder(nn.Module):
    def __init__(self, cfg, in_channels=None):
        super().__init__()
        ch = cfg.channels_per_level
        cin = cfg.in_channels_motion if in_channels is None else in_channels
        blocks = [conv_bn_relu(cin, ch[0])]
        for i in range(1, cfg.levels):
            blocks.append(conv_bn_relu(ch[i - 1], ch[i], stride=2))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class Decoder(nn.Module):
    def __init__(self, cfg, out_channels, skip_levels, final="sigmoid"):
        super().__init__()
        ch = cfg.channels_per_level
        self.skip_levels = tuple(skip_levels)
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        # decoder stage for level i (1-based, from levels-1 down to 1)
        for i in range(cfg.levels - 1, 0, -1):
            cout = ch[i - 1]
            self.ups.append(nn.ConvTranspose2d(ch[i], cout, 3, stride=2, padding=1, output_padding=1))
            cin = cout * 2 if i in self.skip_levels else cout
            self.fuse.append(conv_bn_relu(cin, cout))
        self.head = nn.Conv2d(ch[0], out_channels, 3, padding=1)
        self.final = final

    def forward(self, bottleneck, skips):
        """``skips`` maps level index (1-based) to feature map."""
        missing = [lv for lv in self.skip_levels if lv not in skips]
        if missing:
            raise ConfigError("skips", f"missing skip features for levels {missing}")
        x = bottleneck
        n = len(self.ups)
        for k, (up, fuse) in enumerate(zip(self.ups, self.fuse)):
            level = n - k
            x = up(x)
            if level in self.skip_levels:
                x = torch.cat([x, skips[level]], dim=1)
            x = fuse(x)
        x = self.head(x)
        return torch.sigmoid(x) if self.final == "sigmoid" else x


class ForwardOutput(NamedTuple):
    pred: torch.Tensor
    f_a: Optional[torch.Tensor]
    f_m: Optional[torch.Tensor]
    queries: list          # flattened raw skip features for levels with a memory bank
    banks: list            # matching memory item tensors
    suppressors: list      # per-level lambda (B,)


class MAMCNet(nn.Module):
    """Appearance + motion encoders, MGSM-gated skips, one frame decoder.

    With ``streams="motion"`` the model is the motion-only ablation: it
    predicts the last flow field of the cube from the first three, with no
    skips and a linear output head.
    """

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.app_encoder = AppearanceEncoder(cfg) if cfg.streams in ("both", "appearance") else None
        motion_in = cfg.in_channels_motion - 2 if cfg.streams == "motion" else cfg.in_channels_motion
        self.motion_encoder = MotionEncoder(cfg, motion_in) if cfg.streams in ("both", "motion") else None
        if cfg.streams == "motion":
            self.decoder = Decoder(cfg, 2, (), final="linear")
        else:
            self.decoder = Decoder(cfg, cfg.out_channels, cfg.skip_levels)
        shapes = cfg.level_shapes()
        self.mgsm = nn.ModuleDict()
        if cfg.mgsm_enabled:
            for lv in cfg.skip_levels:
                c, h, w = shapes[lv - 1]
                self.mgsm[str(lv)] = MGSM(c, h, w, cfg.memory_sizes[lv - 1], level_index=lv)

    def _check(self, name, x, channels):
        s = self.cfg.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (channels, s, s):
            raise ShapeError(name, ("B", channels, s, s), x.shape)

    def encode_appearance(self, frames):
        self._check("appearance input", frames, self.cfg.in_channels_appearance)
        return self.app_encoder(frames)

    def encode_motion(self, flows):
        expected = self.motion_encoder.blocks[0][0].in_channels
        self._check("motion input", flows, expected)
        return self.motion_encoder(flows)

    def decode(self, bottleneck, skips):
        return self.decoder(bottleneck, skips)

    def forward(self, frames, flows):
        cfg = self.cfg
        if cfg.streams == "motion":
            f_m = self.encode_motion(flows[:, :-2])
            return ForwardOutput(self.decode(f_m, {}), None, f_m, [], [], [])
        skip_feats, f_a = self.encode_appearance(frames)
        f_m = self.encode_motion(flows) if self.motion_encoder is not None else None
        skips, queries, banks, lams = {}, [], [], []
        for lv in cfg.skip_levels:
            feat = skip_feats[lv - 1]
            if cfg.mgsm_enabled:
                module = self.mgsm[str(lv)]
                feat, lam, query = module(feat)
                queries.append(query)
                banks.append(module.bank.items)
                lams.append(lam)
            skips[lv] = feat
        bottleneck = f_m if cfg.ffrp_enabled else f_a
        return ForwardOutput(self.decode(bottleneck, skips), f_a, f_m, queries, banks, lams)

    def target(self, app_target, flows):
        """Prediction target matching ``forward``'s output for this configuration."""
        return flows[:, -2:] if self.cfg.streams == "motion" else app_target


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
