"""Synthetic surveillance clips with exact optical flow, labels and boxes.

Objects are textured sprites (square, circle, triangle) moving with integer
velocities over a static background. Normal behaviour is a mapping from
shape kind to the set of velocities that shape may use. Three anomaly kinds
are supported:

* ``novel_shape``: a shape kind absent from the normal rules, moving normally.
* ``fast_motion``: a normal shape moving along an allowed direction at an
  unseen speed.
* ``appearance_motion_mismatch``: a normal shape using a velocity that is
  normal for a *different* shape. Shape and velocity are each normal on their
  own, only the pairing is not.

Sequences are written to disk as a directory holding ``manifest.json`` and one
``.vads`` binary plus one ``.boxes.json`` sidecar per sequence.
"""

import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle")
ANOMALY_KINDS = ("novel_shape", "fast_motion", "appearance_motion_mismatch")
BACKGROUNDS = ("flat", "gradient", "textured")

MAGIC = b"VADS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, T, H, W, C


def _default_rules():
    return {
        "square": [[1, 0], [-1, 0], [2, 0], [-2, 0]],
        "circle": [[0, 1], [0, -1], [0, 2], [0, -2]],
    }


class Box(NamedTuple):
    object_id: int
    x: int
    y: int
    w: int
    h: int
    is_anomalous: bool = False


@dataclass
class SpriteSpec:
    shape_kind: str
    size_px: int
    intensity: float
    velocity: tuple
    spawn_pos: tuple


@dataclass
class SceneConfig:
    frame_size: tuple = (128, 128)
    clip_len: int = 24
    normal_rules: dict = field(default_factory=_default_rules)
    anomaly_kinds: tuple = ANOMALY_KINDS
    rng_seed: int = 0
    background: str = "textured"
    channels: int = 1
    max_speed: int = 6
    fast_speed: tuple = (5, 6)
    size_range: tuple = (10, 14)
    intensity_range: tuple = (0.6, 0.9)
    objects_per_clip: tuple = (2, 3)
    sprite_texture: float = 0.2

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["anomaly_kinds"] = list(self.anomaly_kinds)
        d["fast_speed"] = list(self.fast_speed)
        d["size_range"] = list(self.size_range)
        d["intensity_range"] = list(self.intensity_range)
        d["objects_per_clip"] = list(self.objects_per_clip)
        d["normal_rules"] = {k: [list(v) for v in vs] for k, vs in self.normal_rules.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("frame_size", "anomaly_kinds", "fast_speed", "size_range",
                    "intensity_range", "objects_per_clip"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scene setting")
        return cls(**d)

    def validate(self):
        H, W = self.frame_size
        if self.clip_len < 2:
            raise ConfigError("clip_len", "need at least 2 frames")
        if self.channels < 1:
            raise ConfigError("channels", "must be >= 1")
        if self.background not in BACKGROUNDS:
            raise ConfigError("background", f"unknown background {self.background!r}")
        lo, hi = self.size_range
        if lo < 4 or hi < lo:
            raise ConfigError("size_px", f"invalid sprite size range {self.size_range}")
        if hi > min(H, W):
            raise ConfigError("size_px", f"sprite size {hi} exceeds frame {self.frame_size}")
        if not self.normal_rules:
            raise ConfigError("normal_rules", "must not be empty")
        for shape, vels in self.normal_rules.items():
            if shape not in SHAPES:
                raise ConfigError("normal_rules", f"unknown shape {shape!r}")
            if not vels:
                raise ConfigError("normal_rules", f"no velocities for {shape!r}")
            for v in vels:
                if max(abs(v[0]), abs(v[1])) > self.max_speed:
                    raise ConfigError("velocity", f"{v} exceeds max_speed {self.max_speed}")
        for kind in self.anomaly_kinds:
            if kind not in ANOMALY_KINDS:
                raise ConfigError("anomaly_kinds", f"unknown anomaly kind {kind!r}")
        if "novel_shape" in self.anomaly_kinds and not _novel_shapes(self):
            raise ConfigError("anomaly_kinds", "novel_shape needs a shape outside normal_rules")
        if "appearance_motion_mismatch" in self.anomaly_kinds and not _mismatch_pairs(self):
            raise ConfigError("anomaly_kinds", "appearance_motion_mismatch needs two shapes "
                              "with different velocity sets")
        if "fast_motion" in self.anomaly_kinds:
            fmin, fmax = self.fast_speed
            top = max(max(abs(c) for c in v) for vs in self.normal_rules.values() for v in vs)
            if fmin <= top or fmax < fmin or fmax > self.max_speed:
                raise ConfigError("fast_speed", f"{self.fast_speed} must exceed every normal "
                                  f"speed ({top}) and stay within max_speed")
        nmin, nmax = self.objects_per_clip
        if nmin < 1 or nmax < nmin:
            raise ConfigError("objects_per_clip", f"invalid range {self.objects_per_clip}")


@dataclass
class VideoSequence:
    frames: np.ndarray          # (T, H, W) or (T, H, W, C) float32 on the 1/255 grid
    gt_flows: np.ndarray        # (T-1, H, W, 2) float32, (dx, dy) from frame k to k+1
    frame_labels: np.ndarray    # (T,) bool
    boxes: list                 # per-frame list of Box
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def equals(self, other):
        return (self.frames.dtype == other.frames.dtype
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.gt_flows, other.gt_flows)
                and np.array_equal(self.frame_labels, other.frame_labels)
                and [list(map(tuple, b)) for b in self.boxes]
                == [list(map(tuple, b)) for b in other.boxes])


def _novel_shapes(cfg):
    return [s for s in SHAPES if s not in cfg.normal_rules]


def _all_normal_velocities(cfg):
    out = []
    for vs in cfg.normal_rules.values():
        for v in vs:
            if tuple(v) not in out:
                out.append(tuple(v))
    return out


def _mismatch_pairs(cfg):
    """(shape, velocity) pairs with both parts normal but the pairing not."""
    allv = _all_normal_velocities(cfg)
    pairs = []
    for shape, vs in cfg.normal_rules.items():
        own = {tuple(v) for v in vs}
        pairs.extend((shape, v) for v in allv if v not in own)
    return pairs


def shape_mask(kind, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if kind == "triangle":
        half = (yy + 1.0) / size * (size / 2.0)
        return np.abs(xx - c) <= half
    raise ConfigError("shape_kind", f"unknown shape {kind!r}")


def _background(cfg, rng):
    H, W = cfg.frame_size
    if cfg.background == "flat":
        bg = np.full((H, W), 0.25)
    elif cfg.background == "gradient":
        bg = np.tile(np.linspace(0.1, 0.4, W), (H, 1))
    else:
        # fine noise whose contrast varies smoothly across the scene, so some
        # regions are busy and others nearly flat
        contrast = ndimage.gaussian_filter(rng.random((H, W)), sigma=min(H, W) / 10.0)
        contrast = (contrast - contrast.min()) / (np.ptp(contrast) + 1e-12)
        bg = 0.25 + 0.3 * contrast * (rng.random((H, W)) - 0.5)
    return bg


class _Track:
    def __init__(self, oid, sprite, spawn, positions, velocities, anomalous, texture):
        self.oid = oid
        self.sprite = sprite
        self.spawn = spawn
        self.positions = positions      # frame -> (x, y)
        self.velocities = velocities    # frame k -> (vx, vy) applied from k to k+1
        self.anomalous = anomalous
        self.texture = texture


def _trajectory(cfg, size, pos, vel, spawn):
    H, W = cfg.frame_size
    x, y = pos
    vx, vy = vel
    positions, velocities = {}, {}
    for k in range(spawn, cfg.clip_len):
        positions[k] = (x, y)
        if k == cfg.clip_len - 1:
            break
        if not 0 <= x + vx <= W - size:
            vx = -vx
        if not 0 <= y + vy <= H - size:
            vy = -vy
        velocities[k] = (vx, vy)
        x, y = x + vx, y + vy
    return positions, velocities


def _overlaps(a, b, size_a, size_b, margin=2):
    for k, (xa, ya) in a.items():
        if k not in b:
            continue
        xb, yb = b[k]
        if (xa < xb + size_b + margin and xb < xa + size_a + margin
                and ya < yb + size_b + margin and yb < ya + size_a + margin):
            return True
    return False


def _pick_behaviour(cfg, rng, anomaly_kind):
    """Return (shape, velocity) for a normal object or one of the given anomaly kind."""
    rules = cfg.normal_rules
    shapes = sorted(rules)
    if anomaly_kind is None:
        shape = shapes[rng.integers(len(shapes))]
        vs = rules[shape]
        return shape, tuple(vs[rng.integers(len(vs))])
    if anomaly_kind == "novel_shape":
        novel = _novel_shapes(cfg)
        allv = _all_normal_velocities(cfg)
        return novel[rng.integers(len(novel))], allv[rng.integers(len(allv))]
    if anomaly_kind == "fast_motion":
        shape = shapes[rng.integers(len(shapes))]
        vs = rules[shape]
        vx, vy = vs[rng.integers(len(vs))]
        speed = int(rng.integers(cfg.fast_speed[0], cfg.fast_speed[1] + 1))
        return shape, (int(np.sign(vx)) * speed, int(np.sign(vy)) * speed)
    pairs = _mismatch_pairs(cfg)
    return pairs[rng.integers(len(pairs))]


def generate_sequence(config, anomalous):
    """Render one clip. Output is a pure function of ``(config, anomalous)``."""
    config.validate()
    if anomalous and not config.anomaly_kinds:
        raise ConfigError("anomaly_kinds", "anomalous sequence requested but no kinds enabled")
    rng = np.random.default_rng(config.rng_seed)
    H, W = config.frame_size
    T = config.clip_len
    bg = _background(config, rng)

    n_normal = int(rng.integers(config.objects_per_clip[0], config.objects_per_clip[1] + 1))
    plan = [(None, 0 if i == 0 else int(rng.integers(0, T // 2 + 1))) for i in range(n_normal)]
    kind = None
    if anomalous:
        kind = config.anomaly_kinds[rng.integers(len(config.anomaly_kinds))]
        plan.append((kind, int(rng.integers(T // 4, max(T // 4, T // 2) + 1))))

    tracks = []
    for oid, (akind, spawn) in enumerate(plan):
        for _ in range(200):
            shape, vel = _pick_behaviour(config, rng, akind)
            size = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
            intensity = float(rng.uniform(*config.intensity_range))
            pos = (int(rng.integers(0, W - size + 1)), int(rng.integers(0, H - size + 1)))
            positions, velocities = _trajectory(config, size, pos, vel, spawn)
            if not any(_overlaps(positions, t.positions, size, t.sprite.size_px) for t in tracks):
                break
        else:
            raise ConfigError("objects_per_clip", "could not place non-overlapping objects")
        texture = rng.random((size, size))
        sprite = SpriteSpec(shape, size, intensity, vel, pos)
        tracks.append(_Track(oid, sprite, spawn, positions, velocities, akind is not None, texture))

    C = config.channels
    tints = rng.uniform(0.6, 1.0, size=(len(tracks), C)) if C > 1 else np.ones((len(tracks), 1))
    frames = np.repeat(bg[None, :, :, None], T, axis=0).repeat(C, axis=3)
    flows = np.zeros((T - 1, H, W, 2), dtype=np.float32)
    boxes = [[] for _ in range(T)]
    for tr in tracks:
        s = tr.sprite.size_px
        mask = shape_mask(tr.sprite.shape_kind, s)
        value = np.clip(tr.sprite.intensity + config.sprite_texture * (tr.texture - 0.5), 0, 1)
        for k, (x, y) in tr.positions.items():
            patch = frames[k, y:y + s, x:x + s]
            patch[mask] = value[mask][:, None] * tints[tr.oid]
            boxes[k].append(Box(tr.oid, x, y, s, s, tr.anomalous))
            if k in tr.velocities:
                flows[k, y:y + s, x:x + s] = tr.velocities[k]
    for b in boxes:
        b.sort(key=lambda box: box.object_id)

    frames = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)
    if C == 1:
        frames = frames[..., 0]
    labels = np.array([any(b.is_anomalous for b in fb) for fb in boxes], dtype=bool)
    meta = {
        "seed": int(config.rng_seed),
        "anomalous": bool(anomalous),
        "anomaly_kind": kind,
        "sprites": [dict(dataclasses.asdict(t.sprite), object_id=t.oid, spawn=t.spawn,
                         anomalous=t.anomalous) for t in tracks],
    }
    for sp in meta["sprites"]:
        sp["velocity"] = list(sp["velocity"])
        sp["spawn_pos"] = list(sp["spawn_pos"])
    return VideoSequence(frames_to_float(frames), flows, labels, boxes, meta)


def frames_to_float(frames_u8):
    return frames_u8.astype(np.float32) / np.float32(255.0)


def frames_to_u8(frames):
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def _one(args):
    cfg, anomalous = args
    return generate_sequence(cfg, anomalous)


def generate_split(config, n_normal, n_anomalous, seed=None, workers=1):
    """Generate ``n_normal`` normal then ``n_anomalous`` anomalous sequences.

    Sequence ``i`` is seeded with ``seed + i``; anomalous sequences cycle
    through ``config.anomaly_kinds`` so every kind is represented.
    """
    seed = config.rng_seed if seed is None else seed
    jobs = []
    for i in range(n_normal + n_anomalous):
        anomalous = i >= n_normal
        kinds = config.anomaly_kinds
        if anomalous:
            kinds = (config.anomaly_kinds[(i - n_normal) % len(config.anomaly_kinds)],)
        jobs.append((dataclasses.replace(config, rng_seed=seed + i, anomaly_kinds=kinds), anomalous))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_one, jobs))
    return [_one(j) for j in jobs]


# --------------------------------------------------------------------------
# on-disk format


def _seq_names(i):
    return f"seq_{i:05d}.vads", f"seq_{i:05d}.boxes.json"


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_dataset(sequences, directory, config=None, seed=None, run_config=None):
    """Write sequences to ``directory`` and return the manifest dict.

    ``run_config`` (any JSON-able dict) is stored verbatim for provenance.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, seq in enumerate(sequences):
        data_name, box_name = _seq_names(i)
        frames = frames_to_u8(seq.frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        T, H, W, C = frames.shape
        flows = np.ascontiguousarray(seq.gt_flows, dtype="<f4")
        if flows.shape != (T - 1, H, W, 2):
            raise FormatError(f"flow shape {flows.shape} does not match frames {frames.shape}")
        with open(os.path.join(directory, data_name), "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, T, H, W, C))
            fh.write(frames.tobytes(order="C"))
            fh.write(flows.tobytes(order="C"))
            fh.write(np.asarray(seq.frame_labels, dtype=np.uint8).tobytes())
        _dump_json({"boxes": [[list(b) for b in fb] for fb in seq.boxes], "meta": seq.meta},
                   os.path.join(directory, box_name))
        entries.append({
            "index": i,
            "data": data_name,
            "boxes": box_name,
            "n_frames": int(T),
            "anomalous": bool(seq.meta.get("anomalous", bool(np.any(seq.frame_labels)))),
            "anomaly_kind": seq.meta.get("anomaly_kind"),
            "seed": seq.meta.get("seed"),
        })
    manifest = {
        "format": "VADS",
        "version": FORMAT_VERSION,
        "count": len(sequences),
        "seed": seed,
        "config": config.to_dict() if isinstance(config, SceneConfig) else config,
        "sequences": entries,
    }
    if run_config is not None:
        manifest["run_config"] = run_config
    _dump_json(manifest, os.path.join(directory, "manifest.json"))
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError("missing manifest.json", path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON ({exc.msg})", path, exc.pos) from None
    if manifest.get("format") != "VADS":
        raise FormatError("manifest format is not VADS", path)
    return manifest


def _read_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header ({len(raw)} of {_HEADER.size} bytes)", path, len(raw))
    magic, version, T, H, W, C = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if T < 1 or H < 1 or W < 1 or C < 1:
        raise FormatError(f"invalid dims {(T, H, W, C)}", path, 8)
    n_frames = T * H * W * C
    n_flow = (T - 1) * H * W * 2 * 4
    expected = _HEADER.size + n_frames + n_flow + T
    if len(raw) < expected:
        raise FormatError(f"truncated data: expected {expected} bytes, found {len(raw)}", path, len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes", path, expected)
    off = _HEADER.size
    frames = np.frombuffer(raw, np.uint8, n_frames, off).reshape(T, H, W, C)
    off += n_frames
    flows = np.frombuffer(raw, "<f4", (T - 1) * H * W * 2, off).reshape(T - 1, H, W, 2)
    off += n_flow
    labels = np.frombuffer(raw, np.uint8, T, off)
    if np.any(labels > 1):
        raise FormatError("label bytes must be 0 or 1", path, off + int(np.argmax(labels > 1)))
    if C == 1:
        frames = frames[..., 0]
    return frames_to_float(frames), flows.astype(np.float32), labels.astype(bool)


def read_dataset(directory):
    manifest = read_manifest(directory)
    entries = manifest.get("sequences", [])
    count = manifest.get("count")
    on_disk = sorted(f for f in os.listdir(directory) if f.endswith(".vads"))
    if count != len(entries) or count != len(on_disk):
        raise FormatError(f"manifest count {count} does not match {len(entries)} entries / "
                          f"{len(on_disk)} data files", os.path.join(directory, "manifest.json"))
    sequences = []
    for entry in entries:
        frames, flows, labels = _read_binary(os.path.join(directory, entry["data"]))
        box_path = os.path.join(directory, entry["boxes"])
        try:
            with open(box_path, encoding="utf-8") as fh:
                side = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable box sidecar ({exc})", box_path) from None
        boxes = [[Box(int(b[0]), int(b[1]), int(b[2]), int(b[3]), int(b[4]), bool(b[5]))
                  for b in fb] for fb in side["boxes"]]
        if len(boxes) != frames.shape[0]:
            raise FormatError(f"{len(boxes)} box lists for {frames.shape[0]} frames", box_path)
        sequences.append(VideoSequence(frames, flows, labels, boxes, side.get("meta", {})))
    return sequences
