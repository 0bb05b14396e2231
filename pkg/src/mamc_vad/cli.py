"""Command-line entry point: data generation, training, scoring, evaluation and ablations.

Every command resolves one flat run configuration (dotted keys such as
``train.lr_init``) from built-in defaults, an optional JSON file given with
``--config`` and any number of ``--set key=value`` overrides, and writes that
resolved configuration next to everything it produces.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch

from .errors import ConfigError, FormatError, VadError
from .flowest import BlockMatchParams
from .net import ArchConfig
from .scoring import (
    auc_summary,
    effective_weights,
    export_curve,
    read_curve,
    score_records,
    sequence_frame_scores,
)
from .stcpipe import build_stc_set
from .synthdata import ANOMALY_KINDS, SceneConfig, generate_split, read_dataset, write_dataset
from .trainer import Checkpoint, TrainConfig, fit_checkpoint_stats, train

log = logging.getLogger("mamc_vad")

THREADS_ENV = "MAMC_VAD_THREADS"

# Narrower network and shorter schedule used for the synthetic experiments.
DESK_PRESET = {
    "arch.channels_per_level": [16, 32, 64, 128],
    "train.batch_size": 64,
    "train.epochs": 24,
    "train.lr_init": 1e-3,
    "score.w_p": 0.7,
    "score.w_f": 0.3,
}

# Table of component ablations: (index, name, arch overrides).
COMPONENT_ROWS = [
    (1, "appearance_only", dict(streams="appearance", ffrp_enabled=False, align_enabled=False,
                                mgsm_enabled=False)),
    (2, "motion_only", dict(streams="motion", ffrp_enabled=False, align_enabled=False,
                            mgsm_enabled=False)),
    (3, "both_ffrp", dict(ffrp_enabled=True, align_enabled=False, mgsm_enabled=False)),
    (4, "both_ffrp_align", dict(ffrp_enabled=True, align_enabled=True, mgsm_enabled=False)),
    (5, "appearance_mgsm", dict(streams="appearance", ffrp_enabled=False, align_enabled=False,
                                mgsm_enabled=True)),
    (6, "full", dict()),
]
SKIP_ROWS = [
    (7, "skip_full", dict(skip_variant="full")),
    (8, "skip_nosc", dict(skip_variant="nosc")),
    (9, "skip_sc2", dict(skip_variant="sc2")),
    (10, "skip_sc1", dict(skip_variant="sc1")),
]
ABLATION_ROWS = COMPONENT_ROWS + SKIP_ROWS
ABLATION_FIELDS = ["index", "name", "appearance_encoder", "motion_encoder", "ffrp", "align", "mgsm",
                   "skip_variant", "auc"] + [f"auc_{k}" for k in ANOMALY_KINDS] + ["status"]


# --------------------------------------------------------------------------
# run configuration


def _flatten(prefix, obj, out, leaves=("scene.normal_rules",)):
    if isinstance(obj, dict) and prefix not in leaves:
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out, leaves)
    else:
        out[prefix] = obj
    return out


def _unflatten(flat):
    out = {}
    for key, value in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def default_run_config():
    train_cfg = TrainConfig().to_dict()
    del train_cfg["arch"]
    nested = {
        "scene": SceneConfig().to_dict(),
        "arch": ArchConfig().to_dict(),
        "train": train_cfg,
        "score": {"w_p": 0.2, "w_f": 0.8},
        "stc": {"box_mode": "ground_truth", "flow_source": "gt", "context": 2.0,
                "block_size": BlockMatchParams().block_size,
                "search_radius": BlockMatchParams().search_radius},
    }
    return _flatten("", nested, {})


def parse_override(text):
    """``key=value`` with a JSON value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_run_config(config_path=None, overrides=(), preset=None, base=None):
    """Defaults, then preset, then the JSON file, then ``--set`` overrides."""
    cfg = default_run_config() if base is None else dict(base)
    layers = []
    if preset == "desk":
        layers.append(DESK_PRESET)
    elif preset not in (None, "paper"):
        raise ConfigError("preset", f"unknown preset {preset!r}")
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                layers.append(json.load(fh))
        except OSError as exc:
            raise FormatError(f"cannot read config ({exc.strerror})", config_path) from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON ({exc.msg})", config_path, exc.pos) from None
    layers.append(dict(parse_override(o) for o in overrides))
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("config", "run configuration must be a JSON object")
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(key, "unknown configuration key")
            cfg[key] = value
    return cfg


def build_configs(run_cfg):
    """Typed configs from a flat run configuration; every piece is validated."""
    nested = _unflatten(run_cfg)
    scene = SceneConfig.from_dict(nested["scene"])
    arch = ArchConfig.from_dict(nested["arch"])
    train_d = dict(nested["train"])
    train_d["arch"] = arch.to_dict()
    train_cfg = TrainConfig.from_dict(train_d)
    arch.validate()
    train_cfg.validate()
    stc = dict(nested["stc"])
    if stc["box_mode"] not in ("ground_truth", "bg_subtract"):
        raise ConfigError("stc.box_mode", f"unknown box mode {stc['box_mode']!r}")
    return scene, arch, train_cfg, nested["score"], stc


def _stc_set(sequences, stc):
    params = BlockMatchParams(int(stc["block_size"]), int(stc["search_radius"]))
    return build_stc_set(sequences, stc["box_mode"], stc["flow_source"], float(stc["context"]), params)


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, "must be >= 1")
    return n


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _normal_only(sequences):
    keep = [s for s in sequences if not np.any(s.frame_labels)]
    if len(keep) < len(sequences):
        log.info("training on %d normal clips (%d anomalous clips skipped)",
                 len(keep), len(sequences) - len(keep))
    return keep


# --------------------------------------------------------------------------
# shared training / evaluation


def train_and_evaluate(train_stcs, test_stcs, train_cfg, w_p=0.2, w_f=0.8, log_path=None,
                       run_config=None):
    """Train one configuration, fit score statistics on the training cubes, score the test set.

    Returns ``(checkpoint, summary)`` where summary holds the pooled and per-kind AUCs.
    """
    ckpt = train(train_stcs, train_cfg, log_path=log_path, run_config=run_config)
    stats = fit_checkpoint_stats(ckpt, train_stcs, w_p, w_f)
    records = score_records(ckpt.model, test_stcs, stats)
    frames = sequence_frame_scores(records, test_stcs, stats.floor)
    summary = auc_summary(frames, test_stcs.kinds)
    summary["weights"] = [stats.w_p, stats.w_f]
    return ckpt, summary


def _ablation_job(args):
    index, name, train_stcs, test_stcs, train_cfg, w_p, w_f = args
    torch.set_num_threads(1)
    try:
        _, summary = train_and_evaluate(train_stcs, test_stcs, train_cfg, w_p, w_f)
        return index, summary, None, 0
    except VadError as exc:
        return index, None, f"failed: {exc}", exc.exit_code
    except Exception as exc:  # a crashed row must not take the table down
        return index, None, f"failed: {type(exc).__name__}: {exc}", 1


def ablation_row(index, name, arch, summary, status):
    row = {
        "index": index, "name": name,
        "appearance_encoder": int(arch.streams in ("both", "appearance")),
        "motion_encoder": int(arch.streams in ("both", "motion")),
        "ffrp": int(arch.ffrp_enabled), "align": int(arch.align_enabled),
        "mgsm": int(arch.mgsm_enabled), "skip_variant": arch.skip_variant,
        "auc": "", "status": status,
    }
    for k in ANOMALY_KINDS:
        row[f"auc_{k}"] = ""
    if summary:
        row["auc"] = "" if summary["auc"] is None else f"{summary['auc']:.6f}"
        for k, v in summary["auc_by_kind"].items():
            row[f"auc_{k}"] = "" if v is None else f"{v:.6f}"
    return row


def run_ablation(train_stcs, test_stcs, train_cfg, w_p=0.2, w_f=0.8, rows=ABLATION_ROWS, workers=1):
    """Train and evaluate every row; identical configurations are trained once.

    Returns ``(csv_rows, exit_code)``; exit code is nonzero when any row failed.
    """
    archs = {idx: dataclasses.replace(train_cfg.arch, **kw) for idx, _, kw in rows}
    first = {}
    for idx, _, _ in rows:
        first.setdefault(json.dumps(archs[idx].to_dict(), sort_keys=True), idx)
    owner = {idx: first[json.dumps(archs[idx].to_dict(), sort_keys=True)] for idx, _, _ in rows}
    jobs = [(idx, name, train_stcs, test_stcs, dataclasses.replace(train_cfg, arch=archs[idx]), w_p, w_f)
            for idx, name, _ in rows if owner[idx] == idx]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = []
        for job in jobs:
            log.info("ablation row %d (%s)", job[0], job[1])
            results.append(_ablation_job(job))
    by_idx = {r[0]: r for r in results}
    out, code = [], 0
    for idx, name, _ in rows:
        _, summary, err, exit_code = by_idx[owner[idx]]
        code = max(code, exit_code)
        out.append(ablation_row(idx, name, archs[idx], summary, err or "ok"))
    return out, code


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, run_cfg):
    overrides = {}
    if args.anomaly_kinds:
        kinds = [k.strip() for k in args.anomaly_kinds.split(",") if k.strip()]
        overrides["scene.anomaly_kinds"] = kinds
    run_cfg = dict(run_cfg, **overrides)
    run_cfg["scene.rng_seed"] = args.seed
    scene, *_ = build_configs(run_cfg)
    scene.validate()
    if args.normal < 0 or args.anomalous < 0:
        raise ConfigError("count", "sequence counts must be >= 0")
    if args.anomalous and not scene.anomaly_kinds:
        raise ConfigError("anomaly_kinds", "anomalous clips requested but no anomaly kinds enabled")
    sequences = generate_split(scene, args.normal, args.anomalous, seed=args.seed, workers=_threads())
    manifest = write_dataset(sequences, args.out, scene, args.seed, run_config=run_cfg)
    print(json.dumps({"out": args.out, "count": manifest["count"]}))
    return 0


def cmd_train(args, run_cfg):
    scene, arch, train_cfg, score_w, stc = build_configs(run_cfg)
    sequences = _normal_only(read_dataset(args.data))
    stcs = _stc_set(sequences, stc)
    log_path = args.log or f"{args.out}.log.jsonl"

    def progress(step, epoch, report):
        if step % 50 == 0:
            log.info("step %d epoch %d total %.5f", step, epoch, report.total)

    ckpt = train(stcs, train_cfg, log_path=log_path, run_config=run_cfg, progress=progress)
    stats = fit_checkpoint_stats(ckpt, stcs, score_w["w_p"], score_w["w_f"])
    ckpt.save(args.out)
    print(json.dumps({"checkpoint": args.out, "log": log_path, "steps": ckpt.step,
                      "n_stc": len(stcs), "stats": stats.as_dict()}))
    return 0


def cmd_score(args, run_cfg):
    ckpt = Checkpoint.load(args.ckpt)
    if ckpt.stats is None:
        raise FormatError("checkpoint has no score statistics; retrain with `train`", args.ckpt)
    base = ckpt.run_config or run_cfg
    run_cfg = resolve_run_config(None, args.set, base=base)
    _, _, _, score_w, stc = build_configs(run_cfg)
    stats = dataclasses.replace(ckpt.stats)
    if any(o.split("=", 1)[0].startswith("score.") for o in args.set):
        stats.w_p, stats.w_f = effective_weights(ckpt.model.cfg, score_w["w_p"], score_w["w_f"])
    sequences = read_dataset(args.data)
    stcs = _stc_set(sequences, stc)
    records = score_records(ckpt.model, stcs, stats)
    frames = sequence_frame_scores(records, stcs, stats.floor)
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i, fs in enumerate(frames):
        name = f"seq_{i:05d}.csv"
        export_curve(fs, os.path.join(args.out, name))
        names.append(name)
    with open(os.path.join(args.out, "records.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_index", "frame_index", "object_id", "s_p", "s_f", "s"])
        for r in records:
            w.writerow([r.sequence_index, r.frame_index, r.object_id, repr(r.s_p), repr(r.s_f), repr(r.s)])
    _write_json({"curves": names, "kinds": list(stcs.kinds), "stats": stats.as_dict(),
                 "checkpoint": os.path.abspath(args.ckpt), "data": os.path.abspath(args.data),
                 "run_config": run_cfg}, os.path.join(args.out, "scores.json"))
    print(json.dumps({"out": args.out, "n_sequences": len(frames), "n_records": len(records)}))
    return 0


def cmd_eval(args, run_cfg):
    meta_path = os.path.join(args.scores, "scores.json")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError("missing scores.json (is this a `score` output directory?)", meta_path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"scores.json is not valid JSON ({exc.msg})", meta_path, exc.pos) from None
    frames = [read_curve(os.path.join(args.scores, n)) for n in meta["curves"]]
    summary = auc_summary(frames, meta["kinds"])
    stats = meta["stats"]
    summary.update(weights=[stats["w_p"], stats["w_f"]], stats=stats, run_config=meta.get("run_config"))
    text = json.dumps(summary, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if summary["auc"] is not None else 2


def _split_dirs(data):
    train_dir, test_dir = os.path.join(data, "train"), os.path.join(data, "test")
    for d in (train_dir, test_dir):
        if not os.path.isfile(os.path.join(d, "manifest.json")):
            raise FormatError("ablation data needs train/ and test/ datasets", d)
    return train_dir, test_dir


def cmd_ablate(args, run_cfg):
    _, _, train_cfg, score_w, stc = build_configs(run_cfg)
    train_dir, test_dir = _split_dirs(args.data)
    train_stcs = _stc_set(_normal_only(read_dataset(train_dir)), stc)
    test_stcs = _stc_set(read_dataset(test_dir), stc)
    rows, code = run_ablation(train_stcs, test_stcs, train_cfg, score_w["w_p"], score_w["w_f"],
                              workers=_threads())
    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, "ablation.csv")
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_json({"table": "ablation.csv", "run_config": run_cfg}, os.path.join(args.out, "ablation.json"))
    for r in rows:
        print(f"{r['index']:>2} {r['name']:<16} auc={r['auc'] or '-':<9} {r['status']}")
    return code


def memory_rows(model):
    """One row per memory item: level, item, norm, then the item's cosine to every item."""
    rows = []
    for key in sorted(model.mgsm, key=int):
        items = model.mgsm[key].bank.items.detach().double().numpy()
        norms = np.linalg.norm(items, axis=1)
        unit = items / norms[:, None]
        cos = unit @ unit.T
        cos = (cos + cos.T) / 2.0
        np.fill_diagonal(cos, 1.0)
        for i in range(len(items)):
            rows.append([int(key), i, float(norms[i])] + [float(c) for c in cos[i]])
    return rows


def cmd_inspect_memory(args, run_cfg):
    ckpt = Checkpoint.load(args.ckpt)
    rows = memory_rows(ckpt.model)
    if not rows:
        log.warning("checkpoint has no memory banks (MGSM disabled or no skip levels)")
    width = max((len(r) - 3 for r in rows), default=0)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "item", "norm"] + [f"cos_{j}" for j in range(width)])
        for r in rows:
            w.writerow(r[:3] + [repr(c) for c in r[3:]] + [""] * (width - (len(r) - 3)))
    _write_json({"table": os.path.basename(args.out), "checkpoint": os.path.abspath(args.ckpt),
                 "items_per_level": {str(lv): sum(1 for r in rows if r[0] == lv)
                                     for lv in sorted({r[0] for r in rows})},
                 "run_config": ckpt.run_config or run_cfg}, f"{args.out}.json")
    print(json.dumps({"out": args.out, "rows": len(rows)}))
    return 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 (status 2 is reserved for data errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted-key settings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable), e.g. --set train.epochs=5")
    common.add_argument("--preset", choices=("paper", "desk"), default=None,
                        help="'desk' selects a narrow network and short schedule")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mamc-vad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--normal", type=int, default=50)
    g.add_argument("--anomalous", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--anomaly-kinds", help="comma-separated subset of " + ",".join(ANOMALY_KINDS))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train on the normal clips of a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines loss log (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], help="write per-clip anomaly score curves")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", parents=[common], help="frame-level AUC of a score directory")
    e.add_argument("--scores", required=True)
    e.add_argument("--out", help="also write the JSON summary here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="component and skip-variant ablation table")
    a.add_argument("--data", required=True, help="directory holding train/ and test/ datasets")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("inspect-memory", parents=[common], help="memory item norms and cosines")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_inspect_memory)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads())
        run_cfg = resolve_run_config(args.config, args.set, args.preset)
        return args.func(args, run_cfg)
    except VadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
