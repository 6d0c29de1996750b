"""Command-line pipeline: generate, train, eval, retrieve, search, heatmap.

Every run reads one JSON config (a path, or the name of a bundled config
such as ``desk-scale``); command-line flags override individual keys. All
outputs are written under ``--out-dir`` with fixed file names, so re-running
a command with the same inputs and seed rewrites identical files.
"""

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .dataset import (RecordFormatError, WorldConfig, generate_world, load_records,
                      save_records, split_dataset)
from .model import HEADS, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate_nll, run_protocol, write_history_csv

log = logging.getLogger("xvdistill")

DEFAULTS = {
    "seed": 0,
    "world": {},
    "model": {"hidden": 1024, "backbone_widths": [128, 128, 128], "link_floor": 1e-6},
    "train": {},
    "split": [0.93, 0.02, 0.05],
    "eval": {"thresholds": None, "heatmap_rows": 50, "heatmap_cols": 100},
    "paths": {"dataset": "dataset.jsonl", "split": "split.json", "checkpoint": "checkpoint.json"},
}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _bundled(name):
    return resources.files("xvdistill").joinpath("configs", f"{name}.json")


def load_config(ref):
    if ref is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(ref)
    if not path.exists():
        bundled = _bundled(ref)
        if not bundled.is_file():
            raise StageError("config", f"no config file or bundled config named {ref!r}")
        text = bundled.read_text(encoding="utf-8")
    else:
        text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StageError("config", f"{ref}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise StageError("config", f"{ref}: top level must be an object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise StageError("config", f"unknown config keys: {', '.join(sorted(unknown))}")
    return _merge(DEFAULTS, raw)


def _dataclass_from(cls, section, values, seed):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise StageError("config", f"unknown {section} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**{**values, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise StageError("config", f"{section}: {exc}") from None


def world_config(cfg):
    return _dataclass_from(WorldConfig, "world", cfg["world"], cfg["seed"])


def train_config(cfg):
    return _dataclass_from(TrainConfig, "train", cfg["train"], cfg["seed"])


def _out(args, cfg, key):
    return Path(args.out_dir) / cfg["paths"][key]


def _load_dataset(args, cfg):
    path = _out(args, cfg, "dataset")
    try:
        records = load_records(path)
    except FileNotFoundError:
        raise StageError("load", f"dataset {path} not found; run `generate` first") from None
    except RecordFormatError as exc:
        raise StageError("load", f"{path}: {exc}") from None
    split_path = _out(args, cfg, "split")
    try:
        split = json.loads(split_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StageError("load", f"split manifest {split_path} not found; run `generate` first") from None
    by_id = {r.id: r for r in records}
    try:
        parts = {k: [by_id[i] for i in split[k]] for k in ("train", "val", "test")}
    except KeyError as exc:
        raise StageError("load", f"split manifest references unknown id or part {exc}") from None
    return records, parts


def _load_model(args, cfg):
    path = _out(args, cfg, "checkpoint")
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise StageError("load", f"checkpoint {path} not found; run `train` first") from None
    except (KeyError, ValueError) as exc:
        raise StageError("load", f"{path}: {exc}") from None


def cmd_generate(args, cfg):
    wcfg = world_config(cfg)
    world = generate_world(wcfg)
    try:
        train, val, test = split_dataset(world.records, cfg["split"], seed=cfg["seed"])
    except ValueError as exc:
        raise StageError("split", str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_records(world.records, _out(args, cfg, "dataset"))
    manifest = {"seed": cfg["seed"], "fractions": list(cfg["split"]),
                "train": [r.id for r in train], "val": [r.id for r in val],
                "test": [r.id for r in test]}
    _out(args, cfg, "split").write_text(json.dumps(manifest) + "\n", encoding="utf-8")
    log.info("generated %d records (%d/%d/%d) in %s", len(world.records),
             len(train), len(val), len(test), out)


def cmd_train(args, cfg):
    records, parts = _load_dataset(args, cfg)
    tcfg = train_config(cfg)
    r = records[0]
    mcfg = cfg["model"]
    model = build_model(len(r.feature), len(r.ground.scene_dist), len(r.ground.image_dist),
                        len(r.ground.counts), hidden=int(mcfg["hidden"]),
                        backbone_widths=tuple(mcfg["backbone_widths"]),
                        link_floor=float(mcfg["link_floor"]), seed=cfg["seed"])
    kl = []
    try:
        model, history = run_protocol(model, parts["train"], parts["val"], tcfg, kl)
    except ValueError as exc:
        raise StageError("train", str(exc)) from None
    out = Path(args.out_dir)
    save_checkpoint(model, _out(args, cfg, "checkpoint"))
    write_history_csv(history, out / "history.csv")
    with open(out / "pretrain_kl.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,kl\n")
        for i, v in enumerate(kl):
            fh.write(f"{i},{v!r}\n")
    log.info("pretraining KL %.6f -> %.6f; final val NLL %.6f",
             kl[0], kl[-1], history[-1]["val_total_nll"])


def cmd_eval(args, cfg):
    records, parts = _load_dataset(args, cfg)
    model = _load_model(args, cfg)
    weights = train_config(cfg).head_loss_weights
    report = {}
    for name in ("train", "val", "test"):
        if parts[name]:
            report[name] = evaluate_nll(model, parts[name], weights)._asdict()
    db = ev.build_reference_db(model, records)
    thresholds = cfg["eval"]["thresholds"] or ev.DEFAULT_THRESHOLDS
    out = Path(args.out_dir)
    report["localization"] = {}
    for head in HEADS:
        curve = ev.accuracy_curve(ev.localize_all(parts["test"], db, head), thresholds)
        ev.write_curve_csv(curve, out / f"curve_{head}.csv")
        report["localization"][head] = {"acc_at_0.01": curve.at(0.01) if 0.01 in curve.thresholds else None,
                                        "mean_accuracy": float(curve.accuracy.mean())}
    (out / "nll.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("test NLL %.6f; curves written to %s", report["test"]["total"], out)


def _query(records, query_id):
    for r in records:
        if r.id == query_id:
            return r
    raise StageError("query", f"query id {query_id} is not in the dataset")


def cmd_retrieve(args, cfg):
    records, _ = _load_dataset(args, cfg)
    db = ev.build_reference_db(_load_model(args, cfg), records)
    q = _query(records, args.query_id)
    try:
        hits = ev.retrieve_topk(q.ground, db, args.head, args.k)
    except ValueError as exc:
        raise StageError("retrieve", str(exc)) from None
    path = Path(args.out_dir) / f"retrieve_{args.head}_{args.query_id}.csv"
    ev.write_hits_csv(hits, path, db)
    log.info("top-%d for query %d written to %s", args.k, args.query_id, path)


def _label(text):
    head, _, index = text.partition(":")
    if head not in HEADS or not index.isdigit():
        raise argparse.ArgumentTypeError(f"expected HEAD:INDEX with HEAD in {HEADS}, got {text!r}")
    return head, int(index)


def cmd_search(args, cfg):
    records, _ = _load_dataset(args, cfg)
    db = ev.build_reference_db(_load_model(args, cfg), records)
    try:
        hits = ev.attribute_search(db, args.primary, args.secondary, args.top_n)
    except (IndexError, ValueError) as exc:
        raise StageError("search", str(exc)) from None
    (h1, i1), (h2, i2) = args.primary, args.secondary
    path = Path(args.out_dir) / f"search_{h1}-{i1}_{h2}-{i2}.csv"
    ev.write_hits_csv(hits, path)
    log.info("%d entries written to %s", len(hits), path)


def cmd_heatmap(args, cfg):
    records, _ = _load_dataset(args, cfg)
    db = ev.build_reference_db(_load_model(args, cfg), records)
    q = _query(records, args.query_id)
    rows = args.rows or cfg["eval"]["heatmap_rows"]
    cols = args.cols or cfg["eval"]["heatmap_cols"]
    try:
        grid = ev.Grid(int(rows), int(cols), tuple(world_config(cfg).geo_extent))
    except ValueError as exc:
        raise StageError("heatmap", str(exc)) from None
    matrix = ev.heatmap(q.ground, db, args.head, grid)
    stem = Path(args.out_dir) / f"heatmap_{args.head}_{args.query_id}"
    ev.write_heatmap(matrix, grid, str(stem), {"head": args.head, "query_id": args.query_id})
    log.info("heatmap written to %s.pgm", stem)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "retrieve": cmd_retrieve, "search": cmd_search, "heatmap": cmd_heatmap}
HELP = {
    "generate": "synthesize a world; write dataset.jsonl and split.json",
    "train": "pretrain the backbone, fit the heads; write checkpoint.json and histories",
    "eval": "NLL per split and localization curves per head",
    "retrieve": "top-k database entries for one query record",
    "search": "rank entries by one label, re-order by a second",
    "heatmap": "max-pooled score grid for one query (PGM + CSV + JSON)",
}


def _globals(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="config path or bundled name (e.g. desk-scale)")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else ".",
                        help="directory for all inputs/outputs of the pipeline")
    parser.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "INFO")


def build_parser():
    p = argparse.ArgumentParser(prog="xvdistill", description=__doc__.splitlines()[0])
    _globals(p, False)
    sub = p.add_subparsers(dest="command", required=True)
    cmds = {name: sub.add_parser(name, help=HELP[name]) for name in COMMANDS}
    for sp in cmds.values():
        _globals(sp, True)

    g = cmds["generate"]
    g.add_argument("--num-records", type=int)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--noise", type=float, dest="feature_noise_sigma")

    t = cmds["train"]
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)

    for name in ("retrieve", "heatmap"):
        cmds[name].add_argument("--query-id", type=int, required=True)
        cmds[name].add_argument("--head", choices=HEADS, default="scene")
    cmds["retrieve"].add_argument("--k", type=int, default=3)
    cmds["heatmap"].add_argument("--rows", type=int)
    cmds["heatmap"].add_argument("--cols", type=int)

    s = cmds["search"]
    s.add_argument("--primary", type=_label, required=True, help="HEAD:INDEX, e.g. image:3")
    s.add_argument("--secondary", type=_label, required=True, help="HEAD:INDEX, e.g. scene:7")
    s.add_argument("--top-n", type=int, default=20)
    return p


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key in ("num_records", "num_classes", "feature_noise_sigma"):
        if getattr(args, key, None) is not None:
            cfg["world"][key] = getattr(args, key)
    for key in ("epochs", "batch_size", "lr", "weight_decay"):
        if getattr(args, key, None) is not None:
            cfg["train"][key] = getattr(args, key)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"xvdistill {args.command}: error {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"xvdistill {args.command}: error [io] {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
