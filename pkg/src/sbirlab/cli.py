"""``sbirlab`` command line: generate → train → finetune → embed → eval → compare.

Every command reads the same JSON config document (``--config``), accepts
``--set section.key=value`` overrides and a global ``--seed``. Failures print a
single JSON line ``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .config import ConfigError, RunConfig, defaults
from .dataset import DatasetIndex
from .encoders import EmbeddingPool, embed
from .retrieval import EmbeddingIndex, evaluate, improvement_percentage
from .sampling import Strategy
from .synth import generate_dataset, split
from .training import TrainingDiverged, finetune, train

log = logging.getLogger("sbirlab")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_INPUT = 3


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.kind, self.code = kind, code


# -- helpers -------------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    print(formats.dumps(obj))


def _load_split(cfg: RunConfig, data: str, which: str) -> DatasetIndex:
    ds, splits, _ = formats.read_dataset(data)
    if which == "all":
        return ds
    if splits:
        return formats.split_from_manifest(ds, splits, which)
    sp = cfg.build()["split"]
    train_ds, test_ds = split(ds, sp.test_fraction, sp.seed, sp.prefer_mirror_pairs)
    return train_ds if which == "train" else test_ds


def _history_path(args) -> Path:
    return Path(args.history) if args.history else Path(str(args.out) + ".history.json")


def _history_doc(ckpt) -> dict:
    return {"format": "sbirlab-history", "version": 1, "epochs": ckpt.history}


# -- commands ------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig) -> dict:
    parts = cfg.build()
    ds = generate_dataset(parts["synth"])
    sp = parts["split"]
    train_ds, test_ds = split(ds, sp.test_fraction, sp.seed, sp.prefer_mirror_pairs)
    splits = {r.instance_id: "train" for r in train_ds}
    splits.update({r.instance_id: "test" for r in test_ds})
    path = formats.write_dataset(args.out, ds, splits,
                                 extra={"synth": parts["synth"].to_dict()})
    return {"manifest": str(path), "instances": len(ds), "train": len(train_ds),
            "test": len(test_ds), "sketches": int(len(ds.sketches))}


def cmd_train(args, cfg: RunConfig) -> dict:
    parts = cfg.build()
    ds = _load_split(cfg, args.data, "train")
    c, h, w = ds.image_shape
    photo_cfg = cfg.encoder("photo_encoder", (h, w), ds.num_categories, c)
    sketch_cfg = cfg.encoder("sketch_encoder", (h, w), ds.num_categories, c)
    ckpt = train(ds, photo_cfg, sketch_cfg, parts["batch"], parts["loss"], parts["schedule"])
    formats.write_checkpoint(args.out, ckpt)
    formats.write_json(_history_path(args), _history_doc(ckpt))
    return {"checkpoint": str(args.out), "history": str(_history_path(args)),
            "epochs": ckpt.epoch, "final_loss": ckpt.history[-1]["loss"]}


def cmd_finetune(args, cfg: RunConfig) -> dict:
    parts = cfg.build()
    ckpt = formats.read_checkpoint(args.ckpt)
    ds = _load_split(cfg, args.data, "train")
    spec = parts["batch"]
    if args.strategy:
        spec = replace(spec, strategy=Strategy(args.strategy))
    out = finetune(ckpt, ds, spec, parts["schedule"], parts["loss"] if args.loss_from_config else None,
                   lr=args.lr, epochs=args.epochs,
                   embedding_pool=EmbeddingPool(args.pool) if args.pool else None)
    formats.write_checkpoint(args.out, out)
    formats.write_json(_history_path(args), _history_doc(out))
    return {"checkpoint": str(args.out), "history": str(_history_path(args)),
            "strategy": spec.strategy.value, "epochs": out.epoch,
            "final_loss": out.history[-1]["loss"]}


def cmd_embed(args, cfg: RunConfig) -> dict:
    ckpt = formats.read_checkpoint(args.ckpt)
    ds = _load_split(cfg, args.data, args.split)
    photo_ids = np.array([r.instance_id for r in ds], dtype=np.int64)
    refs = np.array([r.photo_ref for r in ds], dtype=np.int64)
    sketch_ids = np.array([s for r in ds for s in r.sketch_refs], dtype=np.int64)
    pv = embed(ckpt.photo_tensors(), ckpt.photo_config, ds.photos[refs])
    sv = embed(ckpt.sketch_tensors(), ckpt.sketch_config, ds.sketches[sketch_ids])
    formats.write_embeddings(args.photos, photo_ids, pv)
    formats.write_embeddings(args.sketches, sketch_ids, sv)
    return {"photos": str(args.photos), "sketches": str(args.sketches),
            "num_photos": len(photo_ids), "num_sketches": len(sketch_ids), "dim": int(pv.shape[1])}


def cmd_eval(args, cfg: RunConfig) -> dict:
    ks = tuple(args.k) if args.k else cfg.build()["eval"].ks
    top = cfg.build()["eval"].top
    ds, _, _ = formats.read_dataset(args.data)
    photo_ids, pv = formats.read_embeddings(args.photos)
    sketch_ids, sv = formats.read_embeddings(args.sketches)
    if pv.shape[1] != sv.shape[1]:
        raise CliError("DimensionMismatch",
                       f"photo embeddings have dim {pv.shape[1]}, sketch embeddings {sv.shape[1]}")
    owner = {s: r for r in ds for s in r.sketch_refs}
    try:
        cats = [ds.record(int(i)).category_id for i in photo_ids]
        truth = [owner[int(s)].instance_id for s in sketch_ids]
        qcats = [owner[int(s)].category_id for s in sketch_ids]
    except KeyError as exc:
        raise CliError("UnknownId", f"embedding id {exc} is not in the dataset manifest") from exc
    gallery = set(photo_ids.tolist())
    missing = sorted(set(truth) - gallery)
    if missing:
        raise CliError("MissingGroundTruth",
                       f"{len(missing)} sketch queries have no photo in the gallery (e.g. {missing[0]})")
    mirror = {r.instance_id: r.mirror_sibling_id for r in ds if r.mirror_sibling_id is not None}
    index = EmbeddingIndex(photo_ids, pv, cats, mirror or None)
    provenance = {"photos_sha256": _sha256(args.photos), "sketches_sha256": _sha256(args.sketches),
                  "manifest_sha256": _sha256(Path(args.data) / "manifest.jsonl"
                                             if Path(args.data).is_dir() else args.data)}
    report = evaluate(index, sketch_ids, sv, truth, qcats, ks, provenance)
    doc = report.to_dict(per_query=True, top=top)
    formats.write_json(args.out, doc)
    return {"report": str(args.out), "recall": doc["recall"],
            "flip_confusion_rate": doc["flip_confusion_rate"],
            "category_mismatch_rate": doc["category_mismatch_rate"]}


def _improvement(base: Optional[int], new: Optional[int]) -> Optional[float]:
    if base is None or new is None:
        return None
    if base == 0:
        return 0.0 if new == 0 else None
    return improvement_percentage(base, new)


def compare_reports(a: dict, b: dict) -> dict:
    """Report B against baseline report A. Error-count improvements follow the
    relative-drop convention; undefined entries (zero baseline errors) are null."""
    for doc in (a, b):
        if doc.get("format") != "sbirlab-report":
            raise CliError("FormatError", "compare expects two report documents")
    ks = [k for k in a["recall"] if k in b["recall"]]
    misses = {}
    for k in ks:
        ma = round((1.0 - a["recall"][k]) * a["num_queries"])
        mb = round((1.0 - b["recall"][k]) * b["num_queries"])
        misses[k] = {"baseline": ma, "new": mb, "improvement_percentage": _improvement(ma, mb)}
    return {
        "format": "sbirlab-comparison",
        "version": 1,
        "recall_delta": {k: b["recall"][k] - a["recall"][k] for k in ks},
        "misses": misses,
        "category_mismatch": {
            "baseline": a["category_mismatch_count"], "new": b["category_mismatch_count"],
            "improvement_percentage": _improvement(a["category_mismatch_count"],
                                                   b["category_mismatch_count"]),
        },
        "flip_confusion": {
            "baseline": a["flip_confusion_count"], "new": b["flip_confusion_count"],
            "improvement_percentage": _improvement(a["flip_confusion_count"],
                                                   b["flip_confusion_count"]),
        },
    }


def cmd_compare(args, cfg: RunConfig) -> dict:
    doc = compare_reports(formats.read_json(args.baseline), formats.read_json(args.new))
    formats.write_json(args.out, doc)
    return doc


def cmd_config(args, cfg: RunConfig) -> dict:
    return cfg.to_document()


# -- parser --------------------------------------------------------------------


def _defaults_epilog() -> str:
    lines = ["config sections and defaults:"]
    for section, body in defaults().items():
        lines.append(f"  {section}: " + json.dumps(body))
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    """Turns usage errors into exceptions so they get the one-line error format."""

    def error(self, message):
        raise CliError("UsageError", f"{self.prog}: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field (value parsed as JSON)")
    common.add_argument("--seed", type=int, help="seed for data, split, sampling and init")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="sbirlab", description=__doc__.splitlines()[0],
                                epilog=_defaults_epilog(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, epilog=_defaults_epilog(),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        return sp

    g = add("generate", cmd_generate, "write a synthetic dataset (manifest + rasters)")
    g.add_argument("--out", required=True, help="output directory")

    t = add("train", cmd_train, "train photo and sketch encoders")
    t.add_argument("--data", required=True, help="manifest file or dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="metric history path (default: <out>.history.json)")

    f = add("finetune", cmd_finetune, "continue training a checkpoint with another sampler")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--strategy", choices=[s.value for s in Strategy])
    f.add_argument("--pool", choices=[e.value for e in EmbeddingPool],
                   help="switch the CNN embedding head")
    f.add_argument("--lr", type=float, help="learning rate (default: schedule.finetune_lr)")
    f.add_argument("--epochs", type=int, help="epochs (default: schedule.epochs)")
    f.add_argument("--loss-from-config", action="store_true",
                   help="use the config's loss section instead of the checkpoint's")
    f.add_argument("--history")

    e = add("embed", cmd_embed, "embed photos and sketches of a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--photos", required=True, help="output embedding file for photos")
    e.add_argument("--sketches", required=True, help="output embedding file for sketches")

    v = add("eval", cmd_eval, "retrieve photos for sketch queries and write a report")
    v.add_argument("--data", required=True)
    v.add_argument("--photos", required=True)
    v.add_argument("--sketches", required=True)
    v.add_argument("--k", type=int, action="append", help="recall cutoffs (repeatable)")
    v.add_argument("--out", required=True)

    c = add("compare", cmd_compare, "compare a report against a baseline report")
    c.add_argument("baseline")
    c.add_argument("new")
    c.add_argument("--out", required=True)

    add("config", cmd_config, "print the effective config document")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, tuple(args.set), args.seed)
        _emit(args.fn(args, cfg))
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), EXIT_USAGE)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except formats.FormatError as exc:
        return _fail("FormatError", str(exc), EXIT_INPUT)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", str(exc), EXIT_INPUT)
    except TrainingDiverged as exc:
        return _fail("TrainingDiverged", str(exc), EXIT_RUNTIME)
    except ValueError as exc:
        return _fail("ValidationError", str(exc), EXIT_INPUT)
    return 0


if __name__ == "__main__":
    sys.exit(main())
