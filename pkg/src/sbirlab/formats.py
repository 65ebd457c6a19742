"""On-disk formats: embedding files, checkpoints, dataset manifests, rasters, reports.

Binary files are little-endian.

Embedding file::

    b"FGEM" | u32 version=1 | u32 count | u32 dim | u64 id[count] | f64 row-major[count*dim]

Checkpoint file (the same conventions, split into named sections)::

    b"FGCK" | u32 version=1 | u32 sections
    per section: u32 name_len | utf-8 name | u8 kind | u64 payload_len | payload
    kind 0 (array): u32 ndim | u32 dim[ndim] | f64 values
    kind 1 (json):  utf-8 JSON text
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from .autodiff import AdamState
from .dataset import DatasetIndex, InstanceRecord
from .encoders import config_from_dict
from .training import Checkpoint

EMBEDDING_MAGIC = b"FGEM"
CHECKPOINT_MAGIC = b"FGCK"
FORMAT_VERSION = 1
MANIFEST_FORMAT = "sbirlab-manifest"


class FormatError(ValueError):
    """A file is truncated, has the wrong magic/version or inconsistent sizes."""


# -- embeddings ----------------------------------------------------------------


def embeddings_to_bytes(ids, vectors) -> bytes:
    ids = np.asarray(ids, dtype="<u8")
    vectors = np.asarray(vectors, dtype="<f8")
    if vectors.ndim != 2 or len(ids) != len(vectors):
        raise ValueError("need N ids and an N×D matrix")
    head = EMBEDDING_MAGIC + struct.pack("<III", FORMAT_VERSION, len(ids), vectors.shape[1])
    return head + ids.tobytes() + np.ascontiguousarray(vectors).tobytes()


def embeddings_from_bytes(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < 16 or blob[:4] != EMBEDDING_MAGIC:
        raise FormatError("not an embedding file (bad magic)")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported embedding file version {version}")
    expected = 16 + 8 * count + 8 * count * dim
    if len(blob) != expected:
        raise FormatError(f"embedding file has {len(blob)} bytes, header implies {expected}")
    ids = np.frombuffer(blob, dtype="<u8", count=count, offset=16).astype(np.int64)
    vecs = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=16 + 8 * count)
    return ids, vecs.reshape(count, dim).astype(np.float64)


def write_embeddings(path, ids, vectors) -> None:
    Path(path).write_bytes(embeddings_to_bytes(ids, vectors))


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    return embeddings_from_bytes(Path(path).read_bytes())


# -- sectioned container -------------------------------------------------------


def _pack_section(name: str, value) -> bytes:
    raw_name = name.encode("utf-8")
    if isinstance(value, np.ndarray):
        arr = np.asarray(value, dtype="<f8", order="C")
        payload = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
        kind = 0
    else:
        payload = dumps(value).encode("utf-8")
        kind = 1
    return struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<BQ", kind, len(payload)) + payload


def sections_to_bytes(sections: dict[str, Any]) -> bytes:
    body = b"".join(_pack_section(k, v) for k, v in sections.items())
    return CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(sections)) + body


def sections_from_bytes(blob: bytes) -> dict[str, Any]:
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            kind, plen = struct.unpack_from("<BQ", blob, pos)
            pos += 9
            payload = blob[pos:pos + plen]
            if len(payload) != plen:
                raise FormatError(f"section {name!r} is truncated")
            pos += plen
            if kind == 0:
                (ndim,) = struct.unpack_from("<I", payload, 0)
                shape = struct.unpack_from(f"<{ndim}I", payload, 4)
                data = np.frombuffer(payload, dtype="<f8", offset=4 + 4 * ndim)
                if data.size != int(np.prod(shape)):
                    raise FormatError(f"section {name!r} size does not match its shape")
                out[name] = data.reshape(shape).astype(np.float64)
            elif kind == 1:
                out[name] = json.loads(payload.decode("utf-8"))
            else:
                raise FormatError(f"section {name!r} has unknown kind {kind}")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after the last section")
    return out


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "format": "sbirlab-checkpoint",
        "photo_config": ckpt.photo_config.to_dict(),
        "sketch_config": ckpt.sketch_config.to_dict(),
        "photo_params": list(ckpt.photo_params),
        "sketch_params": list(ckpt.sketch_params),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "photo_opt": _opt_header(ckpt.photo_opt),
        "sketch_opt": _opt_header(ckpt.sketch_opt),
    }
    sections: dict[str, Any] = {"header": header}
    for side, params, opt in (("photo", ckpt.photo_params, ckpt.photo_opt),
                              ("sketch", ckpt.sketch_params, ckpt.sketch_opt)):
        for i, (name, value) in enumerate(params.items()):
            sections[f"{side}/{name}"] = value
            sections[f"{side}_opt/m/{name}"] = opt.m[i]
            sections[f"{side}_opt/v/{name}"] = opt.v[i]
    return sections_to_bytes(sections)


def _opt_header(opt: AdamState) -> dict:
    return {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    sec = sections_from_bytes(blob)
    try:
        head = sec["header"]
        parts = {}
        for side in ("photo", "sketch"):
            names = head[f"{side}_params"]
            params = {n: sec[f"{side}/{n}"] for n in names}
            opt = AdamState([sec[f"{side}_opt/m/{n}"] for n in names],
                            [sec[f"{side}_opt/v/{n}"] for n in names], **head[f"{side}_opt"])
            parts[side] = (config_from_dict(head[f"{side}_config"]), params, opt)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint is missing section {exc}") from exc
    (pc, pp, po), (sc, sp, so) = parts["photo"], parts["sketch"]
    return Checkpoint(pc, sc, pp, sp, po, so, head["epoch"], head["history"], head["meta"])


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- rasters -------------------------------------------------------------------


def write_pnm(path, image: np.ndarray) -> None:
    """Write a C×H×W image in [0, 1] as 8-bit PGM (C=1) or PPM (C=3)."""
    img = np.asarray(image)
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("only 1- or 3-channel images can be stored as PGM/PPM")
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + px.transpose(1, 2, 0).tobytes())


def _pnm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Binary PGM/PPM (8- or 16-bit) to a C×H×W float array in [0, 1]."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_tokens(blob, 4)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary PGM/PPM rasters are supported")
    c = 1 if magic == b"P5" else 3
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * c
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=pos) if len(blob) - pos >= n * np.dtype(dtype).itemsize else None
    if data is None:
        raise FormatError(f"{path}: raster data is truncated")
    return (data.reshape(h, w, c).transpose(2, 0, 1) / float(maxval)).astype(np.float64)


# -- dataset manifest ----------------------------------------------------------


def write_dataset(out_dir, ds: DatasetIndex, splits: Optional[dict[int, str]] = None,
                  extra: Optional[dict] = None) -> Path:
    """Write rasters plus ``manifest.jsonl`` (a header line, then one line per instance)."""
    out = Path(out_dir)
    (out / "photos").mkdir(parents=True, exist_ok=True)
    (out / "sketches").mkdir(parents=True, exist_ok=True)
    lines = [dumps({"format": MANIFEST_FORMAT, "version": FORMAT_VERSION,
                    "num_categories": ds.num_categories, **(extra or {})}, indent=None)]
    for r in ds:
        photo = f"photos/{r.instance_id:06d}.pgm"
        write_pnm(out / photo, ds.photos[r.photo_ref])
        sketches = []
        for j, ref in enumerate(r.sketch_refs):
            rel = f"sketches/{r.instance_id:06d}_{j}.pgm"
            write_pnm(out / rel, ds.sketches[ref])
            sketches.append(rel)
        rec = {"instance_id": r.instance_id, "category_id": r.category_id,
               "photo_path": photo, "sketch_paths": sketches}
        if r.mirror_sibling_id is not None:
            rec["mirror_sibling_id"] = r.mirror_sibling_id
        if splits is not None:
            rec["split"] = splits[r.instance_id]
        lines.append(dumps(rec, indent=None))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


_RECORD_KEYS = {"instance_id", "category_id", "photo_path", "sketch_paths",
                "mirror_sibling_id", "split"}


def read_dataset(path) -> tuple[DatasetIndex, dict[int, str], dict]:
    """Load a manifest (file or directory). Returns (dataset, split per instance, header)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    try:
        lines = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON line ({exc})") from exc
    if not lines or lines[0].get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: missing manifest header line")
    header = lines[0]
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {header.get('version')}")
    photos, sketches, items, splits = [], [], [], {}
    for rec in lines[1:]:
        unknown = set(rec) - _RECORD_KEYS
        if unknown:
            raise FormatError(f"{path}: unknown manifest fields {sorted(unknown)}")
        try:
            refs = []
            for sp in rec["sketch_paths"]:
                refs.append(len(sketches))
                sketches.append(read_pnm(root / sp))
            items.append(InstanceRecord(int(rec["instance_id"]), int(rec["category_id"]),
                                        len(photos), tuple(refs), rec.get("mirror_sibling_id")))
            photos.append(read_pnm(root / rec["photo_path"]))
        except KeyError as exc:
            raise FormatError(f"{path}: record lacks field {exc}") from exc
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if "split" in rec:
            splits[int(rec["instance_id"])] = rec["split"]
    shapes = {p.shape for p in photos} | {s.shape for s in sketches}
    if len(shapes) > 1:
        raise FormatError(f"{path}: rasters have differing shapes {sorted(shapes)}")
    num_categories = int(header.get("num_categories",
                                    1 + max((r.category_id for r in items), default=-1)))
    ds = DatasetIndex(items, num_categories, np.stack(photos), np.stack(sketches))
    ds.validate()
    return ds, splits, header


def split_from_manifest(ds: DatasetIndex, splits: dict[int, str], name: str) -> DatasetIndex:
    ids = [r.instance_id for r in ds if splits.get(r.instance_id) == name]
    if not ids:
        raise ValueError(f"manifest has no instances in split {name!r}")
    return ds.subset(ids, name)


# -- json documents ------------------------------------------------------------


def dumps(obj, indent: Optional[int] = 2) -> str:
    """JSON with insertion-ordered keys; rejects NaN so documents stay portable."""
    return json.dumps(obj, indent=indent, allow_nan=False, default=_to_plain)


def _to_plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def report_ids(report: dict) -> Iterable[int]:
    return (q["query_id"] for q in report.get("queries", []))
