"""Bit-exact persistence for tensors, dataset manifests, and checkpoints.

Tensor container layout: an 8-byte little-endian unsigned header length,
a UTF-8 JSON header, then the raw C-order little-endian float32 payload.
Manifests are JSON Lines, one subject record per line.  Checkpoints are
directories holding a config JSON, a parameter index, and one tensor
container per parameter.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC_DTYPE = "f32"
_VALID_SPLITS = ("train", "val", "test")


class TensorFormatError(ValueError):
    """Malformed or unsupported tensor container."""


class ManifestError(ValueError):
    """Invalid dataset manifest."""


def write_tensor(path, values, meta=None):
    """Write an n-d array as a float32 tensor container.

    Non-finite values are rejected unless ``meta['allow_nonfinite']`` is
    truthy.
    """
    arr = np.ascontiguousarray(values, dtype=np.float32)
    meta = dict(meta or {})
    if not meta.get("allow_nonfinite") and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values (set meta['allow_nonfinite'] to permit)")
    spacing = meta.pop("spacing", [1.0] * arr.ndim)
    channels = meta.pop("channels", None)
    header = {
        "shape": list(arr.shape),
        "dtype": _MAGIC_DTYPE,
        "order": "C",
        "channels": channels,
        "spacing": list(spacing),
        "meta": meta,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read a tensor container; inverse of :func:`write_tensor`.

    Returns ``(values, meta)`` where meta carries spacing, channels, and
    the free-form map.
    """
    with open(path, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) < 8:
            raise TensorFormatError(f"{path}: missing header length prefix")
        (hlen,) = struct.unpack("<Q", raw_len)
        blob = f.read(hlen)
        if len(blob) < hlen:
            raise TensorFormatError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorFormatError(f"{path}: malformed header JSON: {e}") from e
        if header.get("dtype") != _MAGIC_DTYPE:
            raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        nbytes = 4 * math.prod(shape)
        payload = f.read(nbytes + 1)
        if len(payload) < nbytes:
            raise TensorFormatError(
                f"{path}: payload holds {len(payload)} bytes, shape needs {nbytes}"
            )
        if len(payload) > nbytes:
            raise TensorFormatError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    meta = dict(header.get("meta") or {})
    meta["spacing"] = header.get("spacing")
    if header.get("channels") is not None:
        meta["channels"] = header["channels"]
    return values, meta


@dataclass
class ManifestRecord:
    id: str
    image_path: str
    seg_path: str | None = None
    modality: str = "unknown"
    age: float | None = None
    diagnosis: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: str = "."

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel_path):
        return os.path.join(self.root, rel_path)


def load_manifest(path, check_paths=True):
    """Load and validate a JSON Lines dataset manifest."""
    records = []
    seen = set()
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: bad JSON: {e}") from e
            if "id" not in rec:
                raise ManifestError(f"{path}:{lineno}: record missing id")
            if rec["id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            if not rec.get("image_path"):
                raise ManifestError(f"{path}:{lineno}: missing image_path")
            split = rec.get("split", "train")
            if split not in _VALID_SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: unknown split {split!r} (expected one of {_VALID_SPLITS})"
                )
            record = ManifestRecord(
                id=str(rec["id"]),
                image_path=rec["image_path"],
                seg_path=rec.get("seg_path"),
                modality=rec.get("modality", "unknown"),
                age=rec.get("age"),
                diagnosis=rec.get("diagnosis"),
                split=split,
            )
            if check_paths:
                img = os.path.join(root, record.image_path)
                if not os.path.exists(img):
                    raise ManifestError(f"{path}:{lineno}: image_path not found: {img}")
                if record.seg_path is not None:
                    seg = os.path.join(root, record.seg_path)
                    if not os.path.exists(seg):
                        raise ManifestError(f"{path}:{lineno}: seg_path not found: {seg}")
            records.append(record)
    return DatasetManifest(records=records, root=root)


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in manifest.records:
            row = {
                "id": rec.id,
                "image_path": rec.image_path,
                "modality": rec.modality,
                "split": rec.split,
            }
            if rec.seg_path is not None:
                row["seg_path"] = rec.seg_path
            if rec.age is not None:
                row["age"] = rec.age
            if rec.diagnosis is not None:
                row["diagnosis"] = rec.diagnosis
            f.write(json.dumps(row) + "\n")


def save_checkpoint(ckpt_dir, params, config, iteration, optimizer_state=None):
    """Persist named parameter arrays plus config and iteration counter.

    ``params`` and ``optimizer_state`` map names to arrays; every tensor
    goes in its own container file, the index records name -> (file, shape).
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    index = {}
    for i, (name, arr) in enumerate(params.items()):
        fname = f"param_{i:04d}.bin"
        write_tensor(os.path.join(ckpt_dir, fname), arr, {})
        index[name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    opt_index = {}
    if optimizer_state:
        for i, (name, arr) in enumerate(optimizer_state.items()):
            fname = f"opt_{i:04d}.bin"
            write_tensor(os.path.join(ckpt_dir, fname), arr, {})
            opt_index[name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    with open(os.path.join(ckpt_dir, "index.json"), "w") as f:
        json.dump({"params": index, "optimizer": opt_index, "iteration": iteration}, f, indent=1)
    with open(os.path.join(ckpt_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=1)


def load_checkpoint(ckpt_dir):
    """Load a checkpoint directory; returns (params, config, iteration, optimizer_state)."""
    with open(os.path.join(ckpt_dir, "index.json")) as f:
        index = json.load(f)
    with open(os.path.join(ckpt_dir, "config.json")) as f:
        config = json.load(f)
    params = {}
    for name, entry in index["params"].items():
        values, _ = read_tensor(os.path.join(ckpt_dir, entry["file"]))
        if list(values.shape) != entry["shape"]:
            raise TensorFormatError(
                f"{name}: on-disk shape {list(values.shape)} != index shape {entry['shape']}"
            )
        params[name] = values
    optimizer_state = {}
    for name, entry in index.get("optimizer", {}).items():
        values, _ = read_tensor(os.path.join(ckpt_dir, entry["file"]))
        optimizer_state[name] = values
    return params, config, index["iteration"], optimizer_state
