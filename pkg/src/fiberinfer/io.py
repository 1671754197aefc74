"""Binary tensor container, manifests and JSON-lines helpers.

Container layout: 8 magic bytes ``FIBINF01``, a little-endian uint64 header
length, a UTF-8 JSON header, then the arrays as little-endian float32 in
header order. The header lists each field's name, shape and byte offset and
carries free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FIBINF01"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def write_container(path, arrays: dict, meta: dict | None = None) -> str:
    """Write arrays (cast to float32) plus metadata; returns the file's sha256."""
    fields, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would turn 0-d into 1-d
        fields.append({"name": name, "shape": list(a.shape), "dtype": "<f4", "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dumps({"fields": fields, "meta": meta or {}}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return file_sha256(path)


def read_container(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; arrays come back as float32."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a fiberinfer container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data = fh.read()
    arrays = {}
    for f in header["fields"]:
        n = int(np.prod(f["shape"])) if f["shape"] else 1
        arrays[f["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=f["offset"]).reshape(f["shape"]).copy()
    return arrays, header["meta"]


def read_meta(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a fiberinfer container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode())["meta"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def chain_hash(*parts: str) -> str:
    """Hash of a manifest chain link: parent hashes plus this artifact's content hash."""
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(obj), sort_keys=True, indent=2))
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def scheme_to_dict(scheme) -> dict:
    """Exact JSON form of an acquisition scheme (float64 round-trips through repr)."""
    return {"bvals": scheme.bvals.tolist(), "directions": [d.tolist() for d in scheme.directions]}


def scheme_from_dict(d):
    from .forward import AcquisitionScheme

    return AcquisitionScheme(d["bvals"], [np.asarray(x) for x in d["directions"]])


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def save_dataset(path, ds) -> dict:
    """Write a :class:`~fiberinfer.forward.Dataset` and its JSON manifest next to it."""
    scheme = ds.scheme
    arrays = {
        "signals": ds.signals,
        "n": ds.n,
        "orientations": ds.orientations,
        "kernels": ds.kernels,
        "kappa": ds.kappa,
    }
    meta = dict(ds.meta)
    meta["scheme"] = scheme_to_dict(scheme)
    meta["scheme_hash"] = scheme.digest()
    meta["field_names"] = list(arrays)
    digest = write_container(path, arrays, meta)
    manifest = {k: v for k, v in meta.items() if k != "scheme"}
    manifest["file"] = Path(path).name
    manifest["sha256"] = digest
    manifest["chain"] = chain_hash(scheme.digest(), digest)
    write_json(str(path) + ".manifest.json", manifest)
    return manifest


def load_dataset(path):
    from .forward import Dataset

    arr, meta = read_container(path)
    scheme = scheme_from_dict(meta["scheme"])
    return Dataset(
        arr["signals"].astype(float),
        arr["n"].astype(int),
        arr["orientations"].astype(float),
        arr["kernels"].astype(float),
        arr["kappa"].astype(float),
        scheme,
        meta,
    )
