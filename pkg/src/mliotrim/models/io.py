"""Self-describing model files.

Layout::

    b"MLIOTRIM" | u32 header length | JSON header | raw little-endian arrays

The header records the format version, model kind, feature layout hash,
array table (name, dtype, shape) and a SHA-256 of the payload.  Nothing
time- or host-dependent is written, so identical models give identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Union

import numpy as np

from ..features import N_FEATURES, NormalizationProfile
from .forest import ForestModel, Tree
from .mlp import MlpModel

MAGIC = b"MLIOTRIM"
FORMAT_VERSION = 1

Model = Union[ForestModel, MlpModel]


class ModelFileError(Exception):
    pass


def _profiles_arrays(profiles: dict) -> tuple[list[str], dict[str, np.ndarray]]:
    names = sorted(profiles)
    if not names:
        return [], {}
    return names, {
        "profile_min": np.vstack([profiles[d].minimum for d in names]),
        "profile_max": np.vstack([profiles[d].maximum for d in names]),
    }


def _model_arrays(model: Model) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(model, ForestModel):
        sizes = [t.n_nodes for t in model.trees]
        arrays = {
            "node_offsets": np.concatenate([[0], np.cumsum(sizes)]).astype("<i8"),
            "feature": np.concatenate([t.feature for t in model.trees]).astype("<i4"),
            "threshold": np.concatenate([t.threshold for t in model.trees]).astype("<f8"),
            "left": np.concatenate([t.left for t in model.trees]).astype("<i4"),
            "right": np.concatenate([t.right for t in model.trees]).astype("<i4"),
            "value": np.concatenate([t.value for t in model.trees]).astype("<f8"),
        }
        meta = {
            "n_trees": model.n_trees,
            "rng_seed": model.rng_seed,
            "feature_subsample": model.feature_subsample,
            "max_depth": model.max_depth,
        }
        return meta, arrays
    if isinstance(model, MlpModel):
        arrays = {}
        for i, (W, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"W{i}"] = W.astype("<f8")
            arrays[f"b{i}"] = b.astype("<f8")
        return {"widths": list(model.widths)}, arrays
    raise TypeError(f"cannot serialize {type(model).__name__}")


def dumps_model(model: Model) -> bytes:
    meta, arrays = _model_arrays(model)
    devices, parrays = _profiles_arrays(model.profiles)
    arrays.update(parrays)
    table, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "layout_hash": model.layout_hash,
        "n_features": N_FEATURES,
        "meta": meta,
        "profile_devices": devices,
        "arrays": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def save_model(model: Model, path: str | os.PathLike) -> None:
    data = dumps_model(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fp:
        fp.write(data)
    os.replace(tmp, path)


def loads_model(data: bytes) -> Model:
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise ModelFileError("truncated model file")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen])
    except ValueError as exc:
        raise ModelFileError(f"corrupt model header: {exc}") from exc
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(
            f"model format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    payload = data[off:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ModelFileError("model payload truncated or corrupt (checksum mismatch)")
    arrays = {}
    pos = 0
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(payload, dt, count, pos).reshape(spec["shape"]).copy()
        pos += nbytes

    profiles = {}
    for i, dev in enumerate(header.get("profile_devices", [])):
        profiles[dev] = NormalizationProfile(dev, arrays["profile_min"][i], arrays["profile_max"][i])

    meta = header["meta"]
    if header["kind"] == "forest":
        off_ = arrays["node_offsets"]
        trees = []
        for a, b in zip(off_[:-1], off_[1:]):
            trees.append(
                Tree(
                    arrays["feature"][a:b].astype(np.int32),
                    arrays["threshold"][a:b].astype(float),
                    arrays["left"][a:b].astype(np.int32),
                    arrays["right"][a:b].astype(np.int32),
                    arrays["value"][a:b].astype(float),
                )
            )
        return ForestModel(
            trees,
            meta["rng_seed"],
            meta["feature_subsample"],
            meta["max_depth"],
            header["layout_hash"],
            profiles,
        )
    if header["kind"] == "mlp":
        n = len(meta["widths"]) - 1
        return MlpModel(
            [arrays[f"W{i}"].astype(float) for i in range(n)],
            [arrays[f"b{i}"].astype(float) for i in range(n)],
            tuple(meta["widths"]),
            header["layout_hash"],
            profiles,
        )
    raise ModelFileError(f"unknown model kind {header['kind']!r}")


def load_model(path: str | os.PathLike) -> Model:
    try:
        with open(path, "rb") as fp:
            data = fp.read()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    return loads_model(data)
