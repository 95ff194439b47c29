"""Model bundles: ``manifest.json`` plus raw little-endian float64 ``params.bin``."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .data import atomic_write
from .model import MixedModel

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


class PersistenceError(ValueError):
    pass


def _constants(model: MixedModel) -> dict[str, np.ndarray]:
    """Array-valued covariance parameters stored next to the weights."""
    out = {}
    for group, spec in model.covariance.items():
        for key, val in spec.params.items():
            if isinstance(val, np.ndarray) or (isinstance(val, list) and val and isinstance(val[0], list)):
                out[f"const.cov.{group}.{key}"] = np.asarray(val, dtype=np.float64)
    return out


def save_model(model: MixedModel, path, train_config: dict | None = None, fit_meta: dict | None = None) -> None:
    if not model.is_setup:
        raise PersistenceError("model has no parameters; fit it before saving")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    consts = _constants(model)
    cfg = model.config_dict()
    for name in consts:
        _, _, group, key = name.split(".", 3)
        cfg["covariance"][group][key] = {"$tensor": name}
    tensors = []
    blobs = []
    offset = 0
    for name, arr in list(model.params.items()) + list(consts.items()):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data),
                        "crc32": zlib.crc32(data) & 0xFFFFFFFF})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "formula": model.formula,
        "model": cfg,
        "design": model.design_meta(),
        "train_config": train_config or {},
        "fit": fit_meta or {},
        "seed": model.seed,
        "tensors": tensors,
    }
    atomic_write(path / PARAMS, b"".join(blobs))
    atomic_write(path / MANIFEST, json.dumps(manifest, indent=2))


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path / MANIFEST) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise PersistenceError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise PersistenceError(f"{path}: unreadable manifest: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise PersistenceError(f"{path}: format version {manifest.get('format_version')} "
                               f"is not supported (expected {FORMAT_VERSION})")
    return manifest


def load_model(path) -> MixedModel:
    path = Path(path)
    manifest = load_manifest(path)
    try:
        raw = (path / PARAMS).read_bytes()
    except FileNotFoundError:
        raise PersistenceError(f"{path}: no {PARAMS}") from None
    arrays = {}
    for t in manifest["tensors"]:
        chunk = raw[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise PersistenceError(f"{path}: {PARAMS} is truncated at tensor {t['name']!r}")
        if zlib.crc32(chunk) & 0xFFFFFFFF != t["crc32"]:
            raise PersistenceError(f"{path}: checksum mismatch for tensor {t['name']!r}")
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(t["shape"])
    cfg = manifest["model"]
    for group, spec in cfg.get("covariance", {}).items():
        for key, val in list(spec.items()):
            if isinstance(val, dict) and "$tensor" in val:
                name = val["$tensor"]
                if name not in arrays:
                    raise PersistenceError(f"{path}: manifest is missing tensor {name!r}")
                spec[key] = arrays.pop(name)
    model = MixedModel.from_config(cfg, manifest["design"])
    expected = model._init_params(np.random.default_rng(0), {})
    for name, arr in expected.items():
        if name not in arrays:
            raise PersistenceError(f"{path}: manifest is missing tensor {name!r}")
        if arrays[name].shape != arr.shape and not name.endswith((".mu", ".log_var")):
            raise PersistenceError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {arr.shape}")
    model.params = arrays
    model.fitted = True
    return model
