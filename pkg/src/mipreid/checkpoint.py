"""Flat binary array container with a key-value text manifest.

``<base>.manifest`` holds ``key=value`` lines: free-form metadata followed by one
``array.<name>=<kind>;<dtype>;<shape>;<offset>`` line per array, where offset
counts float32 elements into ``<base>.bin`` (little-endian float32 throughout).
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from mipreid.config import ModelConfig, config_hash
from mipreid.errors import CheckpointMismatchError

FORMAT_VERSION = "1"
_LE_F32 = np.dtype("<f4")


def _paths(base: str | Path) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".manifest", ".bin"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".manifest"), base.with_name(base.name + ".bin")


def write_container(base, arrays: dict[str, np.ndarray], meta: dict[str, str], kinds: dict[str, str] | None = None) -> Path:
    manifest_path, bin_path = _paths(base)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format_version={FORMAT_VERSION}"]
    lines += [f"{k}={v}" for k, v in meta.items()]
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            kind = (kinds or {}).get(name, "array")
            lines.append(f"array.{name}={kind};{arr.dtype.name};{shape};{offset}")
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
            offset += arr.size
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def read_manifest(base) -> tuple[dict[str, str], dict[str, tuple[str, str, tuple[int, ...], int]]]:
    manifest_path, _ = _paths(base)
    meta, entries = {}, {}
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("array."):
            kind, dtype, shape, offset = value.split(";")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            entries[key[len("array."):]] = (kind, dtype, dims, int(offset))
        else:
            meta[key] = value
    return meta, entries


def read_container(base) -> tuple[dict[str, str], dict[str, np.ndarray], dict[str, str]]:
    meta, entries = read_manifest(base)
    _, bin_path = _paths(base)
    blob = np.fromfile(bin_path, dtype=_LE_F32)
    arrays, kinds = {}, {}
    for name, (kind, dtype, shape, offset) in entries.items():
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = blob[offset : offset + size].reshape(shape).astype(dtype)
        kinds[name] = kind
    return meta, arrays, kinds


def save_checkpoint(model, base, extra_meta: dict[str, str] | None = None) -> Path:
    param_names = {name for name, _ in model.named_parameters()}
    arrays, kinds = {}, {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().numpy()
        kinds[name] = "param" if name in param_names else "buffer"
    meta = {
        "config_hash": model.config_hash,
        "model_config": json.dumps(dataclasses.asdict(model.cfg), sort_keys=True),
        "arch": json.dumps(model.arch, sort_keys=True),
    }
    meta.update(extra_meta or {})
    return write_container(base, arrays, meta, kinds)


def checkpoint_configs(base) -> tuple[ModelConfig, dict]:
    meta, _ = read_manifest(base)
    return ModelConfig(**json.loads(meta["model_config"])), json.loads(meta["arch"])


def load_checkpoint(base, model=None, force: bool = False):
    """Restore parameters into ``model`` (built from the manifest when None).

    Raises :class:`CheckpointMismatchError` when the stored config hash differs
    from ``model``'s unless ``force``.
    """
    from mipreid.model import MIPNet

    meta, arrays, _ = read_container(base)
    cfg = ModelConfig(**json.loads(meta["model_config"]))
    arch = json.loads(meta["arch"])
    stored_hash = meta.get("config_hash")
    if stored_hash != config_hash(cfg, arch):
        raise CheckpointMismatchError("manifest config does not match its recorded hash")
    if model is None:
        model = MIPNet(cfg, **arch)
    elif model.config_hash != stored_hash and not force:
        raise CheckpointMismatchError(
            f"checkpoint config hash {stored_hash} != model config hash {model.config_hash}; use force to override"
        )
    state = {name: torch.from_numpy(np.array(arr)) for name, arr in arrays.items()}
    if force:
        # forced loads keep only the arrays whose name and shape still fit
        own = model.state_dict()
        state = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(state, strict=not force)
    return model
