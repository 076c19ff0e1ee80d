"""Versioned checkpoint container with integrity checking.

Layout: magic, format version, a sorted-key JSON header describing config
and array metadata, then raw little-endian array bytes. Serialization is
fully deterministic, so save -> load -> save round-trips byte-identically.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointError

MAGIC = b"GCGN"
FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    """Everything needed to resume or serve a model at a given step."""

    config: ModelConfig
    stage: str
    step: int
    generator_state: dict[str, torch.Tensor]
    discriminator_state: Optional[dict[str, torch.Tensor]] = None
    opt_g_state: Optional[dict[str, Any]] = None
    opt_d_state: Optional[dict[str, Any]] = None
    freeze_manifest: tuple[str, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def build_generator(self) -> "torch.nn.Module":
        from .generator import CompositionalGenerator

        gen = CompositionalGenerator(self.config)
        gen.load_state_dict(self.generator_state)
        gen.eval()
        return gen

    def build_discriminator(self) -> Optional["torch.nn.Module"]:
        if self.discriminator_state is None:
            return None
        from .discriminator import GazeDiscriminator

        disc = GazeDiscriminator(self.config, conditioned=self.stage == "stage1")
        disc.load_state_dict(self.discriminator_state)
        disc.eval()
        return disc

    def gaze_stats(self) -> np.ndarray:
        """Labeled-domain gaze samples captured at stage-1 training time."""
        if "gaze_stats" not in self.extra_arrays:
            raise CheckpointError("bundle carries no labeled gaze statistics")
        return self.extra_arrays["gaze_stats"]


_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64, "|u1": np.uint8}


def _to_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype not in (np.float32, np.float64, np.int64, np.uint8):
        arr = arr.astype(np.float32)
    # ascontiguousarray would promote 0-d scalars (e.g. ADAM step) to 1-d.
    return np.ascontiguousarray(arr) if arr.ndim else arr.copy()


def _flatten_optimizer(prefix: str, state: dict[str, Any], arrays: dict[str, np.ndarray]) -> dict:
    """Split optimizer tensors into the array payload; scalars stay in JSON."""
    meta: dict[str, Any] = {"param_groups": state["param_groups"], "state_keys": {}}
    for pid, entry in state["state"].items():
        keys = {}
        for key, val in entry.items():
            name = f"{prefix}.{pid}.{key}"
            if isinstance(val, torch.Tensor):
                arrays[name] = _to_array(val)
                keys[key] = "array"
            else:
                keys[key] = val
        meta["state_keys"][str(pid)] = keys
    return meta


def _restore_optimizer(prefix: str, meta: dict, arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    state: dict[int, dict[str, Any]] = {}
    for pid_str, keys in meta["state_keys"].items():
        entry: dict[str, Any] = {}
        for key, val in keys.items():
            if val == "array":
                entry[key] = torch.from_numpy(arrays[f"{prefix}.{pid_str}.{key}"].copy())
            else:
                entry[key] = val
        state[int(pid_str)] = entry
    return {"state": state, "param_groups": meta["param_groups"]}


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    for name, t in bundle.generator_state.items():
        arrays[f"generator.{name}"] = _to_array(t)
    if bundle.discriminator_state is not None:
        for name, t in bundle.discriminator_state.items():
            arrays[f"discriminator.{name}"] = _to_array(t)
    for name, arr in bundle.extra_arrays.items():
        arrays[f"extra.{name}"] = np.ascontiguousarray(arr)

    header: dict[str, Any] = {
        "model_config": bundle.config.to_dict(),
        "stage": bundle.stage,
        "step": bundle.step,
        "freeze_manifest": list(bundle.freeze_manifest),
        "extra": bundle.extra,
        "has_discriminator": bundle.discriminator_state is not None,
    }
    if bundle.opt_g_state is not None:
        header["opt_g"] = _flatten_optimizer("opt_g", bundle.opt_g_state, arrays)
    if bundle.opt_d_state is not None:
        header["opt_d"] = _flatten_optimizer("opt_d", bundle.opt_d_state, arrays)

    names = sorted(arrays)
    offset = 0
    array_meta = {}
    chunks = []
    for name in names:
        arr = arrays[name]
        buf = arr.tobytes()
        array_meta[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header["arrays"] = array_meta
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def load_bundle(path: str | Path) -> ModelBundle:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload integrity check failed")

    arrays: dict[str, np.ndarray] = {}
    for name, meta in header["arrays"].items():
        dtype = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[name] = arr

    gen_state = {
        name[len("generator.") :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("generator.")
    }
    disc_state = None
    if header.get("has_discriminator"):
        disc_state = {
            name[len("discriminator.") :]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith("discriminator.")
        }
    extra_arrays = {
        name[len("extra.") :]: arr.copy() for name, arr in arrays.items() if name.startswith("extra.")
    }

    return ModelBundle(
        config=ModelConfig.from_dict(header["model_config"]),
        stage=header["stage"],
        step=header["step"],
        generator_state=gen_state,
        discriminator_state=disc_state,
        opt_g_state=_restore_optimizer("opt_g", header["opt_g"], arrays) if "opt_g" in header else None,
        opt_d_state=_restore_optimizer("opt_d", header["opt_d"], arrays) if "opt_d" in header else None,
        freeze_manifest=tuple(header.get("freeze_manifest", ())),
        extra=header.get("extra", {}),
        extra_arrays=extra_arrays,
    )
