"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FLPCKPT\\0"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header (sorted keys, compact separators)
    offset 16+H          payload: float64 little-endian arrays, back to back

The header holds ``format_version``, ``step``, ``config``, ``config_hash``,
``rng_state``, ``architecture``, ``learner``, ``frozen_groups``, per-group
Adam hyperparameters and step counts under ``adam``, ``payload_bytes``, and
an ``arrays`` list of ``{name, shape, offset, count}`` entries where offset
and count are in elements. Array names are ``meta/<param>``,
``adam/<group>/m/<param>`` and ``adam/<group>/v/<param>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adam import AdamState
from .network import Architecture
from .params import LearnerConfig, MetaParams

MAGIC = b"FLPCKPT\0"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: MetaParams
    adam: dict[str, AdamState]
    step: int = 0
    config: dict | None = None
    config_hash: str = ""
    rng_state: dict | None = None
    format_version: int = FORMAT_VERSION


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [(f"meta/{k}", v) for k, v in ckpt.meta.values.items()]
    adam_header = {}
    for group in sorted(ckpt.adam):
        st = ckpt.adam[group]
        adam_header[group] = {
            "lr": st.lr,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "epsilon": st.epsilon,
            "step_count": st.step_count,
        }
        arrays += [(f"adam/{group}/m/{k}", v) for k, v in st.first_moment.items()]
        arrays += [(f"adam/{group}/v/{k}", v) for k, v in st.second_moment.items()]

    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=_F64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": ckpt.format_version,
        "step": ckpt.step,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "architecture": {"layer_widths": list(ckpt.meta.arch.layer_widths), "n_plastic": ckpt.meta.arch.n_plastic},
        "learner": asdict(ckpt.meta.learner),
        "frozen_groups": sorted(ckpt.meta.frozen_groups),
        "adam": adam_header,
        "arrays": entries,
        "payload_bytes": offset * 8,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def from_bytes(data: bytes, expected_hash: str | None = None) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    payload = data[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    flat = np.frombuffer(payload, dtype=_F64)
    arrays = {}
    for e in header["arrays"]:
        if e["offset"] + e["count"] > flat.size or int(np.prod(e["shape"], dtype=np.int64)) != e["count"]:
            raise CheckpointError(f"array {e['name']} does not fit the payload")
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)

    arch = Architecture(tuple(header["architecture"]["layer_widths"]), header["architecture"]["n_plastic"])
    meta = MetaParams(
        arch,
        LearnerConfig(**header["learner"]),
        {k[5:]: v for k, v in arrays.items() if k.startswith("meta/")},
        frozenset(header["frozen_groups"]),
    )
    adam = {}
    for group, hp in header["adam"].items():
        m = {k.split("/", 3)[3]: v for k, v in arrays.items() if k.startswith(f"adam/{group}/m/")}
        v = {k.split("/", 3)[3]: v for k, v in arrays.items() if k.startswith(f"adam/{group}/v/")}
        adam[group] = AdamState(hp["lr"], hp["beta1"], hp["beta2"], hp["epsilon"], hp["step_count"], m, v)
    if header["config"] is not None and config_hash(header["config"]) != header["config_hash"]:
        warnings.warn("checkpoint config does not match its recorded hash", stacklevel=2)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        warnings.warn("checkpoint config hash differs from the current config", stacklevel=2)
    return Checkpoint(
        meta, adam, header["step"], header["config"], header["config_hash"], header["rng_state"],
        header["format_version"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.flp"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes(), expected_hash)
