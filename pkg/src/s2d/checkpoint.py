"""Checkpoint container: one JSON header line, a blank line, raw float64 payloads.

Layout::

    {"format":"s2d-ckpt","tensors":[{"cols":..,"name":..,"offset":..,"rows":..}],"version":1}\\n
    \\n
    <little-endian row-major float64 payloads>

Tensor offsets count bytes from the start of the payload section. Vectors are
stored as ``1 x n`` tensors.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np

from .model import ATTN_PROJ, Attention, Linear, ToyModel

FORMAT = "s2d-ckpt"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed container; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MissingTensorError(KeyError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(missing)
        super().__init__("checkpoint is missing tensors: " + ", ".join(self.missing))

    def __str__(self):
        return self.args[0]


def _as_2d(name: str, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"{name}: tensors must be 1-D or 2-D, got shape {a.shape}")
    return a


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        a = _as_2d(name, value)
        raw = np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "tensors": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return head + b"\n\n" + b"".join(chunks)


def decode(data: bytes) -> dict[str, np.ndarray]:
    end = data.find(b"\n")
    if end < 0:
        raise CheckpointError("header line is not terminated", len(data))
    try:
        header = json.loads(data[:end].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError("header is not valid UTF-8", exc.start) from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"header is not valid JSON: {exc.msg}", exc.pos) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError(f"not an {FORMAT} container", 0)
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported version {header.get('version')!r}", 0)
    if data[end + 1 : end + 2] != b"\n":
        raise CheckpointError("expected a blank line after the header", end + 1)
    start = end + 2
    payload = len(data) - start
    out: dict[str, np.ndarray] = {}
    used = 0
    for entry in header.get("tensors", []):
        try:
            name, rows, cols, offset = entry["name"], entry["rows"], entry["cols"], entry["offset"]
        except (KeyError, TypeError):
            raise CheckpointError(f"bad tensor entry {entry!r}", 0) from None
        if not all(isinstance(v, int) and v >= 0 for v in (rows, cols, offset)):
            raise CheckpointError(f"{name}: rows, cols and offset must be non-negative integers", 0)
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}", 0)
        nbytes = rows * cols * _DTYPE.itemsize
        if offset + nbytes > payload:
            raise CheckpointError(f"{name}: payload truncated", start + min(offset, payload))
        raw = data[start + offset : start + offset + nbytes]
        out[name] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(rows, cols)
        used = max(used, offset + nbytes)
    if used != payload:
        raise CheckpointError("trailing bytes after the last tensor", start + used)
    return out


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def require(tensors: Mapping[str, np.ndarray], names: Iterable[str]) -> None:
    missing = [n for n in names if n not in tensors]
    if missing:
        raise MissingTensorError(missing)


def model_tensors(model: ToyModel) -> dict[str, np.ndarray]:
    return {name: p for name, p in model.params().items()}


def model_from_tensors(tensors: Mapping[str, np.ndarray]) -> ToyModel:
    """Rebuild a ``ToyModel`` from ``fc1.weight, fc1.bias, ...`` (plus optional ``attn.*``).

    Hidden layers use GELU and the last layer is linear, matching ``init_model``.
    """
    count = 0
    while f"fc{count + 1}.weight" in tensors:
        count += 1
    if count == 0:
        raise MissingTensorError(["fc1.weight"])
    names = [f"fc{i}.{kind}" for i in range(1, count + 1) for kind in ("weight", "bias")]
    attn = None
    if any(n.startswith("attn.") for n in tensors):
        names += [f"attn.{p}.weight" for p in ATTN_PROJ]
    require(tensors, names)
    if any(n.startswith("attn.") for n in tensors):
        weights = {p: np.array(tensors[f"attn.{p}.weight"]) for p in ATTN_PROJ}
        d = weights["q"].shape[0]
        attn = Attention(tensors["fc1.weight"].shape[1] // d, weights)
    layers = [
        Linear(
            f"fc{i}",
            np.array(tensors[f"fc{i}.weight"]),
            np.array(tensors[f"fc{i}.bias"]).reshape(-1),
            "gelu" if i < count else "none",
        )
        for i in range(1, count + 1)
    ]
    return ToyModel(layers, attn)
