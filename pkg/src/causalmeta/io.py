"""Checkpoints, metrics files, JSON reports and run manifests.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes  b"CMETACKP"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    payload      float64 values of every entry, in header order

The header records the mode tag, grouping normaliser, layer specs, the
config digest and, for every parameter, its name, shape and byte count.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ParamSet, Tensor
from .config import ExperimentConfig, parse_config
from .meta import METRIC_COLUMNS, MetricsRow
from .models import MLPSpec, ModelBundle

MAGIC = b"CMETACKP"
VERSION = 1
_PREFIX = struct.Struct("<II")


class CheckpointError(ValueError):
    pass


class ConfigHashWarning(UserWarning):
    pass


def _spec_from(d: dict | None) -> MLPSpec | None:
    if d is None:
        return None
    return MLPSpec(tuple(d["widths"]), d["hidden_act"], d["out_act"])


def checkpoint_bytes(bundle: ModelBundle, config_hash: str = "") -> bytes:
    params = bundle.named_params()
    entries, chunks = [], []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
    header = {"config_hash": config_hash, "entries": entries, "specs": bundle.specs()}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _PREFIX.pack(VERSION, len(text)) + text + b"".join(chunks)


def save_checkpoint(bundle: ModelBundle, path: str | os.PathLike, config_hash: str = "") -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(bundle, config_hash))
    return path


def _parse(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + _PREFIX.size or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, header_len = _PREFIX.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version mismatch: expected {VERSION}, got {version}")
    start = len(MAGIC) + _PREFIX.size
    if start + header_len > len(blob):
        raise CheckpointError("corrupt checkpoint: header length exceeds file size")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        entries = header["entries"]
        specs = header["specs"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(blob)[start + header_len:]
    expected = 0
    for e in entries:
        if e["nbytes"] != 8 * math.prod(e["shape"]):
            raise CheckpointError(f"corrupt checkpoint: entry {e['name']!r} has inconsistent length")
        expected += e["nbytes"]
    if expected != len(payload):
        raise CheckpointError(f"corrupt checkpoint: payload holds {len(payload)} bytes, header "
                              f"declares {expected}")
    arrays, offset = {}, 0
    for e in entries:
        arr = np.frombuffer(payload[offset:offset + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64)
        offset += e["nbytes"]
    return header, arrays


def load_checkpoint(path: str | os.PathLike, config_hash: str | None = None) -> ModelBundle:
    """Rebuild a bundle; warn (and proceed) when ``config_hash`` differs from the stored one."""
    header, arrays = _parse(Path(path).read_bytes())
    if config_hash is not None and header.get("config_hash") != config_hash:
        warnings.warn(f"checkpoint was written under config {header.get('config_hash')!r}, "
                      f"loading under {config_hash!r}", ConfigHashWarning, stacklevel=2)
    specs = header["specs"]

    def group(prefix: str) -> ParamSet:
        return ParamSet((k[len(prefix):], Tensor(v, requires_grad=True))
                        for k, v in arrays.items() if k.startswith(prefix))

    xi = Tensor(arrays["xi"], requires_grad=True) if "xi" in arrays else None
    grouping = group("gr.") if specs["mode"] == "causal" else None
    try:
        return ModelBundle(group("g."), group("h."), grouping, xi, specs["mode"],
                           _spec_from(specs["encoder"]), _spec_from(specs["head"]),
                           _spec_from(specs["grouping"]), specs["norm"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"checkpoint does not describe a valid model: {exc}") from None


def checkpoint_hash(path: str | os.PathLike) -> str:
    return _parse(Path(path).read_bytes())[0].get("config_hash", "")


# ------------------------------------------------------------------ metrics

def emit_metrics(rows: Iterable[MetricsRow], path: str | os.PathLike, timing: bool = True) -> Path:
    """CSV with a fixed header; ``timing=False`` writes 0 in the seconds column."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.iteration, r.split, repr(r.pred_loss), repr(r.score), repr(r.l_dm_xi),
                        repr(r.l_dm_fgr), repr(r.seconds if timing else 0.0)])
    return path


def read_metrics(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow(int(it), split, *map(float, rest)) for it, split, *rest in reader]


def emit_timing(rows: Sequence[MetricsRow], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "seconds"))
        for r in rows:
            w.writerow([r.iteration, repr(r.seconds)])
    return path


# ------------------------------------------------------------------ reports

def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def write_json(obj, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_matrix(matrix: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.17g")
    return path


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


# ----------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def config_object(self) -> ExperimentConfig:
        return parse_config(self.config)

    def write(self, out_dir: str | os.PathLike) -> Path:
        out_dir = Path(out_dir)
        missing = [p for p in self.outputs if not (out_dir / p).exists()]
        if missing:
            raise FileNotFoundError(f"manifest lists missing outputs: {missing}")
        return write_json(dataclasses.asdict(self), out_dir / "manifest.json")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)
