"""Binary array bundles and CSV tables.

Bundle layout (all integers little-endian)::

    magic     8 bytes  b"PCBUNDLE"
    version   uint32
    meta_len  uint32, followed by that many bytes of UTF-8 JSON
    count     uint32
    per array:
        name_len uint32, name (UTF-8)
        ndim     uint32, dims uint64[ndim]
        payload  prod(dims) float64 values, little-endian, C order
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError, IOFailure

MAGIC = b"PCBUNDLE"
VERSION = 1
_F8 = np.dtype("<f8")


def write_bundle(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """Write named float arrays and JSON metadata to ``path``."""
    path = Path(path)
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True, default=_json_default).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        data = np.asarray(arr, dtype=_F8, order="C")
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack(f"<I{data.ndim}Q", data.ndim, *data.shape))
        parts.append(data.tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`write_bundle`; returns ``(arrays, meta)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"{path}: truncated file")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError(f"{path}: not a bundle file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype=_F8).astype(float).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{path}: trailing bytes")
    return arrays, meta


def write_field(path, data: np.ndarray, meta: Mapping | None = None) -> Path:
    """Single-array bundle under the name ``field``."""
    return write_bundle(path, {"field": data}, meta)


def read_field(path) -> tuple[np.ndarray, dict]:
    arrays, meta = read_bundle(path)
    if "field" not in arrays:
        raise FormatError(f"{path}: no field entry")
    return arrays["field"], meta


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path, rows: Iterable[Mapping], columns: list[str] | None = None) -> Path:
    """RFC-4180 style CSV; floats are written with full round-trip precision."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row.get(c)) for c in columns])
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def _parse(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, with numbers and booleans parsed."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            return [{k: _parse(v) for k, v in row.items()} for row in reader]
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def save_trajectory(path, traj) -> Path:
    """Velocity snapshots and times of a solver trajectory."""
    arrays = {"times": np.asarray(traj.times), "velocity": np.stack(traj.velocity)}
    if traj.pressure:
        arrays["pressure"] = np.stack(traj.pressure)
    meta = {k: v for k, v in traj.meta.items() if isinstance(v, (int, float, str, bool))}
    if traj.frame is not None:
        meta["frame"] = asdict(traj.frame)
    return write_bundle(path, arrays, meta)


def load_trajectory(path):
    from .ns_solver import FrameSpec, Trajectory

    arrays, meta = read_bundle(path)
    frame = meta.pop("frame", None)
    return Trajectory(
        arrays["times"],
        list(arrays["velocity"]),
        list(arrays["pressure"]) if "pressure" in arrays else None,
        None,
        FrameSpec(**frame) if frame else None,
        meta,
    )


def save_corrector(path, corr) -> Path:
    """Reference annulus solutions and cell parameters of a corrector."""
    spec = corr.domain.spec
    arrays = {
        "inner": corr.inner_coefficients,
        "annulus": corr.annulus_coefficients,
        "reference": np.stack(
            [corr.annulus.unit_inner_f, corr.annulus.unit_inner_g, corr.annulus.identity]
        ),
    }
    meta = {
        "kind": "corrector",
        "eta": corr.eta,
        "particle_radius": corr.particle_radius,
        "mode": spec.mode,
        "N": spec.N,
        "alpha": spec.alpha,
        "L": spec.L,
        "K_origin": list(spec.K_origin),
    }
    return write_bundle(path, arrays, meta)


def load_corrector(path):
    from .geometry import DomainSpec, ParticleShape, build_perforated_domain
    from .homogenization import CorrectorField, ReferenceAnnulus

    arrays, meta = read_bundle(path)
    if meta.get("kind") != "corrector":
        raise FormatError(f"{path}: not a corrector bundle")
    spec = DomainSpec(
        meta["mode"],
        meta["N"],
        meta["alpha"],
        L=meta["L"],
        shape=ParticleShape.ball(meta["particle_radius"]),
        K_origin=tuple(meta["K_origin"]),
    )
    ref = ReferenceAnnulus(*[row.copy() for row in arrays["reference"]])
    return CorrectorField(
        build_perforated_domain(spec),
        meta["eta"],
        meta["particle_radius"],
        arrays["inner"],
        ref,
        arrays["annulus"],
    )


def finite_or_none(x):
    """JSON-friendly float: non-finite values become ``None``."""
    return float(x) if x is not None and math.isfinite(x) else None
