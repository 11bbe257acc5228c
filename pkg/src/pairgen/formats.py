"""On-disk formats: 16-bit PGM depth, XYZ clouds, intrinsics, poses, models, manifests.

All text formats write floats with ``repr`` so values round-trip bit-exactly.
Writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DataError, DimensionOverflowError, FormatError, MalformedHeaderError, TruncatedPayloadError
from .geometry import DepthMap, Intrinsics, PointCloud, Pose

MAX_DIM = 1 << 15
MODEL_MAGIC = "pairgen-model"
MODEL_VERSION = 1
MANIFEST_HEADER = "# pairgen-manifest 1"


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    return repr(float(x))


# --- PGM -------------------------------------------------------------------------

_HEADER = re.compile(rb"\AP5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def quantize_mm(values: np.ndarray) -> np.ndarray:
    """Metres to integer millimetres, rounding halves up.

    Rounding to 1e-6 mm first absorbs binary representation error, so 1.2345 m
    becomes 1235 mm rather than 1234.
    """
    mm = np.floor(np.round(np.asarray(values, dtype=np.float64) * 1000.0, 6) + 0.5)
    if np.any(mm > 65535):
        raise DimensionOverflowError("depth exceeds the 65.535 m range of 16-bit millimetres")
    return mm.astype(np.uint16)


def encode_pgm(samples: np.ndarray, maxval: int) -> bytes:
    h, w = samples.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(samples, dtype=dtype).tobytes()


def decode_pgm(buffer: bytes, expect_maxval: Optional[int] = None) -> np.ndarray:
    m = _HEADER.match(buffer)
    if m is None:
        raise MalformedHeaderError("not a binary P5 PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if w < 1 or h < 1 or w > MAX_DIM or h > MAX_DIM:
        raise DimensionOverflowError(f"PGM dimensions {w}x{h} outside 1..{MAX_DIM}")
    if not 0 < maxval <= 65535:
        raise MalformedHeaderError(f"PGM maxval {maxval} outside 1..65535")
    if expect_maxval is not None and maxval != expect_maxval:
        raise FormatError(f"expected PGM maxval {expect_maxval}, got {maxval}")
    width = 2 if maxval > 255 else 1
    need = w * h * width
    payload = buffer[m.end():]
    if len(payload) < need:
        raise TruncatedPayloadError(f"PGM payload has {len(payload)} bytes, expected {need}")
    dtype = ">u2" if width == 2 else "u1"
    return np.frombuffer(payload, dtype=dtype, count=w * h).reshape(h, w)


def write_depth(path, depth: DepthMap):
    atomic_write(path, encode_pgm(quantize_mm(depth.values), 65535))


def read_depth(path, intrinsics: Intrinsics) -> DepthMap:
    raw = decode_pgm(Path(path).read_bytes(), expect_maxval=65535)
    if raw.shape != intrinsics.shape:
        raise DataError(f"{path}: image {raw.shape[1]}x{raw.shape[0]} does not match intrinsics "
                        f"{intrinsics.width}x{intrinsics.height}")
    return DepthMap(raw.astype(np.float64) / 1000.0, intrinsics)


def write_mask(path, mask: np.ndarray):
    atomic_write(path, encode_pgm(np.where(mask, 255, 0).astype(np.uint8), 255))


def read_mask(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes(), expect_maxval=255) > 0


def write_preview(path, values: np.ndarray):
    """8-bit min-max stretched image of the positive entries; zeros stay black."""
    v = np.asarray(values, dtype=np.float64)
    pos = v > 0
    out = np.zeros(v.shape, dtype=np.uint8)
    if pos.any():
        lo, hi = v[pos].min(), v[pos].max()
        span = hi - lo if hi > lo else 1.0
        out[pos] = np.round(55 + 200 * (v[pos] - lo) / span).astype(np.uint8)
    atomic_write(path, encode_pgm(out, 255))


# --- text formats -----------------------------------------------------------------


def _data_lines(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def write_cloud(path, cloud: PointCloud):
    atomic_write(path, "".join(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n" for x, y, z in cloud.points))


def read_cloud(path) -> PointCloud:
    rows = []
    for lineno, line in _data_lines(Path(path).read_text()):
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return PointCloud(np.array(rows).reshape(-1, 3))


def format_intrinsics(K: Intrinsics) -> str:
    return f"# fx fy cx cy width height\n{_fmt(K.fx)} {_fmt(K.fy)} {_fmt(K.cx)} {_fmt(K.cy)} {K.width} {K.height}\n"


def write_intrinsics(path, K: Intrinsics):
    atomic_write(path, format_intrinsics(K))


def read_intrinsics(path) -> Intrinsics:
    lines = list(_data_lines(Path(path).read_text()))
    if len(lines) != 1:
        raise FormatError(f"{path}: expected one line 'fx fy cx cy width height'")
    parts = lines[0][1].split()
    if len(parts) != 6:
        raise FormatError(f"{path}: expected 6 values, got {len(parts)}")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
        return Intrinsics(fx, fy, cx, cy, w, h)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def format_pose(pose: Pose) -> str:
    return " ".join(_fmt(v) for v in pose.flat())


def parse_pose(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    try:
        return Pose.from_flat(vals)
    except ValueError as exc:
        raise FormatError(f"invalid pose: {exc}") from exc


def write_trajectory(path, poses: Iterable[Pose]):
    body = "# one camera-to-world pose per line: R (row-major) then t\n"
    atomic_write(path, body + "".join(format_pose(p) + "\n" for p in poses))


def read_trajectory(path) -> list[Pose]:
    out = []
    for lineno, line in _data_lines(Path(path).read_text()):
        try:
            out.append(parse_pose(line))
        except (FormatError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


# --- model files ------------------------------------------------------------------


def format_model(kind: str, entries: dict) -> str:
    """Key-value text: a version line, then ``key = value`` lines.

    Arrays are written as ``key = array d0xd1 v0 v1 ...``.
    """
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}", f"kind = {kind}"]
    for key, value in entries.items():
        if isinstance(value, np.ndarray):
            shape = "x".join(str(s) for s in value.shape) or "0"
            lines.append(f"{key} = array {shape} " + " ".join(_fmt(v) for v in value.ravel()))
        elif isinstance(value, (bool, np.bool_)):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, (int, np.integer)):
            lines.append(f"{key} = int {int(value)}")
        elif isinstance(value, (float, np.floating)):
            lines.append(f"{key} = float {_fmt(value)}")
        else:
            lines.append(f"{key} = str {value}")
    return "\n".join(lines) + "\n"


def parse_model(text: str):
    lines = text.splitlines()
    if not lines or lines[0].split() != [MODEL_MAGIC, str(MODEL_VERSION)]:
        raise FormatError(f"missing '{MODEL_MAGIC} {MODEL_VERSION}' version line")
    kind = None
    entries = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        key, sep, rest = line.partition(" = ")
        if not sep:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        if key == "kind":
            kind = rest.strip()
            continue
        tag, _, body = rest.partition(" ")
        if tag == "array":
            shape_s, _, vals = body.partition(" ")
            shape = tuple(int(s) for s in shape_s.split("x"))
            arr = np.array([float(v) for v in vals.split()], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise FormatError(f"line {lineno}: array {key} has {arr.size} values for shape {shape}")
            entries[key] = arr.reshape(shape)
        elif tag == "int":
            entries[key] = int(body)
        elif tag == "float":
            entries[key] = float(body)
        elif tag == "str":
            entries[key] = body
        elif tag in ("true", "false"):
            entries[key] = tag == "true"
        else:
            raise FormatError(f"line {lineno}: unknown value tag {tag!r}")
    if kind is None:
        raise FormatError("model file lacks a 'kind' line")
    return kind, entries


def model_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def corrector_to_text(model) -> str:
    return format_model("corrector", {
        "weights": model.weights,
        "bias": model.bias,
        "feature_mean": model.feature_mean,
        "feature_std": model.feature_std,
        "tau_m": model.tau_m,
        "kernel": model.kernel,
        "final_loss": model.final_loss,
    })


def corrector_from_text(text: str):
    from .penetration import CorrectorModel

    kind, e = parse_model(text)
    if kind != "corrector":
        raise FormatError(f"expected a corrector model, got {kind!r}")
    try:
        return CorrectorModel(e["weights"], e["bias"], e["feature_mean"], e["feature_std"],
                              e["tau_m"], e["kernel"], e.get("final_loss", float("nan")))
    except KeyError as exc:
        raise FormatError(f"corrector model lacks {exc}") from exc


def denoiser_to_text(model) -> str:
    entries = {f"param.{k}": v for k, v in model.params.items()}
    entries.update({
        "height": model.shape[0],
        "width": model.shape[1],
        "T": model.T,
        "k_scale": model.k_scale,
        "scale": model.scale,
        "offset": model.offset,
    })
    return format_model("toy-denoiser", entries)


def denoiser_from_text(text: str):
    from .diffusion import ToyDenoiser

    kind, e = parse_model(text)
    if kind != "toy-denoiser":
        raise FormatError(f"expected a toy-denoiser model, got {kind!r}")
    try:
        params = {k.split(".", 1)[1]: v for k, v in e.items() if k.startswith("param.")}
        return ToyDenoiser(params, (e["height"], e["width"]), e["T"], e["k_scale"], e["scale"], e["offset"])
    except KeyError as exc:
        raise FormatError(f"denoiser model lacks {exc}") from exc


def save_text(path, text: str) -> str:
    atomic_write(path, text)
    return model_id(text)


def load_corrector(path):
    text = Path(path).read_text()
    return corrector_from_text(text), model_id(text)


def load_denoiser(path):
    text = Path(path).read_text()
    return denoiser_from_text(text), model_id(text)


# --- manifest ---------------------------------------------------------------------


@dataclass
class ManifestRecord:
    pair_id: str
    source_depth: str
    target_depth: str
    source_cloud: str
    target_cloud: str
    mask: str
    gt_pose: Pose
    overlap: float
    seed: int
    scale: float
    offset: float
    corrector_id: str
    denoiser_id: str
    extra: dict = field(default_factory=dict)

    def to_line(self) -> str:
        fields = [
            f"id={self.pair_id}",
            f"source_depth={self.source_depth}",
            f"target_depth={self.target_depth}",
            f"source_cloud={self.source_cloud}",
            f"target_cloud={self.target_cloud}",
            f"mask={self.mask}",
            "pose=" + ",".join(_fmt(v) for v in self.gt_pose.flat()),
            f"overlap={_fmt(self.overlap)}",
            f"seed={self.seed}",
            f"scale={_fmt(self.scale)}",
            f"offset={_fmt(self.offset)}",
            f"corrector={self.corrector_id}",
            f"denoiser={self.denoiser_id}",
        ]
        fields += [f"{k}={v}" for k, v in self.extra.items()]
        return " ".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        kv = {}
        for token in line.split():
            k, sep, v = token.partition("=")
            if not sep:
                raise FormatError(f"manifest token {token!r} is not key=value")
            kv[k] = v
        try:
            rec = cls(
                kv.pop("id"), kv.pop("source_depth"), kv.pop("target_depth"), kv.pop("source_cloud"),
                kv.pop("target_cloud"), kv.pop("mask"), parse_pose(kv.pop("pose")), float(kv.pop("overlap")),
                int(kv.pop("seed")), float(kv.pop("scale")), float(kv.pop("offset")), kv.pop("corrector"),
                kv.pop("denoiser"),
            )
        except KeyError as exc:
            raise FormatError(f"manifest record lacks {exc}") from exc
        rec.extra = kv
        return rec


def write_manifest(path, records: Iterable[ManifestRecord], meta: Optional[dict] = None):
    lines = [MANIFEST_HEADER]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}: {v}")
    lines += [r.to_line() for r in records]
    atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    text = path.read_text()
    if not text.startswith(MANIFEST_HEADER):
        raise FormatError(f"{path}: missing manifest header")
    records = [ManifestRecord.from_line(line) for _, line in _data_lines(text)]
    if check_files:
        for r in records:
            for f in (r.source_depth, r.target_depth, r.source_cloud, r.target_cloud, r.mask):
                if not (path.parent / f).exists():
                    raise DataError(f"{path}: record {r.pair_id} references missing file {f}")
    return records
