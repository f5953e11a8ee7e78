"""
KITTI label, calibration and raw-head-output I/O.

Label / prediction rows carry 15 or 16 whitespace-separated fields::

    type truncated occluded alpha  left top right bottom  h w l  x y z  rotation_y [score]

Calibration files hold ``Px: v0 ... v11`` lines; only ``P2`` is required.
The raw-outputs sidecar is a JSON array of records, one file per image.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

NUM_HEADING_BINS = 12


class Category(str, Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"
    VAN = "Van"
    TRUCK = "Truck"
    PERSON_SITTING = "Person_sitting"
    TRAM = "Tram"
    MISC = "Misc"
    DONTCARE = "DontCare"


class KittiParseError(ValueError):
    """Malformed input. ``line`` and ``field`` are 1-based / 0-based when known."""

    def __init__(self, message: str, line: int | None = None, field: int | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class FieldCountError(KittiParseError):
    pass


class MissingP2Error(KittiParseError):
    pass


class MissingKeyError(KittiParseError):
    pass


class InvalidDepthError(KittiParseError):
    pass


def normalize_angle(theta: float) -> float:
    """Wrap to [-pi, pi]."""
    return math.remainder(theta, 2.0 * math.pi)


@dataclass(frozen=True)
class ObjectLabel:
    category: Category
    truncation: float
    occlusion: int
    alpha: float
    box2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "box2d", tuple(float(v) for v in self.box2d))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        left, top, right, bottom = self.box2d
        if right < left or bottom < top:
            raise ValueError(f"inverted 2D box {self.box2d}")
        if not self.is_dontcare and min(self.dims) <= 0:
            raise ValueError(f"non-positive dimensions {self.dims}")

    @property
    def is_dontcare(self) -> bool:
        return self.category is Category.DONTCARE

    @property
    def height2d(self) -> float:
        return self.box2d[3] - self.box2d[1]

    @property
    def center2d(self) -> tuple[float, float]:
        left, top, right, bottom = self.box2d
        return (0.5 * (left + right), 0.5 * (top + bottom))

    @property
    def depth(self) -> float:
        return self.location[2]

    def replace(self, **changes) -> "ObjectLabel":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Calibration:
    """Left color camera projection matrix (KITTI ``P2``)."""

    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64).reshape(3, 4)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError(f"non-positive focal length fu={self.fu}, fv={self.fv}")

    @classmethod
    def from_intrinsics(cls, f: float, cu: float, cv: float, fv: float | None = None) -> "Calibration":
        fv = f if fv is None else fv
        return cls(np.array([[f, 0.0, cu, 0.0], [0.0, fv, cv, 0.0], [0.0, 0.0, 1.0, 0.0]]))

    @property
    def fu(self) -> float:
        return float(self.P[0, 0])

    @property
    def fv(self) -> float:
        return float(self.P[1, 1])

    @property
    def cu(self) -> float:
        return float(self.P[0, 2])

    @property
    def cv(self) -> float:
        return float(self.P[1, 2])

    @property
    def K(self) -> np.ndarray:
        return np.array(self.P[:, :3])

    @property
    def has_standard_intrinsics(self) -> bool:
        return bool(np.allclose(self.P[2, :3], (0.0, 0.0, 1.0), rtol=0.0, atol=1e-9))

    def __eq__(self, other):
        if not isinstance(other, Calibration):
            return NotImplemented
        return bool(np.array_equal(self.P, other.P))

    def __hash__(self):
        return hash(self.P.tobytes())


@dataclass(frozen=True)
class RawHeadOutputs:
    coarse_center: tuple[float, float]
    offset2d: tuple[float, float]
    offset3d: tuple[float, float]
    depth: float
    size3d: tuple[float, float, float]
    heading_bin_logits: tuple[float, ...]
    heading_residual: float
    score: float
    depth_sigma: float | None = None

    def __post_init__(self):
        if not self.depth > 0:
            raise InvalidDepthError(f"depth must be positive, got {self.depth}")
        if self.depth_sigma is not None and not self.depth_sigma > 0:
            raise InvalidDepthError(f"depth_sigma must be positive, got {self.depth_sigma}")
        if len(self.heading_bin_logits) != NUM_HEADING_BINS:
            raise KittiParseError(
                f"heading_bin_logits needs {NUM_HEADING_BINS} entries, got {len(self.heading_bin_logits)}"
            )

    @property
    def projected_center(self) -> tuple[float, float]:
        """Image-plane projection of the 3D reference point (coarse center + 3D offset)."""
        return (
            self.coarse_center[0] + self.offset3d[0],
            self.coarse_center[1] + self.offset3d[1],
        )

    @property
    def center2d(self) -> tuple[float, float]:
        return (
            self.coarse_center[0] + self.offset2d[0],
            self.coarse_center[1] + self.offset2d[1],
        )

    def to_record(self) -> dict:
        record = {
            "coarse_center": list(self.coarse_center),
            "offset2d": list(self.offset2d),
            "offset3d": list(self.offset3d),
            "depth": self.depth,
            "size3d": list(self.size3d),
            "heading_bin_logits": list(self.heading_bin_logits),
            "heading_residual": self.heading_residual,
            "score": self.score,
        }
        if self.depth_sigma is not None:
            record["depth_sigma"] = self.depth_sigma
        return record


# ---------------------------------------------------------------------------
# labels

_LABEL_FIELDS = 15


def _decode(text: bytes | str) -> str:
    if isinstance(text, str):
        return text
    try:
        return bytes(text).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise KittiParseError(f"not valid UTF-8 at byte {exc.start}") from None


def _real(token: str, line: int, index: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise KittiParseError(f"expected a real number, got {token!r}", line, index) from None
    if not math.isfinite(value):
        raise KittiParseError(f"non-finite value {token!r}", line, index)
    return value


def _parse_label_line(tokens: list[str], lineno: int) -> ObjectLabel:
    if len(tokens) not in (_LABEL_FIELDS, _LABEL_FIELDS + 1):
        raise FieldCountError(f"expected 15 or 16 fields, got {len(tokens)}", lineno)
    try:
        category = Category(tokens[0])
    except ValueError:
        raise KittiParseError(f"unknown category {tokens[0]!r}", lineno, 0) from None
    vals = [_real(tok, lineno, i) for i, tok in enumerate(tokens[1:], start=1)]
    truncation, occ, alpha = vals[0], vals[1], vals[2]
    if occ != int(occ) or int(occ) not in (-1, 0, 1, 2, 3):
        raise KittiParseError(f"occlusion must be an integer in -1..3, got {tokens[2]!r}", lineno, 2)
    box2d = tuple(vals[3:7])
    dims = tuple(vals[7:10])
    location = tuple(vals[10:13])
    rotation_y = vals[13]
    score = vals[14] if len(vals) == 15 else None

    dontcare = category is Category.DONTCARE
    if not dontcare:
        if not -1.0 <= truncation <= 1.0:
            raise KittiParseError(f"truncation out of range: {truncation}", lineno, 1)
        for i, d in enumerate(dims):
            if d <= 0:
                raise KittiParseError(f"non-positive dimension {d}", lineno, 8 + i)
        alpha = normalize_angle(alpha)
        rotation_y = normalize_angle(rotation_y)
    if box2d[2] < box2d[0]:
        raise KittiParseError("right < left", lineno, 6)
    if box2d[3] < box2d[1]:
        raise KittiParseError("bottom < top", lineno, 7)
    return ObjectLabel(category, truncation, int(occ), alpha, box2d, dims, location, rotation_y, score)


def parse_label_file(text: bytes | str) -> list[ObjectLabel]:
    """Parse a KITTI label or prediction file.

    DontCare rows are retained. Alpha and rotation_y of regular objects are
    wrapped into [-pi, pi]. Truncation/occlusion of ``-1`` (used by many
    detectors' prediction files) are accepted.
    """
    objects = []
    for lineno, raw in enumerate(_decode(text).splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        objects.append(_parse_label_line(tokens, lineno))
    return objects


def _fmt(value: float) -> str:
    out = f"{value:.2f}"
    return "0.00" if out == "-0.00" else out


def format_label(obj: ObjectLabel) -> str:
    fields = [obj.category.value, _fmt(obj.truncation), str(int(obj.occlusion)), _fmt(obj.alpha)]
    fields += [_fmt(v) for v in obj.box2d]
    fields += [_fmt(v) for v in obj.dims]
    fields += [_fmt(v) for v in obj.location]
    fields.append(_fmt(obj.rotation_y))
    if obj.score is not None:
        fields.append(_fmt(obj.score))
    return " ".join(fields)


def write_label_file(objects: Iterable[ObjectLabel]) -> bytes:
    lines = [format_label(obj) for obj in objects]
    if not lines:
        return b""
    return ("\n".join(lines) + "\n").encode("utf-8")


def quantize_label(obj: ObjectLabel) -> ObjectLabel:
    """Round every real field the way :func:`write_label_file` does."""

    def q(v: float) -> float:
        return float(_fmt(v))

    return ObjectLabel(
        obj.category,
        q(obj.truncation),
        obj.occlusion,
        q(obj.alpha),
        tuple(q(v) for v in obj.box2d),
        tuple(q(v) for v in obj.dims),
        tuple(q(v) for v in obj.location),
        q(obj.rotation_y),
        None if obj.score is None else q(obj.score),
    )


# ---------------------------------------------------------------------------
# calibration


def parse_calib_file(text: bytes | str) -> Calibration:
    p2 = None
    for lineno, raw in enumerate(_decode(text).splitlines(), start=1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        if key.strip() != "P2":
            continue
        tokens = rest.split()
        if len(tokens) != 12:
            raise FieldCountError(f"P2 needs 12 values, got {len(tokens)}", lineno)
        p2 = [_real(tok, lineno, i) for i, tok in enumerate(tokens)]
    if p2 is None:
        raise MissingP2Error("no P2 line in calibration file")
    try:
        calib = Calibration(np.array(p2).reshape(3, 4))
    except ValueError as exc:
        raise KittiParseError(str(exc)) from None
    if not calib.has_standard_intrinsics:
        warnings.warn("P2 third row is not (0, 0, 1, t); intrinsic decomposition is approximate", stacklevel=2)
    return calib


def write_calib_file(calib: Calibration) -> bytes:
    values = " ".join(f"{v:.12e}" for v in calib.P.ravel())
    return f"P2: {values}\n".encode("utf-8")


# ---------------------------------------------------------------------------
# raw head outputs sidecar

_PAIR_KEYS = ("coarse_center", "offset2d", "offset3d")
_REQUIRED_KEYS = _PAIR_KEYS + ("depth", "size3d", "heading_bin_logits", "heading_residual", "score")


def _vector(record: Mapping, key: str, n: int | None, index: int) -> tuple[float, ...]:
    value = record[key]
    if not isinstance(value, (list, tuple)) or (n is not None and len(value) != n):
        want = f"{n} numbers" if n is not None else "a list"
        raise KittiParseError(f"record {index}: {key} must be {want}")
    return tuple(_number(v, key, index) for v in value)


def _number(value, key: str, index: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise KittiParseError(f"record {index}: {key} must be numeric, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise KittiParseError(f"record {index}: {key} is not finite")
    return value


def _raw_from_record(record, index: int) -> RawHeadOutputs:
    if not isinstance(record, Mapping):
        raise KittiParseError(f"record {index} is not an object")
    for key in _REQUIRED_KEYS:
        if key not in record:
            raise MissingKeyError(f"record {index}: missing required key {key!r}")
    logits = _vector(record, "heading_bin_logits", None, index)
    if len(logits) != NUM_HEADING_BINS:
        raise KittiParseError(
            f"record {index}: heading_bin_logits needs {NUM_HEADING_BINS} entries, got {len(logits)}"
        )
    depth = _number(record["depth"], "depth", index)
    if depth <= 0:
        raise InvalidDepthError(f"record {index}: depth must be positive, got {depth}")
    sigma = record.get("depth_sigma")
    if sigma is not None:
        sigma = _number(sigma, "depth_sigma", index)
        if sigma <= 0:
            raise InvalidDepthError(f"record {index}: depth_sigma must be positive, got {sigma}")
    return RawHeadOutputs(
        coarse_center=_vector(record, "coarse_center", 2, index),
        offset2d=_vector(record, "offset2d", 2, index),
        offset3d=_vector(record, "offset3d", 2, index),
        depth=depth,
        size3d=_vector(record, "size3d", 3, index),
        heading_bin_logits=logits,
        heading_residual=_number(record["heading_residual"], "heading_residual", index),
        score=_number(record["score"], "score", index),
        depth_sigma=sigma,
    )


def parse_raw_outputs(text: bytes | str) -> list[RawHeadOutputs]:
    """Parse one image's raw-outputs sidecar (a JSON array of records).

    Unknown keys are ignored; record order is preserved.
    """
    try:
        payload = json.loads(_decode(text))
    except json.JSONDecodeError as exc:
        raise KittiParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    except RecursionError:
        raise KittiParseError("JSON nested too deeply") from None
    if not isinstance(payload, list):
        raise KittiParseError("raw-outputs file must hold a JSON array of records")
    return [_raw_from_record(rec, i) for i, rec in enumerate(payload)]


def write_raw_outputs(records: Sequence[RawHeadOutputs]) -> bytes:
    return (json.dumps([r.to_record() for r in records], indent=1) + "\n").encode("utf-8")
