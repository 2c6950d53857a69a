"""GTSDB ingestion: ground-truth text, binary PPM images, superclass remap, class statistics."""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError
from .geometry import BBox

NUM_RAW_CLASSES = 43


class MalformedLine(DatasetError):
    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {reason}")


class InvalidBox(DatasetError):
    def __init__(self, line_number: int | None, box: tuple):
        self.line_number = line_number
        where = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{where}invalid box {box}")


class InvalidClass(DatasetError):
    def __init__(self, line_number: int | None, class_id: int):
        self.line_number = line_number
        where = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{where}class id {class_id} outside 0-{NUM_RAW_CLASSES - 1}")


class OutOfRange(DatasetError):
    pass


class UnsupportedMagic(DatasetError):
    pass


class UnsupportedMaxval(DatasetError):
    pass


class Truncated(DatasetError):
    pass


class SuperClass(enum.IntEnum):
    PROHIBITORY = 0
    MANDATORY = 1
    DANGER = 2
    STOP = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, label: str) -> "SuperClass":
        try:
            return cls[label.upper()]
        except KeyError:
            raise DatasetError(f"unknown superclass {label!r}") from None


RAW_CLASS_NAMES = (
    "speed limit 20", "speed limit 30", "speed limit 50", "speed limit 60",
    "speed limit 70", "speed limit 80", "restriction ends 80", "speed limit 100",
    "speed limit 120", "no overtaking", "no overtaking (trucks)",
    "priority at next intersection", "priority road", "give way", "stop",
    "no traffic both ways", "no trucks", "no entry", "danger", "bend left",
    "bend right", "bend", "uneven road", "slippery road", "road narrows",
    "construction", "traffic signal", "pedestrian crossing", "school crossing",
    "cycles crossing", "snow", "animals", "restriction ends", "go right",
    "go left", "go straight", "go right or straight", "go left or straight",
    "keep right", "keep left", "roundabout", "restriction ends (overtaking)",
    "restriction ends (overtaking (trucks))",
)

# GTSDB benchmark categories, with Stop (14) split out as its own superclass.
SUPERCLASS_MEMBERS: dict[SuperClass, frozenset[int]] = {
    SuperClass.PROHIBITORY: frozenset({0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 15, 16}),
    SuperClass.MANDATORY: frozenset({33, 34, 35, 36, 37, 38, 39, 40}),
    SuperClass.DANGER: frozenset({11, *range(18, 32)}),
    SuperClass.STOP: frozenset({14}),
}
UNMAPPED_IDS = frozenset(range(NUM_RAW_CLASSES)) - frozenset().union(*SUPERCLASS_MEMBERS.values())

_REMAP: dict[int, SuperClass] = {
    cid: sc for sc, members in SUPERCLASS_MEMBERS.items() for cid in members
}


def remap_to_superclass(raw_class_id: int) -> SuperClass | None:
    """Map a raw GTSDB class id to its superclass; ``None`` means unmapped."""
    if not 0 <= raw_class_id < NUM_RAW_CLASSES:
        raise OutOfRange(f"raw class id {raw_class_id} outside 0-{NUM_RAW_CLASSES - 1}")
    return _REMAP.get(raw_class_id)


@dataclass(frozen=True)
class AnnotationRecord:
    image_name: str
    box: BBox
    raw_class_id: int

    def __post_init__(self) -> None:
        if not 0 <= self.raw_class_id < NUM_RAW_CLASSES:
            raise InvalidClass(None, self.raw_class_id)
        b = self.box
        if b.left < 0 or b.top < 0 or not (b.left < b.right and b.top < b.bottom):
            raise InvalidBox(None, b.as_tuple())

    @property
    def superclass(self) -> SuperClass | None:
        return remap_to_superclass(self.raw_class_id)


def parse_gtsdb_annotations(text: str) -> list[AnnotationRecord]:
    """Parse ``name;left;top;right;bottom;classId`` lines. Blank lines are skipped."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(";")
        if len(parts) != 6:
            raise MalformedLine(lineno, f"expected 6 fields, got {len(parts)}")
        name = parts[0]
        if not name:
            raise MalformedLine(lineno, "empty image name")
        try:
            left, top, right, bottom, class_id = (int(p) for p in parts[1:])
        except ValueError:
            raise MalformedLine(lineno, "non-integer field") from None
        if left < 0 or top < 0 or left >= right or top >= bottom:
            raise InvalidBox(lineno, (left, top, right, bottom))
        if not 0 <= class_id < NUM_RAW_CLASSES:
            raise InvalidClass(lineno, class_id)
        records.append(AnnotationRecord(name, BBox(left, top, right, bottom), class_id))
    return records


def _coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_gtsdb_annotations(records: Iterable[AnnotationRecord]) -> str:
    lines = []
    for r in records:
        coords = ";".join(_coord(v) for v in r.box.as_tuple())
        lines.append(f"{r.image_name};{coords};{r.raw_class_id}")
    return "".join(line + "\n" for line in lines)


def load_gtsdb_annotations(path: str | Path) -> list[AnnotationRecord]:
    return parse_gtsdb_annotations(Path(path).read_text())


# ---------------------------------------------------------------------------
# PPM images


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB image; ``pixels`` has shape (height, width, 3), row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size {self.width}x{self.height} must be positive")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8 of shape {(self.height, self.width, 3)}, "
                             f"got {self.pixels.dtype} {self.pixels.shape}")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Image":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(pixels.shape[1], pixels.shape[0], pixels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.width == other.width and self.height == other.height \
            and np.array_equal(self.pixels, other.pixels)


_WS = b" \t\n\r\v\f"


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise Truncated("PPM header ended early")
        tokens.append(data[start:pos])
    return tokens, pos


def decode_ppm(data: bytes) -> Image:
    if data[:2] != b"P6":
        raise UnsupportedMagic(f"unsupported PPM magic {data[:2]!r}; only binary P6 is supported")
    tokens, pos = _read_header_tokens(data[2:], 3)
    pos += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DatasetError(f"non-integer PPM header field in {tokens}") from None
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval}; only 255 is supported")
    if width < 1 or height < 1:
        raise DatasetError(f"invalid PPM size {width}x{height}")
    if pos >= len(data) or data[pos] not in _WS:
        raise Truncated("missing whitespace after PPM header")
    pos += 1
    need = width * height * 3
    body = data[pos:pos + need]
    if len(body) < need:
        raise Truncated(f"expected {need} pixel bytes, got {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()
    return Image(width, height, pixels)


def encode_ppm(image: Image) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.pixels).tobytes()


def read_ppm(path: str | Path) -> Image:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: str | Path, image: Image) -> None:
    Path(path).write_bytes(encode_ppm(image))


# ---------------------------------------------------------------------------
# Class statistics


class Presence(enum.Enum):
    LOW = "low"
    MODERATE = "moderate"
    HIGH = "high"


LOW_PRESENCE_BELOW = 20
HIGH_PRESENCE_ABOVE = 60


def presence_bucket(count: int) -> Presence:
    if count < LOW_PRESENCE_BELOW:
        return Presence.LOW
    if count <= HIGH_PRESENCE_ABOVE:
        return Presence.MODERATE
    return Presence.HIGH


@dataclass
class ClassHistogram:
    counts: dict[int, int]
    superclass_counts: dict[SuperClass, int]
    buckets: dict[int, Presence] = field(default_factory=dict)
    image_count: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_csv(self) -> str:
        rows = ["class_id,count,bucket"]
        for cid in sorted(self.buckets):
            rows.append(f"{cid},{self.counts[cid]},{self.buckets[cid].value}")
        return "\n".join(rows) + "\n"

    def to_json(self) -> dict:
        return {
            "images": self.image_count,
            "instances": self.total,
            "classes": [
                {"class_id": cid, "name": RAW_CLASS_NAMES[cid], "count": self.counts[cid],
                 "bucket": self.buckets[cid].value}
                for cid in sorted(self.buckets)
            ],
            "superclasses": {sc.label: self.superclass_counts[sc] for sc in SuperClass},
        }


def class_histogram(records: Sequence[AnnotationRecord]) -> ClassHistogram:
    raw = Counter(r.raw_class_id for r in records)
    counts = {cid: raw.get(cid, 0) for cid in range(NUM_RAW_CLASSES)}
    sc_counts = {sc: 0 for sc in SuperClass}
    for cid, n in raw.items():
        sc = remap_to_superclass(cid)
        if sc is not None:
            sc_counts[sc] += n
    buckets = {cid: presence_bucket(n) for cid, n in counts.items() if n > 0}
    images = len({r.image_name for r in records})
    return ClassHistogram(counts, sc_counts, buckets, images)


def mapped_records(records: Iterable[AnnotationRecord]) -> list[tuple[AnnotationRecord, SuperClass]]:
    """Pair each record with its superclass, dropping unmapped classes."""
    out = []
    for r in records:
        sc = r.superclass
        if sc is not None:
            out.append((r, sc))
    return out


_PPM_NAME = re.compile(r".*\.ppm$", re.IGNORECASE)


def list_ppm_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and _PPM_NAME.match(p.name))
