"""Dataset ingestion, resizing, and the synthetic desk-scale corpus.

Images and organ masks travel as binary PGM (P5) files listed in a CSV
manifest with header ``image_path,mask_path,label_id,split``. Images are
rescaled to [0, 1] and resized bilinearly; masks are resized nearest-neighbor
and re-binarized at 0.5 so organ boundaries stay crisp.

The synthetic generator writes a labeled corpus whose class signal lives
*only* inside the organ region: each class paints a distinct oriented
sinusoidal texture inside a two-ellipse organ mask, while everything outside
is identically distributed low-intensity noise for all classes. That makes
mask-guided patch selection measurably useful by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .patching import ImageGrid, MaskImage


# ---------------------------------------------------------------------------
# PGM (P5) files
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval <= 255) into a [H, W] uint8 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":  # header comment runs to end of line
                while pos < len(raw) and raw[pos] not in (10, 13):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PGM header in {path}")
        return raw[start:pos]

    if token() != b"P5":
        raise DataError(f"{path} is not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise DataError(f"bad PGM header in {path}") from exc
    if maxval <= 0 or maxval > 255:
        raise DataError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise DataError(f"{path}: expected {width * height} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def write_pgm(path, values: np.ndarray) -> None:
    """Write a [H, W] uint8 array as binary PGM (P5)."""
    values = np.ascontiguousarray(values, dtype=np.uint8)
    if values.ndim != 2:
        raise DataError(f"PGM payload must be 2-d, got shape {values.shape}")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + values.tobytes())


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; identity when sizes match."""
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape
    if (in_h, in_w) == (out_h, out_w):
        return values.copy()

    def axis_coords(out_n, in_n):
        src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(out_h, in_h)
    x0, x1, wx = axis_coords(out_w, in_w)
    top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
    bottom = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
    return top * (1 - wy[:, None]) + bottom * wy[:, None]


def nearest_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample with half-pixel centers."""
    values = np.asarray(values)
    in_h, in_w = values.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * (in_h / out_h)).astype(np.intp), in_h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (in_w / out_w)).astype(np.intp), in_w - 1)
    return values[ys][:, xs].copy()


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["image_path", "mask_path", "label_id", "split"]


@dataclass
class SampleRecord:
    image_path: Path
    mask_path: Path
    label_id: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    classes: int
    class_names: list[str]
    records: list[SampleRecord] = field(default_factory=list)

    def split(self, tag: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == tag]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV; relative paths resolve against it."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    root = path.parent
    records: list[SampleRecord] = []
    seen_images = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"manifest row {line_no} has {len(row)} fields, expected 4")
            image_rel, mask_rel, label_text, split = row
            image_path = (root / image_rel).resolve()
            mask_path = (root / mask_rel).resolve()
            try:
                label = int(label_text)
            except ValueError as exc:
                raise DataError(f"manifest row {line_no}: bad label id {label_text!r}") from exc
            if label < 0:
                raise DataError(f"manifest row {line_no}: negative label id {label}")
            if image_path in seen_images:
                raise DataError(f"manifest row {line_no}: duplicate image path {image_rel}")
            seen_images.add(image_path)
            if not image_path.is_file():
                raise DataError(f"manifest row {line_no}: missing image file {image_rel}")
            if not mask_path.is_file():
                raise DataError(f"manifest row {line_no}: missing mask file {mask_rel}")
            if not split:
                raise DataError(f"manifest row {line_no}: empty split tag")
            records.append(SampleRecord(image_path, mask_path, label, split))
    if not records:
        raise DataError(f"manifest {path} lists no samples")
    classes = max(r.label_id for r in records) + 1
    present = {r.label_id for r in records}
    missing = sorted(set(range(classes)) - present)
    if missing:
        raise DataError(f"label ids {missing} missing; ids must cover 0..{classes - 1}")
    names = [f"class{k}" for k in range(classes)]
    return DatasetManifest(root=root, classes=classes, class_names=names, records=records)


def load_sample(record: SampleRecord, target_h: int, target_w: int):
    """Load one record as (ImageGrid, MaskImage) at the target size."""
    image = read_pgm(record.image_path).astype(np.float64) / 255.0
    image = bilinear_resize(image, target_h, target_w)
    mask_raw = read_pgm(record.mask_path).astype(np.float64) / 255.0
    mask_bits = (nearest_resize(mask_raw, target_h, target_w) > 0.5).astype(np.uint8)
    return ImageGrid(image[:, :, None]), MaskImage(mask_bits)


def load_split(manifest: DatasetManifest, tag: str, target_h: int, target_w: int):
    """Load every record of a split as (ImageGrid, MaskImage, label) triples."""
    out = []
    for record in manifest.split(tag):
        img, mask = load_sample(record, target_h, target_w)
        out.append((img, mask, record.label_id))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassTexture:
    """In-organ texture parameters for one class."""

    frequency: float
    amplitude: float
    noise: float


DEFAULT_TEXTURES = (
    ClassTexture(frequency=0.8, amplitude=0.38, noise=0.01),
    ClassTexture(frequency=1.0, amplitude=0.38, noise=0.01),
    ClassTexture(frequency=1.2, amplitude=0.38, noise=0.01),
    ClassTexture(frequency=1.4, amplitude=0.38, noise=0.01),
)

BACKGROUND_LEVEL = 0.12
BACKGROUND_NOISE = 0.06
FREQUENCY_JITTER = 0.1  # per-sample relative jitter; orientation is the crisp class cue
TEXTURE_PHASE = 0.8     # shared wave phase: keeps masked-patch content inferable
ORGAN_COVER_MIN = 0.20
ORGAN_COVER_MAX = 0.50


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    per_class: int = 25
    seed: int = 0
    textures: tuple[ClassTexture, ...] = DEFAULT_TEXTURES

    @property
    def classes(self) -> int:
        return len(self.textures)


def _organ_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Union of two filled ellipses covering 20-50% of the pixels."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(1000):
        mask = np.zeros((size, size), dtype=np.uint8)
        for cx_lo, cx_hi in ((0.22, 0.40), (0.60, 0.78)):
            cx = rng.uniform(cx_lo, cx_hi) * size
            cy = rng.uniform(0.38, 0.62) * size
            ax = rng.uniform(0.12, 0.20) * size
            ay = rng.uniform(0.24, 0.40) * size
            mask |= (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0).astype(np.uint8)
        coverage = mask.mean()
        if ORGAN_COVER_MIN <= coverage <= ORGAN_COVER_MAX:
            return mask
    raise DataError("could not draw an organ mask inside the coverage bounds")


def _textured_image(rng: np.random.Generator, size: int, class_id: int,
                    texture: ClassTexture, mask: np.ndarray) -> np.ndarray:
    """Oriented smooth wave inside the organ; identically distributed noise outside.

    Each class paints its wave along its own orientation (45 degrees apart)
    and base frequency; per-sample frequency jitter, organ geometry, and noise
    provide the intra-class variation. The wave phase is shared so masked
    organ content stays inferable from the visible organ patches, and the
    class cue exists only inside the organ region.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = class_id * (math.pi / 4.0)
    axis = (math.cos(angle) * xx + math.sin(angle) * yy) / size
    frequency = texture.frequency * rng.uniform(1.0 - FREQUENCY_JITTER,
                                                1.0 + FREQUENCY_JITTER)
    wave = 0.55 + texture.amplitude * np.sin(
        2.0 * math.pi * frequency * axis + TEXTURE_PHASE)
    inside = wave + rng.normal(0.0, texture.noise, (size, size))
    outside = BACKGROUND_LEVEL + rng.normal(0.0, BACKGROUND_NOISE, (size, size))
    return np.clip(np.where(mask == 1, inside, outside), 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write the corpus (PGM pairs + 80/20 stratified manifest); return the manifest path.

    Deterministic in the seed: identical specs produce byte-identical files.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for class_id, texture in enumerate(spec.textures):
        train_count = round(0.8 * spec.per_class)
        split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7, class_id]))
        train_positions = set(split_rng.permutation(spec.per_class)[:train_count].tolist())
        for index in range(spec.per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_id, index]))
            mask = _organ_mask(rng, spec.image_size)
            image = _textured_image(rng, spec.image_size, class_id, texture, mask)
            stem = f"c{class_id}_{index:04d}"
            write_pgm(images_dir / f"{stem}.pgm", np.round(image * 255.0).astype(np.uint8))
            write_pgm(masks_dir / f"{stem}.pgm", mask * 255)
            split = "train" if index in train_positions else "test"
            rows.append((f"images/{stem}.pgm", f"masks/{stem}.pgm", class_id, split))

    manifest_path = out_dir / "manifest.csv"
    lines = [",".join(MANIFEST_HEADER)]
    lines += [f"{img},{msk},{label},{split}" for img, msk, label, split in rows]
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path
