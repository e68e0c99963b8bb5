"""Dataset manifests, ingestion, 6:2:2 splitting, cropping and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .schema import WBC_CLASSES, AttributeSchema, SchemaError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
ATTRIBUTE_CSV = "attributes.csv"
PSEUDO_CSV = "attributes.pseudo.csv"
SCHEMA_JSON = "schema.json"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str  # relative to the dataset root, "<class>/<file>"
    label: int
    attributes: Optional[tuple] = None
    provenance: str = "none"  # "true" | "pseudo" | "none"

    @property
    def filename(self) -> str:
        return self.path.rsplit("/", 1)[-1]


@dataclass
class DatasetManifest:
    root: Path
    class_names: tuple
    records: list
    schema: AttributeSchema = field(default_factory=AttributeSchema.default)
    source: str = ""

    def __post_init__(self):
        self.root = Path(self.root)
        self.class_names = tuple(self.class_names)
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"duplicate class names in {self.class_names}")
        for r in self.records:
            if not 0 <= r.label < len(self.class_names):
                raise DatasetError(f"{r.path}: class index {r.label} not in class list")
            if r.attributes is not None:
                if len(r.attributes) != len(self.schema):
                    raise DatasetError(f"{r.path}: {len(r.attributes)} attribute labels, "
                                       f"schema has {len(self.schema)}")
                for a, (name, cats) in zip(r.attributes, self.schema.attributes):
                    if not 0 <= a < len(cats):
                        raise DatasetError(f"{r.path}: category {a} invalid for {name}")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, records: Sequence[Record]) -> "DatasetManifest":
        return DatasetManifest(self.root, self.class_names, list(records), self.schema, self.source)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def has_attributes(self) -> np.ndarray:
        return np.array([r.attributes is not None for r in self.records], dtype=bool)

    def attribute_matrix(self) -> np.ndarray:
        """[N, A] category indices, -1 where a sample has no attribute labels."""
        out = np.full((len(self.records), len(self.schema)), -1, dtype=np.int64)
        for i, r in enumerate(self.records):
            if r.attributes is not None:
                out[i] = r.attributes
        return out

    def with_attributes(self, labels: dict, provenance: str) -> "DatasetManifest":
        """Fill in attribute labels keyed by record path; existing labels are kept."""
        recs = []
        for r in self.records:
            if r.attributes is None and r.path in labels:
                r = replace(r, attributes=tuple(int(v) for v in labels[r.path]), provenance=provenance)
            recs.append(r)
        return self.subset(recs)


def _read_attribute_csv(path: Path, schema: AttributeSchema) -> dict:
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return rows
        expected = ["filename"] + schema.names
        if header[: len(expected)] != expected or any(h not in ("provenance",) for h in header[len(expected):]):
            raise DatasetError(f"{path.name}: header {header} does not match schema columns {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(expected):
                raise DatasetError(f"{path.name}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                rows[row[0]] = schema.encode(row[1 : len(expected)])
            except SchemaError as exc:
                raise DatasetError(f"{path.name}:{lineno}: {exc}") from exc
    return rows


def load_dataset(root, schema: Optional[AttributeSchema] = None,
                 class_names: Optional[Sequence[str]] = None,
                 pseudo_csv: Optional[Path] = None, source: str = "") -> DatasetManifest:
    """Register ``root/<class>/*.{png,jpg,bmp}`` and join ``attributes.csv`` by filename."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if schema is None:
        schema = AttributeSchema.load(root / SCHEMA_JSON) if (root / SCHEMA_JSON).exists() \
            else AttributeSchema.default()
    dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if class_names is None:
        known = [c for c in WBC_CLASSES if c in dirs]
        class_names = known if known and len(known) == len(dirs) else dirs
    class_names = tuple(class_names)
    for d in dirs:
        if d not in class_names:
            raise DatasetError(f"directory {d!r} is not one of the classes {class_names}")

    files = []
    for ci, cname in enumerate(class_names):
        cdir = root / cname
        if not cdir.is_dir():
            continue
        for p in sorted(cdir.iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                try:
                    with Image.open(p) as im:
                        im.size  # noqa: B018 - header read validates the file
                except Exception as exc:
                    raise DatasetError(f"unreadable image {cname}/{p.name}: {exc}") from exc
                files.append((f"{cname}/{p.name}", ci))

    file_set = {rel for rel, _ in files}
    by_name = {}
    for rel, _ in files:
        key = rel.rsplit("/", 1)[-1]
        by_name.setdefault(key, []).append(rel)

    def resolve(name: str) -> str:
        if name in file_set:
            return name
        hits = by_name.get(name)
        if not hits:
            raise DatasetError(f"attribute row for nonexistent file {name!r}")
        if len(hits) > 1:
            raise DatasetError(f"attribute filename {name!r} is ambiguous across classes")
        return hits[0]

    attrs = {}
    csv_path = root / ATTRIBUTE_CSV
    if csv_path.exists():
        attrs = {resolve(k): v for k, v in _read_attribute_csv(csv_path, schema).items()}
    pseudo = {}
    if pseudo_csv is not None:
        pseudo = {resolve(k): v for k, v in _read_attribute_csv(Path(pseudo_csv), schema).items()}

    records = []
    for rel, ci in files:
        if rel in attrs:
            records.append(Record(rel, ci, tuple(attrs[rel]), "true"))
        elif rel in pseudo:
            records.append(Record(rel, ci, tuple(pseudo[rel]), "pseudo"))
        else:
            records.append(Record(rel, ci))
    return DatasetManifest(root, class_names, records, schema, source or root.name)


# splitting -----------------------------------------------------------------
@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if any(r <= 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DatasetError(f"split ratios must be positive and sum to 1, got {self.ratios}")


def largest_remainder(n: int, ratios: Sequence[float]) -> list:
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_622(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()) -> tuple:
    """Seeded (optionally class-stratified) partition into train/val/test manifests."""
    records = sorted(manifest.records, key=lambda r: r.path)
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        groups = [[r for r in records if r.label == c] for c in range(len(manifest.class_names))]
        for c, g in enumerate(groups):
            if g and len(g) < len(spec.ratios):
                raise DatasetError(f"class {manifest.class_names[c]!r} has {len(g)} samples, "
                                   f"too few to stratify into {len(spec.ratios)} splits")
    else:
        groups = [records]
    parts = [[] for _ in spec.ratios]
    for g in groups:
        if not g:
            continue
        order = rng.permutation(len(g))
        sizes = largest_remainder(len(g), spec.ratios)
        start = 0
        for k, size in enumerate(sizes):
            parts[k].extend(g[i] for i in order[start : start + size])
            start += size
    return tuple(manifest.subset(sorted(p, key=lambda r: r.path)) for p in parts)


# images --------------------------------------------------------------------
def read_image(path, size: Optional[int] = None) -> np.ndarray:
    """Decode to an HxWx3 uint8 array, optionally resized to size x size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def load_images(manifest: DatasetManifest, size: Optional[int] = None) -> np.ndarray:
    if not manifest.records:
        return np.zeros((0, size or 0, size or 0, 3), dtype=np.uint8)
    return np.stack([read_image(manifest.root / r.path, size) for r in manifest.records])


def crop(image: np.ndarray, mode: str, size: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Square crop of an HxWxC (or HxW) image; random offsets are uniform over valid positions."""
    h, w = image.shape[:2]
    if size > h or size > w:
        raise DatasetError(f"crop size {size} larger than image {h}x{w}")
    if mode == "center":
        top, left = (h - size) // 2, (w - size) // 2
    elif mode == "random":
        if rng is None:
            raise DatasetError("random crop needs an rng")
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        raise DatasetError(f"unknown crop mode {mode!r}")
    return image[top : top + size, left : left + size]


def channel_stats(images: np.ndarray) -> tuple:
    """Per-channel mean/std of uint8 NHWC images after scaling to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def to_batch(images: np.ndarray, mode: str, size: int, rng=None) -> np.ndarray:
    """Crop each NHWC uint8 image and return float32 NCHW in [0, 1]."""
    out = np.empty((len(images), 3, size, size), dtype=np.float32)
    for i, img in enumerate(images):
        out[i] = crop(img, mode, size, rng).transpose(2, 0, 1) / np.float32(255.0)
    return out


def batch_indices(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Index batches in seeded order; a trailing singleton joins the previous batch."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


@dataclass
class ImageSet:
    """A manifest with decoded pixels held in memory."""

    manifest: DatasetManifest
    images: np.ndarray  # N, H, W, 3 uint8

    @classmethod
    def load(cls, manifest: DatasetManifest, size: Optional[int] = None) -> "ImageSet":
        return cls(manifest, load_images(manifest, size))

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    @property
    def attributes(self) -> np.ndarray:
        return self.manifest.attribute_matrix()

    def select(self, mask) -> "ImageSet":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ImageSet(self.manifest.subset([self.manifest.records[i] for i in idx]), self.images[idx])

    @staticmethod
    def concat(sets: Sequence["ImageSet"]) -> "ImageSet":
        first = sets[0].manifest
        recs = [r for s in sets for r in s.manifest.records]
        return ImageSet(first.subset(recs), np.concatenate([s.images for s in sets]))
