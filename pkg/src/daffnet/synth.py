"""Procedural white-blood-cell images with attribute labels that match the render.

Each image is a pure function of (attribute vector, render seed, image size,
domain), so any sample can be re-rendered bit-for-bit from ``synth.json``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ATTRIBUTE_CSV, SCHEMA_JSON, DatasetManifest, load_dataset
from .schema import WBC_CLASSES, AttributeSchema

SYNTH_JSON = "synth.json"
HELDOUT_CSV = "attributes.heldout.csv"  # ground truth kept out of ingestion

# Per-class attribute recipes (category names, schema column order).
DEFAULT_RECIPES = {
    "neutrophil": dict(cell_size="big", cell_shape="round", nucleus_shape="segmented_multilobed",
                       nc_ratio="low", chromatin_density="densely", cytoplasm_vacuole="no",
                       cytoplasm_texture="clear", cytoplasm_color="light_blue", granule_type="small",
                       granule_color="pink", granularity="yes"),
    "eosinophil": dict(cell_size="big", cell_shape="round", nucleus_shape="segmented_bilobed",
                       nc_ratio="low", chromatin_density="densely", cytoplasm_vacuole="no",
                       cytoplasm_texture="clear", cytoplasm_color="light_blue", granule_type="round",
                       granule_color="red", granularity="yes"),
    "basophil": dict(cell_size="big", cell_shape="round", nucleus_shape="irregular",
                     nc_ratio="high", chromatin_density="densely", cytoplasm_vacuole="no",
                     cytoplasm_texture="frosted", cytoplasm_color="purple_blue", granule_type="round",
                     granule_color="purple", granularity="yes"),
    "lymphocyte": dict(cell_size="small", cell_shape="round", nucleus_shape="unsegmented_round",
                       nc_ratio="high", chromatin_density="densely", cytoplasm_vacuole="no",
                       cytoplasm_texture="clear", cytoplasm_color="blue", granule_type="nil",
                       granule_color="nil", granularity="no"),
    "monocyte": dict(cell_size="big", cell_shape="irregular", nucleus_shape="irregular",
                     nc_ratio="low", chromatin_density="loosely", cytoplasm_vacuole="yes",
                     cytoplasm_texture="frosted", cytoplasm_color="blue", granule_type="nil",
                     granule_color="nil", granularity="no"),
}

DOMAINS = {
    "a": {"background": (0.96, 0.90, 0.92), "noise": 0.02},
    "b": {"background": (0.88, 0.93, 0.97), "noise": 0.035},
}

CYTOPLASM_RGB = {"light_blue": (0.66, 0.76, 0.96), "blue": (0.60, 0.72, 0.93),
                 "purple_blue": (0.74, 0.68, 0.92)}
GRANULE_RGB = {"nil": (0.42, 0.42, 0.42), "pink": (0.90, 0.50, 0.62),
               "red": (0.85, 0.22, 0.22), "purple": (0.45, 0.10, 0.33)}
NUCLEUS_RGB = (0.32, 0.16, 0.55)
VACUOLE_RGB = (0.97, 0.97, 0.99)

BIG_RADIUS = (19.0, 22.5)
SMALL_RADIUS = (11.5, 14.5)
NC_HIGH = (0.55, 0.65)
NC_LOW = (0.17, 0.27)
CENTER_JITTER = 3.0


@dataclass
class SynthConfig:
    image_size: int = 64
    per_class: int = 100
    seed: int = 7
    attribute_noise: float = 0.05
    domain: str = "a"
    class_names: tuple = WBC_CLASSES
    recipes: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_RECIPES.items()})

    def __post_init__(self):
        schema = AttributeSchema.default()
        for cname in self.class_names:
            recipe = self.recipes.get(cname)
            if recipe is None:
                raise ValueError(f"no attribute recipe for class {cname!r}")
            missing = [a for a in schema.names if a not in recipe]
            if missing:
                raise ValueError(f"recipe for {cname!r} is missing attributes {missing}")
            schema.encode([recipe[a] for a in schema.names])
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")


# rendering -----------------------------------------------------------------
def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _blob(yy, xx, cy, cx, r, amps, phases):
    """Star-shaped region whose radius is modulated by a few harmonics."""
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    rad = np.ones_like(theta)
    for k, (a, ph) in enumerate(zip(amps, phases), start=2):
        rad = rad + a * np.sin(k * theta + ph)
    return dy * dy + dx * dx <= (r * rad) ** 2


def _nucleus_mask(shape: str, yy, xx, cy, cx, scale, geom) -> np.ndarray:
    if shape == "unsegmented_round":
        return _disk(yy, xx, cy + geom["off"][0], cx + geom["off"][1], scale)
    if shape == "irregular":
        return _blob(yy, xx, cy + geom["off"][0], cx + geom["off"][1], scale,
                     (0.0, 0.22, 0.10), geom["phases"])
    n_lobes = 2 if shape == "segmented_bilobed" else 4
    lobe_r = scale / np.sqrt(n_lobes)
    angle = geom["angle"]
    mask = np.zeros(yy.shape, dtype=bool)
    # lobes sit on an arc through the centre, chained by thin bridges
    spread = 1.7 * lobe_r
    centers = []
    for i in range(n_lobes):
        t = i - (n_lobes - 1) / 2.0
        a = angle + 0.5 * t * (n_lobes > 2)
        centers.append((cy + t * spread * np.sin(a), cx + t * spread * np.cos(a)))
    for (ly, lx) in centers:
        mask |= _disk(yy, xx, ly, lx, lobe_r)
    for (y0, x0), (y1, x1) in zip(centers, centers[1:]):
        for s in np.linspace(0, 1, 9):
            mask |= _disk(yy, xx, y0 + s * (y1 - y0), x0 + s * (x1 - x0), 0.8)
    return mask


def _fit_nucleus(shape, yy, xx, cy, cx, cell, target_area, geom, r_cell) -> np.ndarray:
    """Bisection on the nucleus scale so its area inside the cell hits the target."""
    lo, hi = 0.05 * r_cell, 1.5 * r_cell
    best = None
    for _ in range(22):
        mid = 0.5 * (lo + hi)
        m = _nucleus_mask(shape, yy, xx, cy, cx, mid, geom) & cell
        best = m
        if m.sum() < target_area:
            lo = mid
        else:
            hi = mid
    return best


def render_cell(attrs: dict, seed: int, size: int = 64, domain: str = "a") -> np.ndarray:
    """Render one cell as an HxWx3 uint8 image from attribute category names."""
    rng = np.random.default_rng(seed)
    dom = DOMAINS[domain]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = dom["background"]

    cy = size / 2.0 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)
    cx = size / 2.0 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)
    r_cell = rng.uniform(*(BIG_RADIUS if attrs["cell_size"] == "big" else SMALL_RADIUS))
    if attrs["cell_shape"] == "round":
        cell = _blob(yy, xx, cy, cx, r_cell, (0.03, 0.0, 0.0), rng.uniform(0, 2 * np.pi, 3))
    else:
        cell = _blob(yy, xx, cy, cx, r_cell, (0.0, 0.13, 0.0, 0.07), rng.uniform(0, 2 * np.pi, 4))

    cyto = np.array(CYTOPLASM_RGB[attrs["cytoplasm_color"]])
    img[cell] = cyto
    if attrs["cytoplasm_texture"] == "frosted":
        # frosting only lightens, so it never reads as granules
        grain = np.abs(rng.normal(0.0, 0.045, (size // 2, size // 2)))
        grain = np.kron(grain, np.ones((2, 2)))[:size, :size]
        img[cell] += grain[cell][:, None] * np.array([1.0, 1.0, 0.6])

    ratio = rng.uniform(*(NC_HIGH if attrs["nc_ratio"] == "high" else NC_LOW))
    geom = {"off": rng.uniform(-0.12, 0.12, 2) * r_cell * (attrs["nc_ratio"] == "low"),
            "phases": rng.uniform(0, 2 * np.pi, 3), "angle": rng.uniform(0, np.pi)}
    nucleus = _fit_nucleus(attrs["nucleus_shape"], yy, xx, cy, cx, cell, ratio * cell.sum(), geom, r_cell)
    shade = 0.72 if attrs["chromatin_density"] == "densely" else 1.0
    nuc = np.array(NUCLEUS_RGB) * shade
    img[nucleus] = nuc
    if attrs["chromatin_density"] == "loosely":
        mottle = rng.uniform(-0.10, 0.10, (size, size))
        img[nucleus] += (mottle[nucleus] * 0.6)[:, None]

    cytoplasm_only = cell & ~nucleus
    if attrs["cytoplasm_vacuole"] == "yes":
        placed = 0
        for _ in range(40):
            if placed >= 5:
                break
            vy = cy + rng.uniform(-r_cell, r_cell)
            vx = cx + rng.uniform(-r_cell, r_cell)
            vr = rng.uniform(1.3, 2.2)
            hole = _disk(yy, xx, vy, vx, vr)
            if hole.sum() and (hole & cytoplasm_only).sum() == hole.sum():
                img[hole] = VACUOLE_RGB
                placed += 1

    if attrs["granularity"] == "yes":
        coarse = attrs["granule_type"] == "round"
        g_r = 1.5 if coarse else 0.75
        density = 0.020 if coarse else 0.045
        colour = np.array(GRANULE_RGB[attrs["granule_color"]])
        # granules sit in the cytoplasm so a large nucleus cannot hide them
        ys, xs = np.nonzero(cytoplasm_only)
        count = min(len(ys), max(12, int(density * cell.sum())))
        picks = rng.choice(len(ys), size=count, replace=False)
        for p in picks:
            dot = _disk(yy, xx, ys[p] + rng.uniform(-0.3, 0.3), xs[p] + rng.uniform(-0.3, 0.3), g_r) & cytoplasm_only
            img[dot] = colour

    img += rng.normal(0.0, dom["noise"], img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# generation ----------------------------------------------------------------
def _sample_attrs(recipe: dict, schema: AttributeSchema, rng: np.random.Generator, noise: float) -> dict:
    attrs = dict(recipe)
    if rng.random() < noise:
        name = schema.names[int(rng.integers(len(schema)))]
        others = [c for c in schema.categories(name) if c != recipe[name]]
        attrs[name] = others[int(rng.integers(len(others)))]
    return attrs


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Render ``per_class`` images per class into ``out_dir`` with CSV, schema and render log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = AttributeSchema.default()
    schema.save(out / SCHEMA_JSON)
    class_seqs = np.random.SeedSequence(cfg.seed).spawn(len(cfg.class_names))
    render_log = []
    rows = []
    for ci, cname in enumerate(cfg.class_names):
        (out / cname).mkdir(exist_ok=True)
        rng = np.random.default_rng(class_seqs[ci])
        for i in range(cfg.per_class):
            attrs = _sample_attrs(cfg.recipes[cname], schema, rng, cfg.attribute_noise)
            seed = int(rng.integers(0, 2**63 - 1))
            fname = f"{cname}_{i:04d}.png"
            pixels = render_cell(attrs, seed, cfg.image_size, cfg.domain)
            Image.fromarray(pixels).save(out / cname / fname, optimize=False)
            rows.append([fname] + [attrs[a] for a in schema.names])
            render_log.append({"path": f"{cname}/{fname}", "seed": seed, "attributes": attrs})
    with open(out / ATTRIBUTE_CSV, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename"] + schema.names)
        writer.writerows(rows)
    cfg_json = asdict(cfg)
    cfg_json["class_names"] = list(cfg.class_names)
    (out / SYNTH_JSON).write_text(json.dumps({"config": cfg_json, "samples": render_log}, indent=1) + "\n",
                                  encoding="utf-8")
    return load_dataset(out, schema, cfg.class_names)


def rerender(dataset_dir, path: str) -> np.ndarray:
    """Re-render a generated sample from its logged parameters."""
    log = json.loads((Path(dataset_dir) / SYNTH_JSON).read_text(encoding="utf-8"))
    cfg = log["config"]
    for s in log["samples"]:
        if s["path"] == path:
            return render_cell(s["attributes"], s["seed"], cfg["image_size"], cfg["domain"])
    raise KeyError(path)


# measurement oracle --------------------------------------------------------
@dataclass
class CellMeasurement:
    radius: float
    granule_pixels: int
    nc_ratio: float

    def categories(self) -> dict:
        return {
            "cell_size": "big" if self.radius > 16.5 else "small",
            "granularity": "yes" if self.granule_pixels >= 15 else "no",
            "nc_ratio": "high" if self.nc_ratio > 0.40 else "low",
        }


def measure_cell(pixels: np.ndarray) -> CellMeasurement:
    """Estimate cell radius, granule pixel count and N/C area ratio from RGB pixels alone."""
    from scipy import ndimage

    x = pixels.astype(np.float64) / 255.0
    border = np.concatenate([x[0], x[-1], x[:, 0], x[:, -1]])
    bg = np.median(border, axis=0)
    smooth = ndimage.uniform_filter(x, size=(3, 3, 1))
    diff = np.sqrt(((smooth - bg) ** 2).sum(axis=-1))
    cell = ndimage.binary_opening(diff > 0.10, iterations=1)
    labels, n = ndimage.label(cell)
    if n == 0:
        return CellMeasurement(0.0, 0, 0.0)
    sizes = ndimage.sum(cell, labels, range(1, n + 1))
    cell = ndimage.binary_fill_holes(labels == (1 + int(np.argmax(sizes))))
    area = cell.sum()
    r, b = x[..., 0], x[..., 2]
    bright = x.mean(axis=-1)
    nucleus_px = cell & (b > r + 0.04) & (bright < 0.5)
    nucleus = ndimage.binary_fill_holes(ndimage.binary_closing(nucleus_px, iterations=1)) & cell
    nucleus = ndimage.binary_opening(nucleus, iterations=1)
    cyto = cell & ~ndimage.binary_dilation(nucleus, iterations=1)
    ref = np.median(bright[cyto]) if cyto.any() else 1.0
    granules = cyto & (bright < ref - 0.09) & ~nucleus_px
    return CellMeasurement(float(np.sqrt(area / np.pi)), int(granules.sum()), float(nucleus.sum() / area))
