"""Morphological attribute schema and the default WBC class list."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

WBC_CLASSES = ("basophil", "eosinophil", "lymphocyte", "monocyte", "neutrophil")

# Column order of attributes.csv. Cell size and N/C ratio are binary as
# described for WBCAtt; the other category sets are placeholders that a
# schema.json can override.
DEFAULT_ATTRIBUTES = (
    ("cell_size", ("big", "small")),
    ("cell_shape", ("round", "irregular")),
    ("nucleus_shape", ("unsegmented_round", "segmented_bilobed", "segmented_multilobed", "irregular")),
    ("nc_ratio", ("high", "low")),
    ("chromatin_density", ("densely", "loosely")),
    ("cytoplasm_vacuole", ("no", "yes")),
    ("cytoplasm_texture", ("clear", "frosted")),
    ("cytoplasm_color", ("light_blue", "blue", "purple_blue")),
    ("granule_type", ("nil", "small", "round")),
    ("granule_color", ("nil", "pink", "red", "purple")),
    ("granularity", ("no", "yes")),
)

DISPLAY_NAMES = {
    "cell_size": "Cell size",
    "cell_shape": "Cell shape",
    "nucleus_shape": "Nucleus shape",
    "nc_ratio": "Nuclear Cytoplasmic ratio",
    "chromatin_density": "Chromatin density",
    "cytoplasm_vacuole": "Cytoplasm vacuole",
    "cytoplasm_texture": "Cytoplasm texture",
    "cytoplasm_color": "Cytoplasm colour",
    "granule_type": "Granule type",
    "granule_color": "Granule colour",
    "granularity": "Granularity",
}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple  # ((name, (category, ...)), ...)

    def __post_init__(self):
        attrs = tuple((str(n), tuple(str(c) for c in cats)) for n, cats in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        names = [n for n, _ in attrs]
        if not names:
            raise SchemaError("schema has no attributes")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        for name, cats in attrs:
            if len(cats) < 2:
                raise SchemaError(f"attribute {name!r} needs at least 2 categories")
            if len(set(cats)) != len(cats):
                raise SchemaError(f"attribute {name!r} has duplicate categories")
            for c in cats:
                if "," in c or not c:
                    raise SchemaError(f"category {c!r} of {name!r} is not CSV-safe")

    @classmethod
    def default(cls) -> "AttributeSchema":
        return cls(DEFAULT_ATTRIBUTES)

    @property
    def names(self) -> list:
        return [n for n, _ in self.attributes]

    @property
    def sizes(self) -> list:
        return [len(c) for _, c in self.attributes]

    def __len__(self) -> int:
        return len(self.attributes)

    def categories(self, attr: str) -> tuple:
        return dict(self.attributes)[attr]

    def display_name(self, attr: str) -> str:
        return DISPLAY_NAMES.get(attr, attr.replace("_", " ").capitalize())

    def encode(self, values: Sequence[str]) -> list:
        if len(values) != len(self):
            raise SchemaError(f"expected {len(self)} attribute values, got {len(values)}")
        out = []
        for (name, cats), v in zip(self.attributes, values):
            if v not in cats:
                raise SchemaError(f"unknown category {v!r} for attribute {name!r}")
            out.append(cats.index(v))
        return out

    def decode(self, indices: Sequence[int]) -> list:
        return [cats[int(i)] for (_, cats), i in zip(self.attributes, indices)]

    def to_json(self) -> dict:
        return {"attributes": [{"name": n, "categories": list(c)} for n, c in self.attributes]}

    @classmethod
    def from_json(cls, obj: dict) -> "AttributeSchema":
        try:
            return cls(tuple((a["name"], tuple(a["categories"])) for a in obj["attributes"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AttributeSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
