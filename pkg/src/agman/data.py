"""Datasets, manifests, attribute encoding and triplet sampling.

A dataset is a list of :class:`ImageRecord` objects. Each record carries a
partial label map ``attribute index -> sub-class index`` and a pixel source,
either an image file on disk or an in-memory tensor produced by
:func:`generate_synthetic`.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    """Malformed manifest line or label out of range."""


class SamplingError(ValueError):
    """The split cannot produce a valid triplet for the requested attribute."""


@dataclass(frozen=True)
class AttributeSpace:
    names: tuple[str, ...]
    sub_class_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "sub_class_counts", tuple(int(c) for c in self.sub_class_counts))
        if len(self.names) < 1:
            raise ValueError("an attribute space needs at least one attribute")
        if len(self.names) != len(self.sub_class_counts):
            raise ValueError(
                f"{len(self.names)} attribute names but {len(self.sub_class_counts)} sub-class counts"
            )
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate attribute names in {self.names}")
        for name, count in zip(self.names, self.sub_class_counts):
            if count < 2:
                raise ValueError(f"attribute {name!r} has {count} sub-classes; at least 2 are required")

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}; valid names: {', '.join(self.names)}") from None

    def check_index(self, attribute: int) -> int:
        if not 0 <= attribute < self.n:
            raise IndexError(f"attribute index {attribute} out of range for n={self.n}")
        return attribute

    def to_dict(self) -> dict:
        return {"names": list(self.names), "sub_class_counts": list(self.sub_class_counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpace":
        return cls(tuple(d["names"]), tuple(d["sub_class_counts"]))

    @classmethod
    def parse(cls, text: str) -> "AttributeSpace":
        """Parse ``"name:count,name:count"``."""
        names, counts = [], []
        for part in text.split(","):
            name, _, count = part.strip().partition(":")
            if not name or not count:
                raise ValueError(f"bad attribute spec {part!r}; expected name:count")
            names.append(name)
            counts.append(int(count))
        return cls(tuple(names), tuple(counts))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str | None = None
    labels: dict[int, int] = field(default_factory=dict)
    # in-memory pixels for synthetic records, [3, H, W] in [0, 1]
    pixels: torch.Tensor | None = field(default=None, compare=False, repr=False)
    is_query: bool | None = None

    def label(self, attribute: int) -> int | None:
        return self.labels.get(attribute)


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    attribute: int

    def to_dict(self) -> dict:
        return {"anchor": self.anchor, "positive": self.positive,
                "negative": self.negative, "attribute": self.attribute}


@dataclass
class DatasetSplit:
    records: list[ImageRecord]
    role: str = "train"
    query_ids: tuple[str, ...] = ()
    candidate_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ("train", "validation", "test"):
            raise ValueError(f"unknown split role {self.role!r}")
        self._by_id = {}
        for r in self.records:
            if r.id in self._by_id:
                raise ManifestError(f"duplicate record id {r.id!r}")
            self._by_id[r.id] = r
        overlap = set(self.query_ids) & set(self.candidate_ids)
        if overlap:
            raise ValueError(f"ids are both query and candidate: {sorted(overlap)[:5]}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, record_id: str) -> ImageRecord:
        return self._by_id[record_id]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._by_id

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def labeled_for(self, attribute: int) -> list[ImageRecord]:
        return [r for r in self.records if attribute in r.labels]

    def with_query_partition(self, query_fraction: float = 0.2, seed: int = 0) -> "DatasetSplit":
        """Return a copy with query/candidate ids assigned.

        Records carrying an explicit ``is_query`` flag keep it; the rest are
        split at random so that roughly ``query_fraction`` become queries.
        """
        if not 0.0 < query_fraction < 1.0:
            raise ValueError(f"query_fraction must lie in (0, 1), got {query_fraction}")
        rng = random.Random(seed)
        free = [r.id for r in self.records if r.is_query is None]
        rng.shuffle(free)
        n_query = int(round(query_fraction * len(free)))
        chosen = set(free[:n_query])
        queries = tuple(r.id for r in self.records if r.is_query or r.id in chosen)
        qset = set(queries)
        candidates = tuple(r.id for r in self.records if r.id not in qset)
        role = self.role if self.role != "train" else "test"
        return DatasetSplit(list(self.records), role, queries, candidates)


def encode_attribute(attribute: int, space: AttributeSpace) -> torch.Tensor:
    """One-hot vector of length ``space.n`` with a 1 at ``attribute``."""
    if not isinstance(attribute, (int, np.integer)) or not 0 <= attribute < space.n:
        raise IndexError(f"attribute index {attribute} out of range for n={space.n}")
    v = torch.zeros(space.n)
    v[int(attribute)] = 1.0
    return v


# -- manifests ---------------------------------------------------------------

def _parse_manifest_line(obj, lineno: int, space: AttributeSpace, base: Path) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    for key in ("id", "path", "labels"):
        if key not in obj:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise ManifestError(f"line {lineno}: id must be a non-empty string")
    if not isinstance(obj["labels"], dict):
        raise ManifestError(f"line {lineno}: labels must be an object")
    labels = {}
    for name, sub in obj["labels"].items():
        try:
            a = space.index(name)
        except KeyError as exc:
            raise ManifestError(f"line {lineno} (record {rid!r}): {exc.args[0]}") from None
        if not isinstance(sub, int) or isinstance(sub, bool):
            raise ManifestError(f"line {lineno} (record {rid!r}): sub-class for {name!r} must be an integer")
        if not 0 <= sub < space.sub_class_counts[a]:
            raise ManifestError(
                f"line {lineno} (record {rid!r}): sub-class {sub} out of range for attribute "
                f"{name!r} with {space.sub_class_counts[a]} sub-classes"
            )
        labels[a] = sub
    path = obj["path"]
    if path is not None and not Path(path).is_absolute():
        path = str(base / path)
    is_query = obj.get("query")
    if is_query is not None and not isinstance(is_query, bool):
        raise ManifestError(f"line {lineno} (record {rid!r}): query must be a boolean")
    return ImageRecord(rid, path, labels, is_query=is_query)


def load_manifest(path: str | Path, space: AttributeSpace, role: str = "train") -> DatasetSplit:
    """Read a JSON-lines manifest. Relative image paths resolve against the
    manifest's directory."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise ManifestError(f"line {lineno}: empty line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc.msg}") from None
            records.append(_parse_manifest_line(obj, lineno, space, path.parent))
    split = DatasetSplit(records, role)
    if any(r.is_query is not None for r in records):
        queries = tuple(r.id for r in records if r.is_query)
        split = DatasetSplit(records, role, queries, tuple(r.id for r in records if not r.is_query))
    return split


def save_manifest(split: DatasetSplit, path: str | Path, space: AttributeSpace) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in split.records:
            if r.path is None:
                raise ValueError(f"record {r.id!r} has no image path; write its pixels first")
            p = Path(r.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            obj = {"id": r.id, "path": p.as_posix(),
                   "labels": {space.names[a]: s for a, s in sorted(r.labels.items())}}
            if r.is_query is not None:
                obj["query"] = r.is_query
            fh.write(json.dumps(obj) + "\n")


def save_triplets(triplets: Iterable[Triplet], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict()) + "\n")


def load_triplets(path: str | Path, split: DatasetSplit | None = None,
                  space: AttributeSpace | None = None) -> list[Triplet]:
    triplets = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                t = Triplet(str(obj["anchor"]), str(obj["positive"]), str(obj["negative"]),
                            int(obj["attribute"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"triplet file line {lineno}: {exc}") from None
            if space is not None:
                space.check_index(t.attribute)
            if split is not None:
                check_triplet(t, split)
            triplets.append(t)
    return triplets


def check_triplet(t: Triplet, split: DatasetSplit) -> None:
    for rid in (t.anchor, t.positive, t.negative):
        if rid not in split:
            raise ManifestError(f"triplet references unknown record {rid!r}")
    la, lp, ln = (split[rid].label(t.attribute) for rid in (t.anchor, t.positive, t.negative))
    if la is None or lp is None or ln is None or la != lp or la == ln:
        raise ManifestError(f"invalid triplet {t}")


# -- triplet sampling --------------------------------------------------------

def sample_triplets(split: DatasetSplit, attribute: int, count: int, seed: int) -> list[Triplet]:
    """Draw ``count`` triplets for one attribute.

    The anchor sub-class is uniform over sub-classes with at least two
    members; anchor and positive are drawn from it without replacement and
    the negative uniformly from the members of all other sub-classes.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    groups: dict[int, list[str]] = {}
    for r in split.records:
        sub = r.labels.get(attribute)
        if sub is not None:
            groups.setdefault(sub, []).append(r.id)
    pos_classes = sorted(s for s, ids in groups.items() if len(ids) >= 2)
    if len(groups) < 2 or not pos_classes:
        raise SamplingError(
            f"attribute {attribute}: need a sub-class with 2 images and another non-empty sub-class "
            f"(found sizes {dict(sorted((s, len(v)) for s, v in groups.items()))})"
        )
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        sub = pos_classes[rng.randrange(len(pos_classes))]
        anchor, positive = rng.sample(groups[sub], 2)
        others = [rid for s, ids in sorted(groups.items()) if s != sub for rid in ids]
        negative = others[rng.randrange(len(others))]
        out.append(Triplet(anchor, positive, negative, attribute))
    return out


# -- synthetic data ----------------------------------------------------------

# Fixed colour palette for sub-classes; large sub-class counts cycle through
# it while the stripe frequency keeps them apart.
_PALETTE = np.array([
    [0.95, 0.20, 0.20], [0.20, 0.85, 0.25], [0.25, 0.35, 0.95], [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85], [0.15, 0.85, 0.85], [0.95, 0.55, 0.10], [0.55, 0.55, 0.55],
])


def synthetic_record_count(space: AttributeSpace, per_subclass: int) -> int:
    """Number of records :func:`generate_synthetic` produces: ``per_subclass``
    times the least common multiple of the sub-class counts."""
    return per_subclass * math.lcm(*space.sub_class_counts)


def _region(attribute: int, n: int, size: int) -> tuple[int, int, int, int]:
    g = max(2, math.ceil(math.sqrt(n)))
    cell = size // g
    row, col = divmod(attribute, g)
    return row * cell, col * cell, cell, cell


def _draw_pattern(img: np.ndarray, box, sub: int, phase: float) -> None:
    top, left, hgt, wid = box
    y = np.arange(hgt)[:, None]
    freq = 1 + sub // len(_PALETTE) + sub % 3
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * y / hgt + phase)
    colour = _PALETTE[sub % len(_PALETTE)]
    patch = 0.25 + 0.75 * stripes[None] * colour[:, None, None]
    img[:, top:top + hgt, left:left + wid] = np.broadcast_to(patch, (3, hgt, wid))


def generate_synthetic(space: AttributeSpace, per_subclass: int, image_size: int = 64,
                       seed: int = 0, role: str = "train", prefix: str = "syn") -> DatasetSplit:
    """Deterministic toy dataset whose pixels encode every attribute label.

    The image is tiled into a grid with one cell per attribute. The cell of
    attribute ``a`` shows horizontal stripes whose colour and frequency are
    set by the sub-class; every attribute uses the same pattern family, so
    which attribute a pattern belongs to is only recoverable from where it
    sits. The seed shifts stripe phases and adds low-amplitude noise.

    Labels are balanced: each attribute's sub-classes are dealt out evenly
    over :func:`synthetic_record_count` records and shuffled independently,
    so every (attribute, sub-class) cell holds at least ``per_subclass``
    records.
    """
    if per_subclass < 1:
        raise ValueError(f"per_subclass must be >= 1, got {per_subclass}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    total = synthetic_record_count(space, per_subclass)
    rng = np.random.default_rng(seed)
    columns = []
    for count in space.sub_class_counts:
        col = np.repeat(np.arange(count), total // count)
        rng.shuffle(col)
        columns.append(col)
    records = []
    width = len(str(total - 1))
    for i in range(total):
        labels = {a: int(columns[a][i]) for a in range(space.n)}
        img = np.full((3, image_size, image_size), 0.1)
        for a, sub in labels.items():
            _draw_pattern(img, _region(a, space.n, image_size), sub, rng.uniform(0, 2 * np.pi))
        img += rng.normal(0.0, 0.03, img.shape)
        pixels = torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))
        records.append(ImageRecord(f"{prefix}{i:0{width}d}", None, labels, pixels))
    return DatasetSplit(records, role)


def write_synthetic(split: DatasetSplit, space: AttributeSpace, out_dir: str | Path) -> Path:
    """Write PNG files plus ``manifest.jsonl`` and ``space.json``; returns the
    manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for r in split.records:
        arr = (r.pixels.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        p = img_dir / f"{r.id}.png"
        Image.fromarray(arr).save(p, format="PNG", optimize=False)
        written.append(ImageRecord(r.id, str(p), dict(r.labels), is_query=r.is_query))
    manifest = out_dir / "manifest.jsonl"
    save_manifest(DatasetSplit(written, split.role), manifest, space)
    (out_dir / "space.json").write_text(json.dumps(space.to_dict(), indent=2) + "\n")
    return manifest


# -- pixels ------------------------------------------------------------------

def read_image(path: str | Path, image_size: int) -> torch.Tensor:
    """Decode an image file (or ``.npy`` array) to a [3, S, S] float tensor in [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        t = torch.from_numpy(arr)
        if t.shape != (3, image_size, image_size):
            raise ValueError(f"{path}: expected shape (3, {image_size}, {image_size}), got {tuple(t.shape)}")
        return t
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


class ImageStore:
    """Caches decoded pixel tensors by record id."""

    def __init__(self, split: DatasetSplit, image_size: int, workers: int = 1):
        self.split = split
        self.image_size = image_size
        self.workers = max(1, workers)
        self._cache: dict[str, torch.Tensor] = {}

    def _load(self, rid: str) -> torch.Tensor:
        r = self.split[rid]
        if r.pixels is not None:
            t = r.pixels
        elif r.path is not None:
            t = read_image(r.path, self.image_size)
        else:
            raise ValueError(f"record {rid!r} has neither pixels nor a path")
        if t.shape != (3, self.image_size, self.image_size):
            raise ValueError(f"record {rid!r}: expected [3, {self.image_size}, {self.image_size}], "
                             f"got {list(t.shape)}")
        if not torch.isfinite(t).all():
            raise ValueError(f"record {rid!r}: non-finite pixel values")
        return t

    def get(self, ids: Sequence[str]) -> torch.Tensor:
        missing = [rid for rid in dict.fromkeys(ids) if rid not in self._cache]
        if missing:
            if self.workers > 1 and len(missing) > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(self.workers) as pool:
                    loaded = list(pool.map(self._load, missing))
            else:
                loaded = [self._load(rid) for rid in missing]
            self._cache.update(zip(missing, loaded))
        return torch.stack([self._cache[rid] for rid in ids])
