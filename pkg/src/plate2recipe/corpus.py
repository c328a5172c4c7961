"""Recipe corpus ingestion: records, ingredient vocabulary, set encoding, images.

The on-disk layout mirrors the layered Recipe1M-style export documented in the
README: ``layer1.json`` (recipe metadata), ``layer2.json`` (id -> image
filenames), and an ``images/`` directory next to them. A three-record fixture
lives under ``tests/fixtures/tiny_corpus``.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

# Aliases accepted in the metadata "partition" field.
SPLIT_ALIASES = {
    "train": "train",
    "val": "dev",
    "valid": "dev",
    "validation": "dev",
    "dev": "dev",
    "test": "test",
}

# Plural folding, applied to the last word of a name. First match wins; the
# stem must keep at least three characters.
_PLURAL_SUFFIXES = (
    ("ies", "y"),
    ("oes", "o"),
    ("ches", "ch"),
    ("shes", "sh"),
    ("sses", "ss"),
    ("xes", "x"),
    ("s", ""),
)

_WHITESPACE_RE = re.compile(r"\s+")


def canonicalize_ingredient(name: str) -> str:
    """Normalize an ingredient name: lowercase, trim, collapse whitespace,
    and fold a plural suffix on the last word."""
    text = _WHITESPACE_RE.sub(" ", name.strip().lower())
    if not text:
        return ""
    words = text.split(" ")
    last = words[-1]
    if not last.endswith("ss"):
        for suffix, repl in _PLURAL_SUFFIXES:
            if last.endswith(suffix) and len(last) - len(suffix) >= 3:
                words[-1] = last[: len(last) - len(suffix)] + repl
                break
    return " ".join(words)


@dataclass(frozen=True)
class RecipeRecord:
    """One recipe sample. ``ingredients`` holds canonical, duplicate-free names."""

    id: str
    title: str
    ingredients: tuple[str, ...]
    ingredients_with_quantity: tuple[str, ...]
    instructions: tuple[str, ...]
    image_paths: tuple[str, ...]
    split: str


class IngredientVocabulary:
    """Ordered dictionary of canonical ingredient names with id lookup.

    The reserved end-of-sequence id is ``len(names)`` (one past the last
    ingredient id).
    """

    def __init__(self, names: list[str] | tuple[str, ...]):
        canonical = [canonicalize_ingredient(n) for n in names]
        if any(not n for n in canonical):
            raise ConfigError("vocabulary contains an empty name after canonicalization")
        if len(set(canonical)) != len(canonical):
            raise ConfigError("vocabulary names are not unique after canonicalization")
        self.names: tuple[str, ...] = tuple(canonical)
        self.index: dict[str, int] = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def eos_id(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return canonicalize_ingredient(name) in self.index

    def id_of(self, name: str) -> int:
        key = canonicalize_ingredient(name)
        if key not in self.index:
            raise KeyError(f"ingredient not in vocabulary: {name!r}")
        return self.index[key]

    def name_of(self, ingredient_id: int) -> str:
        if not 0 <= ingredient_id < len(self.names):
            raise IndexError(f"ingredient id out of range: {ingredient_id}")
        return self.names[ingredient_id]


@dataclass
class FilterReport:
    """Counts of records kept and dropped while loading a corpus."""

    loaded: int = 0
    dropped_no_image: int = 0
    dropped_corrupt: int = 0
    dropped_empty_fields: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "loaded": self.loaded,
            "dropped_no_image": self.dropped_no_image,
            "dropped_corrupt": self.dropped_corrupt,
            "dropped_empty_fields": self.dropped_empty_fields,
        }


@dataclass
class Dataset:
    """Immutable-by-convention container of records plus the active vocabulary.

    ``image_store`` holds in-memory RGB arrays (values in [0, 1]) keyed by the
    pseudo-path recorded in ``RecipeRecord.image_paths``; synthetic corpora use
    it so tests never need the filesystem.
    """

    records: list[RecipeRecord]
    vocabulary: IngredientVocabulary | None = None
    image_store: dict[str, np.ndarray] = field(default_factory=dict)
    filter_report: FilterReport | None = None

    def __len__(self) -> int:
        return len(self.records)

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for rec in self.records:
            counts[rec.split] += 1
        return counts

    def records_for(self, split: str) -> list[RecipeRecord]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]


def build_ingredient_vocabulary(dataset: Dataset, max_size: int) -> IngredientVocabulary:
    """Vocabulary of the ``max_size`` most frequent canonical names.

    Ordering is frequency-descending with lexicographic tie-break, so two
    builds over the same dataset assign identical ids.
    """
    if max_size < 1:
        raise ConfigError(f"max_size must be >= 1, got {max_size}")
    if not dataset.records:
        raise ConfigError("cannot build a vocabulary from an empty dataset")
    counts: Counter[str] = Counter()
    for rec in dataset.records:
        counts.update(canonicalize_ingredient(n) for n in rec.ingredients)
    counts.pop("", None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return IngredientVocabulary([name for name, _ in ranked[:max_size]])


def encode_ingredient_set(ingredients: list[str] | tuple[str, ...],
                          vocab: IngredientVocabulary) -> np.ndarray:
    """Binary vector of length N with 1s at the ids of the given names.

    Out-of-vocabulary names are dropped with a warning counter; duplicates
    collapse (set semantics).
    """
    bits = np.zeros(len(vocab), dtype=np.uint8)
    oov = 0
    for name in ingredients:
        key = canonicalize_ingredient(name)
        idx = vocab.index.get(key)
        if idx is None:
            oov += 1
        else:
            bits[idx] = 1
    if oov:
        logger.warning("encode_ingredient_set: dropped %d out-of-vocabulary name(s)", oov)
    return bits


def decode_ingredient_vector(vector: np.ndarray, vocab: IngredientVocabulary) -> list[str]:
    """Names whose bits are set, in canonical id order. Inverse of encoding."""
    vector = np.asarray(vector)
    if vector.shape != (len(vocab),):
        raise ConfigError(
            f"vector length {vector.shape} does not match vocabulary size {len(vocab)}")
    return [vocab.names[i] for i in np.flatnonzero(vector)]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageNormalization:
    """Per-channel affine normalization constants applied after the [0, 1] rescale."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


DEFAULT_NORMALIZATION = ImageNormalization()


def normalize_image(rgb01: np.ndarray, normalization: ImageNormalization = DEFAULT_NORMALIZATION) -> np.ndarray:
    """Apply the per-channel affine to an H x W x 3 array of [0, 1] values."""
    mean = np.asarray(normalization.mean, dtype=np.float32)
    std = np.asarray(normalization.std, dtype=np.float32)
    return ((rgb01.astype(np.float32) - mean) / std).astype(np.float32)


def preprocess_image(path: str | Path, side: int,
                     normalization: ImageNormalization = DEFAULT_NORMALIZATION) -> np.ndarray:
    """Load, resize to side x side x 3, rescale to [0, 1], and normalize.

    Deterministic for a fixed file; raises DataError on unreadable input.
    """
    if side < 1:
        raise ConfigError(f"image side must be >= 1, got {side}")
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (side, side):
                rgb = rgb.resize((side, side), Image.BILINEAR)
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite pixel values in {path}")
    return normalize_image(arr, normalization)


def record_image(dataset: Dataset, record: RecipeRecord, side: int,
                 normalization: ImageNormalization = DEFAULT_NORMALIZATION) -> np.ndarray:
    """Normalized image tensor for a record's first image.

    In-memory arrays from ``dataset.image_store`` take precedence over disk.
    """
    if not record.image_paths:
        raise DataError(f"record {record.id} has no image")
    key = record.image_paths[0]
    stored = dataset.image_store.get(key)
    if stored is not None:
        if stored.shape[0] != side or stored.shape[1] != side:
            img = Image.fromarray((stored * 255.0 + 0.5).astype(np.uint8))
            stored = np.asarray(img.resize((side, side), Image.BILINEAR), dtype=np.float32) / 255.0
        return normalize_image(stored, normalization)
    return preprocess_image(key, side, normalization)


# ---------------------------------------------------------------------------
# Layered corpus loading
# ---------------------------------------------------------------------------

def _as_text_list(raw) -> list[str]:
    """Accept ["text", ...] or [{"text": ...}, ...] and return stripped strings."""
    items: list[str] = []
    if isinstance(raw, str):
        raw = [raw]
    if not isinstance(raw, list):
        return items
    for entry in raw:
        if isinstance(entry, dict):
            text = str(entry.get("text", "")).strip()
        else:
            text = str(entry).strip()
        if text:
            items.append(text)
    return items


def _read_json(path: Path):
    try:
        with path.open("r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"metadata file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable metadata {path} (line {exc.lineno}): {exc.msg}") from exc


def _image_readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (OSError, UnidentifiedImageError, ValueError):
        return False


def load_recipe_corpus(path: str | Path,
                       splits: dict[str, str] | None = None) -> Dataset:
    """Load a layered corpus directory, keeping only complete records.

    Records with empty title/ingredients/instructions, without any image, or
    whose images are all unreadable are dropped and counted in the attached
    ``FilterReport``. ``splits`` maps metadata partition values onto
    {train, dev, test} and defaults to the Recipe1M aliases.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"corpus directory not found: {root}")
    split_map = dict(SPLIT_ALIASES if splits is None else splits)

    layer1 = _read_json(root / "layer1.json")
    if not isinstance(layer1, list):
        raise DataError(f"layer1.json must contain a JSON array, got {type(layer1).__name__}")

    image_index: dict[str, list[str]] = {}
    layer2_path = root / "layer2.json"
    if layer2_path.exists():
        layer2 = _read_json(layer2_path)
        for entry in layer2:
            rec_id = str(entry.get("id", ""))
            names = [str(img.get("id", "")) for img in entry.get("images", []) if img.get("id")]
            if rec_id:
                image_index[rec_id] = names
    image_dir = root / "images"
    if image_index and not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")

    report = FilterReport()
    records: list[RecipeRecord] = []
    seen_ids: set[str] = set()
    for pos, entry in enumerate(layer1):
        if not isinstance(entry, dict):
            raise DataError(f"layer1.json record {pos} is not an object")
        rec_id = str(entry.get("id", "")).strip()
        if not rec_id:
            raise DataError(f"layer1.json record {pos} is missing an id")
        if rec_id in seen_ids:
            raise DataError(f"duplicate record id {rec_id!r} in layer1.json")
        seen_ids.add(rec_id)

        title = str(entry.get("title", "")).strip()
        ingredients = _as_text_list(entry.get("ingredients"))
        instructions = _as_text_list(entry.get("instructions"))
        quantities = _as_text_list(entry.get("ingredients_with_quantity"))
        if not title or not ingredients or not instructions:
            report.dropped_empty_fields += 1
            continue

        filenames = image_index.get(rec_id, [])
        if not filenames:
            report.dropped_no_image += 1
            continue
        existing = [image_dir / name for name in filenames if (image_dir / name).is_file()]
        if not existing:
            report.dropped_no_image += 1
            continue
        readable = [p for p in existing if _image_readable(p)]
        if not readable:
            report.dropped_corrupt += 1
            continue

        partition = str(entry.get("partition", "train")).strip().lower()
        split = split_map.get(partition)
        if split is None:
            raise DataError(f"record {rec_id}: unknown partition {partition!r}")

        canonical: list[str] = []
        for name in ingredients:
            canon = canonicalize_ingredient(name)
            if canon and canon not in canonical:
                canonical.append(canon)
        records.append(RecipeRecord(
            id=rec_id,
            title=_WHITESPACE_RE.sub(" ", title.lower()),
            ingredients=tuple(canonical),
            ingredients_with_quantity=tuple(quantities),
            instructions=tuple(instructions),
            image_paths=tuple(str(p) for p in readable),
            split=split,
        ))
        report.loaded += 1

    return Dataset(records=records, filter_report=report)
