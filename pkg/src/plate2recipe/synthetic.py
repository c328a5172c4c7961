"""Deterministic toy corpus: each ingredient renders as a colored glyph patch.

Every ingredient id owns a fixed grid cell and a distinct color, so the image
fully determines the ingredient set and a trained model can recover it.
Titles, quantities, and instruction steps are templated functions of the set,
which keeps (image -> text) mappings consistent across records.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import Dataset, IngredientVocabulary, RecipeRecord
from .errors import ConfigError

BACKGROUND = 0.12

_BASE_NAMES = [
    "salt", "pepper", "basil", "onion", "garlic", "tomato", "flour", "sugar",
    "butter", "milk", "egg", "rice", "bean", "corn", "chili", "ginger",
    "lemon", "honey", "thyme", "olive", "carrot", "celery", "paprika", "cumin",
    "dill", "mint", "cheese", "yogurt", "oat", "pea", "kale", "leek",
    "fennel", "sage", "cocoa", "vanilla", "walnut", "almond", "apple", "pear",
    "plum", "fig", "date", "lime", "mango", "squash", "turnip", "radish",
]

_DISHES = ["stew", "salad", "bake", "soup", "bowl", "skillet", "roast", "pie"]

_QUANTITIES = ["1 cup", "2 tablespoons", "3 teaspoons", "250 grams", "a pinch", "half a cup"]


@dataclass(frozen=True)
class SyntheticConfig:
    n_records: int
    vocab_size: int
    image_side: int = 64
    max_ingredients: int = 5


def synthetic_ingredient_names(vocab_size: int) -> list[str]:
    names = list(_BASE_NAMES[:vocab_size])
    for i in range(len(names), vocab_size):
        names.append(f"spice{i:03d}")
    return names


def glyph_palette(vocab_size: int) -> np.ndarray:
    """Distinct RGB color per ingredient id, values in [0, 1]."""
    colors = []
    for i in range(vocab_size):
        hue = i / max(vocab_size, 1)
        value = 0.95 if i % 2 == 0 else 0.65
        colors.append(colorsys.hsv_to_rgb(hue, 0.9, value))
    return np.asarray(colors, dtype=np.float32)


def _grid(vocab_size: int, side: int) -> tuple[int, int]:
    g = math.ceil(math.sqrt(vocab_size))
    cell = side // g
    if cell < 2:
        raise ConfigError(
            f"image side {side} too small for {vocab_size} glyph cells")
    return g, cell


def render_glyph_image(ingredient_ids: list[int] | np.ndarray, vocab_size: int,
                       side: int) -> np.ndarray:
    """Render the set as color patches on a dark background; [0, 1] floats."""
    grid, cell = _grid(vocab_size, side)
    palette = glyph_palette(vocab_size)
    img = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
    for idx in ingredient_ids:
        row, col = divmod(int(idx), grid)
        r0, c0 = row * cell, col * cell
        img[r0 + 1:r0 + cell - 1, c0 + 1:c0 + cell - 1] = palette[int(idx)]
    return img


def detect_glyphs(image: np.ndarray, vocab_size: int, tolerance: float = 0.05) -> list[int]:
    """Recover the ingredient ids from a rendered image by sampling cell centers."""
    side = image.shape[0]
    grid, cell = _grid(vocab_size, side)
    palette = glyph_palette(vocab_size)
    found = []
    for idx in range(vocab_size):
        row, col = divmod(idx, grid)
        center = image[row * cell + cell // 2, col * cell + cell // 2]
        if np.max(np.abs(center - palette[idx])) < tolerance:
            found.append(idx)
    return found


def _title_for(ids: list[int], names: list[str]) -> str:
    dish = _DISHES[sum(ids) % len(_DISHES)]
    if len(ids) >= 2:
        return f"{names[ids[0]]} and {names[ids[1]]} {dish}"
    return f"{names[ids[0]]} {dish}"


def _instructions_for(ids: list[int], names: list[str]) -> list[str]:
    listed = ", ".join(names[i] for i in ids)
    dish = _DISHES[sum(ids) % len(_DISHES)]
    minutes = 10 + (sum(ids) % 4) * 5
    return [
        f"Combine {listed} in a bowl.",
        f"Cook the {dish} for {minutes} minutes.",
        "Serve warm.",
    ]


def _quantities_for(ids: list[int], names: list[str]) -> list[str]:
    return [f"{_QUANTITIES[i % len(_QUANTITIES)]} of {names[i]}" for i in ids]


def _split_for(position: int) -> str:
    # Fixed 8/1/1 cycle keeps all splits populated for n >= 10.
    r = position % 10
    if r < 8:
        return "train"
    return "dev" if r == 8 else "test"


def generate_synthetic_corpus(config: SyntheticConfig, seed: int) -> Dataset:
    """Build a fully in-memory toy dataset; bit-identical for a fixed seed."""
    if config.max_ingredients < 1:
        raise ConfigError("max_ingredients must be >= 1")
    if config.vocab_size < config.max_ingredients:
        raise ConfigError("vocab_size must be >= max_ingredients")
    names = synthetic_ingredient_names(config.vocab_size)
    vocab = IngredientVocabulary(names)
    rng = np.random.default_rng(seed)

    records: list[RecipeRecord] = []
    store: dict[str, np.ndarray] = {}
    for pos in range(config.n_records):
        k = int(rng.integers(1, config.max_ingredients + 1))
        ids = sorted(int(i) for i in rng.choice(config.vocab_size, size=k, replace=False))
        rec_id = f"synth-{pos:04d}"
        key = f"synthetic/{rec_id}.png"
        store[key] = render_glyph_image(ids, config.vocab_size, config.image_side)
        records.append(RecipeRecord(
            id=rec_id,
            title=_title_for(ids, names),
            ingredients=tuple(names[i] for i in ids),
            ingredients_with_quantity=tuple(_quantities_for(ids, names)),
            instructions=tuple(_instructions_for(ids, names)),
            image_paths=(key,),
            split=_split_for(pos),
        ))
    return Dataset(records=records, vocabulary=vocab, image_store=store)


_SPLIT_TO_PARTITION = {"train": "train", "dev": "val", "test": "test"}


def write_corpus(dataset: Dataset, out_dir: str | Path) -> Path:
    """Persist a dataset in the layered corpus layout readable by
    ``load_recipe_corpus``. In-memory images are written as PNG files."""
    root = Path(out_dir)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    layer1 = []
    layer2 = []
    for rec in dataset.records:
        filenames = []
        for i, key in enumerate(rec.image_paths):
            stored = dataset.image_store.get(key)
            filename = f"{rec.id}_{i}.png"
            if stored is not None:
                arr = (np.clip(stored, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
                Image.fromarray(arr).save(image_dir / filename)
            else:
                with Image.open(key) as img:
                    img.convert("RGB").save(image_dir / filename)
            filenames.append(filename)
        layer1.append({
            "id": rec.id,
            "title": rec.title,
            "ingredients": list(rec.ingredients),
            "ingredients_with_quantity": list(rec.ingredients_with_quantity),
            "instructions": list(rec.instructions),
            "partition": _SPLIT_TO_PARTITION[rec.split],
        })
        layer2.append({"id": rec.id, "images": [{"id": f} for f in filenames]})

    (root / "layer1.json").write_text(json.dumps(layer1, indent=2), encoding="utf-8")
    (root / "layer2.json").write_text(json.dumps(layer2, indent=2), encoding="utf-8")
    return root
