"""Recipe title generation with a trainable toy captioner.

The built-in backbone is a small convolutional encoder feeding an
autoregressive character decoder, so the module trains and tests without any
pretrained download. Alternative captioning backbones can be plugged in via
``register_captioner_backend``. Epoch selection during fine-tuning uses mean
LCS similarity on the dev split rather than the training loss.
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import Dataset, ImageNormalization, record_image
from .encoder import image_to_tensor
from .errors import CheckpointError, ConfigError
from .evalmetrics import lcs_length

CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789 '-"

_WHITESPACE_RE = re.compile(r"\s+")


def normalize_title(text: str) -> str:
    return _WHITESPACE_RE.sub(" ", text.strip().lower())


def lcs_similarity(candidate: str, reference: str) -> float:
    """Character-level LCS length divided by the reference length.

    Both strings are normalized (lowercase, collapsed whitespace) first; the
    reference must be nonempty.
    """
    ref = normalize_title(reference)
    if not ref:
        raise ConfigError("lcs_similarity requires a nonempty reference")
    cand = normalize_title(candidate)
    return lcs_length(cand, ref) / len(ref)


@dataclass(frozen=True)
class CaptionerConfig:
    image_side: int = 64
    conv_channels: int = 32
    hidden_dim: int = 128
    max_title_length: int = 48


@dataclass(frozen=True)
class TitleTrainConfig:
    epochs: int = 20
    batch_size: int = 24
    learning_rate: float = 1e-5
    seed: int = 0


class ToyCaptioner(nn.Module):
    """Conv image encoder + GRU character decoder (greedy generation)."""

    def __init__(self, config: CaptionerConfig):
        super().__init__()
        self.config = config
        ch = config.conv_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, ch, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * ch, config.hidden_dim),
        )
        n_chars = len(CHARSET)
        self.bos_id = n_chars
        self.eos_id = n_chars + 1
        self.embed = nn.Embedding(n_chars + 2, config.hidden_dim)
        self.gru = nn.GRU(config.hidden_dim, config.hidden_dim, batch_first=True)
        self.project = nn.Linear(config.hidden_dim, n_chars + 1)  # chars + EOS

    def forward(self, images: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits (B, T, n_chars+1)."""
        h0 = self.encoder(images).unsqueeze(0)
        out, _ = self.gru(self.embed(input_ids), h0)
        return self.project(out)

    @torch.no_grad()
    def generate_ids(self, image: torch.Tensor) -> list[int]:
        hidden = self.encoder(image.unsqueeze(0)).unsqueeze(0)
        token = torch.tensor([[self.bos_id]])
        out: list[int] = []
        for step in range(self.config.max_title_length):
            emb = self.embed(token)
            _, hidden = self.gru(emb, hidden)
            logits = self.project(hidden[-1])[0]
            if step == 0:
                logits = logits.clone()
                logits[self.eos_id] = float("-inf")  # titles are nonempty
            choice = int(torch.argmax(logits).item())
            if choice == self.eos_id:
                break
            out.append(choice)
            token = torch.tensor([[choice]])
        return out


@dataclass
class CaptionerHandle:
    """A captioning backbone plus its generation settings and training log."""

    backbone: str
    config: CaptionerConfig
    model: ToyCaptioner
    normalization: ImageNormalization = field(default_factory=ImageNormalization)
    history: list[dict] = field(default_factory=list)


_BACKENDS: dict[str, object] = {}


def register_captioner_backend(name: str, factory) -> None:
    """Plugin hook for pretrained captioning backbones."""
    _BACKENDS[name] = factory


def new_captioner(backbone: str = "toy", config: CaptionerConfig | None = None,
                  seed: int = 0) -> CaptionerHandle:
    config = config or CaptionerConfig()
    if backbone == "toy":
        torch.manual_seed(seed)
        return CaptionerHandle(backbone="toy", config=config, model=ToyCaptioner(config))
    factory = _BACKENDS.get(backbone)
    if factory is None:
        known = ["toy", *sorted(_BACKENDS)]
        raise ConfigError(f"unknown captioner backbone {backbone!r}; registered: {known}")
    return factory(config=config, seed=seed)


def _encode_chars(title: str) -> list[int]:
    return [CHARSET.index(c) for c in normalize_title(title) if c in CHARSET]


def _title_batch(model: ToyCaptioner, titles: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded (inputs, targets) char-id tensors; -100 marks padded targets."""
    seqs = [_encode_chars(t) for t in titles]
    width = max(len(s) for s in seqs) + 1
    inputs = torch.full((len(seqs), width), model.eos_id, dtype=torch.long)
    targets = torch.full((len(seqs), width), -100, dtype=torch.long)
    for i, seq in enumerate(seqs):
        inputs[i, 0] = model.bos_id
        inputs[i, 1:len(seq) + 1] = torch.tensor(seq)
        targets[i, :len(seq)] = torch.tensor(seq)
        targets[i, len(seq)] = model.eos_id
    return inputs, targets


def generate_title(image: np.ndarray, handle: CaptionerHandle) -> str:
    """Greedy, whitespace-normalized lowercase title for a preprocessed image."""
    model = handle.model
    side = handle.config.image_side
    if image.shape[0] != side or image.shape[1] != side:
        raise CheckpointError(
            f"image side {image.shape[:2]} does not match captioner config {side}")
    model.eval()
    ids = model.generate_ids(image_to_tensor(image))
    title = normalize_title("".join(CHARSET[i] for i in ids))
    return title or "untitled"


def finetune_title_model(dataset: Dataset, fraction: float, handle: CaptionerHandle,
                         config: TitleTrainConfig) -> CaptionerHandle:
    """Fine-tune on a seeded fraction of the train split; return the epoch
    snapshot with the highest dev-split mean LCS similarity."""
    if fraction <= 0 or fraction > 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    train = dataset.records_for("train")
    if not train:
        raise ConfigError("dataset has no train split")
    dev = dataset.records_for("dev")

    rng = np.random.default_rng(config.seed)
    n_subset = max(1, int(fraction * len(train)))
    subset_ids = rng.choice(len(train), size=n_subset, replace=False)
    subset = [train[i] for i in sorted(subset_ids)]

    model = handle.model
    side = handle.config.image_side
    images = torch.stack([
        image_to_tensor(record_image(dataset, rec, side, handle.normalization))
        for rec in subset])
    inputs, targets = _title_batch(model, [rec.title for rec in subset])

    dev_images = [image_to_tensor(record_image(dataset, rec, side, handle.normalization))
                  for rec in dev]

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_lcs = _mean_dev_lcs(model, dev_images, dev)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(subset))
        total = 0.0
        n_batches = 0
        for start in range(0, len(subset), config.batch_size):
            batch = torch.from_numpy(order[start:start + config.batch_size].copy())
            logits = model(images[batch], inputs[batch])
            loss = F.cross_entropy(logits.transpose(1, 2), targets[batch], ignore_index=-100)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            n_batches += 1
        dev_lcs = _mean_dev_lcs(model, dev_images, dev)
        history.append({"epoch": epoch, "train_loss": total / max(n_batches, 1),
                        "dev_lcs": dev_lcs})
        if dev_lcs > best_lcs:
            best_lcs = dev_lcs
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    return CaptionerHandle(backbone=handle.backbone, config=handle.config, model=model,
                           normalization=handle.normalization, history=history)


def _mean_dev_lcs(model: ToyCaptioner, dev_images: list[torch.Tensor], dev_records) -> float:
    if not dev_records:
        return 0.0
    model.eval()
    scores = []
    for image, rec in zip(dev_images, dev_records):
        ids = model.generate_ids(image)
        title = normalize_title("".join(CHARSET[i] for i in ids)) or "untitled"
        scores.append(lcs_similarity(title, rec.title))
    return float(np.mean(scores))


def captioner_checkpoint(handle: CaptionerHandle) -> dict:
    return {
        "version": 1,
        "kind": "title_captioner",
        "backbone": handle.backbone,
        "config": asdict(handle.config),
        "normalization": asdict(handle.normalization),
        "charset": CHARSET,
        "history": handle.history,
        "state": handle.model.state_dict(),
    }


def captioner_from_checkpoint(checkpoint: dict) -> CaptionerHandle:
    if checkpoint.get("kind") != "title_captioner":
        raise CheckpointError(
            f"expected a title_captioner checkpoint, got {checkpoint.get('kind')!r}")
    if checkpoint.get("backbone") != "toy":
        raise CheckpointError(
            f"no registered loader for captioner backbone {checkpoint.get('backbone')!r}")
    if checkpoint.get("charset") != CHARSET:
        raise CheckpointError("captioner checkpoint uses an incompatible character set")
    config = CaptionerConfig(**checkpoint["config"])
    model = ToyCaptioner(config)
    try:
        model.load_state_dict(checkpoint["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"captioner checkpoint incompatible: {exc}") from exc
    model.eval()
    return CaptionerHandle(
        backbone="toy", config=config, model=model,
        normalization=ImageNormalization(**checkpoint["normalization"]),
        history=list(checkpoint.get("history", [])))
