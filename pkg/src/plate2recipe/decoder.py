"""Ingredient set prediction: attention decoder, pooled losses, training loop.

The decoder emits ingredient ids one step at a time until it picks the
end-of-sequence id. Per-step scores are max-pooled across steps into a single
set-level vector, which feeds a binary cross-entropy term; an EOS term
supervises the stopping step, and an L1 cardinality term constrains the
predicted set size. The three are combined with configurable weights
(defaults 100 / 1 / 1).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import Dataset, ImageNormalization, IngredientVocabulary, record_image
from .encoder import EncoderConfig, ImageEncoder, image_to_tensor
from .errors import CheckpointError, ConfigError, NumericalError

logger = logging.getLogger(__name__)

N_BLOCKS = 4  # fixed decoder depth

DEFAULT_MAX_STEPS = 20


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective: ingredient BCE, EOS BCE, cardinality L1."""

    ingredient: float = 100.0
    eos: float = 1.0
    cardinality: float = 1.0

    def validate(self) -> None:
        if min(self.ingredient, self.eos, self.cardinality) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    context_dim: int
    model_dim: int = 512
    n_heads: int = 8
    ffn_dim: int = 2048
    max_steps: int = DEFAULT_MAX_STEPS

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 150
    learning_rate: float = 1e-4
    lr_decay: float = 1e-4  # per-epoch multiplicative decay: lr *= (1 - lr_decay)
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size, learning_rate must be positive")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ConfigError("lr_decay must lie in [0, 1)")


class _DecoderBlock(nn.Module):
    """Self-attention, conditional attention over image embeddings, two FC
    layers, three normalizations (post-norm arrangement)."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(config.model_dim, config.n_heads,
                                               batch_first=True)
        self.cross_attn = nn.MultiheadAttention(config.model_dim, config.n_heads,
                                                kdim=config.context_dim,
                                                vdim=config.context_dim,
                                                batch_first=True)
        self.fc1 = nn.Linear(config.model_dim, config.ffn_dim)
        self.fc2 = nn.Linear(config.ffn_dim, config.model_dim)
        self.norm1 = nn.LayerNorm(config.model_dim)
        self.norm2 = nn.LayerNorm(config.model_dim)
        self.norm3 = nn.LayerNorm(config.model_dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor,
                causal_mask: torch.Tensor) -> torch.Tensor:
        attended, _ = self.self_attn(x, x, x, attn_mask=causal_mask, need_weights=False)
        x = self.norm1(x + attended)
        conditioned, _ = self.cross_attn(x, memory, memory, need_weights=False)
        x = self.norm2(x + conditioned)
        x = self.norm3(x + self.fc2(F.gelu(self.fc1(x))))
        return x


class IngredientDecoder(nn.Module):
    """Four-block attention decoder over image embeddings.

    Token ids: 0..N-1 ingredients, N = end-of-sequence, N+1 = start-of-decode
    (input side only). The output projection spans N+1 scores (ingredients
    plus EOS).
    """

    def __init__(self, config: DecoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.eos_id = config.vocab_size
        self.start_id = config.vocab_size + 1
        self.embed = nn.Embedding(config.vocab_size + 2, config.model_dim)
        self.positions = nn.Parameter(torch.zeros(1, config.max_steps, config.model_dim))
        nn.init.trunc_normal_(self.positions, std=0.02)
        self.blocks = nn.ModuleList(_DecoderBlock(config) for _ in range(N_BLOCKS))
        self.project = nn.Linear(config.model_dim, config.vocab_size + 1)

    def forward(self, input_ids: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """(B, T) input ids + (B, L, context_dim) memory -> (B, T, N+1) logits."""
        steps = input_ids.shape[1]
        if steps > self.config.max_steps:
            raise ConfigError(
                f"sequence length {steps} exceeds max_steps {self.config.max_steps}")
        if memory.shape[-1] != self.config.context_dim:
            raise ConfigError(
                f"embedding width {memory.shape[-1]} does not match decoder "
                f"context width {self.config.context_dim}")
        x = self.embed(input_ids) + self.positions[:, :steps]
        causal = torch.full((steps, steps), float("-inf"), dtype=x.dtype,
                            device=x.device).triu(1)
        for block in self.blocks:
            x = block(x, memory, causal)
        logits = self.project(x)
        if not torch.isfinite(logits).all():
            raise NumericalError("non-finite decoder logits")
        return logits


def teacher_input_ids(decoder: IngredientDecoder, ingredient_ids: list[int],
                      max_steps: int) -> torch.Tensor:
    """Teacher-forced input rollout of length max_steps: start token, the
    ground-truth ids in vocabulary-id order, then EOS padding."""
    ordered = sorted(ingredient_ids)[: max_steps - 1]
    ids = [decoder.start_id] + ordered
    ids.extend(decoder.eos_id for _ in range(max_steps - len(ids)))
    return torch.tensor(ids, dtype=torch.long)


def decode_sequence(embeddings: torch.Tensor, decoder: IngredientDecoder,
                    max_steps: int | None = None, mode: str = "infer",
                    teacher_sequence: list[int] | None = None) -> torch.Tensor:
    """Run the decoder for one image and return the (T, N+1) step-logits matrix.

    Inference decodes greedily, masking every previously emitted ingredient id
    to -inf (sets cannot repeat), and stops at the first EOS argmax or at
    max_steps; the returned matrix includes the terminal step. Training mode
    with a teacher sequence rolls the matrix out to exactly max_steps rows;
    without one it self-feeds greedily while keeping gradients.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if max_steps is None:
        max_steps = decoder.config.max_steps
    if not 1 <= max_steps <= decoder.config.max_steps:
        raise ConfigError(
            f"max_steps must lie in [1, {decoder.config.max_steps}], got {max_steps}")
    memory = embeddings.unsqueeze(0)

    if mode == "train" and teacher_sequence is not None:
        ids = teacher_input_ids(decoder, list(teacher_sequence), max_steps).unsqueeze(0)
        return decoder(ids, memory)[0]

    grad_context = torch.enable_grad if mode == "train" else torch.no_grad
    n_vocab = decoder.config.vocab_size
    prefix = [decoder.start_id]
    emitted: list[int] = []
    rows: list[torch.Tensor] = []
    with grad_context():
        for _ in range(max_steps):
            ids = torch.tensor([prefix], dtype=torch.long)
            logits = decoder(ids, memory)[0, -1]
            if emitted:
                masked = logits.clone()
                masked[torch.tensor(emitted)] = float("-inf")
            else:
                masked = logits
            rows.append(masked)
            choice = int(torch.argmax(masked).item())
            if choice == decoder.eos_id or choice >= n_vocab:
                break
            emitted.append(choice)
            prefix.append(choice)
    return torch.stack(rows)


def emitted_ids(steps: torch.Tensor) -> list[int]:
    """Ingredient ids chosen before EOS in an inference step-logits matrix."""
    n_vocab = steps.shape[1] - 1
    ids = []
    for row in steps:
        choice = int(torch.argmax(row).item())
        if choice >= n_vocab:
            break
        ids.append(choice)
    return ids


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def pool_step_logits(steps: torch.Tensor) -> torch.Tensor:
    """Elementwise max over steps, ingredient columns only (EOS excluded)."""
    if steps.ndim != 2 or steps.shape[0] < 1:
        raise ConfigError(f"expected a (T, N+1) matrix, got shape {tuple(steps.shape)}")
    return steps[:, :-1].max(dim=0).values


def ingredient_loss(pooled: torch.Tensor, target: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(pooled) against the target bits."""
    target = torch.as_tensor(np.asarray(target), dtype=pooled.dtype)
    if pooled.shape != target.shape:
        raise ConfigError(
            f"pooled shape {tuple(pooled.shape)} does not match target {tuple(target.shape)}")
    return F.binary_cross_entropy_with_logits(pooled, target)


def eos_loss(steps: torch.Tensor, true_cardinality: int) -> torch.Tensor:
    """BCE between the per-step EOS scores and the stop boundary: the target
    is 0 at step indices below the true cardinality and 1 from it onward."""
    if true_cardinality < 0:
        raise ConfigError(f"cardinality must be >= 0, got {true_cardinality}")
    eos_scores = steps[:, -1]
    target = (torch.arange(steps.shape[0]) >= true_cardinality).to(eos_scores.dtype)
    return F.binary_cross_entropy_with_logits(eos_scores, target)


def cardinality_loss(pooled: torch.Tensor, target: torch.Tensor | np.ndarray) -> torch.Tensor:
    """L1 gap between the differentiable predicted count (sum of sigmoids)
    and the true set size."""
    target = torch.as_tensor(np.asarray(target), dtype=pooled.dtype)
    if pooled.shape != target.shape:
        raise ConfigError(
            f"pooled shape {tuple(pooled.shape)} does not match target {tuple(target.shape)}")
    return torch.abs(torch.sigmoid(pooled).sum() - target.sum())


def composite_loss(l_ingr: torch.Tensor | float, l_eos: torch.Tensor | float,
                   l_card: torch.Tensor | float, w: LossWeights) -> torch.Tensor:
    w.validate()
    terms = [torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
             for v in (l_ingr, l_eos, l_card)]
    return w.ingredient * terms[0] + w.eos * terms[1] + w.cardinality * terms[2]


def _batch_losses(logits: torch.Tensor, targets: torch.Tensor,
                  cardinalities: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Vectorized per-batch means of the three loss terms.

    logits: (B, T, N+1) teacher rollout; targets: (B, N) bits;
    cardinalities: (B,) true set sizes.
    """
    pooled = logits[:, :, :-1].max(dim=1).values
    l_ingr = F.binary_cross_entropy_with_logits(pooled, targets)
    steps = logits.shape[1]
    eos_target = (torch.arange(steps).unsqueeze(0) >= cardinalities.unsqueeze(1))
    l_eos = F.binary_cross_entropy_with_logits(logits[:, :, -1], eos_target.to(logits.dtype))
    l_card = torch.abs(torch.sigmoid(pooled).sum(dim=1) - cardinalities.to(logits.dtype)).mean()
    return l_ingr, l_eos, l_card


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_ingredient_model(dataset: Dataset, enc_cfg: EncoderConfig,
                           train_cfg: TrainConfig, weights: LossWeights,
                           dec_cfg: DecoderConfig | None = None,
                           normalization: ImageNormalization = ImageNormalization(),
                           log_path: str | Path | None = None) -> dict:
    """Adam training of encoder + decoder on the composite loss.

    The learning rate is multiplied by (1 - lr_decay) after each epoch.
    Deterministic for a fixed seed. If the loss goes non-finite the run aborts
    and the last finite epoch's checkpoint is returned. Returns an in-memory
    checkpoint dict (see ``checkpoints`` for the file format).
    """
    train_cfg.validate()
    weights.validate()
    if dataset.vocabulary is None:
        raise ConfigError("dataset has no vocabulary; build or attach one first")
    records = dataset.records_for("train")
    if not records:
        raise ConfigError("dataset has no train split")

    vocab = dataset.vocabulary
    if dec_cfg is None:
        dec_cfg = DecoderConfig(
            vocab_size=len(vocab),
            context_dim=enc_cfg.output_dim,
            model_dim=enc_cfg.output_dim,
            n_heads=max(1, min(8, enc_cfg.output_dim // 16)),
            ffn_dim=2 * enc_cfg.output_dim,
            max_steps=train_cfg.max_steps,
        )
    torch.manual_seed(train_cfg.seed)
    encoder = ImageEncoder(enc_cfg)
    decoder = IngredientDecoder(dec_cfg)

    images = torch.stack([
        image_to_tensor(record_image(dataset, rec, enc_cfg.image_side, normalization))
        for rec in records])
    target_bits = torch.stack([torch.from_numpy(_record_bits(rec, vocab)) for rec in records])
    cardinalities = target_bits.sum(dim=1)
    teacher = [sorted(vocab.index[n] for n in rec.ingredients if n in vocab.index)
               for rec in records]
    inputs = torch.stack([
        teacher_input_ids(decoder, ids, train_cfg.max_steps) for ids in teacher])

    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)

    history: list[dict] = []
    lr = train_cfg.learning_rate
    snapshot = _snapshot(encoder, decoder)
    last_finite_epoch = 0
    diverged = False
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(records))
        epoch_terms = np.zeros(3)
        n_batches = 0
        encoder.train()
        decoder.train()
        for start in range(0, len(records), train_cfg.batch_size):
            batch = torch.from_numpy(order[start:start + train_cfg.batch_size].copy())
            memory = encoder(images[batch])
            logits = decoder(inputs[batch], memory)
            l_ingr, l_eos, l_card = _batch_losses(
                logits, target_bits[batch], cardinalities[batch])
            total = composite_loss(l_ingr, l_eos, l_card, weights)
            if not torch.isfinite(total):
                diverged = True
                break
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_terms += np.array([l_ingr.item(), l_eos.item(), l_card.item()])
            n_batches += 1
        if diverged:
            logger.warning("training diverged at epoch %d; keeping epoch %d",
                           epoch, last_finite_epoch)
            break
        means = epoch_terms / max(n_batches, 1)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss_ingr": float(means[0]),
            "loss_eos": float(means[1]),
            "loss_card": float(means[2]),
            "total": float(weights.ingredient * means[0] + weights.eos * means[1]
                           + weights.cardinality * means[2]),
        }
        history.append(entry)
        snapshot = _snapshot(encoder, decoder)
        last_finite_epoch = epoch
        lr *= (1.0 - train_cfg.lr_decay)
        for group in optimizer.param_groups:
            group["lr"] = lr

    if log_path is not None:
        with Path(log_path).open("w", encoding="utf-8") as handle:
            for entry in history:
                handle.write(json.dumps(entry) + "\n")

    return {
        "version": 1,
        "kind": "ingredient_model",
        "encoder_config": asdict(enc_cfg),
        "decoder_config": asdict(dec_cfg),
        "train_config": asdict(train_cfg),
        "loss_weights": asdict(weights),
        "normalization": asdict(normalization),
        "vocabulary": list(vocab.names),
        "epoch": last_finite_epoch,
        "diverged": diverged,
        "history": history,
        "encoder_state": snapshot[0],
        "decoder_state": snapshot[1],
    }


def _record_bits(rec, vocab: IngredientVocabulary) -> np.ndarray:
    bits = np.zeros(len(vocab), dtype=np.float32)
    for name in rec.ingredients:
        idx = vocab.index.get(name)
        if idx is not None:
            bits[idx] = 1.0
    return bits


def _snapshot(encoder: nn.Module, decoder: nn.Module) -> tuple[dict, dict]:
    return (copy.deepcopy(encoder.state_dict()), copy.deepcopy(decoder.state_dict()))


def load_ingredient_model(checkpoint: dict) -> tuple[ImageEncoder, IngredientDecoder,
                                                     IngredientVocabulary]:
    """Rebuild encoder, decoder, and vocabulary from an ingredient checkpoint."""
    if checkpoint.get("kind") != "ingredient_model":
        raise CheckpointError(
            f"expected an ingredient_model checkpoint, got {checkpoint.get('kind')!r}")
    enc_cfg = EncoderConfig(**checkpoint["encoder_config"])
    dec_cfg = DecoderConfig(**checkpoint["decoder_config"])
    vocab = IngredientVocabulary(checkpoint["vocabulary"])
    if dec_cfg.vocab_size != len(vocab):
        raise CheckpointError(
            f"decoder width {dec_cfg.vocab_size} does not match vocabulary "
            f"size {len(vocab)}")
    encoder = ImageEncoder(enc_cfg)
    decoder = IngredientDecoder(dec_cfg)
    try:
        encoder.load_state_dict(checkpoint["encoder_state"])
        decoder.load_state_dict(checkpoint["decoder_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint incompatible with configs: {exc}") from exc
    encoder.eval()
    decoder.eval()
    return encoder, decoder, vocab


def predict_ingredients(image: np.ndarray, checkpoint: dict,
                        max_steps: int | None = None) -> list[str]:
    """Names of the ingredient ids emitted before EOS for one preprocessed image."""
    encoder, decoder, vocab = load_ingredient_model(checkpoint)
    with torch.no_grad():
        memory = encoder(image_to_tensor(image).unsqueeze(0))[0]
        steps = decode_sequence(memory, decoder, max_steps=max_steps, mode="infer")
    return [vocab.name_of(i) for i in emitted_ids(steps)]
