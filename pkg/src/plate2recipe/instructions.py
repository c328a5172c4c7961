"""Cooking-instruction generation from (title, ingredients).

Model inputs are a fixed, parseable template: ``title: <t> | ingredients:
<i1>; <i2>`` with an optional ``| quantities: ...`` segment that exists only
in training-mode formatting. The built-in backbone is a small word-level
GRU encoder-decoder with Luong attention; generation uses beam search with a
repetition penalty and length-normalized scores. Pretrained seq2seq backbones
can be registered as adapters via ``register_seq2seq_backend``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import Dataset
from .errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_SEGMENT_SPLIT = re.compile(r" \| (?=title: |ingredients: |quantities: )")
_STEP_SPLIT = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class InstructionInput:
    title: str
    ingredients: tuple[str, ...] = ()
    ingredients_with_quantity: tuple[str, ...] | None = None


@dataclass(frozen=True)
class GenerationConfig:
    num_beams: int = 4
    length_penalty: float = 1.0
    repetition_penalty: float = 2.5
    max_source_length: int = 50
    max_target_length: int = 512

    def validate(self) -> None:
        if self.num_beams < 1:
            raise ConfigError("num_beams must be >= 1")
        if self.max_source_length < 1 or self.max_target_length < 1:
            raise ConfigError("source/target length bounds must be positive")
        if self.repetition_penalty <= 0:
            raise ConfigError("repetition_penalty must be > 0")


@dataclass(frozen=True)
class InstructionTrainConfig:
    epochs: int = 30
    batch_size: int = 12
    learning_rate: float = 3e-4
    seed: int = 0
    emb_dim: int = 64
    hidden_dim: int = 192


def format_model_input(inp: InstructionInput, mode: str,
                       max_source_length: int = 50) -> str:
    """Render the canonical input template; quantities appear in train mode only."""
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not inp.title.strip():
        raise ConfigError("title must be nonempty")
    segments = [f"title: {inp.title.strip()}"]
    if inp.ingredients:
        segments.append("ingredients: " + "; ".join(inp.ingredients))
    if mode == "train" and inp.ingredients_with_quantity:
        segments.append("quantities: " + "; ".join(inp.ingredients_with_quantity))
    text = " | ".join(segments)
    tokens = text.split()
    if len(tokens) > max_source_length:
        logger.warning("model input truncated from %d to %d tokens",
                       len(tokens), max_source_length)
        text = " ".join(tokens[:max_source_length])
    return text


def split_model_input(text: str) -> InstructionInput:
    """Parse a formatted input string back into its fields."""
    title = ""
    ingredients: tuple[str, ...] = ()
    quantities: tuple[str, ...] | None = None
    for segment in _SEGMENT_SPLIT.split(text):
        if segment.startswith("title: "):
            title = segment[len("title: "):]
        elif segment.startswith("ingredients: "):
            ingredients = tuple(segment[len("ingredients: "):].split("; "))
        elif segment.startswith("quantities: "):
            quantities = tuple(segment[len("quantities: "):].split("; "))
        else:
            raise ConfigError(f"unrecognized input segment: {segment!r}")
    if not title:
        raise ConfigError("formatted input lacks a title segment")
    return InstructionInput(title=title, ingredients=ingredients,
                            ingredients_with_quantity=quantities)


def split_into_steps(generated: str) -> list[str]:
    """Split on sentence-final punctuation + whitespace; empty segments dropped."""
    return [part for part in _STEP_SPLIT.split(generated.strip()) if part]


# ---------------------------------------------------------------------------
# Toy word-level seq2seq backbone
# ---------------------------------------------------------------------------

class WordVocab:
    def __init__(self, words: list[str] | tuple[str, ...]):
        self.words: tuple[str, ...] = tuple(words)
        if self.words[:4] != _SPECIALS:
            raise ConfigError("word vocabulary must start with the special tokens")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, texts: list[str]) -> "WordVocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(text.split())
        return cls(list(_SPECIALS) + sorted(seen))

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in text.split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.words[i] for i in ids if i >= UNK)


class ToySeq2Seq(nn.Module):
    """GRU encoder + GRU decoder with Luong dot attention."""

    def __init__(self, vocab_size: int, emb_dim: int = 64, hidden_dim: int = 192):
        super().__init__()
        self.src_embed = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD)
        self.tgt_embed = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD)
        self.encoder = nn.GRU(emb_dim, hidden_dim, batch_first=True)
        self.cell = nn.GRUCell(emb_dim, hidden_dim)
        self.combine = nn.Linear(2 * hidden_dim, hidden_dim)
        self.project = nn.Linear(hidden_dim, vocab_size)

    def encode(self, src: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out, _ = self.encoder(self.src_embed(src))
        final = out[torch.arange(len(src)), lengths - 1]
        return out, final

    def decode_step(self, tokens: torch.Tensor, hidden: torch.Tensor,
                    enc_out: torch.Tensor, src_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One decoder step for a batch: (B,) tokens -> (B, V) logits."""
        hidden = self.cell(self.tgt_embed(tokens), hidden)
        scores = torch.bmm(enc_out, hidden.unsqueeze(2)).squeeze(2)
        scores = scores.masked_fill(~src_mask, float("-inf"))
        context = torch.bmm(F.softmax(scores, dim=1).unsqueeze(1), enc_out).squeeze(1)
        fused = torch.tanh(self.combine(torch.cat([hidden, context], dim=1)))
        return self.project(fused), hidden

    def forward(self, src: torch.Tensor, src_lengths: torch.Tensor,
                tgt_inputs: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits (B, T, V)."""
        enc_out, hidden = self.encode(src, src_lengths)
        mask = src != PAD
        outputs = []
        for t in range(tgt_inputs.shape[1]):
            logits, hidden = self.decode_step(tgt_inputs[:, t], hidden, enc_out, mask)
            outputs.append(logits)
        return torch.stack(outputs, dim=1)


def _apply_repetition_penalty(logits: torch.Tensor, generated: list[int],
                              penalty: float) -> torch.Tensor:
    if penalty == 1.0 or not generated:
        return logits
    logits = logits.clone()
    ids = torch.tensor(sorted(set(generated)), dtype=torch.long)
    values = logits[ids]
    logits[ids] = torch.where(values > 0, values / penalty, values * penalty)
    return logits


@dataclass
class _Hypothesis:
    tokens: list[int]
    score: float
    hidden: torch.Tensor

    def normalized(self, length_penalty: float) -> float:
        return self.score / (max(len(self.tokens), 1) ** length_penalty)


@torch.no_grad()
def beam_search(model: ToySeq2Seq, src_ids: list[int], gen: GenerationConfig) -> list[int]:
    """Deterministic beam search; returns generated token ids without BOS/EOS."""
    gen.validate()
    src = torch.tensor([src_ids], dtype=torch.long)
    enc_out, hidden = model.encode(src, torch.tensor([len(src_ids)]))
    mask = src != PAD

    live = [_Hypothesis(tokens=[], score=0.0, hidden=hidden[0])]
    finished: list[_Hypothesis] = []
    for _ in range(gen.max_target_length):
        if not live:
            break
        tokens = torch.tensor([h.tokens[-1] if h.tokens else BOS for h in live])
        hiddens = torch.stack([h.hidden for h in live])
        logits, new_hidden = model.decode_step(
            tokens, hiddens, enc_out.expand(len(live), -1, -1),
            mask.expand(len(live), -1))
        candidates: list[tuple[float, int, int]] = []
        for i, hyp in enumerate(live):
            penalized = _apply_repetition_penalty(
                logits[i], hyp.tokens, gen.repetition_penalty)
            logprobs = F.log_softmax(penalized, dim=0)
            top = torch.topk(logprobs, min(2 * gen.num_beams, len(logprobs)))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((hyp.score + lp, i, tok))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live: list[_Hypothesis] = []
        for rank, (score, beam_idx, tok) in enumerate(candidates):
            parent = live[beam_idx]
            if tok == EOS:
                # EOS candidates outside the top num_beams never finish a beam.
                if rank < gen.num_beams:
                    finished.append(_Hypothesis(tokens=parent.tokens + [EOS],
                                                score=score, hidden=new_hidden[beam_idx]))
            elif len(next_live) < gen.num_beams:
                next_live.append(_Hypothesis(tokens=parent.tokens + [tok], score=score,
                                             hidden=new_hidden[beam_idx]))
            if len(next_live) >= gen.num_beams:
                break
        live = next_live
        if len(finished) >= gen.num_beams:
            break

    pool = finished + live
    if not pool:
        return []
    best = max(pool, key=lambda h: h.normalized(gen.length_penalty))
    return [t for t in best.tokens if t != EOS]


@torch.no_grad()
def greedy_decode(model: ToySeq2Seq, src_ids: list[int], gen: GenerationConfig) -> list[int]:
    """Plain greedy loop; the beam_search(num_beams=1) reference point."""
    src = torch.tensor([src_ids], dtype=torch.long)
    enc_out, hidden = model.encode(src, torch.tensor([len(src_ids)]))
    mask = src != PAD
    out: list[int] = []
    token = BOS
    for _ in range(gen.max_target_length):
        logits, hidden = model.decode_step(
            torch.tensor([token]), hidden, enc_out, mask)
        penalized = _apply_repetition_penalty(logits[0], out, gen.repetition_penalty)
        token = int(torch.argmax(penalized).item())
        if token == EOS:
            break
        out.append(token)
    return out


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

_BACKENDS: dict[str, object] = {}


def register_seq2seq_backend(name: str, factory) -> None:
    """Plugin hook for pretrained seq2seq backbones."""
    _BACKENDS[name] = factory


def training_examples(dataset: Dataset, gen: GenerationConfig) -> list[tuple[str, str]]:
    """(source, target) pairs: the three input variants per train record."""
    pairs = []
    for rec in dataset.records_for("train"):
        target = " ".join(rec.instructions)
        variants = [
            InstructionInput(rec.title),
            InstructionInput(rec.title, rec.ingredients),
        ]
        if rec.ingredients_with_quantity:
            variants.append(InstructionInput(rec.title, rec.ingredients,
                                             rec.ingredients_with_quantity))
        for variant in variants:
            pairs.append((format_model_input(variant, "train", gen.max_source_length),
                          target))
    return pairs


def finetune_instruction_model(dataset: Dataset, config: InstructionTrainConfig,
                               gen: GenerationConfig) -> dict:
    """AdamW fine-tuning of the toy seq2seq backbone on formatted inputs.

    A zero-epoch call returns the untouched initialization. Deterministic for
    a fixed seed; aborts and keeps the last finite epoch if the loss diverges.
    """
    gen.validate()
    pairs = training_examples(dataset, gen)
    if not pairs:
        raise ConfigError("dataset has no train split with instructions")
    vocab = WordVocab.build([s for s, _ in pairs] + [t for _, t in pairs])

    torch.manual_seed(config.seed)
    model = ToySeq2Seq(len(vocab), emb_dim=config.emb_dim, hidden_dim=config.hidden_dim)

    src_ids = [vocab.encode(s) for s, _ in pairs]
    tgt_ids = [vocab.encode(t)[: gen.max_target_length - 1] for _, t in pairs]
    src_width = max(len(s) for s in src_ids)
    tgt_width = max(len(t) for t in tgt_ids) + 1
    src = torch.full((len(pairs), src_width), PAD, dtype=torch.long)
    lengths = torch.tensor([len(s) for s in src_ids])
    tgt_in = torch.full((len(pairs), tgt_width), PAD, dtype=torch.long)
    tgt_out = torch.full((len(pairs), tgt_width), -100, dtype=torch.long)
    for i, (s, t) in enumerate(zip(src_ids, tgt_ids)):
        src[i, :len(s)] = torch.tensor(s)
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:len(t) + 1] = torch.tensor(t)
        tgt_out[i, :len(t)] = torch.tensor(t)
        tgt_out[i, len(t)] = EOS

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    state = {k: v.clone() for k, v in model.state_dict().items()}
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(pairs))
        total = 0.0
        n_batches = 0
        diverged = False
        for start in range(0, len(pairs), config.batch_size):
            batch = torch.from_numpy(order[start:start + config.batch_size].copy())
            logits = model(src[batch], lengths[batch], tgt_in[batch])
            loss = F.cross_entropy(logits.transpose(1, 2), tgt_out[batch],
                                   ignore_index=-100)
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            n_batches += 1
        if diverged:
            logger.warning("instruction training diverged at epoch %d", epoch)
            break
        history.append({"epoch": epoch, "loss": total / max(n_batches, 1)})
        state = {k: v.clone() for k, v in model.state_dict().items()}

    return {
        "version": 1,
        "kind": "instruction_model",
        "backbone": "toy",
        "vocab": list(vocab.words),
        "model_config": {"emb_dim": config.emb_dim, "hidden_dim": config.hidden_dim},
        "train_config": asdict(config),
        "generation": asdict(gen),
        "history": history,
        "state": state,
    }


def instruction_model_from_checkpoint(checkpoint: dict) -> tuple[ToySeq2Seq, WordVocab]:
    if checkpoint.get("kind") != "instruction_model":
        raise CheckpointError(
            f"expected an instruction_model checkpoint, got {checkpoint.get('kind')!r}")
    if checkpoint.get("backbone") != "toy":
        raise CheckpointError(
            f"no registered loader for seq2seq backbone {checkpoint.get('backbone')!r}")
    vocab = WordVocab(checkpoint["vocab"])
    cfg = checkpoint["model_config"]
    model = ToySeq2Seq(len(vocab), emb_dim=cfg["emb_dim"], hidden_dim=cfg["hidden_dim"])
    try:
        model.load_state_dict(checkpoint["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"instruction checkpoint incompatible: {exc}") from exc
    model.eval()
    return model, vocab


def generate_instructions(title: str, ingredients: list[str] | tuple[str, ...],
                          checkpoint: dict, gen: GenerationConfig) -> list[str]:
    """Beam-search instruction steps for (title, ingredients); deterministic."""
    model, vocab = instruction_model_from_checkpoint(checkpoint)
    source = format_model_input(
        InstructionInput(title, tuple(ingredients)), "infer", gen.max_source_length)
    ids = vocab.encode(source)
    out = beam_search(model, ids, gen)
    return split_into_steps(vocab.decode(out))
