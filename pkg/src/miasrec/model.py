"""MiaSRec network: embeddings, self-attention encoder, highway gate, intent
selection, cosine decoding and max/mean score pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .entmax import entmax_bisect
from .sessions import PrefixExample

NORM_EPS = 1e-12
CHECKPOINT_FORMAT = "miasrec-checkpoint"
CHECKPOINT_VERSION = 1


def parse_intent_mode(mode: str) -> tuple[str, int]:
    """``"entmax"``, ``"mean"`` or ``"last:k"`` -> (kind, k)."""
    if mode in ("entmax", "mean"):
        return mode, 0
    if mode.startswith("last"):
        _, _, k = mode.partition(":")
        try:
            k = int(k) if k else 1
        except ValueError:
            raise ValueError(f"bad intent mode {mode!r}") from None
        if k < 1:
            raise ValueError(f"intent mode {mode!r} needs k >= 1")
        return "last", k
    raise ValueError(f"unknown intent mode {mode!r}; expected entmax, mean or last:k")


@dataclass
class ModelConfig:
    d: int = 100
    max_len: int = 50
    num_layers: int = 1
    num_heads: int = 2
    alpha: float = 1.5
    beta: float = 0.5
    tau: float = 0.07
    dropout: float = 0.2
    use_position_embedding: bool = True
    use_frequency_embedding: bool = True
    intent_mode: str = "entmax"

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        parse_intent_mode(self.intent_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclass
class Batch:
    """Right-padded prefixes; column ``L`` of every ``(B, L + 1)`` view is the mean token."""

    items: torch.Tensor
    positions: torch.Tensor
    frequencies: torch.Tensor
    lengths: torch.Tensor
    targets: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.items.shape[0]

    @property
    def mask(self) -> torch.Tensor:
        valid = self.items > 0
        mean_col = torch.ones_like(valid[:, :1])
        return torch.cat([valid, mean_col], dim=1)


def collate(examples: Sequence[PrefixExample], device=None) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty list of examples")
    width = max(len(ex.prefix) for ex in examples)
    shape = (len(examples), width)
    items = np.zeros(shape, dtype=np.int64)
    positions = np.zeros(shape, dtype=np.int64)
    frequencies = np.zeros(shape, dtype=np.int64)
    for row, ex in enumerate(examples):
        n = len(ex.prefix)
        items[row, :n] = ex.prefix
        positions[row, :n] = ex.positions
        frequencies[row, :n] = ex.frequencies
    lengths = np.array([len(ex.prefix) for ex in examples], dtype=np.int64)
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    as_t = lambda a: torch.from_numpy(a).to(device)  # noqa: E731
    return Batch(as_t(items), as_t(positions), as_t(frequencies), as_t(lengths), as_t(targets))


# ---------------------------------------------------------------------------
# stateless pieces


def decode(h: torch.Tensor, item_embeddings: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every session vector in ``h`` (..., d) with every item row (n, d)."""
    h = F.normalize(h, dim=-1, eps=NORM_EPS)
    items = F.normalize(item_embeddings, dim=-1, eps=NORM_EPS)
    return h @ items.T


def aggregate(distributions: torch.Tensor, beta: float, selected: torch.Tensor | None = None) -> torch.Tensor:
    """``beta * max + (1 - beta) * mean`` over the intent axis (-2).

    ``selected`` masks out intents along that axis; at least one must remain.
    """
    if distributions.shape[-2] == 0:
        raise ValueError("cannot aggregate an empty list of distributions")
    if selected is None:
        maxed, mean = distributions.max(dim=-2).values, distributions.mean(dim=-2)
    else:
        sel = selected.unsqueeze(-1)
        maxed = distributions.masked_fill(~sel, -math.inf).max(dim=-2).values
        mean = (distributions * sel).sum(dim=-2) / sel.sum(dim=-2)
    # written as mean + beta * (max - mean) so a single intent passes through bit-exactly
    return mean + beta * (maxed - mean)


def loss(y_hat: torch.Tensor, target: torch.Tensor, tau: float) -> torch.Tensor:
    """Full-catalogue cross-entropy of ``softmax(y_hat / tau)``; targets are 1-based item indices."""
    if y_hat.dim() == 1:
        y_hat, target = y_hat.unsqueeze(0), torch.as_tensor(target).reshape(1)
    return F.cross_entropy(y_hat / tau, target - 1)


# ---------------------------------------------------------------------------
# network


class EncoderLayer(nn.Module):
    def __init__(self, d: int, num_heads: int, dropout: float):
        super().__init__()
        self.attention = nn.MultiheadAttention(d, num_heads, dropout=dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.feed_forward = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * d, d)
        )
        self.ff_dropout = nn.Dropout(dropout)
        self.ff_norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
        attended, _ = self.attention(x, x, x, key_padding_mask=padding, need_weights=False)
        x = self.attn_norm(x + self.attn_dropout(attended))
        return self.ff_norm(x + self.ff_dropout(self.feed_forward(x)))


class MiaSRecNetwork(nn.Module):
    """Scores every catalogue item for a batch of prefixes.

    Item row 0 of ``item_embedding`` is padding; rows 1..n are the items.
    Row 0 of the position and frequency tables belongs to the mean token.
    """

    def __init__(self, n_items: int, config: ModelConfig):
        super().__init__()
        if n_items < 1:
            raise ValueError("n_items must be positive")
        self.n_items = n_items
        self.config = config
        d = config.d
        self.item_embedding = nn.Embedding(n_items + 1, d, padding_idx=0)
        self.position_embedding = nn.Embedding(config.max_len + 1, d) if config.use_position_embedding else None
        self.frequency_embedding = nn.Embedding(config.max_len + 1, d) if config.use_frequency_embedding else None
        self.input_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(d, config.num_heads, config.dropout) for _ in range(config.num_layers))
        self.gate = nn.Linear(2 * d, d, bias=False)
        self.intent_score = nn.Linear(d, 1, bias=False)
        self.intent_kind, self.intent_k = parse_intent_mode(config.intent_mode)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.MultiheadAttention):
                nn.init.normal_(module.in_proj_weight, mean=0.0, std=0.02)
                nn.init.zeros_(module.in_proj_bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        with torch.no_grad():
            self.item_embedding.weight[0].zero_()

    @property
    def item_table(self) -> torch.Tensor:
        return self.item_embedding.weight[1:]

    # -- pipeline stages ---------------------------------------------------

    def embed_inputs(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(x, v)``: summed inputs and raw item rows, both ``(B, L + 1, d)``."""
        max_len = self.config.max_len
        if batch.items.shape[1] > max_len:
            raise ValueError(f"prefix longer than max_len={max_len}")
        for name, idx in (("position", batch.positions), ("frequency", batch.frequencies)):
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) > max_len):
                raise ValueError(f"{name} index outside table range [0, {max_len}]")
        if batch.items.numel() and int(batch.items.max()) > self.n_items:
            raise ValueError(f"item index above n_items={self.n_items}")

        mask = batch.mask
        # mask explicitly so the padding row has no influence even if it drifts from zero
        item_rows = self.item_embedding(batch.items) * mask[:, :-1].unsqueeze(-1)
        mean = item_rows.sum(dim=1) / batch.lengths.unsqueeze(1).to(item_rows.dtype)
        v = torch.cat([item_rows, mean.unsqueeze(1)], dim=1)

        x = v
        zero = torch.zeros_like(batch.lengths).unsqueeze(1)
        if self.position_embedding is not None:
            x = x + self.position_embedding(torch.cat([batch.positions, zero], dim=1))
        if self.frequency_embedding is not None:
            x = x + self.frequency_embedding(torch.cat([batch.frequencies, zero], dim=1))
        x = x * mask.unsqueeze(-1)
        return self.input_dropout(x), v

    def encode(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        keep = mask.unsqueeze(-1).to(x.dtype)
        for layer in self.layers:
            x = layer(x, ~mask) * keep
        return x

    def highway(self, c: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([v, c], dim=-1)))
        return g * v + (1 - g) * c

    def select_intents(self, o: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Weights ``gamma`` over the ``L + 1`` candidates; zero marks an unselected intent."""
        mask = batch.mask
        if self.intent_kind == "entmax":
            z = self.intent_score(o).squeeze(-1).masked_fill(~mask, -math.inf)
            return entmax_bisect(z, alpha=self.config.alpha, dim=-1)

        gamma = torch.zeros(mask.shape, dtype=o.dtype, device=o.device)
        if self.intent_kind == "mean":
            gamma[:, -1] = 1.0
            return gamma
        cols = torch.arange(mask.shape[1] - 1, device=o.device).unsqueeze(0)
        lengths = batch.lengths.unsqueeze(1)
        chosen = (cols < lengths) & (cols >= lengths - self.intent_k)
        gamma[:, :-1] = chosen.to(o.dtype)
        return gamma / gamma.sum(dim=1, keepdim=True)

    def forward(self, batch: Batch, beta: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(scores (B, n), gamma (B, L + 1))``."""
        beta = self.config.beta if beta is None else beta
        per_intent, gamma = self.intent_scores(batch)
        return aggregate(per_intent, beta, gamma > 0), gamma

    def intent_scores(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-candidate decoded distributions ``(B, L + 1, n)`` and ``gamma``, before pooling."""
        x, v = self.embed_inputs(batch)
        c = self.encode(x, batch.mask)
        o = self.highway(c, v)
        gamma = self.select_intents(o, batch)
        return decode(gamma.unsqueeze(-1) * o, self.item_table), gamma

    def loss(self, batch: Batch) -> torch.Tensor:
        scores, _ = self(batch)
        return loss(scores, batch.targets, self.config.tau)


# ---------------------------------------------------------------------------
# single-example views


@dataclass
class IntentSet:
    gamma: np.ndarray
    selected: list[int]
    h: np.ndarray

    @property
    def k(self) -> int:
        return len(self.selected)


@dataclass
class ScoreDistribution:
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


def _one(example: PrefixExample, network: MiaSRecNetwork) -> Batch:
    return collate([example], device=network.item_embedding.weight.device)


def forward_example(
    example: PrefixExample, network: MiaSRecNetwork, mode: str = "eval"
) -> tuple[ScoreDistribution, IntentSet]:
    """Run one prefix through the network; ``mode`` is ``"train"`` (dropout on) or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = network.training
    network.train(mode == "train")
    try:
        with torch.set_grad_enabled(mode == "train"):
            batch = _one(example, network)
            x, v = network.embed_inputs(batch)
            o = network.highway(network.encode(x, batch.mask), v)
            gamma = network.select_intents(o, batch)
            per_intent = decode(gamma.unsqueeze(-1) * o, network.item_table)
            scores = aggregate(per_intent, network.config.beta, gamma > 0)
    finally:
        network.train(was_training)
    g = gamma[0].detach().cpu().numpy()
    selected = np.flatnonzero(g > 0).tolist()
    h = (gamma[0].unsqueeze(-1) * o[0])[selected].detach().cpu().numpy()
    return ScoreDistribution(scores[0].detach().cpu().numpy()), IntentSet(g, selected, h)


# ---------------------------------------------------------------------------
# checkpoints


def parameter_shapes(network: nn.Module) -> dict[str, list[int]]:
    return {name: list(t.shape) for name, t in network.state_dict().items()}


def save_checkpoint(path, network: MiaSRecNetwork, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": network.config.to_dict(),
            "n_items": network.n_items,
            "shapes": parameter_shapes(network),
            "state_dict": network.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def read_checkpoint(path) -> dict:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc


def load_checkpoint(path) -> tuple[MiaSRecNetwork, dict]:
    """Rebuild the network from a checkpoint, checking every tensor shape against its config."""
    doc = read_checkpoint(path)
    network = MiaSRecNetwork(doc["n_items"], ModelConfig.from_dict(doc["config"]))
    expected = parameter_shapes(network)
    stored = {k: list(v.shape) for k, v in doc["state_dict"].items()}
    if expected != stored:
        bad = sorted(k for k in expected.keys() | stored.keys() if expected.get(k) != stored.get(k))
        details = ", ".join(f"{k}: stored {stored.get(k)} vs config {expected.get(k)}" for k in bad[:4])
        raise ValueError(f"{path}: parameter shapes do not match config ({details})")
    network.load_state_dict(doc["state_dict"])
    network.to(next(iter(doc["state_dict"].values())).dtype)
    return network, doc
