"""Mini-batch Adam training with early stopping on validation MRR@20."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .evaluation import evaluate
from .model import MiaSRecNetwork, ModelConfig, collate, save_checkpoint
from .sessions import PrefixExample, SessionCorpus, expand_prefixes

log = logging.getLogger(__name__)

STATE_FORMAT = "miasrec-train-state"
STATE_VERSION = 1


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 200
    patience: int = 3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 512
    # upper bound on B * (L + 1) * n_items per forward pass; larger batches are
    # split and their gradients accumulated
    score_budget: int = 20_000_000
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mrr20: float
    val_r20: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class EarlyStopping:
    """Stop once the monitored value has dropped ``patience`` epochs in a row.

    Each epoch is compared with the one immediately before it. The best epoch
    is the first one reaching the highest value seen.
    """

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.previous: float | None = None
        self.streak = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; returns True if it is a new best."""
        improved = value > self.best
        if improved:
            self.best, self.best_epoch = value, epoch
        if self.previous is not None and value < self.previous:
            self.streak += 1
        else:
            self.streak = 0
        self.previous = value
        return improved

    @property
    def should_stop(self) -> bool:
        return self.streak >= self.patience

    def state_dict(self) -> dict:
        return dict(vars(self))

    def load_state_dict(self, state: dict) -> None:
        vars(self).update(state)


def set_seed(seed: int) -> torch.Generator:
    """Seed every RNG the pipeline touches; returns the generator used for shuffling."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class TrainResult:
    network: MiaSRecNetwork
    history: list[EpochRecord]
    best_epoch: int | None
    stopped_early: bool
    completed: bool = True
    extra: dict = field(default_factory=dict)


ValidationFn = Callable[[MiaSRecNetwork, int], tuple[float, float]]


def default_validation(val_examples: Sequence[PrefixExample], batch_size: int = 512) -> ValidationFn:
    if not val_examples:
        raise ValueError("validation set has no examples")

    def score(network: MiaSRecNetwork, epoch: int) -> tuple[float, float]:
        report = evaluate(network, val_examples, cutoffs=(20,), buckets=(1,), batch_size=batch_size)
        return report.mrr(20), report.recall(20)

    return score


def split_for_budget(indices: torch.Tensor, examples: Sequence[PrefixExample], n_items: int, budget: int):
    """Cut one optimisation batch into chunks whose score tensors stay within ``budget`` elements."""
    width = max(len(examples[i].prefix) for i in indices.tolist()) + 1
    per_example = width * n_items
    size = max(1, budget // per_example)
    return [indices[i : i + size] for i in range(0, len(indices), size)]


def train_epoch(
    network: MiaSRecNetwork,
    optimizer: torch.optim.Optimizer,
    examples: Sequence[PrefixExample],
    batch_size: int,
    generator: torch.Generator,
    epoch: int,
    score_budget: int = 20_000_000,
) -> float:
    """One shuffled pass; returns the example-weighted mean training loss."""
    network.train()
    device = network.item_embedding.weight.device
    order = torch.randperm(len(examples), generator=generator)
    total, seen = 0.0, 0
    for b, start in enumerate(range(0, len(examples), batch_size)):
        idx = order[start : start + batch_size]
        optimizer.zero_grad(set_to_none=True)
        batch_loss = 0.0
        for chunk in split_for_budget(idx, examples, network.n_items, score_budget):
            batch = collate([examples[i] for i in chunk.tolist()], device=device)
            value = network.loss(batch) * (len(chunk) / len(idx))
            value.backward()
            batch_loss += value.item()
        if not math.isfinite(batch_loss):
            raise TrainingError(f"non-finite loss {batch_loss} in epoch {epoch}, batch {b}")
        optimizer.step()
        total += batch_loss * len(idx)
        seen += len(idx)
    return total / seen


def _as_examples(data, max_len: int) -> list[PrefixExample]:
    if isinstance(data, SessionCorpus):
        return expand_prefixes(data, max_len)
    return list(data)


def train(
    train_data: SessionCorpus | Sequence[PrefixExample],
    val_data: SessionCorpus | Sequence[PrefixExample] | None,
    config: ModelConfig,
    seed: int = 0,
    train_config: TrainConfig | None = None,
    n_items: int | None = None,
    validation: ValidationFn | None = None,
    state_path=None,
    best_path=None,
    history_path=None,
    resume: bool = False,
    epoch_budget: int | None = None,
    extra: dict | None = None,
) -> TrainResult:
    """Fit a fresh network and return the parameters of its best validation epoch.

    ``state_path`` receives the full training state after every epoch and is
    read back when ``resume`` is set. ``epoch_budget`` caps the epochs run in
    this call (to emulate an interruption); the result is then marked
    ``completed=False`` unless early stopping fired first.
    """
    tc = train_config or TrainConfig()
    examples = _as_examples(train_data, config.max_len)
    if not examples:
        raise ValueError("training set has no examples")
    if n_items is None:
        if not isinstance(train_data, SessionCorpus):
            raise ValueError("n_items is required when passing prefix examples")
        n_items = train_data.n_items
    if validation is None:
        if val_data is None:
            raise ValueError("either val_data or a validation function is required")
        validation = default_validation(_as_examples(val_data, config.max_len), tc.eval_batch_size)

    generator = set_seed(seed)
    network = MiaSRecNetwork(n_items, config).to(getattr(torch, tc.dtype))
    optimizer = torch.optim.Adam(network.parameters(), lr=tc.lr, betas=tuple(tc.adam_betas), eps=tc.adam_eps)
    stopper = EarlyStopping(tc.patience)
    history: list[EpochRecord] = []
    best_state = copy.deepcopy(network.state_dict())
    start_epoch = 1

    if resume and state_path is not None and Path(state_path).exists():
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        if state.get("format") != STATE_FORMAT or state.get("version") != STATE_VERSION:
            raise ValueError(f"{state_path}: not a training state file")
        network.load_state_dict(state["network"])
        optimizer.load_state_dict(state["optimizer"])
        stopper.load_state_dict(state["stopper"])
        generator.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        history = [EpochRecord(**r) for r in state["history"]]
        best_state = state["best_state"]
        start_epoch = state["epoch"] + 1
        log.info("resuming from epoch %d", start_epoch)

    run = 0
    stopped = stopper.should_stop
    epoch = start_epoch - 1
    for epoch in range(start_epoch, tc.max_epochs + 1):
        if stopped or (epoch_budget is not None and run >= epoch_budget):
            break
        train_loss = train_epoch(network, optimizer, examples, tc.batch_size, generator, epoch, tc.score_budget)
        mrr, recall = validation(network, epoch)
        record = EpochRecord(epoch, train_loss, float(mrr), float(recall))
        history.append(record)
        log.info("epoch %d loss %.5f val mrr@20 %.5f r@20 %.5f", epoch, train_loss, mrr, recall)
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
        if stopper.update(float(mrr), epoch):
            best_state = copy.deepcopy(network.state_dict())
        stopped = stopper.should_stop
        run += 1
        if state_path is not None:
            torch.save(
                {
                    "format": STATE_FORMAT,
                    "version": STATE_VERSION,
                    "epoch": epoch,
                    "network": network.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "stopper": stopper.state_dict(),
                    "generator": generator.get_state(),
                    "torch_rng": torch.get_rng_state(),
                    "history": [asdict(r) for r in history],
                    "best_state": best_state,
                    "config": config.to_dict(),
                    "n_items": n_items,
                },
                state_path,
            )

    completed = stopped or (history[-1].epoch if history else 0) >= tc.max_epochs
    network.load_state_dict(best_state)
    network.eval()
    if best_path is not None:
        save_checkpoint(
            best_path,
            network,
            {
                "seed": seed,
                "best_epoch": stopper.best_epoch,
                "train_config": tc.to_dict(),
                "history": [asdict(r) for r in history],
                **(extra or {}),
            },
        )
    return TrainResult(network, history, stopper.best_epoch, stopped, completed)
