"""Next-item ranking metrics under the iterative revealing protocol."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .model import Batch, ScoreDistribution, collate
from .sessions import PrefixExample, SessionCorpus, expand_prefixes

DEFAULT_CUTOFFS = (5, 10, 20)
# lower bounds of the prefix-length groups: 1, 2, 3-4, 5-6, 7-9, >=10
DEFAULT_BUCKETS = (1, 2, 3, 5, 7, 10)
REPORT_VERSION = 1


def rank_target(y_hat, target: int) -> int:
    """1-based rank of ``target``; ties go to the lower item index."""
    scores = np.asarray(getattr(y_hat, "scores", y_hat))
    t = scores[target - 1]
    ahead = np.count_nonzero(scores > t) + np.count_nonzero(scores[: target - 1] == t)
    return int(ahead) + 1


def batch_ranks(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Vectorised :func:`rank_target` for ``scores (B, n)`` and 1-based ``targets (B,)``."""
    idx = (targets - 1).unsqueeze(1)
    t = scores.gather(1, idx)
    cols = torch.arange(scores.shape[1], device=scores.device).unsqueeze(0)
    ahead = (scores > t) | ((scores == t) & (cols < idx))
    return ahead.sum(dim=1) + 1


def _check_ranks(ranks) -> np.ndarray:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to score")
    if np.any(ranks < 1):
        raise ValueError("ranks must be >= 1")
    return ranks


def recall_at(ranks, k: int) -> float:
    ranks = _check_ranks(ranks)
    return float(np.mean(ranks <= k))


def mrr_at(ranks, k: int) -> float:
    ranks = _check_ranks(ranks)
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


def bucket_label(lo: int, hi: int | None) -> str:
    if hi is None:
        return f">={lo}"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def bucket_bounds(lower_bounds: Sequence[int]) -> list[tuple[int, int | None]]:
    lows = list(lower_bounds)
    if not lows or lows != sorted(set(lows)) or lows[0] < 1:
        raise ValueError(f"bucket lower bounds must be strictly increasing and start >= 1: {lows}")
    return [(lo, nxt - 1) for lo, nxt in zip(lows, lows[1:])] + [(lows[-1], None)]


@dataclass
class MetricsReport:
    cutoffs: list[int]
    overall: dict[str, dict[str, float]]
    buckets: list[dict]
    n_examples: int
    seeds: list = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)
    std: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def recall(self, k: int) -> float:
        return self.overall[str(k)]["recall"]

    def mrr(self, k: int) -> float:
        return self.overall[str(k)]["mrr"]

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        doc = {k: v for k, v in doc.items() if k != "version"}
        return cls(**doc)


def _metric_table(ranks: np.ndarray, cutoffs: Sequence[int]) -> dict[str, dict[str, float]]:
    return {str(k): {"recall": recall_at(ranks, k), "mrr": mrr_at(ranks, k)} for k in cutoffs}


def build_report(
    ranks, lengths, cutoffs: Sequence[int] = DEFAULT_CUTOFFS, buckets: Sequence[int] = DEFAULT_BUCKETS
) -> MetricsReport:
    ranks = _check_ranks(ranks)
    lengths = np.asarray(lengths)
    cutoffs = sorted(int(k) for k in cutoffs)
    rows = []
    for lo, hi in bucket_bounds(buckets):
        inside = (lengths >= lo) & (lengths <= hi if hi is not None else True)
        count = int(inside.sum())
        rows.append(
            {
                "label": bucket_label(lo, hi),
                "min_len": lo,
                "max_len": hi,
                "count": count,
                "metrics": _metric_table(ranks[inside], cutoffs) if count else None,
            }
        )
    return MetricsReport(cutoffs, _metric_table(ranks, cutoffs), rows, int(ranks.size))


ScoreFn = Callable[[Batch], torch.Tensor]


def collect_ranks(score_fn: ScoreFn, examples: Sequence[PrefixExample], batch_size: int = 512, device=None):
    ranks, lengths = [], []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = collate(chunk, device=device)
            ranks.append(batch_ranks(score_fn(batch), batch.targets).cpu().numpy())
            lengths.append(batch.lengths.cpu().numpy())
    return np.concatenate(ranks), np.concatenate(lengths)


def network_scorer(network, beta: float | None = None) -> ScoreFn:
    def score(batch: Batch) -> torch.Tensor:
        network.eval()
        return network(batch, beta=beta)[0]

    return score


def evaluate(
    model,
    test: SessionCorpus | Sequence[PrefixExample],
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    buckets: Sequence[int] = DEFAULT_BUCKETS,
    batch_size: int = 512,
    beta: float | None = None,
    max_len: int = 50,
) -> MetricsReport:
    """Rank every revealed next item and summarise overall and per prefix-length bucket.

    ``model`` is a :class:`~miasrec.model.MiaSRecNetwork` or any callable mapping a
    :class:`~miasrec.model.Batch` to ``(B, n)`` scores.
    """
    examples = expand_prefixes(test, max_len) if isinstance(test, SessionCorpus) else list(test)
    if not examples:
        raise ValueError("test set has no examples")
    if isinstance(model, torch.nn.Module):
        device = next(model.parameters()).device
        score_fn = network_scorer(model, beta)
    else:
        device, score_fn = None, model
    ranks, lengths = collect_ranks(score_fn, examples, batch_size, device)
    return build_report(ranks, lengths, cutoffs, buckets)


def popularity_baseline(train: SessionCorpus | Iterable) -> ScoreDistribution:
    """Training occurrence counts mapped affinely onto [-1, 1]."""
    sessions = train.sessions if isinstance(train, SessionCorpus) else list(train)
    if not sessions:
        raise ValueError("training corpus is empty")
    counts = Counter(i for s in sessions for i in s.items)
    n = train.n_items if isinstance(train, SessionCorpus) else max(counts)
    c = np.array([counts.get(i, 0) for i in range(1, n + 1)], dtype=np.float64)
    span = c.max() - c.min()
    scores = np.zeros_like(c) if span == 0 else 2 * (c - c.min()) / span - 1
    return ScoreDistribution(scores)


class PopularityScorer:
    """Scores every prefix with the same fixed popularity vector."""

    def __init__(self, train: SessionCorpus):
        self.scores = torch.from_numpy(popularity_baseline(train).scores)

    def __call__(self, batch: Batch) -> torch.Tensor:
        return self.scores.unsqueeze(0).expand(len(batch), -1)


def aggregate_seeds(reports: Sequence[MetricsReport], seeds: Sequence | None = None) -> MetricsReport:
    """Mean over runs, keeping the per-run overall tables and the standard deviation."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    shape = (first.cutoffs, [(b["min_len"], b["max_len"]) for b in first.buckets])
    for r in reports[1:]:
        if (r.cutoffs, [(b["min_len"], b["max_len"]) for b in r.buckets]) != shape:
            raise ValueError("reports differ in cutoffs or buckets")

    def mean_table(tables):
        out, spread = {}, {}
        for k in first.cutoffs:
            out[str(k)], spread[str(k)] = {}, {}
            for m in ("recall", "mrr"):
                vals = np.array([t[str(k)][m] for t in tables])
                out[str(k)][m] = float(vals.mean())
                spread[str(k)][m] = float(vals.std())
        return out, spread

    overall, std = mean_table([r.overall for r in reports])
    buckets = []
    for j, b in enumerate(first.buckets):
        tables = [r.buckets[j]["metrics"] for r in reports if r.buckets[j]["metrics"] is not None]
        buckets.append(
            {
                **{key: b[key] for key in ("label", "min_len", "max_len")},
                "count": int(round(np.mean([r.buckets[j]["count"] for r in reports]))),
                "metrics": mean_table(tables)[0] if tables else None,
            }
        )
    return MetricsReport(
        cutoffs=list(first.cutoffs),
        overall=overall,
        buckets=buckets,
        n_examples=first.n_examples,
        seeds=list(seeds) if seeds is not None else [],
        per_seed=[r.overall for r in reports],
        std=std,
        meta=dict(first.meta),
    )
