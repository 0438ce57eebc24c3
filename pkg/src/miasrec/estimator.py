"""scikit-learn style wrapper around the network and training loop."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import evaluate
from .model import ModelConfig, collate
from .sessions import Session, SessionCorpus, expand_prefixes, make_example
from .training import TrainConfig, train


def check_sessions(X, min_len: int = 1, n_items: int | None = None) -> list[tuple[int, ...]]:
    """Coerce ``X`` to a list of integer item tuples, checking lengths and index range."""
    if isinstance(X, SessionCorpus):
        X = [s.items for s in X.sessions]
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError("X must be an iterable of item sequences")
    out = []
    for row, seq in enumerate(X):
        seq = tuple(int(i) for i in np.asarray(seq).ravel())
        if len(seq) < min_len:
            raise ValueError(f"sequence {row} has length {len(seq)}, need at least {min_len}")
        if seq and min(seq) < 1:
            raise ValueError(f"sequence {row}: item indices are 1-based")
        if n_items is not None and seq and max(seq) > n_items:
            raise ValueError(f"sequence {row}: item {max(seq)} outside vocabulary of {n_items}")
        out.append(seq)
    if not out:
        raise ValueError("X is empty")
    return out


def _corpus(seqs: Sequence[tuple[int, ...]], n_items: int) -> SessionCorpus:
    return SessionCorpus([Session(str(k), s, k) for k, s in enumerate(seqs)], [str(i) for i in range(1, n_items + 1)])


class MiaSRec(BaseEstimator):
    """Next-item recommender over sessions given as sequences of 1-based item indices.

    ``fit`` takes whole sessions; ``predict`` takes prefixes and returns the
    ``top_k`` recommended items for each.
    """

    def __init__(
        self,
        d=100,
        max_len=50,
        num_layers=1,
        num_heads=2,
        alpha=1.5,
        beta=0.5,
        tau=0.07,
        dropout=0.2,
        use_position_embedding=True,
        use_frequency_embedding=True,
        intent_mode="entmax",
        lr=1e-3,
        batch_size=1024,
        max_epochs=200,
        patience=3,
        n_items=None,
        top_k=20,
        random_state=0,
    ):
        self.d = d
        self.max_len = max_len
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.dropout = dropout
        self.use_position_embedding = use_position_embedding
        self.use_frequency_embedding = use_frequency_embedding
        self.intent_mode = intent_mode
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.n_items = n_items
        self.top_k = top_k
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            max_len=self.max_len,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            alpha=self.alpha,
            beta=self.beta,
            tau=self.tau,
            dropout=self.dropout,
            use_position_embedding=self.use_position_embedding,
            use_frequency_embedding=self.use_frequency_embedding,
            intent_mode=self.intent_mode,
        )

    def fit(self, X, y=None, X_val=None):
        """Train on sessions ``X``; early stopping watches ``X_val`` (or ``X`` itself when absent)."""
        sessions = check_sessions(X, min_len=2, n_items=self.n_items)
        n_items = self.n_items or max(max(s) for s in sessions)
        val = check_sessions(X_val, min_len=2, n_items=n_items) if X_val is not None else sessions
        result = train(
            _corpus(sessions, n_items),
            _corpus(val, n_items),
            self._model_config(),
            seed=self.random_state,
            train_config=TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience),
        )
        self.network_ = result.network
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_items_ = n_items
        return self

    def predict_scores(self, X) -> np.ndarray:
        """Aggregated scores ``(n_prefixes, n_items)``; column ``j`` is item ``j + 1``."""
        check_is_fitted(self, "network_")
        prefixes = check_sessions(X, min_len=1, n_items=self.n_items_)
        examples = [make_example(p, 1, self.max_len) for p in prefixes]
        device = self.network_.item_embedding.weight.device
        self.network_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(examples), 512):
                scores, _ = self.network_(collate(examples[start : start + 512], device))
                out.append(scores.cpu().numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        """Top ``top_k`` items per prefix, best first; ties go to the lower index."""
        scores = self.predict_scores(X)
        k = min(self.top_k, scores.shape[1])
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k] + 1

    def score(self, X, y=None) -> float:
        """MRR@20 over every revealed prefix of the sessions in ``X``."""
        check_is_fitted(self, "network_")
        sessions = check_sessions(X, min_len=2, n_items=self.n_items_)
        examples = expand_prefixes(_corpus(sessions, self.n_items_), self.max_len)
        return evaluate(self.network_, examples, cutoffs=(20,), buckets=(1,)).mrr(20)
