"""Shared builders for the test suite."""

import numpy as np
import torch

from miasrec.model import MiaSRecNetwork, ModelConfig, collate
from miasrec.sessions import Session, SessionCorpus, make_example


def small_network(n_items=12, dtype=torch.float64, seed=0, **overrides):
    torch.manual_seed(seed)
    cfg = dict(d=8, num_heads=2, dropout=0.0)
    cfg.update(overrides)
    net = MiaSRecNetwork(n_items, ModelConfig(**cfg)).to(dtype)
    net.eval()
    return net


def stages(net, examples):
    """Intermediate tensors of one forward pass, for white-box checks."""
    batch = collate(examples, device=net.item_embedding.weight.device)
    x, v = net.embed_inputs(batch)
    c = net.encode(x, batch.mask)
    o = net.highway(c, v)
    gamma = net.select_intents(o, batch)
    return batch, x, v, c, o, gamma


def chain_corpus(n_sessions=200, n_items=50, min_len=2, max_len=10, seed=0):
    """Sessions walking a fixed random successor permutation: the next item is a function of the current one."""
    rng = np.random.default_rng(seed)
    successor = dict(zip(range(1, n_items + 1), (rng.permutation(n_items) + 1).tolist()))
    sessions = []
    for k in range(n_sessions):
        cur = int(rng.integers(1, n_items + 1))
        items = [cur]
        for _ in range(int(rng.integers(min_len, max_len + 1)) - 1):
            cur = successor[cur]
            items.append(cur)
        sessions.append(Session(f"s{k:04d}", tuple(items), k))
    return SessionCorpus(sessions, [f"i{i}" for i in range(1, n_items + 1)])
