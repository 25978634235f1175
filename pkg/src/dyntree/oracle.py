"""Exact posterior of a dynamic tree by enumerating every tree structure.

Each structure is solved exactly with :mod:`dyntree.tree_bp` and weighted by
``P(Z) P(X^E | Z)``.  Trees are visited in a fixed mixed-radix order (the last
non-top node varies fastest), in chunks, and folded into running accumulators
with a shared log-scale, so results do not depend on the chunk size.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from ._numeric import InferenceError
from .model import DynamicTreeModel, Evidence
from .tree_bp import TreeStructure, batch_tree_posterior, tree_log_prior

DEFAULT_LIMIT = 10**6
MATERIALIZE_LIMIT = 10**5


class TreeCountExceeded(InferenceError):
    def __init__(self, count: int, limit: int):
        self.count = count
        self.limit = limit
        super().__init__(f"model has {count} trees, above the enumeration limit {limit}")


class ZeroEvidenceError(InferenceError):
    pass


@dataclasses.dataclass(eq=False)
class ExactPosterior:
    """Result of :func:`exact_posterior`.

    ``tree_weights`` is only filled when the tree count is at most
    ``MATERIALIZE_LIMIT``; ``top_trees`` always holds the best ``top_k``.
    """

    log_evidence: float
    node_marginals: list[np.ndarray]  # per layer, (n_d, m)
    edge_posterior: list[np.ndarray | None]  # per child layer, (n_d, K_d), padded with 0
    tree_count: int
    tree_weights: np.ndarray | None
    top_trees: list[tuple[int, float]]  # (tree index, posterior weight)

    def hidden_marginals(self) -> np.ndarray:
        return np.concatenate(self.node_marginals[:-1]) if len(self.node_marginals) > 1 else np.zeros((0, 0))


def tree_count(model: DynamicTreeModel) -> int:
    """Number of tree structures: product of menu sizes over non-top nodes."""
    return math.prod(int(n) for n in model.menu_sizes)


def decode_trees(model: DynamicTreeModel, indices) -> np.ndarray:
    """Mixed-radix tree indices to ``(T, n_nontop)`` menu choices."""
    indices = np.asarray(indices, dtype=np.int64)
    sizes = model.menu_sizes
    if len(sizes) == 0:
        return np.zeros((len(indices), 0), dtype=int)
    return np.stack(np.unravel_index(indices, tuple(int(s) for s in sizes)), axis=1)


def tree_from_index(model: DynamicTreeModel, index: int) -> TreeStructure:
    return TreeStructure(decode_trees(model, [index])[0])


def exact_posterior(
    model: DynamicTreeModel,
    evidence: Evidence,
    limit: int = DEFAULT_LIMIT,
    chunk_size: int = 4096,
    top_k: int = 5,
) -> ExactPosterior:
    """Posterior over structures and node states by full enumeration."""
    evidence.check(model)
    count = tree_count(model)
    if count > limit:
        raise TreeCountExceeded(count, limit)
    L = model.num_layers
    m = model.num_states

    run_max = -np.inf
    total = 0.0
    marg_acc = [np.zeros((n, m)) for n in model.layer_sizes]
    edge_acc = [None] + [np.zeros(model.edges(d).rho.shape) for d in range(1, L)]
    keep = count <= MATERIALIZE_LIMIT
    all_logw = np.empty(count) if keep else None
    best_idx = np.zeros(0, dtype=np.int64)
    best_logw = np.zeros(0)

    for start in range(0, count, chunk_size):
        idx = np.arange(start, min(start + chunk_size, count), dtype=np.int64)
        trees = decode_trees(model, idx)
        marg, log_lik = batch_tree_posterior(model, trees, evidence)
        logw = tree_log_prior(model, trees) + log_lik
        if keep:
            all_logw[idx] = logw
        cand_idx = np.concatenate([best_idx, idx])
        cand_logw = np.concatenate([best_logw, logw])
        order = np.lexsort((cand_idx, -cand_logw))[:top_k]
        best_idx, best_logw = cand_idx[order], cand_logw[order]

        chunk_max = logw.max()
        if not np.isfinite(chunk_max):
            continue
        new_max = max(run_max, chunk_max)
        rescale = math.exp(run_max - new_max) if np.isfinite(run_max) else 0.0
        run_max = new_max
        w = np.exp(logw - run_max)
        total = total * rescale + w.sum()
        for d in range(L):
            marg_acc[d] = marg_acc[d] * rescale + np.einsum("t,tnk->nk", w, marg[d])
        for d in range(1, L):
            n = model.layer_sizes[d]
            start_col = model.offsets[d] - model.layer_sizes[0]
            block = trees[:, start_col : start_col + n]
            K = edge_acc[d].shape[1]
            onehot = block[:, :, None] == np.arange(K)[None, None, :]
            edge_acc[d] = edge_acc[d] * rescale + np.einsum("t,tnk->nk", w, onehot)

    if not np.isfinite(run_max):
        raise ZeroEvidenceError("the evidence has zero probability under every tree")
    log_evidence = float(run_max + math.log(total))
    marginals = [acc / total for acc in marg_acc]
    edges = [None] + [acc / total for acc in edge_acc[1:]]
    weights = np.exp(all_logw - log_evidence) if keep else None
    top = [(int(i), float(math.exp(lw - log_evidence))) for i, lw in zip(best_idx, best_logw)]
    return ExactPosterior(log_evidence, marginals, edges, count, weights, top)
