"""Exact Pearl propagation on fixed trees drawn from a dynamic tree model.

The routines here are vectorized over a batch of trees so the enumeration
oracle can push thousands of structures through at once.  Messages are kept
normalized and their scale factors summed in the log domain, which makes
``log P(X^E | Z)`` exact and underflow free.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ._numeric import normalize, safe_log
from .model import DynamicTreeModel, Evidence, ModelError


@dataclasses.dataclass(frozen=True, eq=False)
class TreeStructure:
    """Chosen menu entry for every non-top node, in global order."""

    chosen: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chosen", np.asarray(self.chosen, dtype=int).ravel())

    def edges(self, model: DynamicTreeModel):
        """``(child, parent)`` node-reference pairs."""
        out = []
        for k, ref in enumerate(model.nodes()[model.layer_sizes[0] :]):
            parent = model.menus[k].parents[self.chosen[k]]
            out.append((ref, type(ref)(ref.layer - 1, parent)))
        return out

    def check(self, model: DynamicTreeModel) -> "TreeStructure":
        if self.chosen.shape != (len(model.menus),):
            raise ModelError(f"tree: expected {len(model.menus)} choices, got {self.chosen.shape[0]}")
        bad = np.flatnonzero((self.chosen < 0) | (self.chosen >= model.menu_sizes))
        if len(bad):
            raise ModelError(f"tree: invalid menu index for nodes {[str(model.nodes()[model.layer_sizes[0] + b]) for b in bad]}")
        return self


@dataclasses.dataclass(frozen=True, eq=False)
class TreeResult:
    marginals: list[np.ndarray]  # per layer, (n_d, m)
    log_evidence: float

    def node_marginal(self, ref) -> np.ndarray:
        return self.marginals[ref.layer][ref.index]


def split_layers(model: DynamicTreeModel, trees: np.ndarray) -> list[np.ndarray | None]:
    """Cut ``(T, n_nontop)`` choice rows into per-layer blocks."""
    out: list[np.ndarray | None] = [None]
    start = 0
    for d in range(1, model.num_layers):
        n = model.layer_sizes[d]
        out.append(trees[:, start : start + n])
        start += n
    return out


def batch_tree_posterior(model: DynamicTreeModel, trees: np.ndarray, evidence: Evidence):
    """Exact marginals and evidence for every tree in a batch.

    Parameters
    ----------
    trees : ndarray, shape (T, n_nontop)
        Menu index chosen by each non-top node, one row per tree.

    Returns
    -------
    marginals : list of ndarray
        Per layer, shape ``(T, n_d, m)``.
    log_evidence : ndarray, shape (T,)
        ``log P(X^E | Z)``; ``-inf`` for trees that cannot produce the evidence.
    """
    trees = np.atleast_2d(np.asarray(trees, dtype=int))
    T = trees.shape[0]
    m = model.num_states
    L = model.num_layers
    choice = split_layers(model, trees)
    rows = np.arange(T)[:, None]

    lam = [None] * L
    lam[L - 1] = np.broadcast_to(evidence.one_hot(m), (T, model.layer_sizes[-1], m)).copy()
    log_z = np.zeros(T)
    parent_of = [None] * L
    cpt_sel = [None] * L
    up_msg = [None] * L
    with np.errstate(divide="ignore"):
        for d in range(L - 1, 0, -1):
            edges = model.edges(d)
            n = model.layer_sizes[d]
            cols = np.arange(n)[None, :]
            parent_of[d] = edges.parent_idx[cols, choice[d]]  # (T, n)
            cpt_sel[d] = edges.cpt[cols, choice[d]]  # (T, n, m, m)
            msg = np.einsum("tckl,tck->tcl", cpt_sel[d], lam[d])
            msg, s = normalize(msg)
            log_z += np.log(s).sum(axis=1)
            up_msg[d] = msg
            lam_par = np.ones((T, model.layer_sizes[d - 1], m))
            for c in range(n):
                lam_par[rows[:, 0], parent_of[d][:, c]] *= msg[:, c]
            lam_par, s = normalize(lam_par)
            log_z += np.log(s).sum(axis=1)
            lam[d - 1] = lam_par

        top = model.root_priors[None, :, :]
        ev_top = np.sum(top * lam[0], axis=2)
        log_z += np.log(ev_top).sum(axis=1)

    pi = [None] * L
    marg = [None] * L
    pi[0] = np.broadcast_to(top, lam[0].shape)
    marg[0] = normalize(pi[0] * lam[0])[0]
    for d in range(1, L):
        n = model.layer_sizes[d]
        msg = up_msg[d]
        par = parent_of[d]
        pi_d = np.empty((T, n, m))
        for c in range(n):
            p = par[:, c]
            down = pi[d - 1][rows[:, 0], p].copy()
            for other in range(n):
                if other != c:
                    same = (par[:, other] == p)[:, None]
                    down *= np.where(same, msg[:, other], 1.0)
            down = normalize(down)[0]
            pi_d[:, c] = np.einsum("tkl,tl->tk", cpt_sel[d][:, c], down)
        pi[d] = normalize(pi_d)[0]
        if d == L - 1:
            marg[d] = lam[d].copy()
        else:
            marg[d] = normalize(pi[d] * lam[d])[0]
    return marg, log_z


def tree_posterior(model: DynamicTreeModel, tree, evidence: Evidence) -> TreeResult:
    """Exact node marginals ``P(x_i | X^E, Z)`` and ``log P(X^E | Z)`` for one tree."""
    if not isinstance(tree, TreeStructure):
        tree = TreeStructure(tree)
    tree.check(model)
    evidence.check(model)
    marg, log_z = batch_tree_posterior(model, tree.chosen[None, :], evidence)
    return TreeResult([mk[0] for mk in marg], float(log_z[0]))


def tree_log_prior(model: DynamicTreeModel, trees: np.ndarray) -> np.ndarray:
    """``log P(Z)`` for each row of a ``(T, n_nontop)`` choice array."""
    trees = np.atleast_2d(trees)
    out = np.zeros(trees.shape[0])
    for d, block in enumerate(split_layers(model, trees)):
        if block is None:
            continue
        rho = model.edges(d).rho
        out += safe_log(rho[np.arange(block.shape[1])[None, :], block]).sum(axis=1)
    return out
