"""Loopy belief propagation on the multi-parent representation of a dynamic tree.

Integrating out the structure leaves a network in which every node depends on
all of its candidate parents through the mixture

    P(x_i = k | parents) = sum_j rho_ij P_ij[k, x_j].

Because the conditional is a mixture, Pearl's messages never need a sum over
joint parent configurations: the pi-side is a rho-weighted sum of per-parent
predictions and the lambda message to one parent is its own term plus a
constant collecting the other candidates.  Messages are updated synchronously
with optional damping and renormalized every iteration.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ._numeric import normalize
from .model import DynamicTreeModel, Evidence


@dataclasses.dataclass
class LoopyOptions:
    max_iterations: int = 200
    message_tolerance: float = 1e-6
    damping: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.message_tolerance > 0:
            raise ValueError("message_tolerance must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")


@dataclasses.dataclass
class LoopyMessages:
    """``pi[d][c, e]`` runs from the ``e``-th candidate parent down to child ``c``;
    ``lam[d][c, e]`` runs from child ``c`` up to that parent.  Both are over the
    parent's states and exist for child layers ``d >= 1``."""

    pi: list
    lam: list

    def copy(self) -> "LoopyMessages":
        return LoopyMessages([None if x is None else x.copy() for x in self.pi],
                             [None if x is None else x.copy() for x in self.lam])


@dataclasses.dataclass
class LoopyResult:
    marginals: list  # per layer (n_d, m)
    converged: bool
    iterations_used: int
    messages: LoopyMessages

    def hidden_marginals(self) -> np.ndarray:
        return np.concatenate(self.marginals[:-1])


def init_messages(model: DynamicTreeModel) -> LoopyMessages:
    m = model.num_states
    pi: list = [None]
    lam: list = [None]
    for d in range(1, model.num_layers):
        shape = model.edges(d).rho.shape + (m,)
        pi.append(np.full(shape, 1.0 / m))
        lam.append(np.full(shape, 1.0 / m))
    return LoopyMessages(pi, lam)


def _node_lambdas(model: DynamicTreeModel, evidence: Evidence, msgs: LoopyMessages) -> list:
    """Product of incoming lambda messages (evidence for leaves), normalized."""
    m = model.num_states
    L = model.num_layers
    out = [None] * L
    out[L - 1] = evidence.one_hot(m)
    for d in range(L - 1, 0, -1):
        edges = model.edges(d)
        log_lam = np.zeros((model.layer_sizes[d - 1], m))
        with np.errstate(divide="ignore"):
            np.add.at(log_lam, edges.parent_idx[edges.mask], np.log(msgs.lam[d][edges.mask]))
        top = log_lam.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        out[d - 1] = normalize(np.exp(log_lam - top))[0]
    return out


def _node_pis(model: DynamicTreeModel, msgs: LoopyMessages) -> list:
    pis = [np.array(model.root_priors)]
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        pred = np.einsum("ce,cekl,cel->ck", edges.rho, edges.cpt, msgs.pi[d])
        pis.append(normalize(pred)[0])
    return pis


def _leave_one_out(model: DynamicTreeModel, msgs: LoopyMessages, d: int) -> np.ndarray:
    """For each (child, entry) of layer ``d``: product of lambda messages the
    parent receives from all *other* children, shape (n, K, m)."""
    edges = model.edges(d)
    m = model.num_states
    out = np.ones(edges.rho.shape + (m,))
    slots = np.argwhere(edges.mask)
    parents = edges.parent_idx[edges.mask]
    for p in range(model.layer_sizes[d - 1]):
        mine = slots[parents == p]
        if len(mine) < 2:
            continue
        stack = msgs.lam[d][mine[:, 0], mine[:, 1]]  # (J, m)
        prefix = np.cumprod(np.vstack([np.ones(m), stack[:-1]]), axis=0)
        suffix = np.cumprod(np.vstack([stack[1:], np.ones(m)])[::-1], axis=0)[::-1]
        others = normalize(prefix * suffix)[0]
        out[mine[:, 0], mine[:, 1]] = others
    return out


def compute_messages(model: DynamicTreeModel, evidence: Evidence, msgs: LoopyMessages) -> LoopyMessages:
    """One synchronous update of every message from the current ones."""
    lam_nodes = _node_lambdas(model, evidence, msgs)
    pis = _node_pis(model, msgs)
    new_pi: list = [None]
    new_lam: list = [None]
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        # downward: parent's pi times its other children's lambdas (hidden parents carry no evidence)
        parent_pi = pis[d - 1][edges.parent_idx]
        new_pi.append(normalize(parent_pi * _leave_one_out(model, msgs, d))[0])
        # upward
        lam_c = lam_nodes[d]
        direct = np.einsum("ck,cekl->cel", lam_c, edges.cpt)
        predicted = np.einsum("cekl,cel->cek", edges.cpt, msgs.pi[d])
        score = np.einsum("ck,cek->ce", lam_c, predicted) * edges.rho
        others = score.sum(axis=1, keepdims=True) - score
        raw = edges.rho[:, :, None] * direct + others[:, :, None]
        new_lam.append(normalize(raw)[0])
    return LoopyMessages(new_pi, new_lam)


def loopy_step(model: DynamicTreeModel, evidence: Evidence, msgs: LoopyMessages, damping: float) -> tuple[LoopyMessages, float]:
    """Damped synchronous update; returns the new messages and the max-norm change."""
    fresh = compute_messages(model, evidence, msgs)
    change = 0.0
    for d in range(1, model.num_layers):
        mask = model.edges(d).mask
        for old, new in ((msgs.pi, fresh.pi), (msgs.lam, fresh.lam)):
            mixed = normalize((1.0 - damping) * new[d] + damping * old[d])[0]
            change = max(change, float(np.max(np.abs(mixed - old[d])[mask])))
            new[d] = mixed
    return fresh, change


def beliefs(model: DynamicTreeModel, evidence: Evidence, msgs: LoopyMessages) -> list:
    lam_nodes = _node_lambdas(model, evidence, msgs)
    pis = _node_pis(model, msgs)
    out = [normalize(p * lam)[0] for p, lam in zip(pis, lam_nodes)]
    out[-1] = evidence.one_hot(model.num_states)
    return out


def loopy_fit(model: DynamicTreeModel, evidence: Evidence, options: LoopyOptions | None = None) -> LoopyResult:
    """Run synchronous damped propagation until messages stop moving."""
    options = options or LoopyOptions()
    evidence.check(model)
    msgs = init_messages(model)
    converged = False
    it = 0
    for it in range(1, options.max_iterations + 1):
        msgs, change = loopy_step(model, evidence, msgs, options.damping)
        if change < options.message_tolerance:
            converged = True
            break
    return LoopyResult(beliefs(model, evidence, msgs), converged, it, msgs)
