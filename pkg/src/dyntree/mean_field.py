"""Mean-field baseline: fully factorized node states and parent choices.

This is the structured family with every table pinned to ``Q[k, l] = m_child[k]``.
The coordinate updates below are the stationary points of the free energy in
that restricted family; each one is an exact minimization, so the free energy
never increases.  Nodes within a layer do not interact, so whole layers are
updated at once, top layer first.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ._numeric import InferenceError, safe_log, softmax_rows, weighted_log
from .model import DynamicTreeModel, Evidence
from .svi import MONOTONE_SLACK, StructuredPosterior, svi_free_energy


@dataclasses.dataclass
class MeanFieldOptions:
    inner_iters: int = 20
    tolerance: float = 0.01
    max_outer: int = 50
    perturbation: float = 1e-3

    def __post_init__(self):
        if self.inner_iters < 1 or self.max_outer < 1:
            raise ValueError("inner_iters and max_outer must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclasses.dataclass
class MeanFieldPosterior:
    evidence: Evidence
    mu: list  # [None, (n_1, K_1), ...]
    means: list  # per layer (n_d, m)
    free_energy_trace: list = dataclasses.field(default_factory=list)
    diagnostics: list = dataclasses.field(default_factory=list)
    converged: bool = False

    def hidden_marginals(self) -> np.ndarray:
        return np.concatenate(self.means[:-1])

    @property
    def free_energy(self) -> float:
        return self.free_energy_trace[-1]


def mf_init(model: DynamicTreeModel, evidence: Evidence, rng: np.random.Generator | None = None,
            perturbation: float = 1e-3) -> MeanFieldPosterior:
    """Uniform means with a small seeded perturbation, ``mu = rho``."""
    evidence.check(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    m = model.num_states
    means = []
    for n in model.layer_sizes[:-1]:
        raw = 1.0 / m + perturbation * rng.uniform(-1.0, 1.0, size=(n, m))
        raw = np.clip(raw, 1e-12, None)
        means.append(raw / raw.sum(axis=1, keepdims=True))
    means.append(evidence.one_hot(m))
    mu = [None] + [model.edges(d).rho.copy() for d in range(1, model.num_layers)]
    return MeanFieldPosterior(evidence, mu, means)


def _scale(w, v):
    """``w * v`` with ``0 * (-inf) := 0``."""
    return np.where(w > 0, w * np.where(w > 0, v, 0.0), 0.0)


def _log_cpt_given_parent(parent_means, cpt):
    """``sum_l m_parent[l] log P[k, l]``; shapes (n, K, l) and (n, K, k, l) -> (n, K, k)."""
    return weighted_log(np.broadcast_to(parent_means[:, :, None, :], cpt.shape), cpt).sum(axis=3)


def _log_cpt_given_child(child_means, cpt):
    """``sum_g m_child[g] log P[g, k]``; shapes (n, g) and (n, K, g, k) -> (n, K, k)."""
    return weighted_log(np.broadcast_to(child_means[:, None, :, None], cpt.shape), cpt).sum(axis=2)


def _layer_log_field(model: DynamicTreeModel, state: MeanFieldPosterior, d: int) -> np.ndarray:
    """Unnormalized log mean for every node of hidden layer ``d``."""
    if d == 0:
        field = safe_log(model.root_priors)
    else:
        edges = model.edges(d)
        pm = state.means[d - 1][edges.parent_idx]
        field = _scale(state.mu[d][:, :, None], _log_cpt_given_parent(pm, edges.cpt)).sum(axis=1)
    edges = model.edges(d + 1)
    mu_c = state.mu[d + 1]
    contrib = _scale(mu_c[:, :, None], _log_cpt_given_child(state.means[d + 1], edges.cpt))
    live = edges.mask & (mu_c > 0)
    up = np.zeros_like(field)
    np.add.at(up, edges.parent_idx[live], contrib[live])
    return field + up


def _edge_cross_term(state: MeanFieldPosterior, model: DynamicTreeModel, d: int) -> np.ndarray:
    """``sum_kl m_child[k] m_parent[l] log P[k, l]`` per edge of child layer ``d``."""
    edges = model.edges(d)
    per_edge = _log_cpt_given_parent(state.means[d - 1][edges.parent_idx], edges.cpt)
    mc = np.broadcast_to(state.means[d][:, None, :], per_edge.shape)
    return _scale(mc, per_edge).sum(axis=2)


def mf_update_means(state: MeanFieldPosterior, model: DynamicTreeModel) -> list:
    """One top-down sweep of exact coordinate updates over the hidden layers."""
    for d in range(model.num_layers - 1):
        try:
            state.means[d] = softmax_rows(_layer_log_field(model, state, d))
        except InferenceError:
            raise InferenceError(f"layer {d}: every state impossible under the factorization") from None
    return state.means


def mf_update_mu(state: MeanFieldPosterior, model: DynamicTreeModel) -> list:
    """``mu ~ rho * exp(sum_kl m_child[k] m_parent[l] log P[k, l])`` per menu."""
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        score = _edge_cross_term(state, model, d)
        try:
            state.mu[d] = softmax_rows(safe_log(edges.rho) + score, edges.mask)
        except InferenceError:
            raise InferenceError(f"layer {d}: every parent choice has zero weight") from None
    return state.mu


def mf_free_energy(state: MeanFieldPosterior, model: DynamicTreeModel) -> float:
    """Free energy of the factorized distribution; zero-probability mass gives ``+inf``."""
    total = 0.0
    for d in range(model.num_layers - 1):
        total += float(np.sum(weighted_log(state.means[d], state.means[d])))
    top = state.means[0]
    total -= float(np.sum(weighted_log(top, model.root_priors)))
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        mu = np.where(edges.mask, state.mu[d], 0.0)
        total += float(np.sum(weighted_log(mu, mu) - weighted_log(mu, edges.rho)))
        total -= float(np.sum(_scale(mu, _edge_cross_term(state, model, d))))
    return total


def mf_fit(model: DynamicTreeModel, evidence: Evidence, options: MeanFieldOptions | None = None,
           rng: np.random.Generator | None = None) -> MeanFieldPosterior:
    """Alternate ``inner_iters`` mean sweeps with one ``mu`` update until the
    free energy settles within ``tolerance``."""
    options = options or MeanFieldOptions()
    state = mf_init(model, evidence, rng, options.perturbation)
    trace = state.free_energy_trace
    for it in range(options.max_outer):
        for _ in range(options.inner_iters):
            mf_update_means(state, model)
        mf_update_mu(state, model)
        f = mf_free_energy(state, model)
        if trace and f > trace[-1] + MONOTONE_SLACK:
            state.diagnostics.append(f"outer iteration {it}: free energy rose by {f - trace[-1]:.3e}")
        trace.append(f)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < options.tolerance:
            state.converged = True
            break
    return state


def embed_in_structured(state: MeanFieldPosterior, model: DynamicTreeModel) -> StructuredPosterior:
    """The structured posterior with ``Q[k, l] = m_child[k]`` for every edge."""
    from .svi import _degenerate_tables, svi_init

    out = svi_init(model, state.evidence)
    m = model.num_states
    L = model.num_layers
    out.mu = [None] + [np.array(mu) for mu in state.mu[1:]]
    out.q_tables[0] = np.array(state.means[0])
    for d in range(1, L):
        K = out.mu[d].shape[1]
        if d == L - 1:
            out.q_tables[d] = _degenerate_tables(state.evidence, m, K)
        else:
            out.q_tables[d] = np.broadcast_to(state.means[d][:, None, :, None], (len(state.means[d]), K, m, m)).copy()
    out.means = [np.array(x) for x in state.means]
    out.free_energy_trace = [svi_free_energy(out, model)]
    return out
