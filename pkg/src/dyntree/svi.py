"""Structured variational inference for dynamic trees.

The approximating distribution is itself a dynamic tree: a factorized
distribution ``mu`` over every node's parent choice, and for every edge a
column-stochastic table ``Q[k, l] = Q(child = k | parent = l)``.  Given ``mu``
the optimal tables come from one upward pass of ``lambda`` messages and the
node means from one downward pass, so the whole scheme costs two linear
sweeps per update of ``mu``.

Layer arrays follow :class:`dyntree.model.LayerEdges`: per child layer ``d``
the menu arrays have shape ``(n_d, K_d)`` and the tables ``(n_d, K_d, m, m)``.
``q_tables[0]`` holds the table of the edge from the virtual root to each top
node, i.e. a plain distribution of shape ``(n_0, m)``.  Evidential nodes keep
fixed degenerate tables ``Q[k, l] = x^k`` that are never optimized.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Literal

import numpy as np

from ._numeric import InferenceError, normalize, safe_log, softmax_rows, weighted_log
from .model import DynamicTreeModel, Evidence
from .tree_bp import TreeStructure

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-9


@dataclasses.dataclass
class FitOptions:
    """Controls for :func:`svi_fit`.

    ``schedule="parallel"`` runs the full upward, table and downward passes and
    then updates every ``mu`` at once.  ``"layered"`` instead updates ``mu`` one
    layer at a time on the way up, refreshing ``lambda`` and ``Q`` in between,
    which makes every step an exact block minimization.
    """

    max_passes: int = 1000
    kl_tolerance: float = 0.01
    mu_damping: float = 0.0
    schedule: Literal["parallel", "layered"] = "parallel"

    def __post_init__(self):
        if self.max_passes < 1:
            raise ValueError("max_passes must be at least 1")
        if not self.kl_tolerance > 0:
            raise ValueError("kl_tolerance must be positive")
        if not 0 <= self.mu_damping < 1:
            raise ValueError("mu_damping must lie in [0, 1)")
        if self.schedule not in ("layered", "parallel"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclasses.dataclass
class StructuredPosterior:
    evidence: Evidence
    mu: list  # [None, (n_1, K_1), ...]
    q_tables: list  # [(n_0, m), (n_1, K_1, m, m), ...]
    lambdas: list  # per layer (n_d, m), max-normalized
    log_scales: list  # per layer (n_d,), log of the factor removed from lambda
    means: list | None = None  # per layer (n_d, m)
    free_energy_trace: list = dataclasses.field(default_factory=list)
    diagnostics: list = dataclasses.field(default_factory=list)
    passes: int = 0
    converged: bool = False

    def copy(self) -> "StructuredPosterior":
        def cp(xs):
            return None if xs is None else [None if x is None else np.array(x) for x in xs]

        return dataclasses.replace(
            self,
            mu=cp(self.mu),
            q_tables=cp(self.q_tables),
            lambdas=cp(self.lambdas),
            log_scales=cp(self.log_scales),
            means=cp(self.means),
            free_energy_trace=list(self.free_energy_trace),
            diagnostics=list(self.diagnostics),
        )

    def hidden_marginals(self) -> np.ndarray:
        return np.concatenate(self.means[:-1])

    @property
    def free_energy(self) -> float:
        return self.free_energy_trace[-1]


def _degenerate_tables(evidence: Evidence, m: int, K: int) -> np.ndarray:
    x = evidence.one_hot(m)  # (n, m)
    return np.broadcast_to(x[:, None, :, None], (len(x), K, m, m)).copy()


def svi_init(model: DynamicTreeModel, evidence: Evidence) -> StructuredPosterior:
    """Starting point: ``mu = rho``, leaf ``lambda`` = evidence, hidden ``lambda`` = 1."""
    evidence.check(model)
    m = model.num_states
    L = model.num_layers
    mu: list = [None]
    q: list = [model.root_priors.copy()]
    for d in range(1, L):
        edges = model.edges(d)
        mu.append(edges.rho.copy())
        if d == L - 1:
            q.append(_degenerate_tables(evidence, m, edges.rho.shape[1]))
        else:
            q.append(edges.cpt.copy())
    if L == 1:
        q[0] = evidence.one_hot(m)
    lambdas = [np.ones((n, m)) for n in model.layer_sizes]
    lambdas[-1] = evidence.one_hot(m)
    scales = [np.zeros(n) for n in model.layer_sizes]
    return StructuredPosterior(evidence, mu, q, lambdas, scales)


# -- single-layer building blocks -------------------------------------------


def _lambda_layer(model: DynamicTreeModel, state: StructuredPosterior, d: int) -> None:
    """Messages from child layer ``d`` into layer ``d - 1``."""
    edges = model.edges(d)
    mu = state.mu[d]
    bracket = np.einsum("cegk,cg->cek", edges.cpt, state.lambdas[d])
    live = edges.mask & (mu > 0)
    if np.any(live & (bracket.max(axis=2) <= 0)):
        c, e = np.argwhere(live & (bracket.max(axis=2) <= 0))[0]
        raise InferenceError(f"zero bracket on edge {d}:{c} -> {d - 1}:{edges.parent_idx[c, e]}")
    contrib = weighted_log(np.broadcast_to(mu[:, :, None], bracket.shape), bracket)
    log_lam = np.zeros((model.layer_sizes[d - 1], model.num_states))
    np.add.at(log_lam, edges.parent_idx[live], contrib[live])
    shift = log_lam.max(axis=1)
    if not np.all(np.isfinite(shift)):
        p = int(np.flatnonzero(~np.isfinite(shift))[0])
        raise InferenceError(f"node {d - 1}:{p} has zero lambda in every state")
    state.lambdas[d - 1] = np.exp(log_lam - shift[:, None])
    state.log_scales[d - 1] = shift


def _q_layer(model: DynamicTreeModel, state: StructuredPosterior, d: int) -> None:
    lam = state.lambdas[d]
    if d == 0:
        if model.num_layers == 1:
            return
        num = model.root_priors * lam
        q, s = normalize(num, axis=1)
        if np.any(s <= 0):
            raise InferenceError("evidence impossible under the root priors")
        state.q_tables[0] = q
        return
    if d == model.num_layers - 1:
        return
    edges = model.edges(d)
    num = edges.cpt * lam[:, None, :, None]
    den = num.sum(axis=2, keepdims=True)
    zero = den <= 0
    if np.any(zero[..., 0, :] & edges.mask[:, :, None]):
        state.diagnostics.append(f"layer {d}: zero-denominator Q column set to uniform")
    state.q_tables[d] = np.where(zero, 1.0 / model.num_states, num / np.where(zero, 1.0, den))


def _mu_weights(model: DynamicTreeModel, lam: np.ndarray, parent_means: np.ndarray, d: int) -> np.ndarray:
    """Unnormalized log of the menu update for child layer ``d``."""
    edges = model.edges(d)
    bracket = np.einsum("cekl,ck->cel", edges.cpt, lam)
    pm = parent_means[edges.parent_idx]  # (n, K, m)
    return safe_log(edges.rho) + weighted_log(pm, bracket).sum(axis=2)


def _mu_layer(model: DynamicTreeModel, state: StructuredPosterior, d: int, damping: float) -> None:
    edges = model.edges(d)
    logw = _mu_weights(model, state.lambdas[d], state.means[d - 1], d)
    try:
        new = softmax_rows(logw, edges.mask)
    except InferenceError:
        raise InferenceError(f"layer {d}: every parent choice has zero weight") from None
    if damping:
        new = (1.0 - damping) * new + damping * state.mu[d]
    state.mu[d] = new


def propagate_means(model: DynamicTreeModel, evidence: Evidence, mu: list, q_tables: list) -> list:
    """Node means from the tables and parent choices, top layer down."""
    L = model.num_layers
    m = model.num_states
    means = [None] * L
    means[0] = evidence.one_hot(m) if L == 1 else np.array(q_tables[0])
    for d in range(1, L):
        if d == L - 1:
            means[d] = evidence.one_hot(m)
            continue
        edges = model.edges(d)
        pm = means[d - 1][edges.parent_idx]
        means[d] = np.einsum("ce,cekl,cel->ck", mu[d], q_tables[d], pm)
    return means


def _edge_energies(model: DynamicTreeModel, evidence: Evidence, q_tables: list, means: list, d: int) -> np.ndarray:
    """Per-edge ``sum_kl Q m_parent log(Q / P)`` for child layer ``d``, shape (n, K)."""
    edges = model.edges(d)
    pm = means[d - 1][edges.parent_idx]  # (n, K, l)
    if d == model.num_layers - 1:
        x = evidence.states
        p_obs = edges.cpt[np.arange(len(x)), :, x, :]  # (n, K, l)
        return -weighted_log(pm, p_obs).sum(axis=2)
    q = q_tables[d]
    inner = weighted_log(q, q) - weighted_log(q, edges.cpt)  # (n, K, k, l)
    inner = inner.sum(axis=2)
    return np.where(pm > 0, pm * np.where(pm > 0, inner, 0.0), 0.0).sum(axis=2)


def _mu_energy(mu: np.ndarray, rho: np.ndarray) -> float:
    return float(np.sum(weighted_log(mu, mu) - weighted_log(mu, rho)))


def _root_energy(model: DynamicTreeModel, evidence: Evidence, q_top: np.ndarray) -> float:
    if model.num_layers == 1:
        return float(-np.sum(safe_log(model.root_priors[np.arange(len(evidence.states)), evidence.states])))
    return float(np.sum(weighted_log(q_top, q_top) - weighted_log(q_top, model.root_priors)))


def free_energy_from_parts(model: DynamicTreeModel, evidence: Evidence, mu: list, q_tables: list) -> float:
    """Variational free energy of any (mu, Q) pair; means are recomputed."""
    means = propagate_means(model, evidence, mu, q_tables)
    total = _root_energy(model, evidence, q_tables[0])
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        total += _mu_energy(np.where(edges.mask, mu[d], 0.0), edges.rho)
        energies = _edge_energies(model, evidence, q_tables, means, d)
        total += float(np.sum(np.where(mu[d] > 0, mu[d] * np.where(mu[d] > 0, energies, 0.0), 0.0)))
    return total


# -- public operations -------------------------------------------------------


def svi_lambda_pass(state: StructuredPosterior, model: DynamicTreeModel) -> list:
    """Upward sweep of ``lambda`` messages from the evidence."""
    for d in range(model.num_layers - 1, 0, -1):
        _lambda_layer(model, state, d)
    return state.lambdas


def svi_q_update(state: StructuredPosterior, model: DynamicTreeModel) -> list:
    """Optimal tables for the current ``lambda``: ``Q[a, b] ~ P[a, b] lambda[a]``."""
    for d in range(model.num_layers):
        _q_layer(model, state, d)
    return state.q_tables


def svi_means_pass(state: StructuredPosterior, model: DynamicTreeModel) -> list:
    state.means = propagate_means(model, state.evidence, state.mu, state.q_tables)
    return state.means


def svi_mu_update(state: StructuredPosterior, model: DynamicTreeModel, damping: float = 0.0) -> list:
    """Parent-choice update for every layer from the current ``lambda`` and means."""
    if state.means is None:
        raise InferenceError("means must be computed before updating mu")
    for d in range(1, model.num_layers):
        _mu_layer(model, state, d, damping)
    return state.mu


def svi_free_energy(state: StructuredPosterior, model: DynamicTreeModel) -> float:
    """``<log Q - log P(Z, X)>_Q``, an upper bound on ``-log P(X^E)``."""
    return free_energy_from_parts(model, state.evidence, state.mu, state.q_tables)


def downstream_derivatives(state: StructuredPosterior, model: DynamicTreeModel) -> list:
    """Derivative of the free energy below each node with respect to its mean.

    Evaluated for the current tables, whatever they are; for optimal tables it
    equals ``-log lambda`` up to a per-node constant.
    """
    L = model.num_layers
    m = model.num_states
    T = [np.zeros((n, m)) for n in model.layer_sizes]
    for d in range(L - 1, 0, -1):
        edges = model.edges(d)
        if d == L - 1:
            q = _degenerate_tables(state.evidence, m, edges.rho.shape[1])
        else:
            q = state.q_tables[d]
        inner = weighted_log(q, q) - weighted_log(q, edges.cpt) + q * T[d][:, None, :, None]
        per_parent_state = inner.sum(axis=2)  # (n, K, l)
        live = edges.mask & (state.mu[d] > 0)
        contrib = state.mu[d][:, :, None] * per_parent_state
        np.add.at(T[d - 1], edges.parent_idx[live], contrib[live])
    return T


def downstream_energy(state: StructuredPosterior, model: DynamicTreeModel, layer: int, index: int, node_mean) -> float:
    """Free-energy contribution of all edges below ``layer`` when node ``(layer, index)``
    has mean ``node_mean`` and every table and choice is held fixed."""
    L = model.num_layers
    means = propagate_means(model, state.evidence, state.mu, state.q_tables)
    means[layer] = np.array(means[layer])
    means[layer][index] = np.asarray(node_mean, dtype=float)
    for d in range(layer + 1, L - 1):
        edges = model.edges(d)
        pm = means[d - 1][edges.parent_idx]
        means[d] = np.einsum("ce,cekl,cel->ck", state.mu[d], state.q_tables[d], pm)
    total = 0.0
    for d in range(layer + 1, L):
        energies = _edge_energies(model, state.evidence, state.q_tables, means, d)
        total += float(np.sum(state.mu[d] * energies))
    return total


def _record(state: StructuredPosterior, model: DynamicTreeModel) -> float:
    f = svi_free_energy(state, model)
    trace = state.free_energy_trace
    if trace and f > trace[-1] + MONOTONE_SLACK:
        state.diagnostics.append(f"pass {state.passes}: free energy rose by {f - trace[-1]:.3e}")
    trace.append(f)
    return f


def _layered_pass(state: StructuredPosterior, model: DynamicTreeModel, damping: float) -> None:
    update_mu = state.means is not None
    for d in range(model.num_layers - 1, 0, -1):
        _q_layer(model, state, d)
        if update_mu:
            _mu_layer(model, state, d, damping)
        _lambda_layer(model, state, d)
    _q_layer(model, state, 0)
    svi_means_pass(state, model)


def _parallel_pass(state: StructuredPosterior, model: DynamicTreeModel, damping: float) -> None:
    svi_lambda_pass(state, model)
    svi_q_update(state, model)
    svi_means_pass(state, model)
    svi_mu_update(state, model, damping)
    svi_means_pass(state, model)


def svi_fit(
    model: DynamicTreeModel,
    evidence: Evidence,
    options: FitOptions | None = None,
    init: StructuredPosterior | None = None,
) -> StructuredPosterior:
    """Alternate the upward, table, downward and parent-choice updates to convergence.

    Stops once the free energy changes by less than ``kl_tolerance`` between
    passes or after ``max_passes``.  A warm start from ``init`` (for instance a
    previous fit, possibly under other parameters) records its starting free
    energy as the first trace entry.
    """
    options = options or FitOptions()
    if init is None:
        state = svi_init(model, evidence)
    else:
        state = init.copy()
        state.evidence = evidence
        state.free_energy_trace = []
        state.passes = 0
        state.converged = False
        svi_means_pass(state, model)
        _record(state, model)
    step = _layered_pass if options.schedule == "layered" else _parallel_pass
    for _ in range(options.max_passes):
        step(state, model, options.mu_damping)
        state.passes += 1
        _record(state, model)
        trace = state.free_energy_trace
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < options.kl_tolerance:
            state.converged = True
            break
    if state.diagnostics:
        log.debug("svi diagnostics: %s", state.diagnostics)
    return state


def svi_map_tree(state: StructuredPosterior) -> TreeStructure:
    """Most probable structure under the factorized choice distribution."""
    chosen = [np.argmax(mu, axis=1) for mu in state.mu[1:]]
    return TreeStructure(np.concatenate(chosen) if chosen else np.zeros(0, dtype=int))


def q_diagonal_mass(state: StructuredPosterior, model: DynamicTreeModel) -> tuple[float, float]:
    """``mu``-weighted mean diagonal and off-diagonal entries of the hidden-edge tables."""
    m = model.num_states
    eye = np.eye(m, dtype=bool)
    diag_sum = off_sum = weight = 0.0
    for d in range(1, model.num_layers - 1):
        w = np.where(model.edges(d).mask, state.mu[d], 0.0)
        q = state.q_tables[d]
        diag_sum += float(np.einsum("ce,cek->", w, q[:, :, eye]))
        off_sum += float(np.einsum("ce,cek->", w, q[:, :, ~eye]))
        weight += float(w.sum())
    if weight == 0:
        return float("nan"), float("nan")
    return diag_sum / (weight * m), off_sum / (weight * m * (m - 1))


# -- EM ------------------------------------------------------------------------


@dataclasses.dataclass
class ExpectedCounts:
    cpt_counts: dict  # tie class -> (m, m)
    edge_weights: list  # per child layer (n_d, K_d)
    root_counts: np.ndarray  # (n_0, m)

    def __add__(self, other: "ExpectedCounts") -> "ExpectedCounts":
        counts = {k: self.cpt_counts[k] + other.cpt_counts[k] for k in self.cpt_counts}
        weights = [None if a is None else a + b for a, b in zip(self.edge_weights, other.edge_weights)]
        return ExpectedCounts(counts, weights, self.root_counts + other.root_counts)


def em_expected_counts(state: StructuredPosterior, model: DynamicTreeModel) -> ExpectedCounts:
    """Expected edge statistics ``mu * Q[k, l] * m_parent[l]`` gathered by tie class."""
    m = model.num_states
    means = propagate_means(model, state.evidence, state.mu, state.q_tables)
    counts = {label: np.zeros((m, m)) for label in model.cpts}
    weights: list = [None]
    for d in range(1, model.num_layers):
        edges = model.edges(d)
        mu = np.where(edges.mask, state.mu[d], 0.0)
        if d == model.num_layers - 1:
            q = _degenerate_tables(state.evidence, m, mu.shape[1])
        else:
            q = state.q_tables[d]
        pm = means[d - 1][edges.parent_idx]
        joint = mu[:, :, None, None] * q * pm[:, :, None, :]
        for c, ties in enumerate(model.layer_ties(d)):
            for e, label in enumerate(ties):
                counts[label] += joint[c, e]
        weights.append(mu)
    root = np.array(means[0]) if model.num_layers > 1 else state.evidence.one_hot(m)
    return ExpectedCounts(counts, weights, root)


@dataclasses.dataclass
class EMOptions:
    iterations: int = 5
    fit: FitOptions = dataclasses.field(default_factory=FitOptions)
    smoothing: float = 0.0
    learn_rho: bool = True
    learn_root_priors: bool = True


@dataclasses.dataclass
class EMResult:
    model: DynamicTreeModel
    free_energy_trace: list  # total over cases, one entry per E-step
    models: list  # parameters after each M-step, starting with the input model
    states: list  # final per-case posteriors


def em_m_step(model: DynamicTreeModel, counts: ExpectedCounts, options: EMOptions) -> DynamicTreeModel:
    cpts = {}
    for label, old in model.cpts.items():
        n = counts.cpt_counts[label] + options.smoothing
        col = n.sum(axis=0, keepdims=True)
        cpts[label] = np.where(col > 0, n / np.where(col > 0, col, 1.0), old)
    menus = list(model.menus)
    if options.learn_rho:
        from .model import ParentMenu

        k = 0
        for d in range(1, model.num_layers):
            w = counts.edge_weights[d]
            for c in range(model.layer_sizes[d]):
                menu = menus[k]
                row = w[c, : len(menu)]
                if row.sum() > 0:
                    menus[k] = ParentMenu(menu.parents, tuple(row / row.sum()))
                k += 1
    root = model.root_priors
    if options.learn_root_priors:
        s = counts.root_counts.sum(axis=1, keepdims=True)
        root = np.where(s > 0, counts.root_counts / np.where(s > 0, s, 1.0), root)
    return model.replace(cpts=cpts, menus=tuple(menus), root_priors=root)


def em_fit(model: DynamicTreeModel, dataset, options: EMOptions | None = None) -> EMResult:
    """Fit CPTs (and optionally menus and root priors) by variational EM.

    Each E-step warm-starts from the previous posterior of the same case, so
    the summed free energy cannot increase from one iteration to the next.
    """
    options = options or EMOptions()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("em_fit needs at least one case")
    states = [None] * len(dataset)
    trace = []
    models = [model]
    for it in range(options.iterations + 1):
        total = 0.0
        counts = None
        for i, ev in enumerate(dataset):
            states[i] = svi_fit(model, ev, options.fit, init=states[i])
            total += states[i].free_energy
            c = em_expected_counts(states[i], model)
            counts = c if counts is None else counts + c
        trace.append(total)
        log.info("em iteration %d: total free energy %.6f", it, total)
        if it == options.iterations:
            break
        model = em_m_step(model, counts, options)
        models.append(model)
    return EMResult(model, trace, models, states)
