"""Dynamic tree belief networks.

A dynamic tree is a layered belief network in which every node below the top
layer picks one parent from the layer directly above.  The choice is made
independently per node with prior probabilities ``rho`` (the node's *menu*),
and the state of a child given its chosen parent follows a column-stochastic
conditional probability table (CPT).  Top-layer nodes carry an explicit root
prior, which is handled everywhere as an edge to a virtual one-state root.

Nodes are addressed either by :class:`NodeRef` ``(layer, index)`` or by a
global integer index running layer by layer from the top.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

PROB_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model or evidence fails validation."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NodeRef(NamedTuple):
    layer: int
    index: int

    def __str__(self):
        return f"{self.layer}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeRef":
        layer, index = text.split(":")
        return cls(int(layer), int(index))


@dataclasses.dataclass(frozen=True)
class ParentMenu:
    """Candidate parents of one node.

    ``parents`` are indices into the layer directly above the child.
    """

    parents: tuple[int, ...]
    rhos: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))

    def __len__(self):
        return len(self.parents)


class LayerEdges(NamedTuple):
    """Padded array view of all menus of one child layer.

    Padding slots have ``mask == False``, ``rho == 0`` and a uniform CPT.
    """

    parent_idx: np.ndarray  # (n, K) int, index into the layer above
    mask: np.ndarray  # (n, K) bool
    rho: np.ndarray  # (n, K)
    cpt: np.ndarray  # (n, K, m, m), cpt[c, e, k, l] = P(child=k | parent=l)
    sizes: np.ndarray  # (n,) menu sizes


@dataclasses.dataclass(frozen=True, eq=False)
class DynamicTreeModel:
    """An immutable dynamic tree model.

    Construct through :func:`build_layered_model` or :func:`dyntree.io.load_model`,
    which validate; the raw constructor does not.

    Attributes
    ----------
    num_states : int
        Number of discrete states ``m`` per node.
    layer_sizes : tuple of int
        Nodes per layer, top layer first.
    positions : tuple of ndarray
        Per layer, node coordinates of shape ``(n,)`` or ``(n, 2)``.
    root_priors : ndarray, shape (n_top, m)
        State prior for each top-layer node.
    menus : tuple of ParentMenu
        One menu per non-top node, in global node order.
    ties : tuple of tuple of str
        Tie-class label for every menu entry; parallel to ``menus``.
    cpts : mapping of str to ndarray
        Shared ``m x m`` CPT per tie class.
    """

    num_states: int
    layer_sizes: tuple[int, ...]
    positions: tuple[np.ndarray, ...]
    root_priors: np.ndarray
    menus: tuple[ParentMenu, ...]
    ties: tuple[tuple[str, ...], ...]
    cpts: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "num_states", int(self.num_states))
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(
            self, "positions", tuple(_frozen(np.asarray(p, dtype=float)) for p in self.positions)
        )
        object.__setattr__(self, "root_priors", _frozen(np.asarray(self.root_priors, dtype=float)))
        object.__setattr__(self, "menus", tuple(self.menus))
        object.__setattr__(self, "ties", tuple(tuple(str(t) for t in tie) for tie in self.ties))
        object.__setattr__(
            self,
            "cpts",
            {str(k): _frozen(np.asarray(v, dtype=float)) for k, v in self.cpts.items()},
        )

    # -- indexing ---------------------------------------------------------

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def num_nodes(self) -> int:
        return sum(self.layer_sizes)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.layer_sizes)]))

    def node_index(self, ref: NodeRef) -> int:
        return self.offsets[ref.layer] + ref.index

    def node_ref(self, index: int) -> NodeRef:
        layer = int(np.searchsorted(self.offsets, index, side="right") - 1)
        return NodeRef(layer, index - self.offsets[layer])

    def nodes(self, layer: int | None = None):
        layers = range(self.num_layers) if layer is None else [layer]
        return [NodeRef(d, i) for d in layers for i in range(self.layer_sizes[d])]

    @property
    def leaf_layer(self) -> int:
        return self.num_layers - 1

    @property
    def num_hidden(self) -> int:
        return self.num_nodes - self.layer_sizes[-1]

    def menu(self, ref: NodeRef) -> ParentMenu:
        if ref.layer == 0:
            raise KeyError(f"top-layer node {ref} has no parent menu")
        return self.menus[self.node_index(ref) - self.layer_sizes[0]]

    def edge_tie(self, ref: NodeRef, entry: int) -> str:
        return self.ties[self.node_index(ref) - self.layer_sizes[0]][entry]

    def edge_cpt(self, ref: NodeRef, entry: int) -> np.ndarray:
        return self.cpts[self.edge_tie(ref, entry)]

    def layer_menus(self, layer: int) -> list[ParentMenu]:
        start = self.offsets[layer] - self.layer_sizes[0]
        return list(self.menus[start : start + self.layer_sizes[layer]])

    def layer_ties(self, layer: int) -> list[tuple[str, ...]]:
        start = self.offsets[layer] - self.layer_sizes[0]
        return list(self.ties[start : start + self.layer_sizes[layer]])

    @cached_property
    def menu_sizes(self) -> np.ndarray:
        return np.array([len(menu) for menu in self.menus], dtype=int)

    # -- compiled arrays --------------------------------------------------

    @cached_property
    def _edges(self) -> tuple[LayerEdges | None, ...]:
        m = self.num_states
        out: list[LayerEdges | None] = [None]
        for d in range(1, self.num_layers):
            menus = self.layer_menus(d)
            ties = self.layer_ties(d)
            n = len(menus)
            width = max(len(menu) for menu in menus)
            parent_idx = np.zeros((n, width), dtype=int)
            mask = np.zeros((n, width), dtype=bool)
            rho = np.zeros((n, width))
            cpt = np.full((n, width, m, m), 1.0 / m)
            for c, (menu, tie) in enumerate(zip(menus, ties)):
                k = len(menu)
                parent_idx[c, :k] = menu.parents
                mask[c, :k] = True
                rho[c, :k] = menu.rhos
                for e in range(k):
                    cpt[c, e] = self.cpts[tie[e]]
            sizes = mask.sum(axis=1)
            out.append(
                LayerEdges(*(_frozen(a) for a in (parent_idx, mask, rho, cpt, sizes)))
            )
        return tuple(out)

    def edges(self, layer: int) -> LayerEdges:
        """Padded menu arrays for child ``layer`` (must be >= 1)."""
        if layer < 1:
            raise KeyError("the top layer has no parent menus")
        return self._edges[layer]

    @cached_property
    def tie_classes(self) -> tuple[str, ...]:
        return tuple(sorted(self.cpts))

    def check(self) -> "DynamicTreeModel":
        errors = validate(self)
        if errors:
            raise ModelError(errors)
        return self

    def replace(self, **changes) -> "DynamicTreeModel":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class Evidence:
    """Observed states of every bottom-layer node, in layer order."""

    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(np.asarray(self.states, dtype=int).ravel()))

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        return isinstance(other, Evidence) and np.array_equal(self.states, other.states)

    def __hash__(self):
        return hash(self.states.tobytes())

    @classmethod
    def from_mapping(cls, model: DynamicTreeModel, assignments: Mapping) -> "Evidence":
        leaf = model.leaf_layer
        states = np.full(model.layer_sizes[leaf], -1, dtype=int)
        for key, state in assignments.items():
            ref = NodeRef.parse(key) if isinstance(key, str) else NodeRef(*key)
            if ref.layer != leaf or not 0 <= ref.index < len(states):
                raise ModelError(f"evidence node {ref} is not a bottom-layer node")
            states[ref.index] = int(state)
        missing = np.flatnonzero(states < 0)
        if len(missing):
            raise ModelError(f"evidence missing for nodes {[f'{leaf}:{i}' for i in missing]}")
        ev = cls(states)
        ev.check(model)
        return ev

    def as_mapping(self, model: DynamicTreeModel) -> dict[NodeRef, int]:
        leaf = model.leaf_layer
        return {NodeRef(leaf, i): int(s) for i, s in enumerate(self.states)}

    def one_hot(self, num_states: int) -> np.ndarray:
        return np.eye(num_states)[self.states]

    def check(self, model: DynamicTreeModel) -> "Evidence":
        errors = validate_evidence(model, self)
        if errors:
            raise ModelError(errors)
        return self


@dataclasses.dataclass(frozen=True, eq=False)
class Assignment:
    """A full draw ``(Z, X)``: chosen menu entry per non-top node and a state per node."""

    tree: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tree", _frozen(np.asarray(self.tree, dtype=int)))
        object.__setattr__(self, "states", _frozen(np.asarray(self.states, dtype=int)))

    def evidence(self, model: DynamicTreeModel) -> Evidence:
        return Evidence(self.states[model.offsets[model.leaf_layer] :])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


# -- construction helpers --------------------------------------------------


def default_positions(layer_sizes: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Cell-centred positions spanning [0, 1] for every layer."""
    return tuple((np.arange(n) + 0.5) / n for n in layer_sizes)


def gaussian_parent_prior(child_position, candidate_positions, sigma: float) -> np.ndarray:
    """Parent prior decaying as a Gaussian in the distance to each candidate.

    ``rho_c ~ exp(-d(child, c)**2 / (2 sigma**2))``, normalized to sum to one.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cand = np.asarray(candidate_positions, dtype=float)
    if cand.shape[0] == 0:
        raise ValueError("at least one candidate parent is required")
    diff = cand - np.asarray(child_position, dtype=float)
    sq = diff**2 if diff.ndim == 1 else np.sum(diff**2, axis=-1)
    logw = -sq / (2.0 * sigma**2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def strong_diagonal_cpt(noise: np.ndarray, diagonal: float = 3.0) -> np.ndarray:
    """Column-normalize ``diagonal * I + noise``."""
    noise = np.asarray(noise, dtype=float)
    raw = diagonal * np.eye(noise.shape[0]) + noise
    return raw / raw.sum(axis=0, keepdims=True)


def random_strong_diagonal_cpt(num_states: int, rng: np.random.Generator) -> np.ndarray:
    """CPT drawn as normalise(3I + R) with R uniform(0, 1)."""
    if num_states < 2:
        raise ValueError("num_states must be at least 2")
    return strong_diagonal_cpt(rng.uniform(0.0, 1.0, size=(num_states, num_states)))


def diagonal_cpt(num_states: int, diag: float) -> np.ndarray:
    """CPT with ``diag`` on the diagonal and the rest spread evenly."""
    off = (1.0 - diag) / (num_states - 1)
    return np.full((num_states, num_states), off) + (diag - off) * np.eye(num_states)


def above_right_menus(rho_above: float = 0.6) -> Callable:
    """Menus of two candidates: the node directly above and its right neighbour (cyclic)."""

    def spec(layer, index, child_pos, parent_positions):
        n_par = len(parent_positions)
        above = index * n_par // child_pos.layer_size
        right = (above + 1) % n_par
        if right == above:
            return ParentMenu((above,), (1.0,))
        return ParentMenu((above, right), (rho_above, 1.0 - rho_above))

    return spec


def gaussian_menus(sigma_scale: float = 3.0) -> Callable:
    """Every node in the layer above is a candidate; prior is Gaussian in distance.

    The standard deviation is ``sigma_scale`` times the spacing of the parent layer.
    """

    def spec(layer, index, child_pos, parent_positions):
        spacing = 1.0 / len(parent_positions)
        rho = gaussian_parent_prior(child_pos.value, parent_positions, sigma_scale * spacing)
        return ParentMenu(tuple(range(len(parent_positions))), tuple(rho))

    return spec


class ChildPosition(NamedTuple):
    """What a menu callable learns about the child: its coordinate and layer size."""

    value: np.ndarray
    layer_size: int


def build_layered_model(
    layer_sizes: Sequence[int],
    num_states: int,
    parent_prior_spec=None,
    cpt_spec=None,
    root_prior_spec=None,
    positions: Sequence[np.ndarray] | None = None,
) -> DynamicTreeModel:
    """Assemble and validate a layered dynamic tree.

    Parameters
    ----------
    layer_sizes : sequence of int
        Nodes per layer, top first.
    num_states : int
        States per node, at least 2.
    parent_prior_spec : callable, sequence of ParentMenu, or None
        A callable ``(layer, index, child_position, parent_positions)`` returning a
        :class:`ParentMenu` or ``(parents, rhos)``; or an explicit list of menus in
        global node order.  ``None`` gives uniform menus over the whole layer above.
    cpt_spec : array, mapping, callable or None
        A single ``m x m`` array shared by every child layer, a mapping from child
        layer to array, or a callable ``layer -> array``.  One tie class per child
        layer (``"layer<d>"``).  ``None`` gives uniform CPTs.
    root_prior_spec : array or None
        Shape ``(m,)`` shared by all top nodes, or ``(n_top, m)``.  ``None`` is uniform.
    positions : sequence of arrays, optional
        Node coordinates per layer; defaults to :func:`default_positions`.
    """
    errors = []
    layer_sizes = list(layer_sizes)
    if not layer_sizes:
        raise ModelError("layer_sizes: must be nonempty")
    if any(int(n) < 1 for n in layer_sizes):
        raise ModelError("layer_sizes: every layer needs at least one node")
    if int(num_states) < 2:
        raise ModelError("num_states: must be at least 2")
    m = int(num_states)
    pos = tuple(default_positions(layer_sizes) if positions is None else positions)
    if len(pos) != len(layer_sizes):
        raise ModelError("positions: one array per layer required")

    if root_prior_spec is None:
        root = np.full((layer_sizes[0], m), 1.0 / m)
    else:
        root = np.asarray(root_prior_spec, dtype=float)
        if root.ndim == 1:
            root = np.tile(root, (layer_sizes[0], 1))
        if root.shape != (layer_sizes[0], m):
            raise ModelError(f"root_prior_spec: expected shape {(layer_sizes[0], m)}, got {root.shape}")

    menus: list[ParentMenu] = []
    ties: list[tuple[str, ...]] = []
    cpts: dict[str, np.ndarray] = {}
    explicit_menus = None
    if parent_prior_spec is not None and not callable(parent_prior_spec):
        explicit_menus = list(parent_prior_spec)
        if len(explicit_menus) != sum(layer_sizes[1:]):
            raise ModelError("parent_prior_spec: one menu per non-top node required")
    k = 0
    for d in range(1, len(layer_sizes)):
        label = f"layer{d}"
        cpts[label] = _resolve_cpt(cpt_spec, d, m)
        for i in range(layer_sizes[d]):
            if explicit_menus is not None:
                menu = explicit_menus[k]
                k += 1
            elif parent_prior_spec is None:
                n_par = layer_sizes[d - 1]
                menu = ParentMenu(tuple(range(n_par)), (1.0 / n_par,) * n_par)
            else:
                child = ChildPosition(np.asarray(pos[d])[i], layer_sizes[d])
                menu = parent_prior_spec(d, i, child, np.asarray(pos[d - 1]))
            if not isinstance(menu, ParentMenu):
                menu = ParentMenu(*menu)
            menus.append(menu)
            ties.append((label,) * len(menu))

    model = DynamicTreeModel(m, tuple(layer_sizes), pos, root, tuple(menus), tuple(ties), cpts)
    errors = validate(model)
    if errors:
        raise ModelError(errors)
    return model


def _resolve_cpt(spec, layer: int, m: int) -> np.ndarray:
    if spec is None:
        return np.full((m, m), 1.0 / m)
    if callable(spec):
        return np.asarray(spec(layer), dtype=float)
    if isinstance(spec, Mapping):
        return np.asarray(spec[layer], dtype=float)
    return np.asarray(spec, dtype=float)


# -- validation ------------------------------------------------------------


def _check_distribution(vec, what: str, errors: list, axis=None):
    vec = np.asarray(vec, dtype=float)
    if not np.all(np.isfinite(vec)):
        errors.append(f"{what}: non-finite entries")
        return
    if np.any(vec < 0):
        errors.append(f"{what}: negative entries")
    sums = vec.sum(axis=axis)
    bad = np.flatnonzero(np.abs(np.atleast_1d(sums) - 1.0) > PROB_TOL)
    if len(bad):
        if axis is None:
            errors.append(f"{what}: sums to {float(sums)!r}, expected 1")
        else:
            errors.append(f"{what}: columns {bad.tolist()} do not sum to 1")


def validate(model: DynamicTreeModel) -> list[str]:
    """Every violated model invariant, as human-readable messages.  Empty means valid."""
    errors: list[str] = []
    m = model.num_states
    sizes = model.layer_sizes
    if m < 2:
        errors.append(f"num_states: must be at least 2, got {m}")
    if not sizes or any(n < 1 for n in sizes):
        errors.append("layer_sizes: must be nonempty with positive entries")
        return errors
    if len(model.positions) != len(sizes):
        errors.append("positions: one array per layer required")
    else:
        for d, p in enumerate(model.positions):
            if p.shape[0] != sizes[d]:
                errors.append(f"positions[{d}]: expected {sizes[d]} entries, got {p.shape[0]}")
    if model.root_priors.shape != (sizes[0], m):
        errors.append(f"root_priors: expected shape {(sizes[0], m)}, got {model.root_priors.shape}")
    else:
        for i, prior in enumerate(model.root_priors):
            _check_distribution(prior, f"root_priors[0:{i}]", errors)
    n_menus = sum(sizes[1:])
    if len(model.menus) != n_menus:
        errors.append(f"menus: expected {n_menus} menus (one per non-top node), got {len(model.menus)}")
        return errors
    if len(model.ties) != n_menus:
        errors.append(f"ties: expected {n_menus} tie lists, got {len(model.ties)}")
        return errors
    used = set()
    k = 0
    for d in range(1, len(sizes)):
        for i in range(sizes[d]):
            ref = f"{d}:{i}"
            menu, tie = model.menus[k], model.ties[k]
            k += 1
            if len(menu) == 0:
                errors.append(f"menu of node {ref}: empty")
                continue
            if len(menu.parents) != len(menu.rhos):
                errors.append(f"menu of node {ref}: parents and rhos differ in length")
                continue
            if any(not 0 <= p < sizes[d - 1] for p in menu.parents):
                errors.append(f"menu of node {ref}: parent outside layer {d - 1}")
            if len(set(menu.parents)) != len(menu.parents):
                errors.append(f"menu of node {ref}: duplicate parents")
            _check_distribution(menu.rhos, f"menu of node {ref} (rho)", errors)
            if len(tie) != len(menu):
                errors.append(f"ties of node {ref}: one tie class per menu entry required")
                continue
            for e, label in enumerate(tie):
                used.add(label)
                if label not in model.cpts:
                    errors.append(f"edge {ref}->{d - 1}:{menu.parents[e]}: unknown tie class {label!r}")
    for label, cpt in model.cpts.items():
        if cpt.shape != (m, m):
            errors.append(f"cpts[{label!r}]: expected shape {(m, m)}, got {cpt.shape}")
            continue
        sub: list[str] = []
        _check_distribution(cpt, f"cpts[{label!r}]", sub, axis=0)
        if sub:
            edges = _edges_of_tie(model, label)
            errors.extend(f"{msg} (edges {edges})" for msg in sub)
    return errors


def _edges_of_tie(model, label, limit=4) -> str:
    found = []
    k = 0
    for d in range(1, model.num_layers):
        for i in range(model.layer_sizes[d]):
            for e, t in enumerate(model.ties[k]):
                if t == label:
                    found.append(f"{d}:{i}->{d - 1}:{model.menus[k].parents[e]}")
            k += 1
    extra = f", ... {len(found) - limit} more" if len(found) > limit else ""
    return ", ".join(found[:limit]) + extra


def validate_evidence(model: DynamicTreeModel, evidence: Evidence) -> list[str]:
    errors = []
    n_leaf = model.layer_sizes[-1]
    if len(evidence.states) != n_leaf:
        errors.append(f"evidence: expected {n_leaf} leaf states, got {len(evidence.states)}")
        return errors
    bad = np.flatnonzero((evidence.states < 0) | (evidence.states >= model.num_states))
    for i in bad:
        errors.append(f"evidence {model.leaf_layer}:{i}: state {evidence.states[i]} outside [0, {model.num_states})")
    return errors


# -- sampling and joint probability ---------------------------------------


def sample_prior(model: DynamicTreeModel, rng: np.random.Generator) -> Assignment:
    """Ancestral sample of a tree structure and node states."""
    m = model.num_states
    tree = np.empty(len(model.menus), dtype=int)
    states = np.empty(model.num_nodes, dtype=int)
    for i in range(model.layer_sizes[0]):
        states[i] = rng.choice(m, p=model.root_priors[i])
    k = 0
    for d in range(1, model.num_layers):
        off_par = model.offsets[d - 1]
        for i in range(model.layer_sizes[d]):
            menu = model.menus[k]
            e = rng.choice(len(menu), p=np.asarray(menu.rhos))
            tree[k] = e
            parent_state = states[off_par + menu.parents[e]]
            cpt = model.cpts[model.ties[k][e]]
            states[model.offsets[d] + i] = rng.choice(m, p=cpt[:, parent_state])
            k += 1
    return Assignment(tree, states)


def log_joint(model: DynamicTreeModel, assignment: Assignment) -> float:
    """``log P(Z, X)``; ``-inf`` when any factor vanishes."""
    states = assignment.states
    with np.errstate(divide="ignore"):
        total = float(np.sum(np.log(model.root_priors[np.arange(model.layer_sizes[0]), states[: model.layer_sizes[0]]])))
        k = 0
        for d in range(1, model.num_layers):
            off_par = model.offsets[d - 1]
            for i in range(model.layer_sizes[d]):
                menu = model.menus[k]
                e = assignment.tree[k]
                cpt = model.cpts[model.ties[k][e]]
                child = states[model.offsets[d] + i]
                parent = states[off_par + menu.parents[e]]
                total += np.log(menu.rhos[e]) + np.log(cpt[child, parent])
                k += 1
    return float(total)
