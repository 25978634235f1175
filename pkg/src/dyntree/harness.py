"""Seeded experiments comparing the inference methods.

Two experiments are provided:

* :func:`run_marginal_comparison` -- small 4x4 networks where the exact
  posterior is available by enumeration; compares summed marginal KL of the
  structured variational method and loopy propagation.
* :func:`run_free_energy_comparison` -- a 1-D six-layer network on noisy
  Markov-chain data; compares the free energies reached by the structured
  method and by mean field.

Every run draws from its own generator seeded by ``(master seed, run index)``,
so results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Sequence

import numpy as np

from ._numeric import InferenceError
from .loopy import LoopyOptions, loopy_fit
from .mean_field import MeanFieldOptions, mf_fit
from .model import (
    DynamicTreeModel,
    Evidence,
    ParentMenu,
    above_right_menus,
    build_layered_model,
    diagonal_cpt,
    gaussian_menus,
    random_strong_diagonal_cpt,
    sample_prior,
)
from .oracle import exact_posterior
from .svi import FitOptions, q_diagonal_mass, svi_fit

FORMAT_VERSION = 1


# -- metrics and data ----------------------------------------------------------


def marginal_kl_sum(truth, approx) -> float:
    """``sum_nodes sum_k p log(p / q)`` with the truth as ``p``.

    Inputs are ``(n_nodes, m)`` arrays (or lists of per-layer arrays).
    """
    p = _stack(truth)
    q = _stack(approx)
    if p.shape != q.shape:
        raise ValueError(f"marginal shapes differ: {p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(np.sum(terms))


def _stack(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return np.atleast_2d(x)
    return np.concatenate([np.atleast_2d(a) for a in x])


def gen_markov_cases(
    num_cases: int,
    chain_length: int,
    stay_prob: float,
    flip_noise: float,
    rng: np.random.Generator,
) -> list[Evidence]:
    """Binary Markov chains with independent bit-flip noise, one per case."""
    if not (0 <= stay_prob <= 1 and 0 <= flip_noise <= 1):
        raise ValueError("stay_prob and flip_noise must be probabilities")
    cases = []
    for _ in range(num_cases):
        switches = rng.random(chain_length - 1) >= stay_prob
        start = rng.integers(0, 2)
        chain = (start + np.concatenate([[0], np.cumsum(switches)])) % 2
        noise = rng.random(chain_length) < flip_noise
        cases.append(Evidence(np.where(noise, 1 - chain, chain)))
    return cases


def run_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(index)])


# -- model builders ------------------------------------------------------------


def marginal_comparison_model(
    rng: np.random.Generator,
    num_layers: int = 4,
    width: int = 4,
    num_states: int = 3,
    rho_above: float = 0.6,
    uniform_cpts: bool = False,
) -> DynamicTreeModel:
    """Square layered network; two candidate parents per node, random CPT per layer."""
    if uniform_cpts:
        cpts = None
    else:
        drawn = {d: random_strong_diagonal_cpt(num_states, rng) for d in range(1, num_layers)}
        cpts = drawn.__getitem__
    return build_layered_model([width] * num_layers, num_states, above_right_menus(rho_above), cpts)


def free_energy_model(
    layer_sizes: Sequence[int] = (1, 2, 4, 8, 16, 32),
    num_states: int = 2,
    sigma_scale: float = 3.0,
    diagonal: float = 0.9,
    uniform_cpts: bool = False,
) -> DynamicTreeModel:
    """1-D network; all nodes of the layer above are candidates with a Gaussian prior."""
    cpt = None if uniform_cpts else diagonal_cpt(num_states, diagonal)
    return build_layered_model(list(layer_sizes), num_states, gaussian_menus(sigma_scale), cpt)


def random_model(
    rng: np.random.Generator,
    layer_sizes: Sequence[int],
    num_states: int,
    max_menu: int = 2,
    concentration: float = 1.0,
) -> DynamicTreeModel:
    """Random menus (Dirichlet rho), Dirichlet CPT columns per layer, Dirichlet root priors.

    ``max_menu=1`` gives a single fixed tree.
    """
    menus = []
    for d in range(1, len(layer_sizes)):
        for _ in range(layer_sizes[d]):
            k = int(rng.integers(1, min(max_menu, layer_sizes[d - 1]) + 1))
            parents = rng.choice(layer_sizes[d - 1], size=k, replace=False)
            menus.append(ParentMenu(tuple(parents), tuple(rng.dirichlet(np.ones(k)))))
    cpts = {d: rng.dirichlet(concentration * np.ones(num_states), size=num_states).T
            for d in range(1, len(layer_sizes))}
    roots = rng.dirichlet(np.ones(num_states), size=layer_sizes[0])
    return build_layered_model(list(layer_sizes), num_states, menus, cpts.__getitem__, roots)


def random_instance(rng: np.random.Generator, layer_sizes, num_states, max_menu=2, concentration=1.0):
    """A random model and leaf evidence sampled from its prior."""
    model = random_model(rng, layer_sizes, num_states, max_menu, concentration)
    return model, sample_prior(model, rng).evidence(model)


# -- configuration -------------------------------------------------------------


def _options_field(cls, **defaults):
    return dataclasses.field(default_factory=lambda: cls(**defaults))


@dataclasses.dataclass
class MarginalComparisonConfig:
    experiment: str = "marginal_comparison"
    num_runs: int = 50
    num_layers: int = 4
    layer_width: int = 4
    num_states: int = 3
    rho_above: float = 0.6
    uniform_cpts: bool = False
    seed: int = 0
    tree_limit: int = 10**6
    threads: int = 1
    record_timing: bool = False
    svi: FitOptions = _options_field(FitOptions, max_passes=500, kl_tolerance=1e-6)
    loopy: LoopyOptions = _options_field(LoopyOptions)


@dataclasses.dataclass
class FreeEnergyConfig:
    experiment: str = "free_energy_comparison"
    num_cases: int = 150
    layer_sizes: tuple = (1, 2, 4, 8, 16, 32)
    num_states: int = 2
    sigma_scale: float = 3.0
    diagonal: float = 0.9
    stay_prob: float = 0.9
    flip_noise: float = 0.1
    uniform_cpts: bool = False
    seed: int = 0
    threads: int = 1
    record_timing: bool = False
    svi: FitOptions = _options_field(FitOptions, max_passes=5, kl_tolerance=0.01)
    mean_field: MeanFieldOptions = _options_field(MeanFieldOptions)


_NESTED = {"svi": FitOptions, "loopy": LoopyOptions, "mean_field": MeanFieldOptions}
CONFIG_TYPES = {
    "marginal_comparison": MarginalComparisonConfig,
    "free_energy_comparison": FreeEnergyConfig,
}


def config_from_dict(doc: dict):
    """Build a config from a (possibly partial) dict; unknown keys are rejected."""
    doc = dict(doc)
    name = doc.get("experiment")
    if name not in CONFIG_TYPES:
        raise ValueError(f"experiment: expected one of {sorted(CONFIG_TYPES)}, got {name!r}")
    cls = CONFIG_TYPES[name]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown config fields: {unknown}")
    for key, sub in _NESTED.items():
        if key in doc and key in known:
            try:
                doc[key] = sub(**doc[key])
            except TypeError as exc:
                raise ValueError(f"{key}: {exc}") from None
    if "layer_sizes" in doc:
        doc["layer_sizes"] = tuple(int(n) for n in doc["layer_sizes"])
    return cls(**doc)


def config_to_dict(config) -> dict:
    out = dataclasses.asdict(config)
    if "layer_sizes" in out:
        out["layer_sizes"] = list(out["layer_sizes"])
    return out


# -- reports -------------------------------------------------------------------


@dataclasses.dataclass
class ComparisonReport:
    experiment: str
    config: dict
    records: list  # one dict per (run, method)
    aggregates: dict
    failures: list

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "experiment": self.experiment,
            "config": self.config,
            "aggregates": self.aggregates,
            "failures": self.failures,
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2) + "\n"

    def to_csv(self) -> str:
        """One row per run and method; wall-clock times are never included."""
        buf = io.StringIO()
        columns = CSV_COLUMNS[self.experiment]
        writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: _csv_value(rec.get(k)) for k in columns})
        return buf.getvalue()


CSV_COLUMNS = {
    "marginal_comparison": ["run", "method", "kl_sum", "free_energy", "neg_log_evidence",
                            "converged", "iterations", "error"],
    "free_energy_comparison": ["run", "method", "free_energy", "converged", "iterations",
                               "q_diag", "q_offdiag", "error"],
}


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def mean_and_stderr(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    n = len(v)
    if n == 0:
        return {"n": 0, "mean": None, "stderr": None}
    err = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"n": n, "mean": float(v.mean()), "stderr": err}


def _map_runs(fn: Callable[[int], Any], count: int, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


class _Timer:
    def __init__(self, enabled):
        self.enabled = enabled
        self.seconds = None

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        if self.enabled:
            self.seconds = time.perf_counter() - self._start
        return False


# -- experiments ---------------------------------------------------------------


def _marginal_run(config: MarginalComparisonConfig, index: int) -> list[dict]:
    rng = np.random.default_rng(run_seed(config.seed, index))
    base = {"run": index}
    try:
        model = marginal_comparison_model(
            rng, config.num_layers, config.layer_width, config.num_states,
            config.rho_above, config.uniform_cpts,
        )
        evidence = sample_prior(model, rng).evidence(model)
        truth = exact_posterior(model, evidence, limit=config.tree_limit)
    except (InferenceError, ValueError) as exc:
        return [dict(base, method=m, error=str(exc)) for m in ("svi", "loopy")]
    true_h = truth.hidden_marginals()
    out = []
    try:
        with _Timer(config.record_timing) as t:
            state = svi_fit(model, evidence, config.svi)
        out.append(dict(
            base, method="svi", kl_sum=marginal_kl_sum(true_h, state.hidden_marginals()),
            free_energy=state.free_energy, neg_log_evidence=-truth.log_evidence,
            converged=state.converged, iterations=state.passes, seconds=t.seconds,
        ))
    except InferenceError as exc:
        out.append(dict(base, method="svi", error=str(exc)))
    try:
        with _Timer(config.record_timing) as t:
            result = loopy_fit(model, evidence, config.loopy)
        out.append(dict(
            base, method="loopy", kl_sum=marginal_kl_sum(true_h, result.hidden_marginals()),
            neg_log_evidence=-truth.log_evidence, converged=result.converged,
            iterations=result.iterations_used, seconds=t.seconds,
        ))
    except InferenceError as exc:
        out.append(dict(base, method="loopy", error=str(exc)))
    return out


def _finish(config, records: list[dict]) -> tuple[list, list]:
    records = sorted(records, key=lambda r: (r["run"], r["method"]))
    if not config.record_timing:
        for r in records:
            r.pop("seconds", None)
    failures = [{"run": r["run"], "method": r["method"], "error": r["error"]} for r in records if r.get("error")]
    return records, failures


def run_marginal_comparison(config: MarginalComparisonConfig | None = None) -> ComparisonReport:
    """Summed marginal KL to the exact posterior for the structured method and loopy BP."""
    config = config or MarginalComparisonConfig()
    runs = _map_runs(lambda i: _marginal_run(config, i), config.num_runs, config.threads)
    records, failures = _finish(config, [r for run in runs for r in run])
    aggregates = {}
    for method in ("svi", "loopy"):
        mine = [r for r in records if r["method"] == method and not r.get("error")]
        aggregates[method] = {"kl_sum": mean_and_stderr(r["kl_sum"] for r in mine)}
        if config.record_timing:
            aggregates[method]["seconds"] = mean_and_stderr(r["seconds"] for r in mine)
    paired = _paired(records, "kl_sum", "svi", "loopy")
    aggregates["svi_better_fraction"] = (
        float(np.mean([a < b for a, b in paired])) if paired else None
    )
    return ComparisonReport(config.experiment, config_to_dict(config), records, aggregates, failures)


def _paired(records, key, first, second):
    by_run: dict = {}
    for r in records:
        if not r.get("error"):
            by_run.setdefault(r["run"], {})[r["method"]] = r[key]
    return [(v[first], v[second]) for _, v in sorted(by_run.items()) if first in v and second in v]


def _free_energy_case(config: FreeEnergyConfig, model: DynamicTreeModel, index: int) -> list[dict]:
    rng = np.random.default_rng(run_seed(config.seed, index))
    evidence = gen_markov_cases(1, model.layer_sizes[-1], config.stay_prob, config.flip_noise, rng)[0]
    base = {"run": index}
    out = []
    try:
        with _Timer(config.record_timing) as t:
            state = svi_fit(model, evidence, config.svi)
        diag, off = q_diagonal_mass(state, model)
        out.append(dict(base, method="svi", free_energy=state.free_energy, converged=state.converged,
                        iterations=state.passes, q_diag=diag, q_offdiag=off, seconds=t.seconds))
    except InferenceError as exc:
        out.append(dict(base, method="svi", error=str(exc)))
    try:
        with _Timer(config.record_timing) as t:
            mf = mf_fit(model, evidence, config.mean_field, rng)
        out.append(dict(base, method="mf", free_energy=mf.free_energy, converged=mf.converged,
                        iterations=len(mf.free_energy_trace), seconds=t.seconds))
    except InferenceError as exc:
        out.append(dict(base, method="mf", error=str(exc)))
    return out


def run_free_energy_comparison(config: FreeEnergyConfig | None = None) -> ComparisonReport:
    """Free energies reached by the structured method and by mean field on Markov data."""
    config = config or FreeEnergyConfig()
    model = free_energy_model(config.layer_sizes, config.num_states, config.sigma_scale,
                              config.diagonal, config.uniform_cpts)
    cases = _map_runs(lambda i: _free_energy_case(config, model, i), config.num_cases, config.threads)
    records, failures = _finish(config, [r for case in cases for r in case])
    aggregates = {}
    for method in ("svi", "mf"):
        mine = [r for r in records if r["method"] == method and not r.get("error")]
        aggregates[method] = {"free_energy": mean_and_stderr(r["free_energy"] for r in mine)}
        if config.record_timing:
            aggregates[method]["seconds"] = mean_and_stderr(r["seconds"] for r in mine)
    paired = _paired(records, "free_energy", "svi", "mf")
    aggregates["svi_win_rate"] = float(np.mean([a <= b for a, b in paired])) if paired else None
    aggregates["mean_gap_mf_minus_svi"] = float(np.mean([b - a for a, b in paired])) if paired else None
    svi_rows = [r for r in records if r["method"] == "svi" and not r.get("error")]
    aggregates["q_diag"] = mean_and_stderr(r["q_diag"] for r in svi_rows)
    aggregates["q_offdiag"] = mean_and_stderr(r["q_offdiag"] for r in svi_rows)
    return ComparisonReport(config.experiment, config_to_dict(config), records, aggregates, failures)


def run_experiment(config) -> ComparisonReport:
    if isinstance(config, MarginalComparisonConfig):
        return run_marginal_comparison(config)
    if isinstance(config, FreeEnergyConfig):
        return run_free_energy_comparison(config)
    raise TypeError(f"unknown experiment config {type(config).__name__}")
