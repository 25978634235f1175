"""Command-line interface: ``dyntree <command> [options]``.

Exit codes are 0 on success, 2 for unreadable or invalid input and 3 when
the computation itself fails.  Every output document echoes the fully
resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from ._numeric import InferenceError
from .harness import (
    FORMAT_VERSION,
    config_from_dict,
    config_to_dict,
    free_energy_model,
    gen_markov_cases,
    marginal_comparison_model,
    marginal_kl_sum,
    random_model,
    run_experiment,
)
from .loopy import LoopyOptions, loopy_fit
from .mean_field import MeanFieldOptions, mf_fit
from .model import ModelError, sample_prior
from .oracle import DEFAULT_LIMIT, decode_trees, exact_posterior
from .svi import EMOptions, FitOptions, em_fit, svi_fit

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPUTE = 3


class InputError(Exception):
    pass


# -- helpers -------------------------------------------------------------------


def _lists(arrays):
    return [None if a is None else np.asarray(a).tolist() for a in arrays]


def _write(doc, out: str | None) -> None:
    text = io.dumps(doc)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_inputs(args):
    if not args.model:
        raise InputError("--model is required")
    model = io.load_model(args.model)
    evidence = None
    if getattr(args, "evidence", None):
        evidence = io.load_evidence(model, args.evidence)
    return model, evidence


def _fit_options(args) -> FitOptions:
    return FitOptions(max_passes=args.max_passes, kl_tolerance=args.tolerance)


def _mf_options(args) -> MeanFieldOptions:
    return MeanFieldOptions(tolerance=args.tolerance, max_outer=args.max_passes)


def _svi_dump(state) -> dict:
    return {
        "free_energy": state.free_energy,
        "free_energy_trace": list(state.free_energy_trace),
        "passes": state.passes,
        "converged": state.converged,
        "mu": _lists(state.mu),
        "q_tables": _lists(state.q_tables),
        "means": _lists(state.means),
        "diagnostics": list(state.diagnostics),
    }


def _mf_dump(state) -> dict:
    return {
        "free_energy": state.free_energy,
        "free_energy_trace": list(state.free_energy_trace),
        "converged": state.converged,
        "mu": _lists(state.mu),
        "means": _lists(state.means),
        "diagnostics": list(state.diagnostics),
    }


def _header(command: str, config: dict) -> dict:
    return {"format_version": FORMAT_VERSION, "command": command, "config": config}


def _infer_config(args, method: str) -> dict:
    config = {"model": args.model, "evidence": args.evidence, "method": method, "seed": args.seed}
    if method == "svi":
        config["svi"] = dataclasses.asdict(_fit_options(args))
    elif method == "mf":
        config["mean_field"] = dataclasses.asdict(_mf_options(args))
    elif method == "loopy":
        config["loopy"] = dataclasses.asdict(LoopyOptions())
    else:
        config["tree_limit"] = args.tree_limit
    return config


def _oracle_dump(model, post) -> dict:
    return {
        "log_evidence": post.log_evidence,
        "tree_count": post.tree_count,
        "marginals": _lists(post.node_marginals),
        "edge_posterior": _lists(post.edge_posterior),
        "top_trees": [
            {"index": idx, "posterior": w, "parents": decode_trees(model, [idx])[0].tolist()}
            for idx, w in post.top_trees
        ],
    }


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.preset == "marginal":
        model = marginal_comparison_model(rng)
        cases = [sample_prior(model, rng).evidence(model) for _ in range(args.cases)]
    elif args.preset == "free-energy":
        model = free_energy_model()
        cases = gen_markov_cases(args.cases, model.layer_sizes[-1], 0.9, 0.1, rng)
    else:
        sizes = [int(s) for s in args.layers.split(",")]
        model = random_model(rng, sizes, args.states, max_menu=args.menu)
        cases = [sample_prior(model, rng).evidence(model) for _ in range(args.cases)]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    io.save_model(model, out / "model.json")
    io.save_evidence(model, cases[0], out / "evidence.json")
    io.save_dataset(model, cases, out / "dataset.json")
    config = {"preset": args.preset, "seed": args.seed, "cases": args.cases,
              "layers": list(model.layer_sizes), "states": model.num_states}
    sys.stdout.write(io.dumps(_header("generate", config)))
    return EXIT_OK


def cmd_infer(args, method: str | None = None) -> int:
    method = method or args.method
    model, evidence = _load_inputs(args)
    if evidence is None:
        raise InputError("--evidence is required")
    doc = _header("infer" if method != "oracle" else "oracle", _infer_config(args, method))
    if method == "svi":
        state = svi_fit(model, evidence, _fit_options(args))
        doc["marginals"] = _lists(state.means)
        doc["state"] = _svi_dump(state)
    elif method == "mf":
        state = mf_fit(model, evidence, _mf_options(args), np.random.default_rng(args.seed))
        doc["marginals"] = _lists(state.means)
        doc["state"] = _mf_dump(state)
    elif method == "loopy":
        result = loopy_fit(model, evidence)
        doc["marginals"] = _lists(result.marginals)
        doc["converged"] = result.converged
        doc["iterations"] = result.iterations_used
    else:
        post = exact_posterior(model, evidence, limit=args.tree_limit)
        doc.update(_oracle_dump(model, post))
    _write(doc, args.out)
    return EXIT_OK


def format_table(model, truth, svi, loopy) -> str:
    """Per hidden node: true, structured and loopy marginals side by side."""
    m = model.num_states
    col = lambda name: " ".join(f"{name}{k}".rjust(6) for k in range(m))
    lines = [f"{'node':>6}  {col('T')}  |  {col('S')}  |  {col('L')}"]
    fmt = lambda row: " ".join(f"{v:6.3f}" for v in row)
    k = 0
    for d in range(model.num_layers - 1):
        for i in range(model.layer_sizes[d]):
            lines.append(f"{d}:{i:<4}  {fmt(truth[k])}  |  {fmt(svi[k])}  |  {fmt(loopy[k])}")
            k += 1
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    model, evidence = _load_inputs(args)
    if evidence is None:
        raise InputError("--evidence is required")
    post = exact_posterior(model, evidence, limit=args.tree_limit)
    state = svi_fit(model, evidence, _fit_options(args))
    result = loopy_fit(model, evidence)
    truth, sv, lp = post.hidden_marginals(), state.hidden_marginals(), result.hidden_marginals()
    config = {"model": args.model, "evidence": args.evidence, "seed": args.seed,
              "tree_limit": args.tree_limit, "svi": dataclasses.asdict(_fit_options(args)),
              "loopy": dataclasses.asdict(LoopyOptions())}
    doc = _header("compare", config)
    refs = [f"{d}:{i}" for d in range(model.num_layers - 1) for i in range(model.layer_sizes[d])]
    doc["rows"] = [
        {"node": r, "true": t.tolist(), "svi": s.tolist(), "loopy": l.tolist()}
        for r, t, s, l in zip(refs, truth, sv, lp)
    ]
    doc["kl_sum"] = {"svi": marginal_kl_sum(truth, sv), "loopy": marginal_kl_sum(truth, lp)}
    _write(doc, args.out)
    sys.stderr.write(format_table(model, truth, sv, lp))
    sys.stderr.write(f"summed KL  svi {doc['kl_sum']['svi']:.4f}  loopy {doc['kl_sum']['loopy']:.4f}\n")
    return EXIT_OK


def cmd_learn(args) -> int:
    if not args.dataset:
        raise InputError("--dataset is required")
    model, _ = _load_inputs(args)
    dataset = io.load_dataset(model, args.dataset)
    options = EMOptions(iterations=args.iterations, fit=_fit_options(args))
    result = em_fit(model, dataset, options)
    config = {"model": args.model, "dataset": args.dataset, "seed": args.seed,
              "em": dataclasses.asdict(options)}
    doc = _header("learn", config)
    doc["free_energy_trace"] = result.free_energy_trace
    doc["model"] = io.model_to_dict(result.model)
    _write(doc, args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    else:
        doc = {"experiment": args.name}
    if not isinstance(doc, dict):
        raise InputError("config: expected a JSON object")
    doc.setdefault("seed", args.seed)
    if args.threads is not None:
        doc["threads"] = args.threads
    try:
        config = config_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from None
    report = run_experiment(config)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    summary = _header("experiment", config_to_dict(config))
    summary["aggregates"] = report.aggregates
    summary["failures"] = len(report.failures)
    sys.stdout.write(io.dumps(summary))
    if report.records and len(report.failures) == len(report.records):
        sys.stderr.write("every run failed\n")
        return EXIT_COMPUTE
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--threads", type=int)
    common.add_argument("--max-passes", type=int, default=FitOptions.max_passes)
    common.add_argument("--tolerance", type=float, default=FitOptions.kl_tolerance)
    common.add_argument("--tree-limit", type=int, default=DEFAULT_LIMIT)

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--model")
    inputs.add_argument("--evidence")

    parser = argparse.ArgumentParser(prog="dyntree", description="Inference in dynamic tree networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a model with sampled evidence")
    p.add_argument("--preset", choices=["marginal", "free-energy", "random"], default="marginal")
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--layers", default="2,3,4", help="comma-separated layer sizes for --preset random")
    p.add_argument("--states", type=int, default=2)
    p.add_argument("--menu", type=int, default=2, help="largest menu size for --preset random")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("infer", parents=[common, inputs], help="posterior marginals by one method")
    p.add_argument("--method", choices=["svi", "mf", "loopy", "oracle"], default="svi")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("oracle", parents=[common, inputs], help="exact posterior by enumeration")
    p.set_defaults(func=lambda a: cmd_infer(a, "oracle"))

    p = sub.add_parser("compare", parents=[common, inputs], help="true, structured and loopy marginals")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("learn", parents=[common, inputs], help="fit parameters by variational EM")
    p.add_argument("--dataset")
    p.add_argument("--iterations", type=int, default=EMOptions.iterations)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("experiment", parents=[common], help="run a seeded comparison experiment")
    p.add_argument("--config")
    p.add_argument("--name", choices=sorted(["marginal_comparison", "free_energy_comparison"]),
                   default="marginal_comparison", help="experiment to run when no --config is given")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ModelError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except InferenceError as exc:
        sys.stderr.write(f"inference failed: {exc}\n")
        return EXIT_COMPUTE
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
