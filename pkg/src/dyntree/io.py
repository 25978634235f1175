"""JSON documents for models, evidence and datasets.

Floats are written with ``repr`` precision by :mod:`json`, so a save/load
round trip reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import DynamicTreeModel, Evidence, ModelError, NodeRef, ParentMenu

FORMAT_VERSION = 1


def model_to_dict(model: DynamicTreeModel) -> dict:
    menus = []
    k = 0
    for d in range(1, model.num_layers):
        for i in range(model.layer_sizes[d]):
            menu = model.menus[k]
            menus.append(
                {
                    "child": [d, i],
                    "parents": list(menu.parents),
                    "rhos": list(menu.rhos),
                }
            )
            k += 1
    return {
        "format_version": FORMAT_VERSION,
        "num_states": model.num_states,
        "layers": [
            {"size": n, "positions": model.positions[d].tolist()}
            for d, n in enumerate(model.layer_sizes)
        ],
        "root_priors": model.root_priors.tolist(),
        "menus": menus,
        "ties": [list(t) for t in model.ties],
        "cpts": {label: model.cpts[label].tolist() for label in sorted(model.cpts)},
    }


def model_from_dict(doc: dict) -> DynamicTreeModel:
    try:
        layers = doc["layers"]
        sizes = [int(layer["size"]) for layer in layers]
        positions = [np.asarray(layer["positions"], dtype=float) for layer in layers]
        menus = []
        expected = [(d, i) for d in range(1, len(sizes)) for i in range(sizes[d])]
        if len(doc["menus"]) != len(expected):
            raise ModelError(f"menus: expected {len(expected)} entries, got {len(doc['menus'])}")
        for entry, want in zip(doc["menus"], expected):
            if tuple(entry["child"]) != want:
                raise ModelError(f"menus: entry for {entry['child']} out of order, expected {list(want)}")
            menus.append(ParentMenu(tuple(entry["parents"]), tuple(entry["rhos"])))
        model = DynamicTreeModel(
            num_states=int(doc["num_states"]),
            layer_sizes=tuple(sizes),
            positions=tuple(positions),
            root_priors=np.asarray(doc["root_priors"], dtype=float),
            menus=tuple(menus),
            ties=tuple(tuple(t) for t in doc["ties"]),
            cpts={k: np.asarray(v, dtype=float) for k, v in doc["cpts"].items()},
        )
    except KeyError as exc:
        raise ModelError(f"model document: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"model document: {exc}") from None
    return model.check()


def evidence_to_dict(model: DynamicTreeModel, evidence: Evidence) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "states": {str(ref): state for ref, state in evidence.as_mapping(model).items()},
    }


def evidence_from_dict(model: DynamicTreeModel, doc: dict) -> Evidence:
    try:
        states = doc["states"]
    except (KeyError, TypeError):
        raise ModelError("evidence document: missing field 'states'") from None
    try:
        return Evidence.from_mapping(model, {NodeRef.parse(k): v for k, v in states.items()})
    except ValueError as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"evidence document: {exc}") from None


def dumps(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def save_model(model: DynamicTreeModel, path) -> None:
    Path(path).write_text(dumps(model_to_dict(model)))


def load_model(path) -> DynamicTreeModel:
    return model_from_dict(_read_json(path))


def save_evidence(model: DynamicTreeModel, evidence: Evidence, path) -> None:
    Path(path).write_text(dumps(evidence_to_dict(model, evidence)))


def load_evidence(model: DynamicTreeModel, path) -> Evidence:
    return evidence_from_dict(model, _read_json(path))


def save_dataset(model: DynamicTreeModel, cases, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "cases": [evidence_to_dict(model, ev)["states"] for ev in cases],
    }
    Path(path).write_text(dumps(doc))


def load_dataset(model: DynamicTreeModel, path) -> list[Evidence]:
    doc = _read_json(path)
    if "cases" not in doc:
        raise ModelError("dataset document: missing field 'cases'")
    return [evidence_from_dict(model, {"states": case}) for case in doc["cases"]]


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
