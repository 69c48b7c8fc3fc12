"""The bundled desk corpus of hand-written task graphs."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Optional

from asyncfc.taskmodel import TaskGraph, graph_from_json, load_graph

KINDS = ("parallel", "multistep", "mixed")


def load_corpus(kind: Optional[str] = None) -> list[TaskGraph]:
    """Shipped graphs, sorted by id; ``kind`` filters on the id prefix."""
    if kind is not None and kind not in KINDS:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {KINDS}")
    root = resources.files("asyncfc") / "data" / "corpus"
    graphs = []
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if not entry.name.endswith(".json"):
            continue
        if kind is not None and not entry.name.startswith(kind + "_"):
            continue
        graphs.append(graph_from_json(json.loads(entry.read_text()), graph_id=entry.name[:-5]))
    return graphs


def load_dir(path) -> list[TaskGraph]:
    return [load_graph(p) for p in sorted(Path(path).glob("*.json"))]
