"""Fine-tuning traces: ideal model/executor interactions over task graphs.

Each sample redraws execution times and the per-token time, runs the LPT
model against the simulated executor on a virtual clock, and records the
resulting CML context as the target sequence.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from asyncfc import cml
from asyncfc.runtime import run_session
from asyncfc.sim import split_tasks, to_ticks
from asyncfc.taskmodel import TaskGraph, topological_check

EXEC_RANGE_MS = (1.0, 1000.0)
TPOT_RANGE_MS = (5.0, 30.0)
USER_PREFIX = "user_"


class TraingenError(Exception):
    pass


class DuplicateSeed(TraingenError):
    def __init__(self, seed: int):
        super().__init__(f"seed {seed} requested more than once")
        self.seed = seed


class DatasetIOError(TraingenError):
    def __init__(self, path, err: OSError):
        super().__init__(f"{path}: {err.strerror or err}")
        self.path = str(path)


def assign_random_costs(graph: TaskGraph, seed: int) -> TaskGraph:
    """Replace every estimate with a seeded draw from U(1, 1000) ms."""
    rng = np.random.default_rng(seed)
    ids = graph.ids()
    vals = np.clip(np.round(rng.uniform(*EXEC_RANGE_MS, size=len(ids)), 2), *EXEC_RANGE_MS)
    return graph.with_exec(dict(zip(ids, vals.tolist())))


@dataclass
class TrainSample:
    prompt: str
    target: list  # token surfaces
    spans: list  # [{"role": "model"|"system", "kind", "start", "end"}]
    meta: dict = field(default_factory=dict)

    def tokens(self) -> list:
        return [cml.Token.of(s) for s in self.target]

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "target": self.target, "spans": self.spans, "meta": self.meta}

    @classmethod
    def from_json(cls, doc: dict) -> "TrainSample":
        return cls(doc["prompt"], list(doc["target"]), list(doc["spans"]), dict(doc["meta"]))


def function_defs(graph: TaskGraph) -> list:
    """Prompt-side definitions, one per call site so estimates stay unambiguous."""
    return [
        {
            "id": n.id,
            "name": n.name,
            "parameters": {"inputs": sorted(n.deps)},
            "est_exec_ms": n.exec_ms,
        }
        for n in (graph.nodes[i] for i in graph.ids())
    ]


def build_prompt(graph: TaskGraph, tasks: Optional[list] = None) -> str:
    """Task description followed by the JSON function table."""
    shown = graph if tasks is None else tasks[0]
    lines = [shown.description or f"Complete task {graph.graph_id}.", "Functions:"]
    lines.append(json.dumps(function_defs(shown), sort_keys=True))
    return "\n".join(lines)


def _spans(tokens: list) -> list:
    out = []
    for start, end, block in cml.iter_spans(tokens, system=True):
        if isinstance(block, cml.Interrupt):
            out.append({"role": "system", "kind": "interrupt", "start": start, "end": end})
        elif isinstance(block, cml.Trap):
            out.append({"role": "model", "kind": "trap", "start": start, "end": end})
        else:
            out.append({"role": "model", "kind": "call", "start": start, "end": end})
    return out


def generate_trace(
    graph: TaskGraph,
    tpot_ms: Optional[float] = None,
    seed: int = 0,
    *,
    user_interrupts: bool = False,
    randomize_costs: bool = True,
) -> TrainSample:
    """Simulate one ideal interaction and package it as a training sample.

    With ``user_interrupts`` the graph's independent tasks arrive one by one:
    the first in the prompt, the rest as ``user_<k>`` interrupts at random
    times while the session runs.
    """
    topological_check(graph)
    rng = np.random.default_rng([seed, 1])
    if randomize_costs:
        graph = assign_random_costs(graph, seed)
    if tpot_ms is None:
        tpot_ms = round(float(rng.uniform(*TPOT_RANGE_MS)), 2)

    tasks = None
    arrivals = None
    if user_interrupts:
        tasks = split_tasks(graph)
        gaps = np.round(rng.uniform(50.0, 500.0, size=len(tasks)), 2)
        times = [0.0] + np.cumsum(gaps[1:]).tolist()
        arrivals = [(t, list(task.nodes)) for t, task in zip(times, tasks)]

    transcript = run_session(graph, tpot_ms=tpot_ms, arrivals=arrivals)
    if transcript.error:
        raise TraingenError(f"{graph.graph_id} seed {seed}: {transcript.error}")
    tokens = transcript.context
    meta = {
        "graph_id": graph.graph_id,
        "seed": seed,
        "tpot_ms": tpot_ms,
        "exec_assignments": {i: graph.nodes[i].exec_ms for i in graph.ids()},
        "deps": {i: sorted(graph.nodes[i].deps) for i in graph.ids()},
    }
    if arrivals is not None:
        meta["arrivals"] = [{"t_ms": t, "ids": sorted(ids)} for t, ids in arrivals]
    return TrainSample(
        prompt=build_prompt(graph, tasks),
        target=[t.surface() for t in tokens],
        spans=_spans(tokens),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Validation


def validate_sample(sample: TrainSample) -> list:
    """Return every invariant violation found; an empty list means clean.

    The replay recomputes virtual time from the target alone: each model
    token costs ``tpot_ms``, a trap waits for the next result, and a result
    must be injected at the first block boundary after it was ready.
    """
    meta = sample.meta
    execs = meta["exec_assignments"]
    deps = {i: set(d) for i, d in meta["deps"].items()}
    tpot = to_ticks(meta["tpot_ms"])
    gated = {}
    for k, a in enumerate(meta.get("arrivals", [])):
        if k > 0:
            gated[f"{USER_PREFIX}{k}"] = (to_ticks(a["t_ms"]), set(a["ids"]))
    hidden = {i for _, ids in gated.values() for i in ids}

    problems = []
    tokens = sample.tokens()
    try:
        blocks = [(s, e, b) for s, e, b in cml.iter_spans(tokens, system=True)]
        cml.parse_tokens(tokens, system=True)
    except cml.CmlError as err:
        return [f"target does not parse: {err}"]

    released = set(execs) - hidden
    called: dict = {}  # id -> tick at which its result is ready
    completed: set = set()
    injected: set = set()
    seen_users: set = set()
    t = 0
    traps = empties = 0

    def due(now):
        out = [i for i, r in called.items() if i not in injected and r <= now]
        out += [u for u, (at, _) in gated.items() if u not in seen_users and at <= now]
        return out

    def next_event():
        nxt = [r for i, r in called.items() if i not in injected]
        nxt += [at for u, (at, _) in gated.items() if u not in seen_users]
        return min(nxt) if nxt else None

    def ready_now():
        return sorted(
            (i for i in released - set(called) if deps[i] <= completed),
            key=lambda i: (-execs[i], i),
        )

    for start, end, block in blocks:
        if isinstance(block, cml.Interrupt):
            i = block.id
            when = gated[i][0] if i in gated else called.get(i)
            if when is not None and when > t:
                # the session waited for this one: fine only if nothing else was due or doable
                if due(t):
                    problems.append(f"{i} injected ahead of results that were already due")
                elif ready_now():
                    problems.append(f"session waited at token {start} with work left")
                t = max(t, next_event() or t)
            if i.startswith(USER_PREFIX):
                if i not in gated or i in seen_users:
                    problems.append(f"unexpected user interrupt {i}")
                    continue
                at, ids = gated[i]
                if at > t:
                    problems.append(f"{i} injected before it arrived")
                seen_users.add(i)
                released |= ids
            else:
                if i not in called:
                    problems.append(f"interrupt {i} has no prior call")
                    continue
                if i in injected:
                    problems.append(f"interrupt {i} injected twice")
                    continue
                if called[i] > t:
                    problems.append(f"interrupt {i} injected before its result was ready")
                injected.add(i)
                completed.add(i)
            continue

        # a model block starts: everything already due must have been injected
        late = due(t)
        if late:
            problems.append(f"{sorted(late)} ready but not injected before token {start}")
        ready = ready_now()
        if not ready and released - completed:
            empties += 1
        if isinstance(block, cml.Trap):
            traps += 1
            if ready:
                problems.append(f"trap at token {start} while {ready[0]} was ready")
            t += tpot * (end - start)
            nxt = next_event()
            if nxt is None:
                problems.append(f"trap at token {start} with nothing to wait for")
            else:
                t = max(t, nxt)
            continue
        i = block.id
        if i is None or i not in execs:
            problems.append(f"call at token {start} has unknown id {i!r}")
            continue
        if i in called:
            problems.append(f"{i} called twice")
            continue
        if i not in ready:
            problems.append(f"{i} called before its inputs were available")
        elif execs[i] < execs[ready[0]]:
            problems.append(f"{i} called while {ready[0]} had a longer estimate")
        t += tpot * (end - start)
        called[i] = t + to_ticks(execs[i])

    missing = set(called) - injected
    if missing:
        problems.append(f"calls without a result: {sorted(missing)}")
    uncalled = set(execs) - set(called)
    if uncalled:
        problems.append(f"never called: {sorted(uncalled)}")
    if traps != empties:
        problems.append(f"{traps} traps but the ready set emptied {empties} times")
    if sample.spans != _spans(tokens):
        problems.append("span annotations do not match the target")
    return problems


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetStats:
    count: int = 0
    per_graph: dict = field(default_factory=dict)
    tokens_total: int = 0
    traps_total: int = 0
    interrupts_total: int = 0
    invalid: int = 0

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "per_graph": dict(sorted(self.per_graph.items())),
            "tokens_total": self.tokens_total,
            "traps_total": self.traps_total,
            "interrupts_total": self.interrupts_total,
            "invalid": self.invalid,
        }


def sample_seeds(count: int, seed: int = 0, seeds: Optional[Sequence[int]] = None) -> list:
    if seeds is None:
        return [seed + k for k in range(count)]
    seeds = list(seeds)
    if len(seeds) != count:
        raise ValueError(f"got {len(seeds)} seeds for {count} samples")
    dup = [s for s, c in Counter(seeds).items() if c > 1]
    if dup:
        raise DuplicateSeed(dup[0])
    return seeds


def generate_dataset(
    corpus: Sequence[TaskGraph],
    count: int,
    *,
    seed: int = 0,
    seeds: Optional[Sequence[int]] = None,
    user_interrupts: bool = False,
    validate: bool = True,
):
    """Yield ``count`` samples, cycling through ``corpus``."""
    seeds = sample_seeds(count, seed, seeds)
    if count and not corpus:
        raise ValueError("empty corpus")
    for k, s in enumerate(seeds):
        sample = generate_trace(corpus[k % len(corpus)], seed=s, user_interrupts=user_interrupts)
        if validate:
            problems = validate_sample(sample)
            if problems:
                raise TraingenError(f"sample {k} ({sample.meta['graph_id']}, seed {s}): {problems[0]}")
        yield sample


def emit_dataset(
    corpus: Sequence[TaskGraph],
    count: int,
    out_path,
    *,
    seed: int = 0,
    seeds: Optional[Sequence[int]] = None,
    user_interrupts: bool = False,
) -> DatasetStats:
    """Write ``count`` samples as JSON Lines and return coverage counts."""
    seeds = sample_seeds(count, seed, seeds)
    stats = DatasetStats()
    try:
        parent = os.path.dirname(os.fspath(out_path))
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            for sample in generate_dataset(corpus, count, seeds=seeds, user_interrupts=user_interrupts):
                fh.write(json.dumps(sample.to_json(), sort_keys=True) + "\n")
                gid = sample.meta["graph_id"]
                stats.count += 1
                stats.per_graph[gid] = stats.per_graph.get(gid, 0) + 1
                stats.tokens_total += len(sample.target)
                stats.traps_total += sum(1 for s in sample.spans if s["kind"] == "trap")
                stats.interrupts_total += sum(1 for s in sample.spans if s["kind"] == "interrupt")
    except OSError as err:
        raise DatasetIOError(out_path, err) from err
    return stats


def read_dataset(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            return [TrainSample.from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as err:
        raise DatasetIOError(path, err) from err
