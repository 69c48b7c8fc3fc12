"""Virtual-time simulator for sync, sync-parallel, and async function calling.

Time is kept in integer ticks of 0.01 ms so that runs are exact and
reproducible. A call's generation takes ``body_tokens * tpot``; its execution
starts when its block closes. Makespan is the time the last call's result
becomes available, measured from the first token request.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from asyncfc import cml
from asyncfc.taskmodel import CallNode, GraphError, TaskGraph, lpt_key, topological_check

TICKS_PER_MS = 100
TRAP_TOKENS = 2
INTERRUPT_SENTINEL_TOKENS = 4  # [INTR] id [HEAD] ... [END]


def to_ticks(ms: float) -> int:
    return int(round(ms * TICKS_PER_MS))


def to_ms(ticks: int) -> float:
    return ticks / TICKS_PER_MS


def text_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def interrupt_block_tokens(value: str) -> int:
    return INTERRUPT_SENTINEL_TOKENS + text_tokens(value)


def default_result(node: CallNode) -> str:
    return f"{node.name}:ok"


class Policy(str, enum.Enum):
    SYNC = "sync"
    SYNC_PARALLEL = "sync-parallel"
    ASYNC_LPT = "async-lpt"
    ASYNC_RANDOM = "async-random"
    ASYNC_NAIVE = "async-naive"

    @property
    def is_async(self) -> bool:
        return self in (Policy.ASYNC_LPT, Policy.ASYNC_RANDOM, Policy.ASYNC_NAIVE)


ALL_POLICIES = tuple(Policy)


@dataclass
class SimConfig:
    tpot_ms: Optional[float] = None  # None: take the graph's own tpot
    ttft_ms: float = 0.0
    policy: Policy = Policy.ASYNC_LPT
    seed: int = 0
    arrival_schedule: list = field(default_factory=list)
    interrupt_block_tokens: Callable[[str], int] = interrupt_block_tokens
    result_value: Callable[[CallNode], str] = default_result
    exec_scale: float = 1.0
    record: bool = True

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.tpot_ms is not None and not self.tpot_ms > 0:
            raise ValueError("tpot_ms must be > 0")
        if self.ttft_ms < 0:
            raise ValueError("ttft_ms must be >= 0")

    def describe(self) -> dict:
        return {
            "tpot_ms": self.tpot_ms,
            "ttft_ms": self.ttft_ms,
            "policy": self.policy.value,
            "seed": self.seed,
            "exec_scale": self.exec_scale,
        }


@dataclass
class RunResult:
    policy: Policy
    makespan_ms: float
    tokens_total: int
    events: list = field(default_factory=list)
    context: list = field(default_factory=list)  # cml tokens, async policies only
    traps: int = 0
    interrupts: int = 0
    restarts: int = 0


@dataclass
class SimReport:
    graph_id: str
    config: dict
    runs: dict = field(default_factory=dict)  # policy -> RunResult

    @property
    def makespan_ms(self) -> dict:
        return {p.value: r.makespan_ms for p, r in self.runs.items()}

    def speedup_vs_sync(self) -> dict:
        base = self.runs.get(Policy.SYNC)
        if base is None:
            return {}
        return {p.value: base.makespan_ms / r.makespan_ms for p, r in self.runs.items()}

    def token_overhead(self) -> dict:
        base = self.runs.get(Policy.SYNC)
        if base is None:
            return {}
        return {p.value: r.tokens_total - base.tokens_total for p, r in self.runs.items()}

    def to_json(self, events: bool = False) -> dict:
        doc = {
            "graph_id": self.graph_id,
            "config": self.config,
            "makespan_ms": self.makespan_ms,
            "speedup_vs_sync": self.speedup_vs_sync(),
            "token_overhead": self.token_overhead(),
            "tokens_total": {p.value: r.tokens_total for p, r in self.runs.items()},
        }
        if events:
            doc["event_log"] = {p.value: r.events for p, r in self.runs.items()}
        return doc


# ---------------------------------------------------------------------------
# Shared bookkeeping


class _Ready:
    """Dependency counters plus a ready pool ordered for LPT or random choice."""

    def __init__(self, graph: TaskGraph, rng: Optional[random.Random] = None):
        self.graph = graph
        self.rng = rng
        self.missing = {i: len(n.deps) for i, n in graph.nodes.items()}
        self.kids: dict[str, list[str]] = {i: [] for i in graph.nodes}
        for n in graph.nodes.values():
            for d in n.deps:
                self.kids[d].append(n.id)
        self.pool: list = []
        self.blocked: set = set()  # ids not yet released by an arrival
        self.remaining = len(graph.nodes)

    def release(self, ids: Iterable[str]) -> None:
        for i in ids:
            self.blocked.discard(i)
            if self.missing[i] == 0:
                self._push(i)

    def _push(self, i: str) -> None:
        if i in self.blocked:
            return
        if self.rng is None:
            heapq.heappush(self.pool, (lpt_key(self.graph.nodes[i]), i))
        else:
            self.pool.append(i)

    def start(self, blocked: Iterable[str] = ()) -> None:
        self.blocked = set(blocked)
        for i, m in self.missing.items():
            if m == 0:
                self._push(i)

    def __bool__(self) -> bool:
        return bool(self.pool)

    def pop(self) -> str:
        if self.rng is None:
            return heapq.heappop(self.pool)[1]
        self.pool.sort()
        return self.pool.pop(self.rng.randrange(len(self.pool)))

    def drain(self) -> list[str]:
        out = []
        while self.pool:
            out.append(self.pop() if self.rng is None else self.pool.pop())
        if self.rng is not None:
            out.sort(key=lambda i: lpt_key(self.graph.nodes[i]))
        return out

    def complete(self, i: str) -> None:
        self.remaining -= 1
        for k in self.kids[i]:
            self.missing[k] -= 1
            if self.missing[k] == 0:
                self._push(k)


def _prepare(graph: TaskGraph, config: SimConfig):
    topological_check(graph)
    tpot = config.tpot_ms if config.tpot_ms is not None else graph.tpot_ms
    tpot_t = to_ticks(tpot)
    if tpot_t <= 0:
        raise ValueError("tpot below clock resolution")
    gen = {i: n.body_tokens * tpot_t for i, n in graph.nodes.items()}
    exe = {i: max(1, to_ticks(n.exec_ms * config.exec_scale)) for i, n in graph.nodes.items()}
    return tpot_t, gen, exe


class _Log:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.events: list = []
        self.context: list = []

    def ev(self, t: int, kind: str, **fields) -> None:
        if self.enabled:
            self.events.append({"t_ms": to_ms(t), "kind": kind, **fields})

    def tokens(self, toks: Sequence) -> None:
        if self.enabled:
            self.context.extend(toks)


# ---------------------------------------------------------------------------
# Synchronous policies


def _run_sync(graph, config, arrivals, parallel: bool) -> RunResult:
    tpot_t, gen, exe = _prepare(graph, config)
    ttft_t = to_ticks(config.ttft_ms)
    log = _Log(config.record)
    tokens = 0
    t = 0
    last_done = 0
    policy = Policy.SYNC_PARALLEL if parallel else Policy.SYNC
    for arrive_t, ids in arrivals:
        # queued prompts: each task is a fresh session once the previous one ends
        t = max(t, arrive_t) + ttft_t
        ready = _Ready(graph.subgraph(ids))
        ready.start()
        while ready.remaining:
            bundle = ready.drain() if parallel else [ready.pop()]
            for i in bundle:
                t += gen[i]
                tokens += graph.nodes[i].body_tokens
                log.ev(t, "call", id=i)
            start = t
            for i in bundle:
                value = config.result_value(graph.nodes[i])
                tokens += text_tokens(value)
                done = start + exe[i]
                log.ev(done, "result", id=i)
                t = max(t, done)
            for i in bundle:
                ready.complete(i)
            last_done = max(last_done, t)
    return RunResult(policy, to_ms(last_done - arrivals[0][0]), tokens, log.events)


# ---------------------------------------------------------------------------
# Asynchronous policies


def _run_async(graph, config, arrivals, policy: Policy, descriptions) -> RunResult:
    tpot_t, gen, exe = _prepare(graph, config)
    ttft_t = to_ticks(config.ttft_ms)
    naive = policy is Policy.ASYNC_NAIVE
    rng = random.Random(config.seed) if policy is Policy.ASYNC_RANDOM else None
    log = _Log(config.record)

    ready = _Ready(graph, rng)
    later = [i for _, ids in arrivals[1:] for i in ids]
    ready.start(blocked=later)

    # external events: (time, kind_priority, seq, payload)
    # completions sort before user arrivals at the same instant
    pending: list = []
    seq = 0
    for k, (arrive_t, ids) in enumerate(arrivals[1:], start=1):
        heapq.heappush(pending, (arrive_t, 1, seq, ("user", k, ids)))
        seq += 1

    t0 = arrivals[0][0]
    t = t0 + ttft_t
    tokens = traps = interrupts = restarts = 0
    in_flight = 0
    last_done = t0
    queue: list = []
    restart_due = False

    while ready.remaining or queue:
        while pending and pending[0][0] <= t:
            queue.append(heapq.heappop(pending))
        if queue:
            # block boundary and not critical: inject everything queued, FIFO
            for when, _, _, payload in queue:
                if payload[0] == "done":
                    i = payload[1]
                    value = config.result_value(graph.nodes[i])
                    block = cml.Interrupt(i, value)
                    ready.complete(i)
                    in_flight -= 1
                else:
                    _, k, ids = payload
                    block = cml.Interrupt(f"user_{k}", descriptions[k])
                    ready.release(ids)
                    value = block.value
                tokens += config.interrupt_block_tokens(value)
                interrupts += 1
                log.tokens(cml.to_tokens(block))
                log.ev(t, "interrupt", id=block.id, arrived_ms=to_ms(when))
            queue.clear()
            if naive:
                # new request; its TTFT is paid before the next block's tokens
                restart_due = True
                restarts += 1
                log.ev(t, "restart")
            continue
        if restart_due and (ready or in_flight):
            t += ttft_t
            restart_due = False
        if ready:
            i = ready.pop()
            node = graph.nodes[i]
            log.ev(t, "call_start", id=i)
            t += gen[i]
            tokens += node.body_tokens
            log.tokens(cml.to_tokens(cml.FunctionCall(node.body, i)))
            log.ev(t, "call", id=i)
            done = t + exe[i]
            last_done = max(last_done, done)
            heapq.heappush(pending, (done, 0, seq, ("done", i)))
            seq += 1
            in_flight += 1
            continue
        if not pending:
            raise RuntimeError("simulation stalled: nothing ready, nothing in flight")
        if in_flight:
            t += TRAP_TOKENS * tpot_t
            tokens += TRAP_TOKENS
            traps += 1
            log.tokens([cml.TRAP, cml.END])
            log.ev(t, "trap")
        else:
            log.ev(t, "idle")
        t = max(t, pending[0][0])

    return RunResult(
        policy,
        to_ms(last_done - t0),
        tokens,
        log.events,
        log.context,
        traps=traps,
        interrupts=interrupts,
        restarts=restarts,
    )


# ---------------------------------------------------------------------------
# Entry points


def independent_graph(items: Sequence, graph_id: str = "independent") -> TaskGraph:
    """Independent calls with generation times ``G`` and execution times ``E``.

    One token lasts one tick, so ``G`` becomes a token count and both sides
    are exact on the 0.01 ms grid (values are rounded onto it first).
    """
    nodes = {}
    for k, (g, e) in enumerate(items):
        i = f"f{k}"
        nodes[i] = CallNode(i, f"fn{k}", max(1, round(g * TICKS_PER_MS)), round(e, 2), frozenset())
    return TaskGraph(nodes, tpot_ms=1.0 / TICKS_PER_MS, graph_id=graph_id)


def _single_arrival(graph: TaskGraph) -> list:
    return [(0, list(graph.nodes))]


def run_policy(graph: TaskGraph, config: SimConfig, policy=None, *, _arrivals=None, _desc=None) -> RunResult:
    policy = Policy(policy or config.policy)
    arrivals = _arrivals or _single_arrival(graph)
    if policy is Policy.SYNC:
        return _run_sync(graph, config, arrivals, parallel=False)
    if policy is Policy.SYNC_PARALLEL:
        return _run_sync(graph, config, arrivals, parallel=True)
    return _run_async(graph, config, arrivals, policy, _desc or {})


def simulate(graph: TaskGraph, config: SimConfig, policies: Optional[Sequence] = None) -> SimReport:
    """Run ``graph`` under each policy (default: sync plus the configured one)."""
    if policies is None:
        policies = [Policy.SYNC] if config.policy is Policy.SYNC else [Policy.SYNC, config.policy]
    report = SimReport(graph.graph_id, config.describe())
    for p in policies:
        p = Policy(p)
        report.runs[p] = run_policy(graph, config, p)
    return report


def merge_graphs(graphs: Sequence[TaskGraph], graph_id: str = "arrivals") -> TaskGraph:
    nodes = {}
    for g in graphs:
        for i, n in g.nodes.items():
            if i in nodes:
                raise GraphError(f"node id {i!r} appears in more than one arriving task")
            nodes[i] = n
    return TaskGraph(nodes, tpot_ms=graphs[0].tpot_ms, graph_id=graph_id)


def simulate_arrivals(config: SimConfig, policies: Optional[Sequence] = None) -> SimReport:
    """Tasks arrive over time: as user interrupts into one async session, or as
    queued prompts handled one after another by the sync policies."""
    schedule = list(config.arrival_schedule)
    if not schedule:
        raise ValueError("arrival_schedule is empty")
    times = [t for t, _ in schedule]
    if times != sorted(times):
        raise ValueError("arrival times must be ascending")
    graph = merge_graphs([g for _, g in schedule])
    arrivals = [(to_ticks(t), list(g.nodes)) for t, g in schedule]
    desc = {
        k: g.description or f"new task: {', '.join(sorted(g.nodes))}" for k, (_, g) in enumerate(schedule)
    }
    if policies is None:
        policies = [Policy.SYNC, config.policy] if config.policy is not Policy.SYNC else [Policy.SYNC]
    report = SimReport(graph.graph_id, {**config.describe(), "arrivals_ms": times})
    for p in policies:
        p = Policy(p)
        report.runs[p] = run_policy(graph, config, p, _arrivals=arrivals, _desc=desc)
    return report


def split_tasks(graph: TaskGraph) -> list[TaskGraph]:
    """One graph per weakly connected component (an independent user task)."""
    out = []
    for k, comp in enumerate(graph.components()):
        sub = graph.subgraph(comp)
        out.append(
            TaskGraph(sub.nodes, tpot_ms=graph.tpot_ms, graph_id=f"{graph.graph_id}.{k}",
                      description=f"task {k}: " + ", ".join(graph.nodes[i].name for i in comp))
        )
    return out


# ---------------------------------------------------------------------------
# Sweeps


CSV_COLUMNS = ["graph_id", "policy", "seed", "makespan_ms", "tokens_total", "speedup_vs_sync"]


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def percentiles(self, qs=(10, 50, 90)) -> dict:
        by_policy: dict = {}
        for r in self.rows:
            by_policy.setdefault(r["policy"], []).append(r["makespan_ms"])
        return {
            p: {f"p{q}": float(np.percentile(v, q)) for q in qs} for p, v in sorted(by_policy.items())
        }

    def mean_speedup(self, policy, graph_ids=None) -> float:
        policy = Policy(policy).value
        vals = [
            r["speedup_vs_sync"]
            for r in self.rows
            if r["policy"] == policy and (graph_ids is None or r["graph_id"] in graph_ids)
        ]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {"rows": self.rows, "failures": self.failures, "percentiles": self.percentiles() if self.rows else {}}


def assign_uniform_exec(graph: TaskGraph, seed: int, low: float, high: float) -> TaskGraph:
    rng = np.random.default_rng(seed)
    ids = graph.ids()
    vals = rng.uniform(low, high, size=len(ids))
    return graph.with_exec(dict(zip(ids, np.round(vals, 2).tolist())))


def sweep(
    corpus: Sequence[TaskGraph],
    configs: Sequence[SimConfig],
    policies: Sequence = ALL_POLICIES,
    exec_range: Optional[tuple] = None,
) -> SweepResult:
    """Run every graph under every config and policy.

    With ``exec_range`` the graph's execution estimates are redrawn uniformly
    per run from the config's seed.
    """
    out = SweepResult()
    for graph in corpus:
        for cfg in configs:
            g = assign_uniform_exec(graph, cfg.seed, *exec_range) if exec_range else graph
            try:
                rep = simulate(g, cfg, policies=[Policy.SYNC, *[p for p in policies if Policy(p) is not Policy.SYNC]])
            except Exception as exc:  # reported, not fatal for the batch
                out.failures.append({"graph_id": graph.graph_id, "seed": cfg.seed, "error": str(exc)})
                continue
            speed = rep.speedup_vs_sync()
            for p, run in rep.runs.items():
                if p not in [Policy(x) for x in policies]:
                    continue
                out.rows.append(
                    {
                        "graph_id": graph.graph_id,
                        "policy": p.value,
                        "seed": cfg.seed,
                        "makespan_ms": run.makespan_ms,
                        "tokens_total": run.tokens_total,
                        "speedup_vs_sync": round(speed[p.value], 6),
                    }
                )
    return out


def report_json(report: SimReport, events: bool = False) -> str:
    return json.dumps(report.to_json(events=events), sort_keys=True)
