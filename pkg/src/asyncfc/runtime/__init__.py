"""Interruptible decode loop: token monitor, executor, interrupt manager, trap handler."""

from __future__ import annotations

from typing import Optional, Union

from asyncfc import cml
from asyncfc.runtime.core import (
    TRAP_PROFILES,
    Clock,
    FunctionSpec,
    InterruptQueue,
    JobHandle,
    JobStatus,
    NoPendingJobs,
    QueuedInterrupt,
    RuntimeConfig,
    Session,
    SessionError,
    SessionTranscript,
    SimulatedExecutor,
    ThreadExecutor,
    TrapCostModel,
    TrapDecision,
    VirtualClock,
    WallClock,
    dispatch,
    drain_interrupts,
    function_name,
    handle_trap,
)
from asyncfc.runtime.sources import LptModel, LptModelSource, ScriptSource, call_tokens
from asyncfc.taskmodel import TaskGraph


def graph_registry(graph: TaskGraph, *, wall: bool = False) -> dict:
    """Stub functions whose duration is the calling node's ``exec_ms``.

    With ``wall=True`` the stubs sleep for that long on a worker thread.
    """
    nodes = graph.nodes
    by_name: dict = {}
    for n in nodes.values():
        by_name.setdefault(n.name, []).append(n)

    def make(name, members):
        default = members[0].exec_ms

        def est(call):
            node = nodes.get(call.id)
            return node.exec_ms if node is not None and node.name == name else default

        if wall:
            return FunctionSpec(name, exec_ms=est)
        return FunctionSpec(name, exec_ms=est, fn=lambda body, name=name: f"{name}:ok")

    return {name: make(name, members) for name, members in by_name.items()}


def transcript_violations(tokens: list) -> list:
    """Problems in a finished context: interrupts inside call or trap spans,
    and id-bearing calls without exactly one matching interrupt.

    The span scan works on raw sentinels rather than the parser, so it also
    catches streams the parser would reject.
    """
    problems = []
    open_kind = None
    for k, tok in enumerate(tokens):
        kind = tok.kind
        if kind is cml.ControlTokenKind.INTR and open_kind in (cml.ControlTokenKind.CALL, cml.ControlTokenKind.TRAP):
            problems.append(f"interrupt at token {k} inside a {open_kind.name.lower()} span")
        if kind in (cml.ControlTokenKind.CALL, cml.ControlTokenKind.TRAP, cml.ControlTokenKind.INTR):
            if open_kind is None:
                open_kind = kind
        elif kind is cml.ControlTokenKind.END:
            open_kind = None
    try:
        blocks = cml.parse_tokens(tokens, system=True)
    except cml.CmlError as exc:
        return problems + [f"does not parse: {exc}"]
    calls = [b.id for b in blocks if isinstance(b, cml.FunctionCall) and b.id is not None]
    results: dict = {}
    for b in blocks:
        if isinstance(b, cml.Interrupt):
            results[b.id] = results.get(b.id, 0) + 1
    for i in calls:
        if results.get(i, 0) != 1:
            problems.append(f"call {i} has {results.get(i, 0)} interrupts")
    if len(set(calls)) != len(calls):
        problems.append("duplicate call ids")
    return problems


def run_session(
    graph_or_script: Union[TaskGraph, str, list],
    source=None,
    *,
    tpot_ms: Optional[float] = None,
    ttft_ms: float = 0.0,
    naive: bool = False,
    registry: Optional[dict] = None,
    config: Optional[RuntimeConfig] = None,
    arrivals: Optional[list] = None,
) -> SessionTranscript:
    """Run one session on a virtual clock and return its transcript.

    ``graph_or_script`` is either a task graph, driven by the ideal LPT model,
    or a fixed token script. ``arrivals`` is a list of ``(t_ms, node_ids)``
    whose first entry is the initial prompt; later entries reach the model as
    ``user_<k>`` interrupts.
    """
    clock = VirtualClock()
    queue = InterruptQueue()
    if isinstance(graph_or_script, TaskGraph):
        graph = graph_or_script
        registry = registry if registry is not None else graph_registry(graph)
        user_tasks = {f"user_{k}": list(ids) for k, (_, ids) in enumerate(arrivals or []) if k > 0}
        if source is None:
            source = LptModelSource(graph, clock, tpot_ms, ttft_ms, naive=naive, user_tasks=user_tasks)
    else:
        if source is None:
            source = ScriptSource(graph_or_script, clock, tpot_ms or 5.0, ttft_ms)
    executor = SimulatedExecutor(registry or {}, clock, queue)
    for k, (t, ids) in enumerate(arrivals or []):
        if k > 0:
            executor.schedule_external(t, cml.Interrupt(f"user_{k}", "new task: " + ", ".join(sorted(ids))))
    if config is None:
        config = RuntimeConfig(handle_traps=not naive)
    session = Session(source, executor, clock, config, queue)
    return session.run()


__all__ = [
    "Clock",
    "FunctionSpec",
    "InterruptQueue",
    "JobHandle",
    "JobStatus",
    "LptModel",
    "LptModelSource",
    "NoPendingJobs",
    "QueuedInterrupt",
    "RuntimeConfig",
    "ScriptSource",
    "Session",
    "SessionError",
    "SessionTranscript",
    "SimulatedExecutor",
    "ThreadExecutor",
    "TRAP_PROFILES",
    "TrapCostModel",
    "TrapDecision",
    "VirtualClock",
    "WallClock",
    "call_tokens",
    "dispatch",
    "drain_interrupts",
    "function_name",
    "graph_registry",
    "handle_trap",
    "run_session",
    "transcript_violations",
]
