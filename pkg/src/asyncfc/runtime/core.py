"""Decode loop, executors, interrupt queue, and trap handling."""

from __future__ import annotations

import collections
import enum
import heapq
import json
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Union

from asyncfc import cml

log_fields = ("t_ms", "kind")


# ---------------------------------------------------------------------------
# Clocks


class Clock(Protocol):
    def now(self) -> float: ...

    def advance(self, ms: float) -> None: ...

    def advance_to(self, t_ms: float) -> None: ...


class VirtualClock:
    """Deterministic clock in 0.01 ms ticks."""

    TICKS = 100

    def __init__(self, start_ms: float = 0.0):
        self._ticks = round(start_ms * self.TICKS)

    def now(self) -> float:
        return self._ticks / self.TICKS

    def advance(self, ms: float) -> None:
        self._ticks += round(ms * self.TICKS)

    def advance_to(self, t_ms: float) -> None:
        self._ticks = max(self._ticks, round(t_ms * self.TICKS))

    virtual = True


class WallClock:
    """Milliseconds since construction; advancing sleeps."""

    virtual = False

    def __init__(self):
        self._t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def advance(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)

    def advance_to(self, t_ms: float) -> None:
        self.advance(t_ms - self.now())


# ---------------------------------------------------------------------------
# Interrupt queue


@dataclass(frozen=True)
class QueuedInterrupt:
    block: cml.Interrupt
    enqueued_at: float


class InterruptQueue:
    """FIFO filled by workers, drained by the decode loop only."""

    def __init__(self):
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()

    def put(self, block: cml.Interrupt, enqueued_at: float) -> None:
        with self._cond:
            self._items.append(QueuedInterrupt(block, enqueued_at))
            self._cond.notify_all()

    def drain(self) -> list[QueuedInterrupt]:
        with self._cond:
            out = list(self._items)
            self._items.clear()
            return out

    def wait(self, timeout: Optional[float] = None) -> bool:
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            return bool(self._items)

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


def drain_interrupts(queue: InterruptQueue, critical: bool, source) -> list[QueuedInterrupt]:
    """Inject every queued interrupt, FIFO, unless a block is being generated."""
    if critical or not len(queue):
        return []
    entries = queue.drain()
    tokens: list = []
    for entry in entries:
        tokens.extend(cml.to_tokens(entry.block))
    source.inject(tokens)
    return entries


# ---------------------------------------------------------------------------
# Trap handling


class TrapDecision(str, enum.Enum):
    RETAIN = "retain"
    SWAP = "swap"
    RECOMPUTE = "recompute"


class NoPendingJobs(RuntimeError):
    pass


@dataclass(frozen=True)
class TrapCostModel:
    """KV-cache handling costs: swap is linear, recompute quadratic in tokens."""

    swap_ms_per_token: float
    recompute_quad_ms_per_token2: float
    recompute_lin_ms_per_token: float

    def __post_init__(self):
        if min(self.swap_ms_per_token, self.recompute_quad_ms_per_token2, self.recompute_lin_ms_per_token) <= 0:
            raise ValueError("trap cost coefficients must be positive")

    def swap(self, n: float) -> float:
        return self.swap_ms_per_token * n

    def recompute(self, n: float) -> float:
        return self.recompute_quad_ms_per_token2 * n * n + self.recompute_lin_ms_per_token * n

    def crossover_tokens(self) -> float:
        """Context length where swapping and recomputing cost the same."""
        return (self.swap_ms_per_token - self.recompute_lin_ms_per_token) / self.recompute_quad_ms_per_token2

    def to_json(self) -> dict:
        return {
            "swap_ms_per_token": self.swap_ms_per_token,
            "recompute_quad_ms_per_token2": self.recompute_quad_ms_per_token2,
            "recompute_lin_ms_per_token": self.recompute_lin_ms_per_token,
        }


TRAP_PROFILES = {
    "small": TrapCostModel(swap_ms_per_token=0.4, recompute_quad_ms_per_token2=3.3e-4, recompute_lin_ms_per_token=0.05),
    "large": TrapCostModel(swap_ms_per_token=0.3, recompute_quad_ms_per_token2=1.5e-3, recompute_lin_ms_per_token=0.1),
}


def handle_trap(context_tokens: int, expected_wait_ms: float, model: TrapCostModel) -> TrapDecision:
    """Keep the cache if neither freeing option pays off before the next
    interrupt, otherwise take the cheaper of recompute and swap."""
    if context_tokens < 0 or expected_wait_ms < 0:
        raise ValueError("context_tokens and expected_wait_ms must be non-negative")
    if math.isinf(expected_wait_ms):
        raise NoPendingJobs("trap with no job in flight would never resume")
    swap = model.swap(context_tokens)
    recompute = model.recompute(context_tokens)
    if min(swap, recompute) > expected_wait_ms:
        return TrapDecision.RETAIN
    if recompute <= swap:
        return TrapDecision.RECOMPUTE
    return TrapDecision.SWAP


# ---------------------------------------------------------------------------
# Executor


class JobStatus(str, enum.Enum):
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class JobHandle:
    id: Optional[str]
    call_body: str
    dispatched_at: float
    exec_ms: Optional[float]
    status: JobStatus = JobStatus.RUNNING
    value: Optional[str] = None
    finished_at: Optional[float] = None


@dataclass
class FunctionSpec:
    """A callable tool: ``fn(body) -> str`` plus an execution-time estimate.

    ``exec_ms`` may be a number or a function of the call block. In virtual
    time the estimate is the duration; in wall time a spec without ``fn``
    sleeps for it.
    """

    name: str
    exec_ms: Union[float, Callable[[cml.FunctionCall], float], None] = None
    fn: Optional[Callable[[str], str]] = None

    def estimate(self, call: cml.FunctionCall) -> Optional[float]:
        if callable(self.exec_ms):
            return float(self.exec_ms(call))
        return None if self.exec_ms is None else float(self.exec_ms)

    def run(self, call: cml.FunctionCall) -> str:
        if self.fn is not None:
            return str(self.fn(call.body))
        return f"{self.name}:ok"


Registry = dict  # name -> FunctionSpec

_LEADING_NAME = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)")


def function_name(body: str) -> Optional[str]:
    m = _LEADING_NAME.match(body)
    return m.group(1) if m else None


class UnknownFunction(LookupError):
    pass


class SimulatedExecutor:
    """Jobs finish at ``dispatched_at + exec_ms`` on a virtual clock.

    External events (user messages) can be scheduled on the same timeline.
    """

    def __init__(self, registry: Registry, clock: VirtualClock, queue: InterruptQueue):
        self.registry = registry
        self.clock = clock
        self.queue = queue
        self.jobs: list[JobHandle] = []
        self._timeline: list = []
        self._seq = 0

    def _schedule(self, t: float, kind: int, payload) -> None:
        t = round(t * VirtualClock.TICKS) / VirtualClock.TICKS  # the clock cannot land between ticks
        heapq.heappush(self._timeline, (t, kind, self._seq, payload))
        self._seq += 1

    def schedule_external(self, t_ms: float, block: cml.Interrupt) -> None:
        self._schedule(t_ms, 1, block)

    def dispatch(self, call: cml.FunctionCall) -> JobHandle:
        now = self.clock.now()
        name = function_name(call.body)
        spec = self.registry.get(name)
        if spec is None:
            job = JobHandle(call.id, call.body, now, 0.0, JobStatus.FAILED, f"error: unknown function {name!r}")
            self._schedule(now, 0, job)
        else:
            est = spec.estimate(call) or 0.0
            job = JobHandle(call.id, call.body, now, est)
            try:
                job.value = spec.run(call)
            except Exception as exc:  # reported to the model, never raised
                job.status = JobStatus.FAILED
                job.value = f"error: {exc}"
            self._schedule(now + est, 0, job)
        self.jobs.append(job)
        return job

    def poll(self) -> list:
        """Move everything due by now into the queue; returns finished jobs."""
        now = self.clock.now()
        done = []
        while self._timeline and self._timeline[0][0] <= now + 1e-9:
            t, kind, _, payload = heapq.heappop(self._timeline)
            if kind == 1:
                self.queue.put(payload, t)
                continue
            job = payload
            if job.status is JobStatus.RUNNING:
                job.status = JobStatus.DONE
            job.finished_at = t
            done.append(job)
            if job.id is not None:
                self.queue.put(cml.Interrupt(job.id, job.value or ""), t)
        return done

    def wait_next(self) -> bool:
        """Jump the clock to the next event; False if nothing is scheduled."""
        if not self._timeline:
            return False
        self.clock.advance_to(self._timeline[0][0])
        return True

    def live(self) -> list[JobHandle]:
        return [j for j in self.jobs if j.finished_at is None]

    def has_future_events(self) -> bool:
        return bool(self._timeline)


class ThreadExecutor:
    """Each call runs on a worker thread; completions land in the queue."""

    def __init__(self, registry: Registry, clock: Clock, queue: InterruptQueue, max_workers: Optional[int] = 8):
        self.registry = registry
        self.clock = clock
        self.queue = queue
        self.jobs: list[JobHandle] = []
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._lock = threading.Lock()

    def _finish(self, job: JobHandle, status: JobStatus, value: str) -> None:
        with self._lock:
            job.status = status
            job.value = value
            job.finished_at = self.clock.now()
        if job.id is not None:
            self.queue.put(cml.Interrupt(job.id, value), job.finished_at)

    def _work(self, job: JobHandle, spec: FunctionSpec, call: cml.FunctionCall) -> None:
        try:
            if spec.fn is None and job.exec_ms:
                time.sleep(job.exec_ms / 1000.0)
            value = spec.run(call)
        except Exception as exc:
            self._finish(job, JobStatus.FAILED, f"error: {exc}")
        else:
            self._finish(job, JobStatus.DONE, value)

    def dispatch(self, call: cml.FunctionCall) -> JobHandle:
        name = function_name(call.body)
        spec = self.registry.get(name)
        job = JobHandle(call.id, call.body, self.clock.now(), spec.estimate(call) if spec else 0.0)
        with self._lock:
            self.jobs.append(job)
        if spec is None:
            self._finish(job, JobStatus.FAILED, f"error: unknown function {name!r}")
        else:
            self._pool.submit(self._work, job, spec, call)
        return job

    def poll(self) -> list:
        return []

    def wait_next(self) -> bool:
        if not any(j.finished_at is None and j.id is not None for j in self.live()):
            return False
        self.queue.wait(timeout=0.05)
        return True

    def live(self) -> list[JobHandle]:
        with self._lock:
            return [j for j in self.jobs if j.finished_at is None]

    def has_future_events(self) -> bool:
        return bool(self.live())

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


def dispatch(call: cml.FunctionCall, executor) -> JobHandle:
    return executor.dispatch(call)


# ---------------------------------------------------------------------------
# Token sources


class TokenSource(Protocol):
    def next_token(self) -> cml.Token: ...

    def inject(self, tokens: list) -> None: ...

    def restart(self, context: list) -> None: ...

    def pause(self) -> None: ...

    def resume(self) -> None: ...


# ---------------------------------------------------------------------------
# Session


class EventKind(str, enum.Enum):
    TOKEN = "token"
    CALL = "call"
    TRAP = "trap"
    INTERRUPT = "interrupt"
    END = "session_end"


@dataclass
class StepEvent:
    kind: EventKind
    block: Optional[cml.CmlBlock] = None
    count: int = 0


@dataclass
class SessionTranscript:
    events: list = field(default_factory=list)
    context: list = field(default_factory=list)  # every token the model saw
    error: Optional[str] = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def blocks(self) -> list:
        return cml.parse_tokens(self.context, system=True)

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e["kind"] == kind]

    @property
    def makespan_ms(self) -> float:
        """When the last result came back; the last event if nothing ran."""
        done = [t for e in self.of_kind("interrupt") for t in e.get("enqueued_ms", [])]
        if done:
            return max(done)
        return self.events[-1]["t_ms"] if self.events else 0.0


class SessionError(RuntimeError):
    def __init__(self, message: str, transcript: SessionTranscript):
        super().__init__(message)
        self.transcript = transcript


@dataclass
class RuntimeConfig:
    trap_model: TrapCostModel = TRAP_PROFILES["small"]
    handle_traps: bool = True
    record_tokens: bool = True
    max_steps: int = 1_000_000


class Session:
    """One decode loop: pull, parse, dispatch, and inject between tokens."""

    def __init__(self, source, executor, clock, config: Optional[RuntimeConfig] = None, queue=None):
        self.source = source
        self.executor = executor
        self.clock = clock
        self.config = config or RuntimeConfig()
        self.queue = queue if queue is not None else executor.queue
        self.parser = cml.SessionParser(system=False)
        self.transcript = SessionTranscript()
        self.waiting = False
        self.ended = False
        self.jobs: dict = {}

    # transcript helpers
    def _ev(self, kind: str, **fields) -> None:
        self.transcript.events.append({"t_ms": round(self.clock.now(), 2), "kind": kind, **fields})

    def _context_add(self, tokens: Iterable) -> None:
        self.transcript.context.extend(tokens)

    def expected_wait_ms(self) -> float:
        now = self.clock.now()
        waits = [
            max(0.0, j.dispatched_at + j.exec_ms - now)
            for j in self.executor.live()
            if j.id is not None and j.exec_ms is not None
        ]
        if not waits:
            if any(j.id is not None for j in self.executor.live()):
                return 0.0  # durations unknown: keep the cache
            return math.inf
        return min(waits)

    def _wait_for_interrupt(self) -> bool:
        while not len(self.queue):
            self.executor.poll()
            if len(self.queue):
                break
            if not self.executor.wait_next():
                return False
        return True

    def step(self) -> StepEvent:
        self.executor.poll()
        if self.waiting:
            if not self._wait_for_interrupt():
                raise SessionError("waiting for interrupts but nothing is in flight", self.transcript)
            self.waiting = False
            self.source.resume()

        entries = drain_interrupts(self.queue, self.parser.critical, self.source)
        if entries:
            for entry in entries:
                toks = cml.to_tokens(entry.block)
                for tok in toks:
                    self.parser.feed(tok, system=True)
                self._context_add(toks)
            self._ev(
                "interrupt",
                count=len(entries),
                ids=[e.block.id for e in entries],
                enqueued_ms=[round(e.enqueued_at, 2) for e in entries],
            )
            if getattr(self.source, "restarts_on_inject", False):
                self._ev("restart")
            return StepEvent(EventKind.INTERRUPT, count=len(entries))

        tok = self.source.next_token()
        if tok.kind is cml.ControlTokenKind.EOS:
            if self.parser.critical:
                raise SessionError("stream ended inside a block", self.transcript)
            if any(j.id is not None for j in self.executor.live()) or self.executor.has_future_events():
                # the model stopped early; results still have to reach it
                self.waiting = True
                self.source.pause()
                self._ev("idle")
                return StepEvent(EventKind.TOKEN)
            self.executor.poll()
            if len(self.queue):
                return StepEvent(EventKind.TOKEN)
            self.ended = True
            self._ev("session_end")
            return StepEvent(EventKind.END)

        try:
            block = self.parser.feed(tok)
        except cml.CmlError as exc:
            self.transcript.error = str(exc)
            self._ev("error", message=str(exc))
            raise SessionError(f"syntax violation: {exc}", self.transcript) from exc
        self._context_add([tok])
        if self.config.record_tokens:
            self._ev("token", text=tok.surface(), critical=self.parser.critical)

        if isinstance(block, cml.FunctionCall):
            job = self.executor.dispatch(block)
            self._ev("call", id=block.id, body=block.body)
            self._ev("dispatch", id=block.id, status=job.status.value)
            return StepEvent(EventKind.CALL, block)
        if isinstance(block, cml.Trap):
            self._ev("trap")
            self.executor.poll()
            if self.config.handle_traps and not len(self.queue):
                wait = self.expected_wait_ms()
                if math.isinf(wait):
                    raise SessionError("trap with no job in flight", self.transcript)
                decision = handle_trap(len(self.transcript.context), wait, self.config.trap_model)
                self._ev(
                    "trap_decision",
                    decision=decision.value,
                    context_tokens=len(self.transcript.context),
                    expected_wait_ms=round(wait, 2),
                )
            self.waiting = True
            self.source.pause()
            return StepEvent(EventKind.TRAP, block)
        return StepEvent(EventKind.TOKEN)

    def run(self) -> SessionTranscript:
        steps = 0
        while not self.ended:
            self.step()
            steps += 1
            if steps > self.config.max_steps:
                raise SessionError("step budget exhausted", self.transcript)
        return self.transcript
