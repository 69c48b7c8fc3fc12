import json
import threading
import time
from importlib import resources

import pytest

from asyncfc import cml, sim
from asyncfc.corpus import load_corpus
from asyncfc.runtime import (
    TRAP_PROFILES,
    FunctionSpec,
    InterruptQueue,
    NoPendingJobs,
    RuntimeConfig,
    Session,
    SessionError,
    SimulatedExecutor,
    ThreadExecutor,
    TrapDecision,
    VirtualClock,
    WallClock,
    drain_interrupts,
    handle_trap,
    run_session,
    transcript_violations,
)
from asyncfc.runtime.sources import ScriptSource
from asyncfc.taskmodel import CallNode, TaskGraph

SMALL, LARGE = TRAP_PROFILES["small"], TRAP_PROFILES["large"]


def florist():
    doc = json.loads((resources.files("asyncfc") / "data" / "scenarios" / "florist.json").read_text())
    reg = {name: FunctionSpec(name, exec_ms=ms) for name, ms in doc["functions"].items()}
    return run_session(doc["script"], tpot_ms=doc["tpot_ms"], registry=reg)


def times(tr, kind, key="id"):
    return {e[key]: e["t_ms"] for e in tr.of_kind(kind)}


class Recorder:
    def __init__(self):
        self.injected = []

    def inject(self, tokens):
        self.injected.append(list(tokens))


class TestScripted:
    def test_single_call(self):
        tr = run_session("[CALL] a [HEAD] f() [END]", tpot_ms=5, registry={"f": FunctionSpec("f", exec_ms=100)})
        kinds = [e["kind"] for e in tr.events if e["kind"] not in ("token", "dispatch", "idle")]
        assert kinds == ["call", "interrupt", "session_end"]
        assert tr.of_kind("interrupt")[0]["enqueued_ms"] == [125.0]
        assert tr.blocks()[-1] == cml.Interrupt("a", "f:ok")

    def test_florist_waits_for_both_inputs(self):
        tr = florist()
        calls = times(tr, "call")
        done = {i: e["t_ms"] for e in tr.of_kind("interrupt") for i in e["ids"]}
        assert calls["msg"] >= max(done["shop"], done["cal"])
        assert not transcript_violations(tr.context)

    def test_florist_timeline(self):
        tr = florist()
        assert times(tr, "call") == {"shop": 25.0, "cal": 50.0, "msg": 350.0}
        assert [e["t_ms"] for e in tr.of_kind("trap")] == [60.0, 180.0, 360.0]
        assert tr.makespan_ms == 430.0

    def test_interrupt_held_until_block_closes(self):
        clock = VirtualClock()
        queue = InterruptQueue()
        ex = SimulatedExecutor({"f": FunctionSpec("f", exec_ms=100)}, clock, queue)
        ex.schedule_external(12.0, cml.Interrupt("user_1", "hello"))
        src = ScriptSource("[CALL] a [HEAD] f() [END]", clock, 5.0)
        tr = Session(src, ex, clock, RuntimeConfig(), queue).run()
        kinds = [t.kind for t in tr.context]
        end = kinds.index(cml.ControlTokenKind.END)
        assert kinds[end + 1] is cml.ControlTokenKind.INTR
        first = tr.of_kind("interrupt")[0]
        assert first["ids"] == ["user_1"] and first["t_ms"] == 25.0

    def test_unknown_function_reports_error(self):
        tr = run_session("[CALL] a [HEAD] nope() [END]", tpot_ms=5, registry={})
        value = tr.blocks()[-1].value
        assert value.startswith("error:") and "nope" in value

    def test_syntax_violation_stops_session(self):
        with pytest.raises(SessionError) as err:
            run_session("[CALL] [TRAP][END]", tpot_ms=5, registry={})
        assert err.value.transcript.error

    def test_trap_without_work_fails(self):
        with pytest.raises(SessionError):
            run_session("[TRAP][END]", tpot_ms=5, registry={})


class TestTraps:
    def chain(self):
        return TaskGraph.from_nodes([CallNode("a", "slow", 8, 300.0), CallNode("b", "quick", 8, 10.0, frozenset({"a"}))])

    def test_chain_trap_has_one_decision(self):
        tr = run_session(self.chain(), tpot_ms=5)
        kinds = [e["kind"] for e in tr.events if e["kind"] in ("trap", "trap_decision", "interrupt")]
        assert kinds[:3] == ["trap", "trap_decision", "interrupt"]
        # the second trap finds b's result already queued, so nothing is decided
        assert len(tr.of_kind("trap")) == 2 and len(tr.of_kind("trap_decision")) == 1

    def test_decision_uses_wait(self):
        tr = run_session(self.chain(), tpot_ms=5)
        d = tr.of_kind("trap_decision")[0]
        assert d["expected_wait_ms"] == pytest.approx(300.0 - (d["t_ms"] - tr.of_kind("call")[0]["t_ms"]))
        assert d["decision"] == handle_trap(d["context_tokens"], d["expected_wait_ms"], SMALL).value

    @pytest.mark.parametrize("model,expected", [(SMALL, TrapDecision.RECOMPUTE), (LARGE, TrapDecision.SWAP)])
    def test_profiles(self, model, expected):
        assert handle_trap(300, 100.0, model) is expected

    def test_zero_wait_retains(self):
        assert handle_trap(300, 0.0, SMALL) is TrapDecision.RETAIN

    def test_long_wait_never_retains(self):
        for n in range(1, 2000, 37):
            assert handle_trap(n, 1e9, SMALL) is not TrapDecision.RETAIN

    def test_monotone_in_wait(self):
        """Once freeing the cache pays off, waiting longer keeps it paying off."""
        for n in (10, 300, 1500):
            freed = [handle_trap(n, w, SMALL) is not TrapDecision.RETAIN for w in range(0, 2000, 10)]
            assert freed == sorted(freed)

    def test_no_pending_jobs(self):
        with pytest.raises(NoPendingJobs):
            handle_trap(100, float("inf"), SMALL)

    def test_negative_input(self):
        with pytest.raises(ValueError):
            handle_trap(-1, 0.0, SMALL)


class TestDrain:
    def test_critical_defers(self):
        q = InterruptQueue()
        q.put(cml.Interrupt("a", "1"), 0.0)
        rec = Recorder()
        assert drain_interrupts(q, True, rec) == []
        assert len(q) == 1 and rec.injected == []

    def test_fifo(self):
        q = InterruptQueue()
        for k, i in enumerate("xyz"):
            q.put(cml.Interrupt(i, str(k)), float(k))
        rec = Recorder()
        got = drain_interrupts(q, False, rec)
        assert [e.block.id for e in got] == ["x", "y", "z"]
        assert cml.parse_tokens(rec.injected[0]) == [e.block for e in got]
        assert len(q) == 0

    def test_empty(self):
        rec = Recorder()
        assert drain_interrupts(InterruptQueue(), False, rec) == []
        assert rec.injected == []


class TestExecutors:
    def test_simulated_completion_order(self):
        clock, q = VirtualClock(), InterruptQueue()
        reg = {"slow": FunctionSpec("slow", exec_ms=50), "fast": FunctionSpec("fast", exec_ms=10)}
        ex = SimulatedExecutor(reg, clock, q)
        ex.dispatch(cml.FunctionCall("slow()", "s"))
        ex.dispatch(cml.FunctionCall("fast()", "f"))
        while ex.wait_next():
            ex.poll()
        assert [(e.block.id, e.enqueued_at) for e in q.drain()] == [("f", 10.0), ("s", 50.0)]

    def test_thread_completion_order(self):
        clock, q = WallClock(), InterruptQueue()
        reg = {"slow": FunctionSpec("slow", exec_ms=200), "fast": FunctionSpec("fast", exec_ms=10)}
        ex = ThreadExecutor(reg, clock, q)
        ex.dispatch(cml.FunctionCall("slow()", "s"))
        ex.dispatch(cml.FunctionCall("fast()", "f"))
        ex.shutdown()
        assert [e.block.id for e in q.drain()] == ["f", "s"]

    def test_thread_failure_is_reported(self):
        def boom(body):
            raise RuntimeError("disk on fire")

        clock, q = WallClock(), InterruptQueue()
        ex = ThreadExecutor({"f": FunctionSpec("f", fn=boom)}, clock, q)
        ex.dispatch(cml.FunctionCall("f()", "a"))
        ex.shutdown()
        assert q.drain()[0].block.value == "error: disk on fire"

    def test_queue_many_producers(self):
        q = InterruptQueue()

        def produce(p):
            for k in range(200):
                q.put(cml.Interrupt(f"p{p}", str(k)), time.monotonic())

        threads = [threading.Thread(target=produce, args=(p,)) for p in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        items = q.drain()
        assert len(items) == 1600
        for p in range(8):
            assert [int(e.block.value) for e in items if e.block.id == f"p{p}"] == list(range(200))


class TestSessions:
    def test_deterministic(self):
        g = load_corpus("mixed")[0]
        assert run_session(g, tpot_ms=5).to_jsonl() == run_session(g, tpot_ms=5).to_jsonl()

    @pytest.mark.parametrize("graph", load_corpus(), ids=lambda g: g.graph_id)
    def test_dependencies_respected(self, graph):
        tr = run_session(graph, tpot_ms=5)
        assert not transcript_violations(tr.context)
        seen = set()
        for b in tr.blocks():
            if isinstance(b, cml.FunctionCall):
                assert graph.nodes[b.id].deps <= seen
            elif isinstance(b, cml.Interrupt):
                seen.add(b.id)
        assert seen == set(graph.nodes)

    @pytest.mark.parametrize("graph", load_corpus(), ids=lambda g: g.graph_id)
    def test_matches_simulator(self, graph):
        g = sim.assign_uniform_exec(graph, 3, 30, 500)
        for naive, policy, ttft in ((False, "async-lpt", 0), (True, "async-naive", 59)):
            want = sim.run_policy(g, sim.SimConfig(tpot_ms=5, ttft_ms=ttft, record=False), policy).makespan_ms
            got = run_session(g, tpot_ms=5, ttft_ms=ttft, naive=naive).makespan_ms
            assert got == pytest.approx(want, abs=0.01)

    def test_user_arrivals(self):
        g = load_corpus("multistep")[0]
        tasks = sim.split_tasks(g)
        arrivals = [(0, list(tasks[0].nodes))] + [(300 * k, list(t.nodes)) for k, t in enumerate(tasks[1:], 1)]
        tr = run_session(g, tpot_ms=5, arrivals=arrivals)
        assert not transcript_violations(tr.context)
        users = [e for e in tr.of_kind("interrupt") for i in e["ids"] if i.startswith("user_")]
        assert len(users) == len(tasks) - 1
        called = [b.id for b in tr.blocks() if isinstance(b, cml.FunctionCall)]
        assert set(called) == set(g.nodes)

    def test_violation_checker_catches_bad_stream(self):
        toks = cml.tokenize("[CALL] a [HEAD] f( [INTR] b [HEAD] 1 [END] [END]")
        assert any("inside a call span" in p for p in transcript_violations(toks))
        assert transcript_violations(cml.tokenize("[CALL] a [HEAD] f() [END]")) == ["call a has 0 interrupts"]


def test_off_grid_arrival_still_lands():
    g = load_corpus("multistep")[0]
    tasks = sim.split_tasks(g)
    arrivals = [(0.0, list(tasks[0].nodes)), (171.64279946632445, list(tasks[1].nodes))]
    tr = run_session(g, tpot_ms=7.838, arrivals=arrivals)
    user = [e for e in tr.of_kind("interrupt") if "user_1" in e["ids"]]
    assert user and user[0]["t_ms"] >= 171.64
