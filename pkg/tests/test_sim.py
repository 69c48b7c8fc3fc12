import numpy as np
import pytest

from asyncfc import sim
from asyncfc.corpus import load_corpus
from asyncfc.runtime import transcript_violations
from asyncfc.taskmodel import CallNode, TaskGraph

P = sim.Policy


def run(graph, policy, **cfg):
    return sim.run_policy(graph, sim.SimConfig(record=False, **cfg), policy)


def chain(n=4, exec_ms=200.0):
    nodes = [CallNode(f"s{k}", f"step{k}", 20, exec_ms, frozenset({f"s{k - 1}"} if k else ())) for k in range(n)]
    return TaskGraph.from_nodes(nodes, tpot_ms=5.0)


class TestIndependent:
    def test_three_calls(self):
        g = sim.independent_graph([(10, 50), (10, 40), (10, 10)])
        got = sim.simulate(g, sim.SimConfig(), policies=["sync", "sync-parallel", "async-lpt"]).makespan_ms
        assert got == {"sync": 130.0, "sync-parallel": 80.0, "async-lpt": 60.0}

    def test_random_order_is_no_better(self):
        g = sim.independent_graph([(10, e) for e in (5, 90, 40, 300, 120)])
        lpt = run(g, "async-lpt").makespan_ms
        rand = [run(g, "async-random", seed=s).makespan_ms for s in range(100)]
        assert lpt <= min(rand) + 1e-9
        assert lpt < np.mean(rand)


class TestCorpus:
    @pytest.mark.parametrize("graph", load_corpus(), ids=lambda g: g.graph_id)
    def test_ordering(self, graph):
        m = sim.simulate(graph, sim.SimConfig(tpot_ms=5, record=False), policies=list(sim.ALL_POLICIES)).makespan_ms
        assert m["async-lpt"] <= m["sync-parallel"] <= m["sync"]
        assert m["async-naive"] == pytest.approx(m["async-lpt"])  # no TTFT, no restart penalty

    def test_lpt_beats_random_in_expectation(self):
        for graph in load_corpus("mixed"):
            lpt = run(graph, "async-lpt", tpot_ms=5).makespan_ms
            rand = np.mean([run(graph, "async-random", tpot_ms=5, seed=s).makespan_ms for s in range(100)])
            assert lpt <= rand + 1e-9

    def test_async_pays_tokens(self):
        rep = sim.simulate(load_corpus("mixed")[0], sim.SimConfig(tpot_ms=5, record=False),
                           policies=list(sim.ALL_POLICIES))
        over = rep.token_overhead()
        assert over["sync"] == over["sync-parallel"] == 0
        assert over["async-lpt"] > 0

    def test_deterministic(self):
        g = load_corpus("multistep")[1]
        cfg = sim.SimConfig(tpot_ms=5, policy="async-random", seed=9)
        assert sim.report_json(sim.simulate(g, cfg), events=True) == sim.report_json(sim.simulate(g, cfg), events=True)

    def test_transcripts_are_clean(self):
        for graph in load_corpus():
            res = sim.run_policy(graph, sim.SimConfig(tpot_ms=5), "async-lpt")
            assert res.context and not transcript_violations(res.context)


class TestNaive:
    def test_ttft_crossover(self):
        g = chain()
        slow = lambda p, t: run(g, p, ttft_ms=t).makespan_ms
        assert slow("async-naive", 310) > slow("sync-parallel", 310)
        assert slow("async-naive", 0) <= slow("sync-parallel", 0)

    def test_restarts_counted(self):
        res = run(chain(), "async-naive", ttft_ms=50)
        assert res.restarts >= 3


class TestArrivals:
    def schedule(self, times=(0, 200, 400)):
        tasks = sim.split_tasks(load_corpus("multistep")[0])
        return list(zip(times, tasks))

    def test_single_arrival_equals_simulate(self):
        g = load_corpus("parallel")[0]
        cfg = sim.SimConfig(tpot_ms=5, record=False)
        a = sim.simulate_arrivals(sim.SimConfig(tpot_ms=5, record=False, arrival_schedule=[(0, g)]),
                                  policies=["sync", "async-lpt"])
        b = sim.simulate(g, cfg, policies=["sync", "async-lpt"])
        assert a.makespan_ms == b.makespan_ms

    def test_injection_waits_for_block_end(self):
        rep = sim.simulate_arrivals(sim.SimConfig(tpot_ms=5, arrival_schedule=self.schedule()),
                                    policies=["async-lpt"])
        res = rep.runs[P.ASYNC_LPT]
        assert not transcript_violations(res.context)
        users = [e for e in res.events if e["kind"] == "interrupt" and e["id"].startswith("user_")]
        assert [e["arrived_ms"] for e in users] == [200.0, 400.0]
        assert all(e["t_ms"] >= e["arrived_ms"] for e in users)

    def test_async_wins(self):
        rep = sim.simulate_arrivals(sim.SimConfig(tpot_ms=5, record=False, arrival_schedule=self.schedule()),
                                    policies=["sync", "async-lpt"])
        assert rep.speedup_vs_sync()["async-lpt"] > 1.5

    def test_unsorted_schedule(self):
        with pytest.raises(ValueError):
            sim.simulate_arrivals(sim.SimConfig(arrival_schedule=self.schedule((0, 400, 200))))

    def test_empty_schedule(self):
        with pytest.raises(ValueError):
            sim.simulate_arrivals(sim.SimConfig())


class TestSweep:
    def test_percentiles(self):
        res = sim.sweep(load_corpus("parallel"), [sim.SimConfig(tpot_ms=5, seed=s) for s in range(3)],
                        policies=["sync", "async-lpt"], exec_range=(30, 500))
        assert len(res.rows) == 4 * 3 * 2
        pct = res.percentiles()
        assert set(pct) == {"sync", "async-lpt"}
        for v in pct.values():
            assert v["p10"] <= v["p50"] <= v["p90"]
        assert res.mean_speedup("async-lpt") > 1.0

    def test_empty_corpus(self):
        res = sim.sweep([], [sim.SimConfig()])
        assert res.rows == [] and res.to_json()["percentiles"] == {}
        assert res.to_csv() == ",".join(sim.CSV_COLUMNS) + "\n"

    def test_redraw_depends_on_seed(self):
        g = load_corpus("parallel")[0]
        a, b = sim.assign_uniform_exec(g, 1, 30, 500), sim.assign_uniform_exec(g, 2, 30, 500)
        assert [n.exec_ms for n in a.nodes.values()] != [n.exec_ms for n in b.nodes.values()]
        assert all(30 <= n.exec_ms <= 500 for n in a.nodes.values())


def test_bad_config():
    with pytest.raises(ValueError):
        sim.SimConfig(tpot_ms=0)
    with pytest.raises(ValueError):
        sim.SimConfig(ttft_ms=-1)
