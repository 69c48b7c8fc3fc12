import json
from importlib import resources
from pathlib import Path

import pytest

from asyncfc import cml
from asyncfc.corpus import load_corpus
from asyncfc.taskmodel import CallNode, TaskGraph, graph_from_json
from asyncfc.traingen import (
    DatasetIOError,
    DuplicateSeed,
    TrainSample,
    assign_random_costs,
    emit_dataset,
    generate_dataset,
    generate_trace,
    read_dataset,
    validate_sample,
)

GOLDEN = Path(__file__).parent / "golden" / "traingen_seed42.jsonl"


def pasta():
    doc = json.loads((resources.files("asyncfc") / "data" / "graphs" / "pasta.json").read_text())
    return graph_from_json(doc)


def blocks(sample):
    return cml.parse_tokens(sample.tokens(), system=True)


def calls(sample):
    return [b.id for b in blocks(sample) if isinstance(b, cml.FunctionCall)]


class TestTraces:
    def test_two_chain(self):
        g = TaskGraph.from_nodes([CallNode("a", "first", 8, 100.0), CallNode("b", "second", 8, 100.0, frozenset({"a"}))])
        s = generate_trace(g, tpot_ms=5, randomize_costs=False)
        kinds = [type(b).__name__ for b in blocks(s)]
        assert kinds == ["FunctionCall", "Trap", "Interrupt", "FunctionCall", "Trap", "Interrupt"]
        assert not validate_sample(s)

    def test_independent_pair_in_lpt_order(self):
        g = TaskGraph.from_nodes([CallNode("short", "f", 8, 10.0), CallNode("long", "g", 8, 500.0)])
        s = generate_trace(g, tpot_ms=5, randomize_costs=False)
        assert calls(s) == ["long", "short"]

    def test_pasta_mixes_last(self):
        s = generate_trace(pasta(), tpot_ms=5, randomize_costs=False)
        seq = blocks(s)
        pos = {(type(b).__name__, b.id): k for k, b in enumerate(seq) if not isinstance(b, cml.Trap)}
        assert pos[("FunctionCall", "mix")] > pos[("Interrupt", "noodles")]
        assert pos[("FunctionCall", "mix")] > pos[("Interrupt", "fry")]
        assert not validate_sample(s)

    def test_spans_mark_who_speaks(self):
        s = generate_trace(pasta(), seed=3)
        roles = {sp["kind"]: sp["role"] for sp in s.spans}
        assert roles == {"call": "model", "trap": "model", "interrupt": "system"}
        for sp in s.spans:
            first = s.target[sp["start"]]
            assert first == {"call": "[CALL]", "trap": "[TRAP]", "interrupt": "[INTR]"}[sp["kind"]]

    def test_prompt_lists_functions(self):
        s = generate_trace(pasta(), seed=1)
        defs = json.loads(s.prompt.split("Functions:\n", 1)[1])
        assert {d["id"] for d in defs} == {"boil", "noodles", "chop", "fry", "mix"}
        assert {d["id"]: d["est_exec_ms"] for d in defs} == s.meta["exec_assignments"]

    def test_user_interrupts(self):
        g = load_corpus("multistep")[0]
        s = generate_trace(g, seed=5, user_interrupts=True)
        users = [b.id for b in blocks(s) if isinstance(b, cml.Interrupt) and b.id.startswith("user_")]
        assert users == [f"user_{k}" for k in range(1, len(s.meta["arrivals"]))]
        assert not validate_sample(s)

    def test_json_round_trip(self):
        s = generate_trace(pasta(), seed=8)
        assert TrainSample.from_json(json.loads(json.dumps(s.to_json()))) == s


class TestCosts:
    def test_range(self):
        g = assign_random_costs(load_corpus("mixed")[0], 4)
        assert all(1.0 <= n.exec_ms <= 1000.0 for n in g.nodes.values())

    def test_seeds_differ(self):
        g = pasta()
        for s in range(100):
            a, b = assign_random_costs(g, s), assign_random_costs(g, s + 1000)
            assert any(a.nodes[i].exec_ms != b.nodes[i].exec_ms for i in g.nodes)

    def test_same_seed_same_trace(self):
        assert generate_trace(pasta(), seed=11) == generate_trace(pasta(), seed=11)


class TestValidator:
    def sample(self):
        return generate_trace(pasta(), tpot_ms=5, randomize_costs=False)

    def test_detects_wrong_order(self):
        s = self.sample()
        first = calls(s)[0]
        # claim the other ready root is the slower one
        other = "boil" if first == "chop" else "chop"
        s.meta["exec_assignments"][other] = 999.0
        assert any("longer estimate" in p for p in validate_sample(s))

    def test_detects_missing_interrupt(self):
        s = self.sample()
        sp = next(x for x in s.spans if x["kind"] == "interrupt")
        del s.target[sp["start"]:sp["end"]]
        assert validate_sample(s)

    def test_detects_garbage(self):
        s = self.sample()
        s.target.insert(2, "[TRAP]")
        assert validate_sample(s)


class TestDatasets:
    def test_corpus_batch(self):
        out = list(generate_dataset(load_corpus(), 120, seed=7))
        assert len(out) == 120
        assert len({s.meta["graph_id"] for s in out}) == 12
        assert all(not validate_sample(s) for s in out)

    def test_golden(self, tmp_path):
        path = tmp_path / "out.jsonl"
        emit_dataset(load_corpus(), 12, path, seed=42)
        assert path.read_bytes() == GOLDEN.read_bytes()

    def test_read_back(self, tmp_path):
        path = tmp_path / "d.jsonl"
        stats = emit_dataset(load_corpus("parallel"), 6, path, seed=1)
        got = read_dataset(path)
        assert len(got) == stats.count == 6
        assert sum(len(s.target) for s in got) == stats.tokens_total

    def test_duplicate_seed(self, tmp_path):
        with pytest.raises(DuplicateSeed) as err:
            emit_dataset(load_corpus(), 3, tmp_path / "x.jsonl", seeds=[1, 2, 1])
        assert err.value.seed == 1

    def test_zero_count(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        stats = emit_dataset(load_corpus(), 0, path)
        assert stats.count == 0 and path.read_bytes() == b""

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        target = blocker / "sub" / "d.jsonl"
        with pytest.raises(DatasetIOError) as err:
            emit_dataset(load_corpus(), 1, target)
        assert str(blocker) in str(err.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_dataset(tmp_path / "nope.jsonl")
