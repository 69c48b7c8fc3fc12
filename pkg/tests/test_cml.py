import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncfc import cml
from asyncfc.cml import ControlTokenKind as K

IDENT = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,10}", fullmatch=True)
# text without sentinels and without surrounding blanks, which the parser trims
TEXT = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="[]"), min_size=1, max_size=30
).map(str.strip).filter(bool)

calls = st.builds(cml.FunctionCall, TEXT, st.one_of(st.none(), IDENT))
interrupts = st.builds(cml.Interrupt, IDENT, st.one_of(st.just(""), TEXT))
blocks = st.one_of(calls, interrupts, st.just(cml.Trap()))


def run(text, system=True):
    return cml.parse(text, system=system)


class TestExamples:
    def test_call_with_id(self):
        assert run("[CALL] job1 [HEAD] get_weather('SF') [END]") == [cml.FunctionCall("get_weather('SF')", "job1")]

    def test_anonymous_call(self):
        assert run("[CALL] ping() [END]") == [cml.FunctionCall("ping()")]

    def test_interrupt(self):
        assert run("[INTR] job1 [HEAD] 42 [END]") == [cml.Interrupt("job1", "42")]

    def test_trap(self):
        assert run("[TRAP][END]") == [cml.Trap()]

    def test_prose_between_blocks_is_ignored(self):
        out = run("Let me check. [CALL] a [HEAD] f() [END] and then [TRAP][END] done")
        assert out == [cml.FunctionCall("f()", "a"), cml.Trap()]

    def test_body_keeps_inner_spaces(self):
        assert run("[CALL] a [HEAD] f(1,  2) [END]")[0].body == "f(1,  2)"

    def test_invalid_identifier(self):
        with pytest.raises(cml.IdentifierInvalid):
            run("[CALL] 9lives [HEAD] f() [END]")

    def test_empty_body(self):
        with pytest.raises(cml.SyntaxViolation):
            run("[CALL] [END]")

    def test_trap_needs_end_next(self):
        with pytest.raises(cml.SyntaxViolation):
            run("[TRAP] x [END]")

    def test_nested_call_rejected(self):
        with pytest.raises(cml.SyntaxViolation):
            run("[CALL] a [HEAD] [CALL] f() [END]")

    def test_model_cannot_emit_interrupt(self):
        with pytest.raises(cml.SyntaxViolation):
            run("[INTR] a [HEAD] 1 [END]", system=False)

    def test_interrupt_inside_call_rejected_even_for_system(self):
        with pytest.raises(cml.SyntaxViolation):
            run("[CALL] a [HEAD] f( [INTR] b [HEAD] 1 [END]")

    def test_unterminated_stream(self):
        with pytest.raises(cml.CmlError):
            run("[CALL] a [HEAD] f(")

    def test_duplicate_call_ids(self):
        p = cml.SessionParser(system=True)
        for tok in cml.tokenize("[CALL] a [HEAD] f() [END]"):
            p.feed(tok)
        with pytest.raises(cml.DuplicateId):
            for tok in cml.tokenize("[CALL] a [HEAD] g() [END]"):
                p.feed(tok)

    def test_interrupts_may_repeat_a_call_id(self):
        cml.validate_unique_ids(run("[CALL] a [HEAD] f() [END][INTR] a [HEAD] 1 [END]"))

    def test_serialize_canonical(self):
        assert cml.serialize(cml.Interrupt("job1", "42")) == "[INTR] job1 [HEAD] 42 [END]"
        assert cml.serialize(cml.Trap()) == "[TRAP][END]"

    def test_critical_flag_tracks_blocks(self):
        state = cml.OUTSIDE
        flags = []
        for tok in cml.tokenize("[CALL] a [HEAD] f() [END] x"):
            state, _, critical = cml.feed(state, tok)
            flags.append(critical)
        assert flags == [True, True, True, True, False, False]

    def test_spans(self):
        toks = cml.tokenize("hi [CALL] a [HEAD] f() [END][TRAP][END]")
        spans = [(s, e) for s, e, _ in cml.iter_spans(toks)]
        assert spans == [(1, 6), (6, 8)]


class TestMask:
    def test_outside(self):
        assert cml.decode_mask(cml.OUTSIDE) == {K.TEXT, K.CALL, K.TRAP, K.EOS}

    def test_trap_forces_end(self):
        state, _, _ = cml.feed(cml.OUTSIDE, cml.TRAP)
        assert cml.decode_mask(state) == {K.END}

    def test_intr_never_in_mask(self):
        for kind in cml.StateKind:
            assert K.INTR not in cml.decode_mask(cml.ParserState(kind))

    def test_eos_only_outside(self):
        for kind in cml.StateKind:
            assert (K.EOS in cml.decode_mask(cml.ParserState(kind))) == (kind is cml.StateKind.OUTSIDE)


def _token(kind, rng):
    if kind is K.TEXT:
        return cml.Token(K.TEXT, rng.choice([" job1 ", " f(x) ", " a ", " 7 "]))
    return cml.Token(kind)


def test_mask_fuzz():
    """Allowed kinds are accepted and the rest rejected, along random walks."""
    rng = random.Random(7)
    for _ in range(2000):
        state = cml.OUTSIDE
        for _ in range(rng.randint(1, 12)):
            mask = cml.decode_mask(state)
            for kind in K:
                tok = _token(kind, rng)
                if kind in mask:
                    try:
                        cml.feed(state, tok)
                    except (cml.IdentifierInvalid, cml.SyntaxViolation) as err:
                        # content checks only: identifiers and empty bodies
                        assert kind in (K.HEAD, K.END), err
                else:
                    with pytest.raises(cml.SyntaxViolation):
                        cml.feed(state, tok)
            choices = [k for k in mask if k is not K.EOS] + ([K.INTR] if state == cml.OUTSIDE else [])
            kind = rng.choice(sorted(choices, key=lambda k: k.value))
            try:
                state, _, _ = cml.feed(state, _token(kind, rng), system=True)
            except cml.CmlError:
                break


@settings(max_examples=300, deadline=None)
@given(blocks)
def test_round_trip(block):
    assert cml.parse(cml.serialize(block)) == [block]


@settings(max_examples=200, deadline=None)
@given(st.lists(blocks, max_size=6), st.data())
def test_stream_lexer_matches_tokenize(seq, data):
    text = "".join(cml.serialize(b) + " note " for b in seq)
    cuts = sorted(data.draw(st.lists(st.integers(0, len(text)), max_size=8)))
    lexer = cml.StreamLexer()
    toks = []
    for a, b in zip([0] + cuts, cuts + [len(text)]):
        toks += lexer.push(text[a:b])
    toks += lexer.flush()
    assert cml.parse_tokens(toks) == seq


@settings(max_examples=200, deadline=None)
@given(st.lists(blocks, max_size=8))
def test_token_round_trip(seq):
    toks = [t for b in seq for t in cml.to_tokens(b)]
    assert cml.parse_tokens(toks) == seq
    assert cml.parse_tokens(cml.tokenize(cml.render(toks))) == seq
