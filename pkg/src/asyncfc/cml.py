"""Context markup for asynchronous calls: lexer, parser FSM, serializer, decode mask.

The grammar has five sentinels::

    [CALL] {body} [END]
    [CALL] {id} [HEAD] {body} [END]
    [INTR] {id} [HEAD] {value} [END]      (system-injected only)
    [TRAP][END]

Everything outside a block is free text. The parser is a pure state machine:
``feed`` never mutates its input state.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Union


class ControlTokenKind(enum.Enum):
    CALL = "[CALL]"
    INTR = "[INTR]"
    TRAP = "[TRAP]"
    END = "[END]"
    HEAD = "[HEAD]"
    TEXT = "text"
    EOS = "eos"


SENTINELS = {
    k.value: k
    for k in (
        ControlTokenKind.CALL,
        ControlTokenKind.INTR,
        ControlTokenKind.TRAP,
        ControlTokenKind.END,
        ControlTokenKind.HEAD,
    )
}

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_SENTINEL_RE = re.compile("|".join(re.escape(s) for s in SENTINELS))


class CmlError(Exception):
    pass


class SyntaxViolation(CmlError):
    def __init__(self, token: "Token", state: "ParserState", reason: str = ""):
        self.token = token
        self.state = state
        self.reason = reason
        msg = f"token {token.surface()!r} not permitted in state {state.kind.name}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class IdentifierInvalid(CmlError):
    def __init__(self, ident: str):
        self.ident = ident
        super().__init__(f"invalid identifier {ident!r}")


class DuplicateId(CmlError):
    def __init__(self, ident: str):
        self.ident = ident
        super().__init__(f"duplicate call identifier {ident!r}")


def is_identifier(text: str) -> bool:
    return bool(IDENTIFIER_RE.match(text))


@dataclass(frozen=True)
class Token:
    kind: ControlTokenKind
    text: str = ""

    def surface(self) -> str:
        if self.kind is ControlTokenKind.TEXT:
            return self.text
        if self.kind is ControlTokenKind.EOS:
            return ""
        return self.kind.value

    @classmethod
    def sentinel(cls, kind: ControlTokenKind) -> "Token":
        return cls(kind)

    @classmethod
    def of(cls, text: str) -> "Token":
        """Token from a surface string: a sentinel if it is one, else text."""
        kind = SENTINELS.get(text)
        return cls(kind) if kind is not None else cls(ControlTokenKind.TEXT, text)


CALL = Token(ControlTokenKind.CALL)
INTR = Token(ControlTokenKind.INTR)
TRAP = Token(ControlTokenKind.TRAP)
END = Token(ControlTokenKind.END)
HEAD = Token(ControlTokenKind.HEAD)
EOS = Token(ControlTokenKind.EOS)


# ---------------------------------------------------------------------------
# Blocks


@dataclass(frozen=True)
class FunctionCall:
    body: str
    id: Optional[str] = None


@dataclass(frozen=True)
class Interrupt:
    id: str
    value: str


@dataclass(frozen=True)
class Trap:
    pass


CmlBlock = Union[FunctionCall, Interrupt, Trap]


def block_to_json(block: CmlBlock) -> dict:
    if isinstance(block, FunctionCall):
        return {"type": "call", "id": block.id, "body": block.body}
    if isinstance(block, Interrupt):
        return {"type": "interrupt", "id": block.id, "value": block.value}
    return {"type": "trap"}


# ---------------------------------------------------------------------------
# Parser state machine


class StateKind(enum.Enum):
    OUTSIDE = "outside"
    CALL_COLLECT = "call_collect"
    CALL_BODY = "call_body"
    INTR_EXPECT_ID = "intr_expect_id"
    INTR_EXPECT_VALUE = "intr_expect_value"
    TRAP_EXPECT_END = "trap_expect_end"


@dataclass(frozen=True)
class ParserState:
    kind: StateKind = StateKind.OUTSIDE
    buffer: str = ""
    ident: Optional[str] = None

    @property
    def inside_block(self) -> bool:
        return self.kind is not StateKind.OUTSIDE


OUTSIDE = ParserState()

_T = ControlTokenKind
_MASKS = {
    StateKind.OUTSIDE: frozenset({_T.TEXT, _T.CALL, _T.TRAP, _T.EOS}),
    StateKind.CALL_COLLECT: frozenset({_T.TEXT, _T.HEAD, _T.END}),
    StateKind.CALL_BODY: frozenset({_T.TEXT, _T.END}),
    # only reachable through system injection
    StateKind.INTR_EXPECT_ID: frozenset({_T.TEXT, _T.HEAD}),
    StateKind.INTR_EXPECT_VALUE: frozenset({_T.TEXT, _T.END}),
    StateKind.TRAP_EXPECT_END: frozenset({_T.END}),
}


def decode_mask(state: ParserState) -> frozenset:
    """Token kinds a model may generate next from ``state``.

    ``INTR`` is never included: interrupts are injected by the runtime.
    """
    return _MASKS[state.kind]


def feed(
    state: ParserState, token: Token, *, system: bool = False
) -> tuple[ParserState, Optional[CmlBlock], bool]:
    """Advance the parser by one token.

    Returns ``(next_state, block, critical)`` where ``block`` is set only when
    ``token`` closes a block and ``critical`` is true while inside a block.
    ``system=True`` marks the caller as the interrupt injector, which is the
    only way an ``[INTR]`` is accepted.
    """
    kind = token.kind
    allowed = decode_mask(state)
    if not (kind in allowed or (system and kind is _T.INTR and state.kind is StateKind.OUTSIDE)):
        raise SyntaxViolation(token, state)

    sk = state.kind
    if kind is _T.TEXT:
        if sk is StateKind.OUTSIDE:
            return state, None, False
        return ParserState(sk, state.buffer + token.text, state.ident), None, True

    if kind is _T.EOS:
        return state, None, False

    if sk is StateKind.OUTSIDE:
        nxt = {
            _T.CALL: StateKind.CALL_COLLECT,
            _T.INTR: StateKind.INTR_EXPECT_ID,
            _T.TRAP: StateKind.TRAP_EXPECT_END,
        }[kind]
        return ParserState(nxt), None, True

    if kind is _T.HEAD:
        ident = state.buffer.strip()
        if not is_identifier(ident):
            raise IdentifierInvalid(ident)
        nxt = StateKind.CALL_BODY if sk is StateKind.CALL_COLLECT else StateKind.INTR_EXPECT_VALUE
        return ParserState(nxt, "", ident), None, True

    # END
    text = state.buffer.strip()
    if sk is StateKind.TRAP_EXPECT_END:
        return OUTSIDE, Trap(), False
    if sk is StateKind.INTR_EXPECT_VALUE:
        return OUTSIDE, Interrupt(state.ident, text), False
    if not text:
        raise SyntaxViolation(token, state, "empty call body")
    return OUTSIDE, FunctionCall(text, state.ident), False


# ---------------------------------------------------------------------------
# Lexing and serialization


def tokenize(text: str) -> list[Token]:
    """Split text into sentinel and text tokens.

    Whitespace-only runs are dropped; they carry no meaning next to sentinels.
    """
    out: list[Token] = []
    pos = 0
    for m in _SENTINEL_RE.finditer(text):
        chunk = text[pos : m.start()]
        if chunk.strip():
            out.append(Token(_T.TEXT, chunk))
        out.append(Token(SENTINELS[m.group()]))
        pos = m.end()
    tail = text[pos:]
    if tail.strip():
        out.append(Token(_T.TEXT, tail))
    return out


class StreamLexer:
    """Incremental lexer for text arriving in arbitrary chunks.

    A sentinel split across chunk boundaries is held back until it can be
    decided, and so is trailing whitespace, so spaces inside a body survive
    chunking while whitespace next to a sentinel is dropped.
    """

    _MAX = max(len(s) for s in SENTINELS)

    def __init__(self) -> None:
        self._pending = ""

    def push(self, chunk: str) -> list[Token]:
        text = self._pending + chunk
        out: list[Token] = []
        pos = 0
        for m in _SENTINEL_RE.finditer(text):
            seg = text[pos : m.start()]
            if seg.strip():
                out.append(Token(_T.TEXT, seg))
            out.append(Token(SENTINELS[m.group()]))
            pos = m.end()
        tail = text[pos:]
        hold = 0
        for k in range(1, min(self._MAX, len(tail)) + 1):
            suffix = tail[-k:]
            if any(s.startswith(suffix) and s != suffix for s in SENTINELS):
                hold = k
        ready, keep = tail[: len(tail) - hold], tail[len(tail) - hold :]
        if ready.strip():
            out.append(Token(_T.TEXT, ready))
            self._pending = keep
        else:
            self._pending = ready + keep
        return out

    def flush(self) -> list[Token]:
        text, self._pending = self._pending, ""
        return tokenize(text)


def to_tokens(block: CmlBlock) -> list[Token]:
    """Canonical token sequence for ``block``."""
    if isinstance(block, Trap):
        return [TRAP, END]
    if isinstance(block, Interrupt):
        if not is_identifier(block.id):
            raise IdentifierInvalid(block.id)
        out = [INTR, Token(_T.TEXT, f" {block.id} "), HEAD]
        if block.value:
            out.append(Token(_T.TEXT, f" {block.value} "))
        out.append(END)
        return out
    if block.id is not None and not is_identifier(block.id):
        raise IdentifierInvalid(block.id)
    out = [CALL]
    if block.id is not None:
        out += [Token(_T.TEXT, f" {block.id} "), HEAD]
    out += [Token(_T.TEXT, f" {block.body} "), END]
    return out


def render(tokens: Iterable[Token]) -> str:
    return "".join(t.surface() for t in tokens)


def serialize(block: CmlBlock) -> str:
    """Canonical text form, e.g. ``[INTR] job1 [HEAD] 42 [END]``."""
    return render(to_tokens(block))


def parse_tokens(tokens: Iterable[Token], *, system: bool = True) -> list[CmlBlock]:
    """Parse a complete token stream, returning every closed block."""
    state = OUTSIDE
    blocks = []
    for tok in tokens:
        state, block, _ = feed(state, tok, system=system)
        if block is not None:
            blocks.append(block)
    if state.inside_block:
        raise CmlError(f"stream ended inside a block ({state.kind.name})")
    return blocks


def parse(text: str, *, system: bool = True) -> list[CmlBlock]:
    return parse_tokens(tokenize(text), system=system)


def iter_spans(tokens: Sequence[Token], *, system: bool = True) -> Iterator[tuple[int, int, CmlBlock]]:
    """Yield ``(start, end, block)`` token-index spans, ``end`` exclusive."""
    state = OUTSIDE
    start = 0
    for i, tok in enumerate(tokens):
        was_outside = not state.inside_block
        state, block, _ = feed(state, tok, system=system)
        if was_outside and state.inside_block:
            start = i
        if block is not None:
            yield start, i + 1, block


def validate_unique_ids(blocks: Iterable[CmlBlock]) -> None:
    """Raise :class:`DuplicateId` on the first call id used twice.

    Interrupts reference ids but do not claim them.
    """
    seen: set[str] = set()
    for b in blocks:
        if isinstance(b, FunctionCall) and b.id is not None:
            if b.id in seen:
                raise DuplicateId(b.id)
            seen.add(b.id)


class SessionParser:
    """Stateful wrapper used by stream consumers: one per stream.

    Tracks the call ids seen so far so duplicates are caught at the moment
    the offending block closes.
    """

    def __init__(self, *, system: bool = False, check_ids: bool = True) -> None:
        self.state = OUTSIDE
        self.system = system
        self.check_ids = check_ids
        self.ids: set[str] = set()

    @property
    def critical(self) -> bool:
        return self.state.inside_block

    def mask(self) -> frozenset:
        return decode_mask(self.state)

    def feed(self, token: Token, *, system: Optional[bool] = None) -> Optional[CmlBlock]:
        sys_flag = self.system if system is None else system
        state, block, _ = feed(self.state, token, system=sys_flag)
        if self.check_ids and isinstance(block, FunctionCall) and block.id is not None:
            if block.id in self.ids:
                raise DuplicateId(block.id)
            self.ids.add(block.id)
        self.state = state
        return block
