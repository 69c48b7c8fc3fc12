"""Token sources: fixed scripts and an ideal LPT-following model."""

from __future__ import annotations

import collections
from typing import Iterable, Optional, Union

from asyncfc import cml
from asyncfc.taskmodel import CallNode, TaskGraph, lpt_key


def call_tokens(node: CallNode) -> list:
    """Tokens of a call block sized to roughly ``node.body_tokens``."""
    k = max(1, node.body_tokens - 4)
    text = node.body.ljust(k)  # pad short bodies; the parser strips the blanks
    cuts = [round(i * len(text) / k) for i in range(k + 1)]
    pieces = [text[a:b] for a, b in zip(cuts, cuts[1:])]
    pieces[0] = " " + pieces[0]
    pieces[-1] = pieces[-1] + " "
    return (
        [cml.CALL, cml.Token(cml.ControlTokenKind.TEXT, f" {node.id} "), cml.HEAD]
        + [cml.Token(cml.ControlTokenKind.TEXT, p) for p in pieces]
        + [cml.END]
    )


class ScriptSource:
    """Replays a fixed token script; injected tokens only extend the context."""

    restarts_on_inject = False

    def __init__(self, script: Union[str, Iterable], clock, tpot_ms: float = 5.0, ttft_ms: float = 0.0):
        tokens = cml.tokenize(script) if isinstance(script, str) else list(script)
        self._tokens = collections.deque(tokens)
        self.clock = clock
        self.tpot_ms = tpot_ms
        self.ttft_ms = ttft_ms
        self._started = False
        self.context: list = []

    def next_token(self) -> cml.Token:
        if not self._tokens:
            return cml.EOS
        if not self._started:
            self.clock.advance(self.ttft_ms)
            self._started = True
        self.clock.advance(self.tpot_ms)
        tok = self._tokens.popleft()
        self.context.append(tok)
        return tok

    def inject(self, tokens: list) -> None:
        self.context.extend(tokens)

    def restart(self, context: list) -> None:
        self.context = list(context)
        self._started = False

    def pause(self) -> None:
        pass

    def resume(self) -> None:
        pass


class LptModel:
    """What a well-trained model would do next, given what it has seen.

    It calls the ready function with the longest estimated execution, traps
    when everything left waits on results, and stops when nothing is left.
    Tasks gated behind a user interrupt become visible when it arrives.
    """

    def __init__(self, graph: TaskGraph, user_tasks: Optional[dict] = None):
        self.graph = graph
        self.user_tasks = dict(user_tasks or {})
        hidden = {i for ids in self.user_tasks.values() for i in ids}
        self.released = set(graph.nodes) - hidden
        self.called: set = set()
        self.completed: set = set()

    def observe(self, block) -> None:
        if isinstance(block, cml.FunctionCall) and block.id in self.graph.nodes:
            self.called.add(block.id)
        elif isinstance(block, cml.Interrupt):
            if block.id in self.graph.nodes:
                self.completed.add(block.id)
            elif block.id in self.user_tasks:
                self.released |= set(self.user_tasks[block.id])

    def observe_tokens(self, tokens: Iterable) -> None:
        for _, _, block in cml.iter_spans(list(tokens), system=True):
            self.observe(block)

    def ready(self) -> list:
        nodes = self.graph.nodes
        out = [i for i in self.released - self.called if nodes[i].deps <= self.completed]
        return sorted(out, key=lambda i: lpt_key(nodes[i]))

    def outstanding(self) -> bool:
        return bool((self.released & self.called) - self.completed) or bool(self.released - self.called)

    def next_block(self) -> list:
        ready = self.ready()
        if ready:
            node = self.graph.nodes[ready[0]]
            self.called.add(node.id)
            return call_tokens(node)
        if self.outstanding():
            return [cml.TRAP, cml.END]
        return [cml.EOS]


class LptModelSource:
    """Streams an :class:`LptModel`'s blocks token by token on a clock.

    With ``naive=True`` every injection restarts the session, charging
    ``ttft_ms`` again before the next token, as a stateless chat API would.
    """

    def __init__(
        self,
        graph: TaskGraph,
        clock,
        tpot_ms: Optional[float] = None,
        ttft_ms: float = 0.0,
        naive: bool = False,
        user_tasks: Optional[dict] = None,
    ):
        self.graph = graph
        self.model = LptModel(graph, user_tasks)
        self.clock = clock
        self.tpot_ms = graph.tpot_ms if tpot_ms is None else tpot_ms
        self.ttft_ms = ttft_ms
        self.restarts_on_inject = naive
        self._buffer: collections.deque = collections.deque()
        self._needs_ttft = True
        self.context: list = []
        self.restarts = 0

    def next_token(self) -> cml.Token:
        if not self._buffer:
            self._buffer.extend(self.model.next_block())
        if self._buffer[0].kind is cml.ControlTokenKind.EOS:
            self._buffer.popleft()
            return cml.EOS
        if self._needs_ttft:
            self.clock.advance(self.ttft_ms)
            self._needs_ttft = False
        self.clock.advance(self.tpot_ms)
        tok = self._buffer.popleft()
        self.context.append(tok)
        return tok

    def inject(self, tokens: list) -> None:
        self.context.extend(tokens)
        self.model.observe_tokens(tokens)
        if self.restarts_on_inject:
            self.restart(self.context)

    def restart(self, context: list) -> None:
        self.context = list(context)
        model = LptModel(self.graph, self.model.user_tasks)
        model.observe_tokens(self.context)
        self.model = model
        self._buffer.clear()
        self._needs_ttft = True
        self.restarts += 1

    def pause(self) -> None:
        pass

    def resume(self) -> None:
        pass
