"""Streaming chat-completion endpoint: a token source and a local stub server.

Wire format. The client POSTs::

    {"model": ..., "stream": true,
     "messages": [{"role": "user", "content": prompt},
                  {"role": "assistant", "content": <CML context so far>}]}

and reads newline-delimited ``data: {...}`` events whose
``choices[0].delta.content`` carries the next token text, ending with
``data: [DONE]``. The API is stateless, so every injection restarts the
stream with the whole context (the naive mode).
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from asyncfc import cml
from asyncfc.runtime import graph_registry
from asyncfc.runtime.core import (
    InterruptQueue,
    RuntimeConfig,
    Session,
    SessionTranscript,
    ThreadExecutor,
    WallClock,
)
from asyncfc.runtime.sources import LptModel
from asyncfc.taskmodel import TaskGraph


class EndpointError(RuntimeError):
    pass


class AuthError(EndpointError):
    pass


@dataclass
class EndpointConfig:
    url: str
    model: str = "asyncfc-stub"
    auth_header: str = "Authorization"
    auth_token: Optional[str] = None
    timeout_s: float = 30.0
    attempts: int = 3
    backoff_ms: float = 100.0
    backoff_cap_ms: float = 2000.0

    def headers(self) -> dict:
        out = {"Content-Type": "application/json", "Accept": "text/event-stream"}
        if self.auth_token:
            value = self.auth_token
            if self.auth_header.lower() == "authorization" and not value.lower().startswith("bearer "):
                value = "Bearer " + value
            out[self.auth_header] = value
        return out

    def to_json(self) -> dict:
        """Settings safe to echo: the token is reported only as present or not."""
        return {
            "url": self.url,
            "model": self.model,
            "auth_header": self.auth_header,
            "auth_token": "<set>" if self.auth_token else None,
            "timeout_s": self.timeout_s,
            "attempts": self.attempts,
            "backoff_ms": self.backoff_ms,
            "backoff_cap_ms": self.backoff_cap_ms,
        }


def backoff_delays(attempts: int, base_ms: float, cap_ms: float) -> list:
    """Sleep before each retry: base, 2*base, 4*base, ... capped."""
    return [min(cap_ms, base_ms * 2**k) for k in range(max(0, attempts - 1))]


def _sanitize(text: str, secret: Optional[str]) -> str:
    if secret:
        text = text.replace(secret, "***")
    return text


def parse_event_line(line: str) -> Optional[str]:
    """Delta text of one stream line, ``None`` for blank or comment lines.

    Raises ``EOFError`` at the ``[DONE]`` marker.
    """
    line = line.strip()
    if not line or line.startswith(":"):
        return None
    if line.startswith("data:"):
        line = line[5:].strip()
    if line == "[DONE]":
        raise EOFError
    doc = json.loads(line)
    if "error" in doc:
        raise EndpointError(str(doc["error"]))
    choices = doc.get("choices") or [{}]
    return (choices[0].get("delta") or {}).get("content") or ""


class EndpointSource:
    """Token source backed by a streaming endpoint on the wall clock."""

    restarts_on_inject = True

    def __init__(self, config: EndpointConfig, prompt: str, clock, sleep=time.sleep):
        self.config = config
        self.prompt = prompt
        self.clock = clock
        self._sleep = sleep
        self.context: list = []
        self._resp = None
        self._lexer = cml.StreamLexer()
        self._pending: list = []
        self._done = False
        self.requests = 0
        self.restarts = 0

    # -- transport -----------------------------------------------------

    def _body(self) -> bytes:
        messages = [{"role": "user", "content": self.prompt}]
        if self.context:
            messages.append({"role": "assistant", "content": cml.render(self.context)})
        return json.dumps({"model": self.config.model, "stream": True, "messages": messages}).encode()

    def _open(self):
        cfg = self.config
        delays = backoff_delays(cfg.attempts, cfg.backoff_ms, cfg.backoff_cap_ms)
        last = None
        for attempt in range(cfg.attempts):
            req = urllib.request.Request(cfg.url, data=self._body(), headers=cfg.headers(), method="POST")
            try:
                self.requests += 1
                return urllib.request.urlopen(req, timeout=cfg.timeout_s)
            except urllib.error.HTTPError as err:
                if err.code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials (HTTP {err.code})") from None
                last = f"HTTP {err.code}"
                if err.code < 500 and err.code != 429:
                    break
            except (urllib.error.URLError, OSError) as err:
                reason = getattr(err, "reason", err)
                last = _sanitize(str(reason), cfg.auth_token)
            if attempt < len(delays):
                self._sleep(delays[attempt] / 1000.0)
        raise EndpointError(f"{cfg.url}: giving up after {cfg.attempts} attempts ({last})")

    def _close(self) -> None:
        if self._resp is not None:
            try:
                self._resp.close()
            except OSError:
                pass
        self._resp = None

    def _fill(self) -> None:
        while not self._pending and not self._done:
            if self._resp is None:
                self._resp = self._open()
                self._lexer = cml.StreamLexer()
            raw = self._resp.readline()
            if not raw:
                self._done = True
                self._pending.extend(self._lexer.flush())
                break
            try:
                delta = parse_event_line(raw.decode("utf-8"))
            except EOFError:
                self._done = True
                self._pending.extend(self._lexer.flush())
                break
            except json.JSONDecodeError as err:
                raise EndpointError(f"malformed stream event: {err}") from None
            if delta:
                self._pending.extend(self._lexer.push(delta))

    # -- TokenSource ---------------------------------------------------

    def next_token(self) -> cml.Token:
        self._fill()
        if not self._pending:
            self._close()
            return cml.EOS
        tok = self._pending.pop(0)
        self.context.append(tok)
        return tok

    def inject(self, tokens: list) -> None:
        self.context.extend(tokens)
        self.restart(self.context)

    def restart(self, context: list) -> None:
        self._close()
        self.context = list(context)
        self._pending = []
        self._done = False
        self.restarts += 1

    def pause(self) -> None:
        pass

    def resume(self) -> None:
        pass

    def close(self) -> None:
        self._close()


def run_endpoint_session(
    graph: TaskGraph,
    config: EndpointConfig,
    prompt: Optional[str] = None,
    *,
    max_workers: Optional[int] = None,
    runtime: Optional[RuntimeConfig] = None,
) -> SessionTranscript:
    """Drive ``graph``'s functions from a live endpoint in wall time.

    Functions are stubs that sleep for their estimate on worker threads.
    """
    clock = WallClock()
    queue = InterruptQueue()
    executor = ThreadExecutor(graph_registry(graph, wall=True), clock, queue, max_workers=max_workers)
    source = EndpointSource(config, prompt or graph.description or graph.graph_id, clock)
    session = Session(source, executor, clock, runtime or RuntimeConfig(handle_traps=False), queue)
    try:
        return session.run()
    finally:
        source.close()
        executor.shutdown()


# ---------------------------------------------------------------------------
# Stub server


def continuation(graph: TaskGraph, context_text: str) -> list:
    """What the ideal model generates next: blocks up to a trap or the end."""
    model = LptModel(graph)
    model.observe_tokens(cml.tokenize(context_text))
    out: list = []
    while True:
        block = model.next_block()
        if block[0].kind is cml.ControlTokenKind.EOS:
            return out
        out.extend(block)
        if block[0].kind is cml.ControlTokenKind.TRAP:
            return out


class StubServer:
    """Local endpoint that streams an LPT model's continuation of the context.

    ``ttft_ms`` is slept before the first token of every request and
    ``tpot_ms`` before each later one. A configured ``auth_token`` must be
    presented as ``Authorization: Bearer <token>``.
    """

    def __init__(
        self,
        graph: TaskGraph,
        *,
        ttft_ms: float = 0.0,
        tpot_ms: Optional[float] = None,
        auth_token: Optional[str] = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.graph = graph
        self.ttft_ms = ttft_ms
        self.tpot_ms = graph.tpot_ms if tpot_ms is None else tpot_ms
        self.auth_token = auth_token
        self.requests = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.0"

            def log_message(self, *args):  # keep test output quiet
                pass

            def _json(self, code, doc):
                body = json.dumps(doc).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                stub.requests += 1
                if stub.auth_token is not None:
                    if self.headers.get("Authorization", "") != f"Bearer {stub.auth_token}":
                        return self._json(401, {"error": "unauthorized"})
                try:
                    n = int(self.headers.get("Content-Length", "0"))
                    doc = json.loads(self.rfile.read(n) or b"{}")
                    context = "".join(
                        m.get("content", "") for m in doc.get("messages", []) if m.get("role") == "assistant"
                    )
                    tokens = continuation(stub.graph, context)
                except (ValueError, cml.CmlError) as err:
                    return self._json(400, {"error": f"bad request: {err}"})
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.end_headers()
                try:
                    time.sleep(stub.ttft_ms / 1000.0)
                    for k, tok in enumerate(tokens):
                        if k:
                            time.sleep(stub.tpot_ms / 1000.0)
                        chunk = {"choices": [{"delta": {"content": tok.surface()}}]}
                        self.wfile.write(b"data: " + json.dumps(chunk).encode() + b"\n\n")
                        self.wfile.flush()
                    self.wfile.write(b"data: [DONE]\n\n")
                    self.wfile.flush()
                except (BrokenPipeError, ConnectionResetError):
                    pass  # the client restarted

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
