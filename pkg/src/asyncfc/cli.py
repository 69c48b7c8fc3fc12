"""asyncfc command line.

Exit codes: 0 ok, 1 domain failure (bad input, failed check), 2 usage.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from asyncfc import __version__, analytics, cml, sim, traingen
from asyncfc.corpus import KINDS, load_corpus
from asyncfc.runtime import (
    TRAP_PROFILES,
    FunctionSpec,
    RuntimeConfig,
    SessionError,
    TrapCostModel,
    run_session,
    transcript_violations,
)
from asyncfc.taskmodel import GraphError, TaskGraph, graph_from_json

ENV_ENDPOINT_URL = "ASYNCFC_ENDPOINT_URL"
ENV_AUTH_TOKEN = "ASYNCFC_AUTH_TOKEN"


class UsageError(Exception):
    pass


class Failure(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class Config:
    tpot_ms: float = 5.0
    ttft_ms: float = 0.0
    seed: int = 0
    trap_profile: str = "small"
    trap_swap_ms_per_token: Optional[float] = None
    trap_recompute_quad_ms_per_token2: Optional[float] = None
    trap_recompute_lin_ms_per_token: Optional[float] = None
    endpoint_url: Optional[str] = None
    auth_header: str = "Authorization"
    auth_token: Optional[str] = None
    model: str = "asyncfc-stub"
    out: Optional[str] = None
    csv: Optional[str] = None

    def trap_model(self) -> TrapCostModel:
        base = TRAP_PROFILES.get(self.trap_profile)
        if base is None:
            raise UsageError(f"unknown trap profile {self.trap_profile!r}; expected one of {sorted(TRAP_PROFILES)}")
        return TrapCostModel(
            self.trap_swap_ms_per_token or base.swap_ms_per_token,
            self.trap_recompute_quad_ms_per_token2 or base.recompute_quad_ms_per_token2,
            self.trap_recompute_lin_ms_per_token or base.recompute_lin_ms_per_token,
        )

    def resolved(self) -> dict:
        """Every setting with defaults applied; the auth token is never echoed."""
        doc = asdict(self)
        doc["auth_token"] = "<set>" if self.auth_token else None
        model = self.trap_model()
        doc["trap_swap_ms_per_token"] = model.swap_ms_per_token
        doc["trap_recompute_quad_ms_per_token2"] = model.recompute_quad_ms_per_token2
        doc["trap_recompute_lin_ms_per_token"] = model.recompute_lin_ms_per_token
        return doc


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none", "null")):
        return None
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if "float" in kind:
            return float(raw)
        if "int" in kind:
            return int(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot read {raw!r} as a number") from None
    return str(raw)


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. A JSON report's ``config``
    section is accepted too, so a run can be repeated from its own output."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"{path}: {err.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise UsageError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
        doc = doc.get("config", doc)
        items = {k: v for k, v in doc.items() if k != "auth_token"}
    else:
        items = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            items[key.replace("-", "_")] = value
    out = {}
    for key, value in items.items():
        if key not in _TYPES:
            raise UsageError(f"{path}: unknown config key {key!r}")
        out[key] = _coerce(key, value) if isinstance(value, str) else value
    return out


def resolve_config(args, environ=None) -> Config:
    """Defaults, then the config file, then the environment, then flags."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    if environ.get(ENV_ENDPOINT_URL):
        values["endpoint_url"] = environ[ENV_ENDPOINT_URL]
    if environ.get(ENV_AUTH_TOKEN):
        values["auth_token"] = environ[ENV_AUTH_TOKEN]
    for key in _TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = Config(**values)
    if cfg.tpot_ms is not None and cfg.tpot_ms <= 0:
        raise UsageError("tpot_ms must be positive")
    if cfg.ttft_ms < 0:
        raise UsageError("ttft_ms must be non-negative")
    cfg.trap_model()
    return cfg


def make_report(command: str, cfg: Config, result) -> dict:
    return {
        "header": {
            "tool": f"asyncfc {__version__}",
            "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        },
        "command": command,
        "config": cfg.resolved(),
        "result": result,
    }


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_output(text: str, path: Optional[str]) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        Path(path).write_text(text)
    except OSError as err:
        raise Failure(f"{path}: {err.strerror}") from None


# ---------------------------------------------------------------------------
# Inputs


def read_graph(path) -> TaskGraph:
    """Load a graph file; malformed JSON is reported with its line and column."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise Failure(f"{path}: {err.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise Failure(f"{path}:{err.lineno}:{err.colno}: malformed JSON: {err.msg}") from None
    try:
        return graph_from_json(doc, graph_id=Path(path).stem)
    except (GraphError, KeyError, TypeError, ValueError) as err:
        raise Failure(f"{path}: invalid graph: {err}") from None


def read_graph_dir(path) -> list:
    root = Path(path)
    if not root.is_dir():
        raise Failure(f"{path}: not a directory")
    return [read_graph(p) for p in sorted(root.glob("*.json"))]


def bundled(kind: str, name: str) -> Path:
    return Path(str(resources.files("asyncfc") / "data" / kind / name))


def select_policies(args) -> list:
    names = list(args.policy or [])
    if args.policies:
        if args.policies == "all":
            names += [p.value for p in sim.ALL_POLICIES]
        else:
            names += [x.strip() for x in args.policies.split(",") if x.strip()]
    names = names or ["async-lpt"]
    out = []
    for n in names:
        try:
            p = sim.Policy(n)
        except ValueError:
            raise UsageError(f"unknown policy {n!r}; expected one of {[p.value for p in sim.ALL_POLICIES]}") from None
        if p not in out:
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# parse


def cmd_parse(args) -> int:
    text = Path(args.file).read_text() if args.file not in (None, "-") else sys.stdin.read()
    parser = cml.SessionParser(system=True)
    lines = []
    try:
        for tok in cml.tokenize(text):
            block = parser.feed(tok)
            if block is not None:
                lines.append(json.dumps(cml.block_to_json(block), sort_keys=True))
        if parser.critical:
            raise cml.CmlError("input ended inside a block")
    except cml.CmlError as err:
        sys.stdout.write("".join(line + "\n" for line in lines))
        raise Failure(f"parse error: {err}") from None
    sys.stdout.write("".join(line + "\n" for line in lines))
    return 0


# ---------------------------------------------------------------------------
# simulate


def _check_runs(report: sim.SimReport) -> list:
    problems = []
    for p, run in report.runs.items():
        if p.is_async and run.context:
            problems += [f"{report.graph_id}/{p.value}: {msg}" for msg in transcript_violations(run.context)]
    return problems


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    policies = select_policies(args)
    if bool(args.graph) + bool(args.sweep) + bool(args.corpus) != 1:
        raise UsageError("give exactly one of --graph, --sweep, or --corpus")
    if args.graph:
        graph = read_graph(args.graph)
        config = sim.SimConfig(tpot_ms=cfg.tpot_ms, ttft_ms=cfg.ttft_ms, seed=cfg.seed)
        run_policies = [sim.Policy.SYNC] + [p for p in policies if p is not sim.Policy.SYNC]
        report = sim.simulate(graph, config, policies=run_policies)
        problems = _check_runs(report)
        result = report.to_json(events=args.events)
        result["invariant_violations"] = problems
        write_output(dumps(make_report("simulate", cfg, result)), cfg.out)
        if cfg.csv:
            rows = sim.SweepResult()
            speed = report.speedup_vs_sync()
            for p in policies:
                run = report.runs[p]
                rows.rows.append(
                    {
                        "graph_id": graph.graph_id,
                        "policy": p.value,
                        "seed": cfg.seed,
                        "makespan_ms": run.makespan_ms,
                        "tokens_total": run.tokens_total,
                        "speedup_vs_sync": round(speed[p.value], 6),
                    }
                )
            write_output(rows.to_csv(), cfg.csv)
        if problems:
            print(f"error: {len(problems)} invariant violations, first: {problems[0]}", file=sys.stderr)
            return 1
        return 0

    corpus = read_graph_dir(args.sweep) if args.sweep else load_corpus(None if args.corpus == "all" else args.corpus)
    configs = [
        sim.SimConfig(tpot_ms=cfg.tpot_ms, ttft_ms=cfg.ttft_ms, seed=cfg.seed + k) for k in range(args.runs)
    ]
    exec_range = tuple(args.exec_range) if args.exec_range else None
    result = sim.sweep(corpus, configs, policies, exec_range=exec_range)
    doc = result.to_json()
    doc["mean_speedup_vs_sync"] = {p.value: result.mean_speedup(p) for p in policies} if result.rows else {}
    doc["runs_per_graph"] = args.runs
    doc["exec_range_ms"] = list(exec_range) if exec_range else None
    if cfg.out:
        write_output(dumps(make_report("simulate", cfg, doc)), cfg.out)
    if cfg.csv or not cfg.out:
        write_output(result.to_csv(), cfg.csv)
    if result.failures:
        print(f"error: {len(result.failures)} runs failed, first: {result.failures[0]}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# verify-theorems

THEOREMS = {
    "6.1": "ordering",
    "6.2": "speedup",
    "6.3": "optimality",
}
_ALIASES = {**{k: k for k in THEOREMS}, **{v: k for k, v in THEOREMS.items()}}


def _items(rng, n):
    return [(round(g, 2), round(e, 2)) for g, e in rng.uniform(1.0, 1000.0, size=(n, 2)).tolist()]


def verify_ordering(trials: int, n: Optional[int], seed: int) -> dict:
    """Closed forms and simulation both satisfy async <= sync-parallel < sync."""
    rng = np.random.default_rng(seed)
    worst = None
    failing = None
    max_sim_gap = 0.0
    for _ in range(trials):
        k = n if n is not None else int(rng.integers(2, 51))
        items = _items(rng, k)
        rep = analytics.check_theorem_61(items)
        t = rep.triple
        g = sim.independent_graph(items)
        runs = sim.simulate(g, sim.SimConfig(record=False), policies=["sync", "sync-parallel", "async-lpt"]).makespan_ms
        gap = max(
            abs(runs["sync"] - t.l_sync),
            abs(runs["sync-parallel"] - t.l_sync_parallel),
            abs(runs["async-lpt"] - t.l_async),
        )
        max_sim_gap = max(max_sim_gap, gap)
        sim_holds = runs["async-lpt"] <= runs["sync-parallel"] < runs["sync"]
        margin = (t.l_sync_parallel - t.l_async) / t.l_sync_parallel
        if worst is None or margin < worst["margin"]:
            worst = {"margin": margin, "items": items, "latencies": asdict(t), "simulated": runs}
        if failing is None and not (rep.holds and sim_holds and gap <= 1.0 / sim.TICKS_PER_MS + 1e-9):
            failing = {"items": items, "latencies": asdict(t), "simulated": runs}
    return {
        "theorem": "6.1",
        "name": "ordering",
        "trials": trials,
        "holds": failing is None,
        "worst_case": worst,
        "rel_error": None,
        "max_sim_gap_ms": round(max_sim_gap, 6),
        "failing_instance": failing,
    }


def verify_speedup(trials: int, n: Optional[int], seed: int, tolerance: float = 0.05) -> dict:
    """Measured sync/async ratio against ``1 + E/G`` at several E/G ratios."""
    n = n or 10_000
    points = []
    for k, ratio in enumerate((0.1, 0.5, 1.0)):
        rep = analytics.check_theorem_62(n, 110.0, 20.0, 110.0 / ratio, trials=trials, seed=seed + k)
        doc = rep.to_json()
        doc["e_over_g"] = ratio
        points.append(doc)
    worst = max(points, key=lambda d: d["rel_error"])
    holds = worst["rel_error"] <= tolerance
    return {
        "theorem": "6.2",
        "name": "speedup",
        "trials": trials,
        "holds": holds,
        "worst_case": worst,
        "rel_error": worst["rel_error"],
        "tolerance": tolerance,
        "below_asymptotic": n < analytics.ASYMPTOTIC_MIN_N,
        "points": points,
        "failing_instance": None if holds else {"n": n, "e_mean": 110.0, "e_sigma": 20.0,
                                                 "g_mean": worst["g_mean"], "trials": trials, "seed": seed},
    }


def verify_optimality(trials: int, n: Optional[int], seed: int) -> dict:
    """No generation order beats LPT (exhaustive search over all orders)."""
    rng = np.random.default_rng(seed)
    worst = None
    failing = None
    for _ in range(trials):
        k = n if n is not None else int(rng.integers(2, 8))
        items = _items(rng, k)
        rep = analytics.check_theorem_63(items)
        rel = (rep.lpt_latency - rep.best_latency) / rep.best_latency
        if worst is None or rel > worst["rel_error"]:
            worst = {"rel_error": rel, "items": items, "lpt_ms": rep.lpt_latency, "best_ms": rep.best_latency,
                     "best_order": rep.witness_order}
        if failing is None and not rep.holds:
            failing = {"items": items, "lpt_ms": rep.lpt_latency, "best_ms": rep.best_latency,
                       "best_order": rep.witness_order}
    return {
        "theorem": "6.3",
        "name": "optimality",
        "trials": trials,
        "holds": failing is None,
        "worst_case": worst,
        "rel_error": worst["rel_error"] if worst else None,
        "exhaustive": True,
        "failing_instance": failing,
    }


DEFAULT_TRIALS = {"6.1": 1000, "6.2": 20, "6.3": 200}


def replay_instance(path) -> dict:
    """Re-check one serialized instance: ``{"theorem": ..., "items": [[G, E], ...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise Failure(f"{path}: {err}") from None
    doc = doc.get("failing_instance") or doc
    items = [tuple(x) for x in doc["items"]]
    theorem = _ALIASES.get(str(doc.get("theorem", "6.3")), "6.3")
    if theorem == "6.1":
        rep = analytics.check_theorem_61(items)
        return {"theorem": "6.1", "holds": rep.holds, "latencies": asdict(rep.triple), "items": items}
    rep = analytics.check_theorem_63(items)
    return {"theorem": "6.3", "holds": rep.holds, "lpt_ms": rep.lpt_latency, "best_ms": rep.best_latency,
            "best_order": rep.witness_order, "items": items}


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    if args.replay:
        result = replay_instance(args.replay)
        write_output(dumps(make_report("verify-theorems", cfg, result)), cfg.out)
        return 0 if result["holds"] else 1
    which = ["6.1", "6.2", "6.3"] if args.theorem in (None, "all") else [_ALIASES[args.theorem]]
    sections = []
    for key in which:
        trials = args.trials or DEFAULT_TRIALS[key]
        if key == "6.1":
            sections.append(verify_ordering(trials, args.n, cfg.seed))
        elif key == "6.2":
            try:
                sections.append(verify_speedup(trials, args.n, cfg.seed))
            except analytics.DegenerateConfig as err:
                raise Failure(str(err)) from None
        else:
            if args.n is not None and args.n > 8:
                raise UsageError("exhaustive optimality search is limited to n <= 8")
            sections.append(verify_optimality(trials, args.n, cfg.seed))
    result = {"holds": all(s["holds"] for s in sections), "sections": sections}
    write_output(dumps(make_report("verify-theorems", cfg, result)), cfg.out)
    for s in sections:
        if not s["holds"]:
            print(f"error: {s['theorem']} ({s['name']}) failed; instance: "
                  f"{json.dumps(s['failing_instance'], sort_keys=True)}", file=sys.stderr)
    return 0 if result["holds"] else 1


# ---------------------------------------------------------------------------
# gen-train


def cmd_gen_train(args) -> int:
    cfg = resolve_config(args)
    corpus = read_graph_dir(args.corpus_dir) if args.corpus_dir else load_corpus(
        None if args.corpus == "all" else args.corpus)
    if not cfg.out:
        raise UsageError("gen-train needs --out")
    try:
        stats = traingen.emit_dataset(corpus, args.count, cfg.out, seed=cfg.seed,
                                      user_interrupts=args.user_interrupts)
    except traingen.TraingenError as err:
        raise Failure(str(err)) from None
    doc = make_report("gen-train", cfg, {"dataset": cfg.out, "stats": stats.to_json(),
                                         "user_interrupts": args.user_interrupts})
    sys.stdout.write(dumps(doc))
    return 0


# ---------------------------------------------------------------------------
# run


def load_scenario(arg: str) -> dict:
    path = Path(arg)
    if not path.exists():
        path = bundled("scenarios", arg + ".json")
    try:
        doc = json.loads(path.read_text())
    except OSError:
        raise Failure(f"{arg}: no such scenario file or bundled scenario") from None
    except json.JSONDecodeError as err:
        raise Failure(f"{path}:{err.lineno}:{err.colno}: malformed JSON: {err.msg}") from None
    for key in ("script", "functions"):
        if key not in doc:
            raise Failure(f"{path}: scenario lacks {key!r}")
    return doc


def _emit_transcript(transcript, cfg: Config, mode: str) -> None:
    header = {"t_ms": 0.0, "kind": "header", "tool": f"asyncfc {__version__}", "mode": mode,
              "config": cfg.resolved()}
    write_output(json.dumps(header, sort_keys=True) + "\n" + transcript.to_jsonl(), cfg.out)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    runtime = RuntimeConfig(trap_model=cfg.trap_model(), handle_traps=args.mode == "scripted")
    if args.mode == "scripted":
        if bool(args.scenario) == bool(args.graph):
            raise UsageError("scripted mode needs exactly one of --scenario or --graph")
        if args.scenario:
            sc = load_scenario(args.scenario)
            registry = {name: FunctionSpec(name, exec_ms=float(ms)) for name, ms in sc["functions"].items()}
            tpot = args.tpot_ms if args.tpot_ms is not None else sc.get("tpot_ms", cfg.tpot_ms)
            ttft = args.ttft_ms if args.ttft_ms is not None else sc.get("ttft_ms", cfg.ttft_ms)
            try:
                transcript = run_session(sc["script"], tpot_ms=tpot, ttft_ms=ttft, registry=registry, config=runtime)
            except (SessionError, cml.CmlError) as err:
                raise Failure(f"session failed: {err}") from None
        else:
            graph = read_graph(args.graph)
            try:
                transcript = run_session(graph, tpot_ms=cfg.tpot_ms, ttft_ms=cfg.ttft_ms, config=runtime)
            except SessionError as err:
                raise Failure(f"session failed: {err}") from None
        _emit_transcript(transcript, cfg, args.mode)
        return 0

    from asyncfc.runtime.endpoint import EndpointConfig, EndpointError, run_endpoint_session

    if not args.graph:
        raise UsageError("naive-endpoint mode needs --graph (the functions it may call)")
    if not cfg.endpoint_url:
        raise UsageError(f"no endpoint URL: pass --endpoint-url, set {ENV_ENDPOINT_URL}, or add endpoint_url to the config")
    graph = read_graph(args.graph)
    endpoint = EndpointConfig(cfg.endpoint_url, model=cfg.model, auth_header=cfg.auth_header,
                              auth_token=cfg.auth_token)
    try:
        transcript = run_endpoint_session(graph, endpoint, runtime=runtime)
    except EndpointError as err:
        msg = str(err)
        if cfg.auth_token:
            msg = msg.replace(cfg.auth_token, "***")
        raise Failure(msg) from None
    except SessionError as err:
        raise Failure(f"session failed: {err}") from None
    _emit_transcript(transcript, cfg, args.mode)
    return 0


# ---------------------------------------------------------------------------
# stub-server


def cmd_stub_server(args) -> int:
    from asyncfc.runtime.endpoint import StubServer

    cfg = resolve_config(args)
    graph = read_graph(args.graph)
    server = StubServer(graph, ttft_ms=cfg.ttft_ms, tpot_ms=cfg.tpot_ms, auth_token=cfg.auth_token,
                        host=args.host, port=args.port)
    print(server.url, flush=True)
    try:
        server._server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (or a previous JSON report)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path (default: stdout)")


def _timing(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tpot", dest="tpot_ms", type=float, help="ms per output token")
    p.add_argument("--ttft", dest="ttft_ms", type=float, help="ms to first token, per session start")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asyncfc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"asyncfc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a CML stream into JSON lines")
    p.add_argument("file", nargs="?", help="input file (default: stdin)")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("simulate", help="simulate one graph or sweep a directory")
    _common(p)
    _timing(p)
    p.add_argument("--graph")
    p.add_argument("--sweep", metavar="DIR")
    p.add_argument("--corpus", choices=("all",) + KINDS, help="sweep the bundled corpus")
    p.add_argument("--policy", action="append", help="repeatable")
    p.add_argument("--policies", help="'all' or a comma list")
    p.add_argument("--runs", type=int, default=1, help="seeded runs per graph in a sweep")
    p.add_argument("--exec-range", type=float, nargs=2, metavar=("LOW", "HIGH"),
                   help="redraw execution times uniformly per run")
    p.add_argument("--csv", help="also write the CSV table here ('-' for stdout)")
    p.add_argument("--events", action="store_true", help="include event logs in the JSON report")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-theorems", help="check the scheduling results numerically")
    _common(p)
    p.add_argument("--theorem", choices=sorted(_ALIASES) + ["all"])
    p.add_argument("--n", type=int, help="set size (default: random per trial)")
    p.add_argument("--trials", type=int)
    p.add_argument("--replay", metavar="FILE", help="re-check one serialized instance")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-train", help="write fine-tuning traces as JSON lines")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--corpus", choices=("all",) + KINDS, default="all")
    p.add_argument("--corpus-dir")
    p.add_argument("--user-interrupts", action="store_true", help="tasks arrive as user_<k> interrupts")
    p.set_defaults(func=cmd_gen_train)

    p = sub.add_parser("run", help="run a session and write its transcript as JSON lines")
    _common(p)
    _timing(p)
    p.add_argument("--mode", choices=("scripted", "naive-endpoint"), default="scripted")
    p.add_argument("--scenario", help="scenario file or bundled name (e.g. florist)")
    p.add_argument("--graph")
    p.add_argument("--endpoint-url", dest="endpoint_url")
    p.add_argument("--model")
    p.add_argument("--trap-profile", dest="trap_profile", choices=sorted(TRAP_PROFILES))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stub-server", help="serve an LPT model over the streaming wire format")
    _common(p)
    _timing(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_stub_server)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-train" and args.count < 0:
        parser.error("--count must be >= 0")
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"asyncfc: error: {err}", file=sys.stderr)
        return 2
    except Failure as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
