"""Command-line entry points.

Subcommands: ``index`` builds a retrieval index from a documentation corpus;
``serve`` hosts the tool servers (HTTP or stdio); ``solve`` runs a single
rollout; ``eval`` runs a k-sample benchmark and prints the metrics report;
``analyze`` buckets erroneous tool calls from a trace file.

Configuration precedence everywhere: command-line flag, then environment
variable (``TOOLLOOP_API_TOKEN``), then configuration file value.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .casestudies import CASE_STUDIES, CASE_STUDY_BY_NAME, scripted_backend
from .compute import ExecutionLimits, handle_compute_call
from .defaults import default_config_paths
from .evaluation import (
    EvalItem,
    analyze_tool_errors,
    compute_metrics,
    load_dataset,
    records_from_traces,
    render_error_analysis,
    render_report,
)
from .inference import API_TOKEN_ENV, HttpChatBackend, SamplingParams
from .local import build_local_registry
from .orchestrator import (
    CallSegment,
    ConfigError,
    RateLimiter,
    ResponseSegment,
    RolloutConfig,
    ThinkSegment,
    load_configs,
    read_traces,
    run_batch,
    run_rollout,
)
from .protocol import ToolResponse, wrap_response
from .retrieval import (
    HashEmbedder,
    build_index,
    handle_retrieve_call,
    load_index,
    save_index,
)
from .transport import HttpToolServer, serve_stdio


def _sampling_from_args(args: argparse.Namespace) -> SamplingParams:
    return SamplingParams(
        temperature=args.temperature,
        top_k=args.top_k,
        top_p=args.top_p,
        max_tokens=args.max_tokens,
    )


def _rollout_config(args: argparse.Namespace) -> RolloutConfig:
    return RolloutConfig(
        max_tool_rounds=args.max_tool_rounds,
        max_output_tokens=args.max_output_tokens,
        sampling=_sampling_from_args(args),
    )


def _add_sampling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--temperature", type=float, default=0.6)
    parser.add_argument("--top-k", type=int, default=20)
    parser.add_argument("--top-p", type=float, default=0.95)
    parser.add_argument("--max-tokens", type=int, default=8192, help="per-generation cap")
    parser.add_argument("--max-output-tokens", type=int, default=8192, help="per-rollout budget")
    parser.add_argument("--max-tool-rounds", type=int, default=10)


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend-url", help="chat-completion base URL")
    parser.add_argument("--model", help="model name passed to the backend")
    parser.add_argument(
        "--api-token",
        help=f"backend auth token (overrides the {API_TOKEN_ENV} environment variable)",
    )


def _add_registry_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--servers", help="servers.json path (default: shipped config)")
    parser.add_argument("--tools", help="tools.json path (default: shipped config)")
    parser.add_argument(
        "--local",
        action="store_true",
        help="dispatch tools in-process instead of through configured servers",
    )
    parser.add_argument(
        "--index",
        action="append",
        default=[],
        metavar="CORPUS=PATH",
        help="retrieval index for --local mode (repeatable)",
    )
    parser.add_argument("--exec-timeout", type=float, default=30.0)


def _build_registry(args: argparse.Namespace):
    if args.local:
        indexes = {}
        for spec in args.index:
            corpus, _, path = spec.partition("=")
            if not path:
                raise ConfigError(f"--index expects CORPUS=PATH, got {spec!r}")
            indexes[corpus] = load_index(path)
        limits = ExecutionLimits(timeout=args.exec_timeout)
        registry = build_local_registry(limits, indexes=indexes)
        entries = ()
    else:
        default_servers, default_tools = default_config_paths()
        _, entries, registry = load_configs(
            args.servers or default_servers, args.tools or default_tools
        )
    limiter = RateLimiter.from_tool_entries(entries) if entries else None
    return registry, limiter


def _build_backend(args: argparse.Namespace):
    if getattr(args, "demo", None):
        return scripted_backend()
    if not args.backend_url or not args.model:
        raise ConfigError("--backend-url and --model are required (or use --demo)")
    token = args.api_token or os.environ.get(API_TOKEN_ENV)
    return HttpChatBackend(args.backend_url, args.model, api_token=token)


def _render_segments(trace) -> str:
    parts = []
    for seg in trace.segments:
        if isinstance(seg, ThinkSegment):
            parts.append(seg.text)
        elif isinstance(seg, CallSegment):
            parts.append(f"<tool_call>{seg.raw_text}</tool_call>")
        elif isinstance(seg, ResponseSegment):
            response = ToolResponse(
                payload=seg.payload, is_error=seg.is_error, error_kind=seg.error_kind
            )
            parts.append(wrap_response(response))
    return "\n".join(parts)


# --- subcommands ---------------------------------------------------------------


def cmd_index(args: argparse.Namespace) -> int:
    embedder = HashEmbedder(dimension=args.dimension)
    index = build_index(
        args.corpus_dir,
        args.corpus,
        embedder,
        chunk_len=args.chunk_len,
        overlap=args.overlap,
    )
    save_index(index, args.out)
    print(f"indexed {len(index.chunks)} chunks from corpus {args.corpus!r} -> {args.out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    handlers = {}
    if args.tool in ("compute", "all"):
        limits = ExecutionLimits(timeout=args.exec_timeout)
        handlers["python_code_executor"] = lambda call: handle_compute_call(call, limits)
    if args.tool in ("retrieval", "all"):
        indexes = {}
        for spec in args.index:
            corpus, _, path = spec.partition("=")
            if not path:
                raise ConfigError(f"--index expects CORPUS=PATH, got {spec!r}")
            indexes[corpus] = load_index(path)
        embedder = HashEmbedder(dimension=args.dimension)
        handlers["rag_system_retrieve"] = lambda call: handle_retrieve_call(
            call, indexes, embedder
        )
    if args.stdio:
        serve_stdio(handlers, sys.stdin, sys.stdout)
        return 0
    token = args.auth_token or os.environ.get(API_TOKEN_ENV)
    server = HttpToolServer(handlers, host=args.host, port=args.port, auth_token=token)
    print(f"serving {sorted(handlers)} at {server.endpoint}", flush=True)
    try:
        server.serve()
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    if args.demo:
        case = CASE_STUDY_BY_NAME.get(args.demo)
        if case is None:
            raise ConfigError(
                f"unknown demo {args.demo!r}; choose from "
                f"{', '.join(sorted(CASE_STUDY_BY_NAME))}"
            )
        problem = case.problem
        args.local = True
    elif args.problem:
        problem = args.problem
    elif args.problem_file:
        problem = Path(args.problem_file).read_text(encoding="utf-8")
    else:
        raise ConfigError("one of --problem, --problem-file, --demo is required")
    registry, limiter = _build_registry(args)
    backend = _build_backend(args)
    trace = run_rollout(
        problem,
        _rollout_config(args),
        registry,
        backend,
        limiter=limiter,
    )
    if args.show_trace:
        print(_render_segments(trace))
        print()
    print(f"tool rounds: {trace.tool_rounds}  tokens: {trace.tokens_used}")
    print(f"answer: {trace.answer if trace.answer is not None else '(none extracted)'}")
    if args.trace_out:
        from .orchestrator import write_traces

        write_traces([trace], args.trace_out)
        print(f"trace written to {args.trace_out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.demo:
        items = [
            EvalItem(case.problem_id, case.problem, case.expected_answer)
            for case in CASE_STUDIES
        ]
        args.local = True
    else:
        if not args.dataset:
            raise ConfigError("--dataset is required (or use --demo)")
        items = load_dataset(args.dataset)
    registry, limiter = _build_registry(args)
    backend = _build_backend(args)
    traces = run_batch(
        [(item.problem_id, item.problem) for item in items],
        _rollout_config(args),
        registry,
        backend,
        samples_per_problem=args.k,
        parallelism=args.parallelism,
        limiter=limiter,
        trace_path=args.trace_out,
    )
    failed = [t for t in traces if t.failure]
    for t in failed:
        print(f"warning: rollout {t.problem_id}[{t.sample_index}] failed: {t.failure}", file=sys.stderr)
    records = records_from_traces(traces, items)
    report = compute_metrics(records, args.k)
    text = render_report(report, dataset=args.dataset or "demo")
    print(text)
    if args.report_out:
        Path(args.report_out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    traces = read_traces(args.traces)
    counts = analyze_tool_errors(traces)
    print(render_error_analysis(counts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolloop", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build a retrieval index from a corpus directory")
    p_index.add_argument("--corpus-dir", required=True)
    p_index.add_argument("--corpus", required=True, help="corpus name (e.g. sympy)")
    p_index.add_argument("--out", required=True)
    p_index.add_argument("--chunk-len", type=int, default=1200)
    p_index.add_argument("--overlap", type=int, default=200)
    p_index.add_argument("--dimension", type=int, default=256)
    p_index.set_defaults(func=cmd_index)

    p_serve = sub.add_parser("serve", help="host tool servers")
    p_serve.add_argument("--tool", choices=["compute", "retrieval", "all"], default="all")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8731)
    p_serve.add_argument("--stdio", action="store_true", help="serve over stdin/stdout instead of HTTP")
    p_serve.add_argument("--index", action="append", default=[], metavar="CORPUS=PATH")
    p_serve.add_argument("--dimension", type=int, default=256)
    p_serve.add_argument("--exec-timeout", type=float, default=30.0)
    p_serve.add_argument("--auth-token")
    p_serve.set_defaults(func=cmd_serve)

    p_solve = sub.add_parser("solve", help="run one rollout on one problem")
    p_solve.add_argument("--problem")
    p_solve.add_argument("--problem-file")
    p_solve.add_argument(
        "--demo",
        help="run a bundled scripted demo (decomposition, correction, verification, backtracking)",
    )
    p_solve.add_argument("--show-trace", action="store_true")
    p_solve.add_argument("--trace-out")
    _add_registry_flags(p_solve)
    _add_backend_flags(p_solve)
    _add_sampling_flags(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_eval = sub.add_parser("eval", help="run a k-sample evaluation over a dataset")
    p_eval.add_argument("--dataset", help="JSONL of {problem_id, problem, gold_answer}")
    p_eval.add_argument("--demo", action="store_true", help="evaluate the bundled scripted demos")
    p_eval.add_argument("--k", type=int, default=32, help="samples per problem")
    p_eval.add_argument("--parallelism", type=int, default=1)
    p_eval.add_argument("--trace-out")
    p_eval.add_argument("--report-out")
    _add_registry_flags(p_eval)
    _add_backend_flags(p_eval)
    _add_sampling_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_analyze = sub.add_parser("analyze", help="bucket erroneous tool calls from a trace file")
    p_analyze.add_argument("--traces", required=True)
    p_analyze.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
