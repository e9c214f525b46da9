"""Command-line entry point: ``python -m serverless_moe <subcommand>``.

Long-running roles print ``READY <url> <pid>`` on stdout once they accept
requests and exit 0 on SIGINT/SIGTERM.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ModelConfig, dump_config, load_config, pack_blocks

DEFAULT_BLOCK_SIZE = 3
STRATEGIES = ("baseline", "local", "shared", "private")

log = logging.getLogger("serverless_moe")


def _model(args) -> tuple[ModelConfig, object]:
    if args.config:
        cfg, blockmap = load_config(args.config)
    else:
        cfg, blockmap = ModelConfig(), None
    size = getattr(args, "block_size", None)
    if size is not None:
        blockmap = pack_blocks(cfg, size)
    elif blockmap is None:
        blockmap = pack_blocks(cfg, min(DEFAULT_BLOCK_SIZE, cfg.num_experts))
    return cfg, blockmap


def _ready(server) -> None:
    print(f"READY {server.url} {os.getpid()}", flush=True)


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass


# --- subcommands -----------------------------------------------------------

def cmd_pack(args) -> int:
    cfg, blockmap = _model(args)
    sys.stdout.write(dump_config(cfg, blockmap))
    return 0


def cmd_platform(args) -> int:
    from .faas import InProcessRuntime, Platform, SimPlatform, SubprocessRuntime, register_blocks, serve_gateway

    cfg, blockmap = _model(args)
    if args.runtime == "process":
        if not args.config:
            raise ConfigError("--runtime process needs --config so workers can load the model")
        runtime = SubprocessRuntime(args.config)
    else:
        runtime = InProcessRuntime(cfg, blockmap)
    if args.clock == "simulated":
        platform = SimPlatform(runtime, concurrency_limit=args.concurrency_limit)
    else:
        platform = Platform(runtime, concurrency_limit=args.concurrency_limit)
    platform.spec_defaults = {
        "max_replicas": args.max_replicas,
        "idle_timeout_ms": args.idle_timeout_ms,
        "cold_start_ms": args.cold_start_ms,
    }
    if args.register_blocks:
        register_blocks(platform, blockmap, args.max_replicas, args.idle_timeout_ms, args.cold_start_ms)
    server = serve_gateway(platform, args.host, args.port)
    _ready(server)
    try:
        _wait_for_signal()
    finally:
        server.shutdown()
        if hasattr(platform, "close"):
            platform.close()
        doc = json.dumps(platform.counters_document())
        if args.counters_out:
            Path(args.counters_out).write_text(doc + "\n")
        else:
            print(f"COUNTERS {doc}", flush=True)
    return 0


def cmd_expert(args) -> int:
    from .expert import ExpertService, serve_experts

    cfg, blockmap = _model(args)
    service = ExpertService.for_block(cfg, blockmap, args.layer, args.block)
    server = serve_experts(service, args.host, args.port)
    _ready(server)
    _wait_for_signal()
    server.shutdown()
    return 0


def cmd_local_server(args) -> int:
    from .expert import ExpertService, serve_experts

    cfg, blockmap = _model(args)
    server = serve_experts(ExpertService.for_model(cfg, blockmap), args.host, args.port)
    _ready(server)
    _wait_for_signal()
    server.shutdown()
    return 0


def cmd_orchestrate(args) -> int:
    from .orchestrator import MonolithicEngine, Orchestrator, OrchestratorConfig, serve

    cfg, blockmap = _model(args)
    if args.monolithic:
        app = MonolithicEngine(cfg)
    else:
        if not args.gateway:
            raise ConfigError("--gateway is required unless --monolithic")
        from .faas import HttpGateway

        ocfg = OrchestratorConfig(cfg, blockmap, args.gateway, args.timeout_ms, args.retries, args.mode, args.window_ms)
        app = Orchestrator(ocfg, HttpGateway(args.gateway))
    server = serve(app, args.host, args.port)
    _ready(server)
    _wait_for_signal()
    server.shutdown()
    return 0


def _strategy_config(args, kind: str):
    from .harness import StrategyConfig

    cfg, blockmap = _model(args)
    return StrategyConfig(
        kind=kind,
        tenants=args.tenants,
        requests=args.requests,
        cfg=cfg,
        block_size=blockmap.block_size,
        seed=args.seed,
        skew=args.skew,
        max_new=args.max_new,
        processes=not args.in_process,
        window_ms=args.window_ms,
        cold_start_ms=args.cold_start_ms,
        idle_timeout_ms=args.idle_timeout_ms,
        max_replicas=args.max_replicas,
        concurrency_limit=args.concurrency_limit,
        cadence_s=args.cadence_s,
    )


def _default_out() -> Path:
    return Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def cmd_run(args) -> int:
    from .harness import load_summaries, render, run_strategy, write_run

    out = Path(args.out) if args.out else _default_out()
    kinds = STRATEGIES if args.strategy == "all" else (args.strategy,)
    status = 0
    texts = {}
    for kind in kinds:
        sc = _strategy_config(args, kind)
        target = out / kind if len(kinds) > 1 else out
        report = run_strategy(sc, target)
        write_run(report, target)
        texts[kind] = report.texts()
        log.info("%s: %d requests, %d failed, %d oracle mismatches", kind, len(report.outcomes),
                 report.failed, len(report.mismatches))
        if report.degraded:
            status = 1
    if len({tuple(sorted(t.items())) for t in texts.values()}) > 1:
        log.error("strategies produced different outputs")
        status = 1
    print(render(load_summaries([out]), "md"))
    return status


def cmd_sweep(args) -> int:
    from .harness import load_summaries, render, sweep_block_size, write_run

    out = Path(args.out) if args.out else _default_out()
    sizes = [int(s) for s in args.sizes.split(",") if s]
    base = _strategy_config(args, args.strategy)
    reports = sweep_block_size(base, sizes, out)
    status = 0
    for size, report in zip(sizes, reports):
        write_run(report, out / f"B{size}")
        status |= int(report.degraded)
    print(render(load_summaries([out]), "md"))
    return status


def cmd_report(args) -> int:
    from .harness import load_summaries, render

    sys.stdout.write(render(load_summaries(args.inputs), args.format))
    return 0


def cmd_oracle(args) -> int:
    from .model import detokenize, drive, generate_steps, local_resolver, ParamStore

    cfg, _ = _model(args)
    prompts = list(args.prompts)
    if args.prompts_file:
        prompts += Path(args.prompts_file).read_text().splitlines()
    params = ParamStore(cfg)
    for prompt in prompts:
        ids = drive(generate_steps(prompt, args.max_new, cfg, params), local_resolver(cfg, params))
        text = detokenize(ids)
        print(f"{prompt}\t{text.hex()}\t{text.decode('utf-8', 'replace')!r}")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model/block configuration document (default: built-in toy model)")
    common.add_argument("--seed", type=int, default=0, help="workload seed (default: 0)")
    common.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")

    service = argparse.ArgumentParser(add_help=False)
    service.add_argument("--host", default="127.0.0.1", help="bind address (default: 127.0.0.1)")
    service.add_argument("--port", type=int, default=0, help="listen port, 0 = any free port (default: 0)")

    scaling = argparse.ArgumentParser(add_help=False)
    scaling.add_argument("--idle-timeout-ms", type=float, default=30_000.0, help="scale-to-zero idle timeout (default: 30000)")
    scaling.add_argument("--cold-start-ms", type=float, default=200.0, help="simulated cold-start delay (default: 200)")
    scaling.add_argument("--max-replicas", type=int, default=4, help="replica cap per function (default: 4)")
    scaling.add_argument("--concurrency-limit", type=int, default=4, help="in-flight requests per replica (default: 4)")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--tenants", type=int, default=6, help="concurrent tenants (default: 6)")
    experiment.add_argument("--requests", type=int, default=5, help="requests per tenant (default: 5)")
    experiment.add_argument("--block-size", type=int, default=None, help="experts per block (default: from config, else 3)")
    experiment.add_argument("--max-new", type=int, default=8, help="tokens generated per request (default: 8)")
    experiment.add_argument("--skew", type=float, default=1.0, help="Zipf exponent of prompt bytes (default: 1.0)")
    experiment.add_argument("--window-ms", type=float, default=10.0, help="shared-mode merge window (default: 10)")
    experiment.add_argument("--cadence-s", type=float, default=1.0, help="resource sampling cadence (default: 1.0)")
    experiment.add_argument("--in-process", action="store_true",
                            help="run every role in this process on the simulated platform (default: off)")
    experiment.add_argument("--out", help="output directory (default: runs/<timestamp>)")

    parser = argparse.ArgumentParser(prog="serverless_moe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", parents=[common], help="print the expert-block map")
    p.add_argument("--block-size", type=int, default=None, help="experts per block (default: from config, else 3)")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("platform", parents=[common, service, scaling], help="run the FaaS gateway and platform")
    p.add_argument("--clock", choices=("real", "simulated"), default="real", help="platform clock (default: real)")
    p.add_argument("--runtime", choices=("process", "inprocess"), default="process",
                   help="replica runtime (default: process)")
    p.add_argument("--register-blocks", action="store_true", help="register every block of --config at start")
    p.add_argument("--counters-out", help="write final counters JSON here on shutdown (default: stdout)")
    p.set_defaults(func=cmd_platform)

    p = sub.add_parser("expert", parents=[common, service], help="serve one expert block")
    p.add_argument("--layer", type=int, required=True, help="MoE layer index")
    p.add_argument("--block", type=int, required=True, help="block index within the layer")
    p.set_defaults(func=cmd_expert)

    p = sub.add_parser("orchestrate", parents=[common, service], help="run an orchestrator")
    p.add_argument("--gateway", help="gateway or local expert server URL")
    p.add_argument("--mode", choices=("shared", "private"), default="private", help="placement (default: private)")
    p.add_argument("--window-ms", type=float, default=10.0, help="shared-mode merge window (default: 10)")
    p.add_argument("--timeout-ms", type=float, default=30_000.0, help="per-invocation deadline (default: 30000)")
    p.add_argument("--retries", type=int, default=2, help="retries per block on timeout/upstream error (default: 2)")
    p.add_argument("--monolithic", action="store_true", help="serve a full local model instead (baseline tenant)")
    p.set_defaults(func=cmd_orchestrate)

    p = sub.add_parser("local-server", parents=[common, service], help="serve every block persistently, no scaling")
    p.set_defaults(func=cmd_local_server)

    p = sub.add_parser("run", parents=[common, scaling, experiment], help="deploy, run and tear down a strategy")
    p.add_argument("--strategy", choices=(*STRATEGIES, "all"), default="shared", help="strategy (default: shared)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common, scaling, experiment], help="run one strategy over block sizes")
    p.add_argument("--strategy", choices=STRATEGIES, default="shared", help="strategy (default: shared)")
    p.add_argument("--sizes", default="1,2,3,4,6,8", help="comma-separated block sizes (default: 1,2,3,4,6,8)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="tabulate run directories")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="run directories")
    p.add_argument("--format", choices=("md", "csv"), default="md", help="output format (default: md)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle", parents=[common], help="print monolithic reference continuations")
    p.add_argument("prompts", nargs="*", help="prompts")
    p.add_argument("--prompts-file", help="file with one prompt per line")
    p.add_argument("--max-new", type=int, default=8, help="tokens to generate (default: 8)")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .harness.report import ReportError

        if isinstance(exc, ReportError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
