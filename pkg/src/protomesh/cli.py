"""Command-line entry point: run scenarios, route specs, evaluate the router, merge reports.

Exit codes: 0 on completion, 2 on configuration errors, 3 on runtime failures.
Every command writes a ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__, metrics
from .harness import ScenarioConfig, run_fail_storm, run_safety_probes, run_streaming_queue
from .harness.config import ROUTER
from .router import LEXICON_VERSION, SPEC_ONLY, SPEC_PERF, PriorTable, apply_router_decisions, route, wire_name
from .routerbench import generate_synthetic_corpus, load_corpus, run_eval
from .transport import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_LEVEL_ENV = "PROTOMESH_LOG_LEVEL"

log = logging.getLogger("protomesh")

# Role descriptions used when --router is given without a spec file.
ROLE_TEXT = {
    "streaming_queue": {
        "coordinator": "Coordinator dispatches tasks from a shared queue and streams progress to clients.",
        "worker": "Worker executes batch tasks with idempotent updates so retries are safe.",
    },
    "fail_storm": {"node": "Ring member answers lookups from its shard and streams status to peers."},
    "safety": {
        "coordinator": "Coordinator exchanges case records that require end-to-end encryption.",
        "worker": "Responder handles case records that require end-to-end encryption and DID identities.",
    },
}


def _canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _sha256(data: str | bytes) -> str:
    raw = data.encode("utf-8") if isinstance(data, str) else data
    return hashlib.sha256(raw).hexdigest()


def _write(out: Path, name: str, text: str) -> str:
    path = out / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def _versions() -> dict[str, str]:
    import numpy

    return {"protomesh": __version__, "python": platform.python_version(), "numpy": numpy.__version__, "lexicon": LEXICON_VERSION}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(command: str, args: argparse.Namespace, config: dict[str, Any], outputs: dict[str, str], started: str) -> dict:
    path = getattr(args, "config", None) or getattr(args, "spec_file", None) or getattr(args, "corpus", None)
    return {
        "command": command,
        "config_path": path,
        "config_file_sha256": _sha256(Path(path).read_bytes()) if path else None,
        "config_sha256": _sha256(_canonical(config)),
        "config": config,
        "seed": config.get("seed"),
        "versions": _versions(),
        "outputs": {k: {"path": v, "sha256": _sha256(Path(v).read_bytes())} for k, v in sorted(outputs.items())},
        "started_at": started,
        "finished_at": _now(),
    }


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    except ValueError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from err


def _prior(path: str | None) -> PriorTable | None:
    if path is None:
        return None
    doc = _read_json(path)
    ranking = doc.get("ranking") if isinstance(doc, dict) else doc
    try:
        return PriorTable(tuple(ranking))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad prior ranking in {path}: {err}") from err


# --------------------------------------------------------------------------- run-scenario


def _role(cfg: ScenarioConfig, node: str, index: int) -> str:
    roles = ROLE_TEXT[cfg.scenario]
    if "node" in roles:
        return roles["node"]
    return roles["coordinator"] if index < cfg.topology.coordinators else roles["worker"]


def route_scenario(cfg: ScenarioConfig, spec: dict | None = None) -> tuple[ScenarioConfig, dict[str, Any]]:
    """Assign a protocol to every node of the topology with the router."""
    nodes = cfg.topology.node_ids()
    texts = {m["id"]: m["text"] for m in (spec or {}).get("modules", [])}
    modules = [{"id": n, "text": texts.get(n) or _role(cfg, n, i)} for i, n in enumerate(nodes)]
    decisions = route("", modules)
    assignment = {n: wire_name(d.selected_protocol) for n, d in decisions.items()}
    routed = replace(cfg, protocol=assignment[nodes[0]], assignment=assignment)
    return routed, {n: d.to_dict() for n, d in decisions.items()}


def _scenario_config(args: argparse.Namespace) -> ScenarioConfig:
    if args.config:
        cfg = ScenarioConfig.load(args.config)
        if args.scenario and args.scenario != cfg.scenario:
            raise ConfigError(f"--scenario {args.scenario} disagrees with config scenario {cfg.scenario}")
    elif args.scenario:
        cfg = ScenarioConfig.default(args.scenario)
    else:
        raise ConfigError("give --scenario or --config")
    changes: dict[str, Any] = {}
    if args.protocol:
        changes["protocol"] = args.protocol.lower()
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), **changes})
    if args.time_scale is not None:
        cfg = cfg.with_timing(time_scale=args.time_scale)
    if cfg.protocol == ROUTER and not args.router:
        raise ConfigError("protocol 'router' needs --router")
    return cfg


def cmd_run_scenario(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _scenario_config(args)
    assignments = None
    if args.router:
        cfg, assignments = route_scenario(cfg, _read_json(args.spec_file) if args.spec_file else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, str] = {}
    try:
        if cfg.scenario == "safety":
            probe, log_ = run_safety_probes(cfg)
            report = {"scenario": cfg.scenario, "protocol": cfg.protocol, **probe.to_dict()}
        else:
            runner = run_streaming_queue if cfg.scenario == "streaming_queue" else run_fail_storm
            result = runner(cfg)
            log_ = result.log
            report = metrics.run_report(
                log_,
                scenario=cfg.scenario,
                protocol=cfg.protocol,
                byte_totals=result.byte_totals,
                workers=result.details.get("workers", ()),
                window=cfg.timing.window,
                seed=cfg.seed,
            )
            outputs["latencies"] = _write(out, "latencies.csv", metrics.latency_csv(log_))
    except ConfigError:
        raise
    except Exception as err:
        log.exception("scenario run failed")
        raise RuntimeFailure(str(err)) from err
    if assignments is not None:
        report["assignments"] = {n: d["selected_protocol"] for n, d in assignments.items()}
        outputs["plan"] = _write(out, "plan.json", _canonical({"decisions": assignments}))
    outputs["eventlog"] = _write(out, "eventlog.jsonl", log_.to_jsonl())
    outputs["report"] = _write(out, "report.json", _canonical(report))
    manifest = _manifest("run-scenario", args, cfg.to_dict(), outputs, started)
    if assignments is not None:
        manifest["assignments"] = report["assignments"]
    _write(out, "manifest.json", _canonical(manifest))
    _summary(report)
    return EXIT_OK


def _summary(report: dict[str, Any]) -> None:
    keys = ("scenario", "protocol", "completed", "requests", "success_rate", "retention_mean", "ttr_median")
    print(" ".join(f"{k}={report[k]}" for k in keys if k in report))
    if "matrix_row" in report:
        print(" ".join(f"{k}={v}" for k, v in report["matrix_row"].items()))


# --------------------------------------------------------------------------- route


def cmd_route(args: argparse.Namespace) -> int:
    started = _now()
    spec = _read_json(args.spec_file)
    if not isinstance(spec, dict) or not spec.get("modules"):
        raise ConfigError("spec file needs a non-empty 'modules' list")
    prior = _prior(args.prior_file)
    if args.mode == SPEC_PERF and prior is None:
        raise ConfigError("spec_perf mode requires --prior-file")
    try:
        decisions = route(spec.get("text", ""), spec["modules"], args.mode, prior)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    plan = apply_router_decisions(decisions, spec["modules"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = [d.to_dict() for d in decisions.values()]
    infeasible = [r["module_id"] for r in records if r.get("infeasible")]
    outputs = {
        "decisions": _write(out, "decisions.json", _canonical({"mode": args.mode, "decisions": records, "infeasible": infeasible})),
        "plan": _write(out, "plan.json", _canonical(plan)),
    }
    config = {"mode": args.mode, "prior": list(prior.ranking) if prior else None, "seed": None}
    _write(out, "manifest.json", _canonical(_manifest("route", args, config, outputs, started)))
    for r in records:
        flag = " (infeasible)" if r.get("infeasible") else ""
        print(f"{r['module_id']}: {r['selected_protocol']}{flag}")
    return EXIT_OK


# --------------------------------------------------------------------------- routerbench


def cmd_routerbench(args: argparse.Namespace) -> int:
    started = _now()
    if (args.corpus is None) == (args.synthesize is None):
        raise ConfigError("give exactly one of --corpus or --synthesize")
    prior = _prior(args.prior_file)
    if args.mode == SPEC_PERF and prior is None:
        raise ConfigError("spec_perf mode requires --prior-file")
    if args.corpus:
        try:
            corpus = load_corpus(args.corpus)
        except OSError as err:
            raise ConfigError(f"cannot read corpus: {err}") from err
    else:
        corpus = generate_synthetic_corpus(args.synthesize)
    report = run_eval(corpus, args.mode, prior)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "report": _write(out, "score.json", _canonical(report.to_dict())),
        "confusion": _write(out, "confusion.csv", report.confusion_csv()),
    }
    if corpus.synthetic:
        outputs["corpus"] = _write(out, "corpus.jsonl", corpus.to_jsonl())
    config = {"mode": args.mode, "prior": list(prior.ranking) if prior else None, "seed": args.synthesize}
    _write(out, "manifest.json", _canonical(_manifest("routerbench", args, config, outputs, started)))
    print(
        f"scenario_accuracy={report.scenario_accuracy:.3f} module_accuracy={report.module_accuracy:.3f} "
        f"macro_f1={report.macro_f1:.3f} excluded={len(report.excluded_scenarios)}"
    )
    return EXIT_OK


# --------------------------------------------------------------------------- report-merge


def cmd_report_merge(args: argparse.Namespace) -> int:
    started = _now()
    reports = [_read_json(p) for p in args.reports]
    for path, r in zip(args.reports, reports):
        if not isinstance(r, dict) or "scenario" not in r or "protocol" not in r:
            raise ConfigError(f"{path} is not a run report")
    merged = metrics.merge_reports(reports, B=args.resamples, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"merged": _write(out, "merged.json", _canonical(merged))}
    config = {"reports": list(args.reports), "resamples": args.resamples, "seed": args.seed}
    _write(out, "manifest.json", _canonical(_manifest("report-merge", args, config, outputs, started)))
    for g in merged["groups"]:
        print(f"{g['scenario']}/{g['protocol']}: runs={g['runs']}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


class RuntimeFailure(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protomesh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run-scenario", help="run one scenario and write its event log and report")
    run.add_argument("--scenario", choices=("streaming_queue", "fail_storm", "safety"))
    which = run.add_mutually_exclusive_group()
    which.add_argument("--protocol", help="a2a, acp, agora or anp")
    which.add_argument("--router", action="store_true", help="let the router assign a protocol per node")
    run.add_argument("--spec-file", help="module texts keyed by node id (with --router)")
    run.add_argument("--config", help="scenario config JSON")
    run.add_argument("--seed", type=int)
    run.add_argument("--time-scale", type=float)
    run.add_argument("--out", default="out")
    run.set_defaults(func=cmd_run_scenario)

    rt = sub.add_parser("route", help="route a module spec and write decisions plus a network plan")
    rt.add_argument("--spec-file", required=True)
    rt.add_argument("--mode", choices=(SPEC_ONLY, SPEC_PERF), default=SPEC_ONLY)
    rt.add_argument("--prior-file")
    rt.add_argument("--out", default="out")
    rt.set_defaults(func=cmd_route)

    rb = sub.add_parser("routerbench", help="score the router on a corpus")
    rb.add_argument("--corpus")
    rb.add_argument("--synthesize", type=int, metavar="SEED")
    rb.add_argument("--mode", choices=(SPEC_ONLY, SPEC_PERF), default=SPEC_ONLY)
    rb.add_argument("--prior-file")
    rb.add_argument("--out", default="out")
    rb.set_defaults(func=cmd_routerbench)

    rm = sub.add_parser("report-merge", help="aggregate run reports per scenario and protocol")
    rm.add_argument("reports", nargs="+")
    rm.add_argument("--resamples", type=int, default=10_000)
    rm.add_argument("--seed", type=int, default=0)
    rm.add_argument("--out", default="out")
    rm.set_defaults(func=cmd_report_merge)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_LEVEL_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
