"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Every check runs at its stated tolerance and wall-clock budget; a criterion
that misses its budget fails even if its numbers are right.
"""

from __future__ import annotations

import json
import random
import statistics
import time
from collections import Counter
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from helpers import canonical_envelope, synthetic_log
from protomesh.bridge import BridgeSpec, bridge_translate
from protomesh.envelope import IdFactory, new_envelope
from protomesh.harness import (
    ScenarioConfig,
    observed_outcomes,
    reachability_oracle,
    run_fail_storm,
    run_safety_probes,
    run_streaming_queue,
)
from protomesh.harness import eventlog as ev
from protomesh.metrics import (
    bootstrap_ci,
    e2e_latencies,
    load_balance_variance,
    recovery_report,
    run_duration_minutes,
    summarize_latencies,
)
from protomesh.protocols import default_codecs
from protomesh.router import PriorTable, is_protocol_compatible, route_spec_only
from protomesh.routerbench import ambiguity_corpus, generate_synthetic_corpus, run_eval, score
from test_codecs import ALIGNMENT, GOLDEN, at
from test_codecs import fields as envelope_fields
from test_routerbench import fixture_corpus, fixture_predictions

PROTOCOLS = ("a2a", "acp", "anp", "agora")
CODECS = default_codecs()
PRESERVED = ("src", "dst", "content", "trace_id", "idempotency_key")


def gate(number: int, title: str, budget: float, check) -> None:
    """Run ``check`` (returns a detail string, raises AssertionError on failure) and report."""
    start = time.perf_counter()
    try:
        detail = check()
        elapsed = time.perf_counter() - start
        assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget:g}s"
    except AssertionError as err:
        elapsed = time.perf_counter() - start
        line = f"[{number:>2}] FAIL {title} ({elapsed:.2f}s): {err}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"[{number:>2}] PASS {title} ({elapsed:.2f}s): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def random_document(rng: random.Random, depth: int = 0):
    roll = rng.random()
    if depth < 2 and roll < 0.3:
        return {f"k{rng.randrange(100)}": random_document(rng, depth + 1) for _ in range(rng.randint(0, 4))}
    if depth < 2 and roll < 0.45:
        return [random_document(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return rng.choice(
        [None, True, rng.randint(-10**9, 10**9), rng.uniform(-1e6, 1e6), "".join(rng.choice("abcé€ 😀\"\\\n") for _ in range(rng.randint(0, 12)))]
    )


def seeded_envelopes(n: int, seed: int):
    rng = random.Random(f"acceptance-envelopes:{seed}")
    ids = IdFactory(seed)
    for i in range(n):
        content = {f"f{j}": random_document(rng) for j in range(rng.randint(0, 5))}
        ts = rng.uniform(0, 2e9)
        yield new_envelope(
            f"agent-{rng.randrange(50)}", f"agent-{rng.randrange(50)}", content,
            intent=rng.choice(["qa/search", "process", "consult"]), ids=ids, clock=lambda ts=ts: ts,
            session_id=f"s-{i}", tags=rng.sample(["GAIA", "docqa", "batch", "x"], rng.randint(0, 3)),
        )


def preserved(e) -> dict:
    f = envelope_fields(e)
    return {k: f[k] for k in PRESERVED}


# --------------------------------------------------------------------------- 1-3: codecs and bridges


def test_criterion_01_codec_round_trip():
    def check():
        envs = list(seeded_envelopes(1000, 1))
        for p in PROTOCOLS:
            codec = CODECS.get(p)
            for e in envs:
                assert preserved(codec.decode(codec.encode(e))) == preserved(e), (p, e.id)
        return f"4 protocols x {len(envs)} envelopes preserve {', '.join(PRESERVED)}"

    gate(1, "codec round trip", 5.0, check)


def test_criterion_02_bridge_composition():
    def check():
        envs = [e.with_context(stream=False) for e in seeded_envelopes(200, 2)]
        pairs = list(permutations(PROTOCOLS, 2))
        for src, dst in pairs:
            spec = BridgeSpec("m1", "m2", src, dst, True, allow_insecure=True)
            for e in envs:
                out = CODECS.get(dst).decode(bridge_translate(spec, CODECS.get(src).encode(e), CODECS))
                assert preserved(out) == preserved(e), (src, dst, e.id)
        for p in PROTOCOLS:
            spec = BridgeSpec("m1", "m2", p, p)
            for e in envs:
                assert CODECS.get(p).decode(bridge_translate(spec, CODECS.get(p).encode(e), CODECS)) == CODECS.get(p).decode(CODECS.get(p).encode(e))
        return f"{len(pairs)} ordered pairs x {len(envs)} envelopes; same-protocol bridges identical"

    gate(2, "bridge composition", 5.0, check)


def test_criterion_03_field_alignment():
    def check():
        e = canonical_envelope()
        expected = envelope_fields(e)
        for p in PROTOCOLS:
            doc = CODECS.get(p).encode(e)
            assert doc == json.loads((GOLDEN / f"{p}_request.json").read_text(encoding="utf-8")), p
            for field, path in ALIGNMENT[p].items():
                assert at(doc, path) == expected[field], (p, field)
        return "golden documents and field paths match for a2a, acp, anp, agora"

    gate(3, "field alignment", 1.0, check)


# --------------------------------------------------------------------------- 4: metric oracles


def test_criterion_04_metric_oracles():
    def check():
        checked = Counter()
        for seed in range(50):
            log = synthetic_log(seed)
            events = log.events
            got, _ = e2e_latencies(log)
            want = oracles.latencies(events)
            assert got == want, seed
            summary = summarize_latencies(got.values()).to_dict()
            ref = oracles.summary(list(want.values()))
            assert {k: summary[k] for k in ref} == ref, seed
            assert run_duration_minutes(log) == oracles.duration_minutes(events), seed
            cycles = [(c.ttr_seconds, c.retention) for c in recovery_report(log, 60.0)]
            assert cycles == oracles.cycles(events, 60.0), seed
            checked["logs"] += 1
            checked["cycles"] += len(cycles)
        return f"{checked['logs']} logs, {checked['cycles']} recovery cycles, all fields bit-equal"

    gate(4, "metric oracle equivalence", 10.0, check)


# --------------------------------------------------------------------------- 5-7: scenarios


def storm_config(protocol: str, seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig.default("fail_storm", protocol=protocol, seed=seed, cycles=5, timing={"time_scale": 0.05})


def test_criterion_05_fail_storm_timing():
    def check():
        ttrs = []
        for p in PROTOCOLS:
            cfg = storm_config(p)
            assert cfg.timing.cycle == pytest.approx(6.0) and cfg.timing.restart_delay == pytest.approx(0.1)
            cycles = recovery_report(run_fail_storm(cfg).log, cfg.timing.window)
            assert len(cycles) == 5, (p, len(cycles))
            upper = cfg.timing.restart_delay + cfg.timing.hb_timeout + 0.5
            for c in cycles:
                assert c.ttr_seconds >= cfg.timing.restart_delay, (p, c.ttr_seconds)
                assert c.ttr_seconds <= upper, (p, c.ttr_seconds)
                ttrs.append(c.ttr_seconds)
        return f"{len(ttrs)} cycles over 4 protocols, TTR in [{min(ttrs):g}, {max(ttrs):g}] s"

    gate(5, "fail-storm timing", 60.0, check)


def test_criterion_06_fail_storm_correctness():
    def check():
        total = 0
        for seed, p in zip((0, 1, 2), ("a2a", "anp", "acp")):
            cfg = storm_config(p, seed)
            log = run_fail_storm(cfg).log
            expected, observed = reachability_oracle(cfg, log), observed_outcomes(log)
            assert set(expected) == set(observed), seed
            mismatches = [rid for rid in expected if expected[rid] != observed[rid]]
            assert not mismatches, (seed, mismatches[:5])
            total += len(expected)
        return f"{total} queries over seeds 0-2 match the reachability oracle"

    gate(6, "fail-storm correctness", 60.0, check)


def test_criterion_07_streaming_queue():
    def check():
        parts = []
        for p in PROTOCOLS:
            cfg = ScenarioConfig.default("streaming_queue", protocol=p)
            assert cfg.workload.n_tasks == 1000 and cfg.workload.mean_service_seconds == 0.005
            result = run_streaming_queue(cfg)
            done = result.log.of_kind(ev.DONE)
            assert len(done) == 1000 and not result.log.of_kind(ev.FAIL), p
            assert result.byte_totals["msg_bytes_retry_overhead"] == 0, p
            recount = Counter(e.agent for e in done)
            oracle = statistics.pvariance([recount.get(w, 0) for w in result.details["workers"]])
            lbv = load_balance_variance(result.log, result.details["workers"])
            assert lbv == oracle, (p, lbv, oracle)
            parts.append(f"{p} lbv={lbv:g}")
        return "1000/1000 each, zero retry bytes; " + ", ".join(parts)

    gate(7, "streaming queue", 30.0, check)


# --------------------------------------------------------------------------- 8: safety


def test_criterion_08_safety_matrix():
    def check():
        rows = {}
        for p in PROTOCOLS:
            cfg = ScenarioConfig.default("safety", protocol=p, timing={"time_scale": 0.05})
            report, _ = run_safety_probes(cfg)
            rows[p] = report
            assert report.session_hijack, (p, report.findings["replay"], report.findings["hijack"])
            assert report.tls_transport == "not-modeled", p
        assert rows["anp"].e2e_encryption and rows["anp"].tunnel_sniffing
        assert rows["anp"].findings["watermark"]["frames_with_marker"] == 0
        for p in ("a2a", "acp"):
            assert not rows[p].tunnel_sniffing and rows[p].findings["watermark"]["frames_with_marker"] > 0, p
        return "; ".join(
            f"{p}: " + ",".join(f"{k.split()[0]}={v}" for k, v in r.matrix_row().items()) for p, r in rows.items()
        )

    gate(8, "safety matrix", 60.0, check)


# --------------------------------------------------------------------------- 9-10: router


ROUTER_TEXTS = [
    "must support end-to-end encryption",
    "requires DID identity and end-to-end encryption",
    "REST-style idempotent operations",
    "batch submissions through REST endpoints",
    "routine governance with versioned procedures",
    "streaming updates for the dashboard",
    "long-running jobs with job status polling",
    "summarize the weekly notes",
    "relay short answers between agents",
    "streaming updates without end-to-end encryption",
    "avoid routines; stream progress",
    "end-to-end encryption over a REST resource",
    "confidential payloads with streaming",
    "auditable procedures agreed by partners",
    "no resource semantics, real-time updates",
    "collect results and forward them",
    "decentralized identity checks for each peer",
    "idempotent retries on a REST API, streaming progress",
    "governance rules with DID identities",
    "plain request and response",
]


def test_criterion_09_router_determinism():
    def check():
        modules = [{"id": f"m{i:02d}", "text": t} for i, t in enumerate(ROUTER_TEXTS)]
        first = json.dumps({k: v.to_dict() for k, v in route_spec_only("", modules).items()}, sort_keys=True)
        for _ in range(999):
            again = json.dumps({k: v.to_dict() for k, v in route_spec_only("", modules).items()}, sort_keys=True)
            assert again == first
        decisions = route_spec_only("", modules)
        for d in decisions.values():
            if not d.infeasible:
                assert is_protocol_compatible(d.selected_protocol, d.requirements), d.module_id
            if not d.evidence_spans:
                assert d.selected_protocol == "A2A", d.module_id
            if "e2e_encryption" in d.requirements.required:
                assert d.selected_protocol == "ANP", d.module_id
        empty = sum(1 for d in decisions.values() if not d.evidence_spans)
        e2e = sum(1 for d in decisions.values() if "e2e_encryption" in d.requirements.required)
        flagged = sum(1 for d in decisions.values() if d.infeasible)
        return f"1000 identical routings of 20 modules; {empty} empty->A2A, {e2e} E2E->ANP, {flagged} flagged infeasible"

    gate(9, "router determinism and soundness", 10.0, check)


def test_criterion_10_routerbench_closed_loop():
    def check():
        corpus = generate_synthetic_corpus(0)
        assert (len(corpus), len(corpus.modules)) == (60, 180)
        spec_only = run_eval(corpus)
        assert spec_only.scenario_accuracy == 1.0
        prior = PriorTable(("ACP", "A2A", "ANP", "Agora"))
        amb = ambiguity_corpus(prior)
        assert run_eval(amb, "spec_perf", prior).scenario_accuracy == 1.0
        fixture = fixture_corpus()
        report = score(fixture_predictions(fixture), fixture)
        assert report.scenario_accuracy == 0.7 and report.module_accuracy == 0.85
        assert report.macro_f1 == pytest.approx(0.85, abs=1e-12)
        return (
            f"synthetic 60/180 scenario_acc={spec_only.scenario_accuracy:.3f}; "
            f"ambiguity set resolved to ACP; fixture 0.700/0.850/0.850"
        )

    gate(10, "routerbench closed loop", 20.0, check)


# --------------------------------------------------------------------------- 11: bootstrap


def test_criterion_11_bca_bootstrap():
    n, trials, resamples, mu = 1000, 500, 2000, 5.0

    def check():
        assert bootstrap_ci([2.5] * 40) == (2.5, 2.5)
        hits = 0
        for i in range(trials):
            x = np.random.default_rng(10_000 + i).normal(mu, 2.0, size=n)
            lo, hi = bootstrap_ci(x, B=resamples, seed=i)
            hits += lo <= mu <= hi
        coverage = hits / trials
        assert coverage >= 0.93, f"coverage {coverage:.3f}"
        return f"constant data degenerate; coverage {coverage:.3f} over {trials} trials (n={n}, B={resamples})"

    gate(11, "BCa bootstrap", 60.0, check)
