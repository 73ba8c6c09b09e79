"""Router evaluation corpus: loading, synthesis, routing and scoring.

A scenario at level ``i`` holds ``i`` independent modules, each with one gold
protocol label. A scenario with any malformed module is excluded whole.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .router import LABELS, SPEC_ONLY, SPEC_PERF, DecisionRecord, PriorTable, route_module
from .transport import ConfigError

log = logging.getLogger(__name__)

SCENARIO_ID = re.compile(r"^RB-L([1-5])-(\d+)$")
LEVELS = (1, 2, 3, 4, 5)
SYNTHETIC_NOTE = "synthetic corpus: validates the evaluation machinery, not published accuracy figures"


@dataclass(frozen=True)
class ModuleRecord:
    module_id: str
    text: str
    label: str
    locks: tuple[str, ...] = ()
    excludes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "module_id": self.module_id,
            "text": self.text,
            "label": self.label,
            "locks": list(self.locks),
            "excludes": list(self.excludes),
        }


@dataclass(frozen=True)
class ScenarioRecord:
    scenario_id: str
    level: int
    modules: tuple[ModuleRecord, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"scenario_id": self.scenario_id, "level": self.level, "modules": [m.to_dict() for m in self.modules]}


@dataclass
class Corpus:
    scenarios: list[ScenarioRecord] = field(default_factory=list)
    # (scenario id or "line:N", reason)
    excluded: list[tuple[str, str]] = field(default_factory=list)
    synthetic: bool = False

    def __iter__(self) -> Iterator[ScenarioRecord]:
        return iter(self.scenarios)

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def modules(self) -> list[ModuleRecord]:
        return [m for s in self.scenarios for m in s.modules]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in self.scenarios)


# --------------------------------------------------------------------------- loading


def _phrases(value: Any, what: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValueError(f"{what} must be a list of strings")
    return tuple(value)


def parse_scenario(doc: Any) -> ScenarioRecord:
    """Validate one record; raises ``ValueError`` naming the first problem."""
    if not isinstance(doc, dict):
        raise ValueError("record is not an object")
    sid = doc.get("scenario_id")
    match = SCENARIO_ID.match(sid) if isinstance(sid, str) else None
    if match is None:
        raise ValueError(f"bad scenario_id {sid!r}")
    level = doc.get("level")
    if level != int(match.group(1)):
        raise ValueError(f"level {level!r} disagrees with id")
    raw = doc.get("modules")
    if not isinstance(raw, list) or len(raw) != level:
        raise ValueError(f"level {level} needs exactly {level} modules")
    modules = []
    for m, item in enumerate(raw, start=1):
        if not isinstance(item, dict):
            raise ValueError(f"module {m} is not an object")
        mid = item.get("module_id")
        if mid != f"{sid}-M{m}":
            raise ValueError(f"module {m} has id {mid!r}")
        text, label = item.get("text"), item.get("label")
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"{mid} has no text")
        if label not in LABELS:
            raise ValueError(f"{mid} has label {label!r}")
        modules.append(ModuleRecord(mid, text, label, _phrases(item.get("locks"), "locks"), _phrases(item.get("excludes"), "excludes")))
    return ScenarioRecord(sid, level, tuple(modules))


def parse_corpus(lines: Iterable[str]) -> Corpus:
    corpus = Corpus()
    seen: set[str] = set()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except ValueError:
            corpus.excluded.append((f"line:{n}", "not valid JSON"))
            continue
        sid = doc.get("scenario_id") if isinstance(doc, dict) else None
        key = sid if isinstance(sid, str) else f"line:{n}"
        try:
            record = parse_scenario(doc)
            if record.scenario_id in seen:
                raise ValueError("duplicate scenario_id")
        except ValueError as err:
            log.warning("excluding %s: %s", key, err)
            corpus.excluded.append((key, str(err)))
            continue
        seen.add(record.scenario_id)
        corpus.scenarios.append(record)
    return corpus


def load_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


# --------------------------------------------------------------------------- scoring


@dataclass
class ScoreReport:
    scenario_accuracy: float
    module_accuracy: float
    macro_f1: float
    per_class: dict[str, dict[str, float]]
    confusion: dict[str, dict[str, int]]
    n_scenarios: int
    n_modules: int
    excluded_scenarios: list[str]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_accuracy": self.scenario_accuracy,
            "module_accuracy": self.module_accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "n_scenarios": self.n_scenarios,
            "n_modules": self.n_modules,
            "excluded_scenarios": self.excluded_scenarios,
            "notes": self.notes,
        }

    def confusion_csv(self) -> str:
        """Rows are gold labels, columns predictions."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", *LABELS])
        for truth in LABELS:
            writer.writerow([truth, *(self.confusion[truth][p] for p in LABELS)])
        return buf.getvalue()


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def score(predictions: Mapping[str, str], corpus: Corpus | Sequence[ScenarioRecord]) -> ScoreReport:
    """Score module-level predictions (module id -> label) against gold labels."""
    scenarios = corpus.scenarios if isinstance(corpus, Corpus) else list(corpus)
    excluded = [sid for sid, _ in corpus.excluded] if isinstance(corpus, Corpus) else []
    confusion = {t: {p: 0 for p in LABELS} for t in LABELS}
    scenario_hits = module_hits = n_modules = n_scenarios = 0
    for s in sorted(scenarios, key=lambda s: s.scenario_id):
        if any(m.module_id not in predictions for m in s.modules):
            log.warning("no prediction for every module of %s; excluded", s.scenario_id)
            excluded.append(s.scenario_id)
            continue
        n_scenarios += 1
        all_right = True
        for m in s.modules:
            guess = predictions[m.module_id]
            n_modules += 1
            if guess in confusion[m.label]:
                confusion[m.label][guess] += 1
            if guess == m.label:
                module_hits += 1
            else:
                all_right = False
        scenario_hits += all_right

    per_class = {}
    for c in LABELS:
        tp = confusion[c][c]
        predicted = sum(confusion[t][c] for t in LABELS)
        actual = sum(confusion[c].values())
        precision, recall = _ratio(tp, predicted), _ratio(tp, actual)
        f1 = _ratio(2 * tp, predicted + actual)
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1, "support": actual}
    return ScoreReport(
        scenario_accuracy=_ratio(scenario_hits, n_scenarios),
        module_accuracy=_ratio(module_hits, n_modules),
        macro_f1=sum(per_class[c]["f1"] for c in LABELS) / len(LABELS),
        per_class=per_class,
        confusion=confusion,
        n_scenarios=n_scenarios,
        n_modules=n_modules,
        excluded_scenarios=sorted(excluded),
    )


# --------------------------------------------------------------------------- evaluation


def predict(corpus: Corpus, mode: str = SPEC_ONLY, prior: PriorTable | None = None) -> dict[str, DecisionRecord]:
    """Route every module on its own text; no context crosses module boundaries."""
    if mode not in (SPEC_ONLY, SPEC_PERF):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == SPEC_PERF and prior is None:
        raise ConfigError("spec_perf mode requires a prior table")
    use_prior = prior if mode == SPEC_PERF else None
    return {m.module_id: route_module(m.module_id, m.text, prior=use_prior) for m in corpus.modules}


def run_eval(corpus: Corpus, mode: str = SPEC_ONLY, prior: PriorTable | None = None) -> ScoreReport:
    decisions = predict(corpus, mode, prior)
    report = score({mid: d.selected_protocol for mid, d in decisions.items()}, corpus)
    report.notes.append(f"mode: {mode}")
    if corpus.synthetic:
        report.notes.append(SYNTHETIC_NOTE)
    return report


# --------------------------------------------------------------------------- synthesis

_SUBJECTS = (
    "claims intake", "pharmacy refill", "freight booking", "tax filing", "lab results",
    "travel itinerary", "payroll run", "grant review", "warehouse picking", "customer support",
    "energy metering", "court scheduling",
)

# Per label: (lock phrases that only this protocol satisfies, exclude clauses).
# Phrases are picked so the lexicon leaves exactly one feasible protocol.
_LOCKS = {
    "ANP": ("end-to-end encryption", "DID-based identities", "decentralized identity checks", "confidential payloads"),
    "ACP": ("REST endpoints", "idempotent updates", "batch submissions", "an explicit state machine"),
    "Agora": ("versioned routines", "auditable procedures", "governance rules", "shared routines"),
    "A2A": (),
}
_A2A_EXCLUDES = ("avoid long-running jobs", "avoid routines", "no end-to-end encryption")
_A2A_ACTIONS = ("stream progress to the reviewer", "push live streaming updates", "relay short answers between agents")
_TEMPLATES = {
    "ANP": "The {subject} agents exchange records across organizations and require {lock}.",
    "ACP": "The {subject} service is exposed through {lock} so clients can retry safely.",
    "Agora": "The {subject} partners negotiate using {lock} agreed in advance.",
}

# Streaming is the only cue, shared by A2A and ACP (ANP is excluded), so the
# priority stages tie and only a prior ranking or the narrative decides.
_AMBIGUOUS = (
    "The {subject} dashboard shows streaming progress; no confidential data is involved.",
    "Partners of the {subject} flow want streaming status; no end-to-end encryption is needed.",
)


def synthetic_module(rng: random.Random, module_id: str, label: str) -> ModuleRecord:
    subject = rng.choice(_SUBJECTS)
    if label == "A2A":
        action = rng.choice(_A2A_ACTIONS)
        excludes = tuple(rng.sample(_A2A_EXCLUDES, len(_A2A_EXCLUDES)))
        text = f"The {subject} assistant should {action}; " + ", ".join(excludes) + "."
        return ModuleRecord(module_id, text, label, (), excludes)
    lock = rng.choice(_LOCKS[label])
    return ModuleRecord(module_id, _TEMPLATES[label].format(subject=subject, lock=lock), label, (lock,), ())


def generate_synthetic_corpus(seed: int = 0, n_per_level: int = 12) -> Corpus:
    """``n_per_level`` scenarios per level; level ``i`` has ``i`` modules."""
    rng = random.Random(f"routerbench:{seed}")
    scenarios = []
    for level in LEVELS:
        for idx in range(1, n_per_level + 1):
            sid = f"RB-L{level}-{idx:02d}"
            modules = tuple(synthetic_module(rng, f"{sid}-M{m}", rng.choice(LABELS)) for m in range(1, level + 1))
            scenarios.append(ScenarioRecord(sid, level, modules))
    return Corpus(scenarios, synthetic=True)


def ambiguity_corpus(prior: PriorTable, seed: int = 0, n: int = 6) -> Corpus:
    """Modules whose cues fit A2A and ACP equally; gold label = the prior's pick."""
    rng = random.Random(f"ambiguity:{seed}")
    label = next(p for p in prior.ranking if p in ("A2A", "ACP"))
    scenarios = []
    for idx in range(1, n + 1):
        sid = f"RB-L1-{idx:02d}"
        text = rng.choice(_AMBIGUOUS).format(subject=rng.choice(_SUBJECTS))
        scenarios.append(ScenarioRecord(sid, 1, (ModuleRecord(f"{sid}-M1", text, label, ("streaming",), ()),)))
    return Corpus(scenarios, synthetic=True)
