"""Model-based binary patch-acceptability classifier and its evaluation
harness.

A many-shot prompt (instructions plus labeled example patches for each
class) asks the model to answer with a Reason line and a Class line; parsing
is tolerant of field order and surrounding prose, and an unparseable answer
gets exactly one terse reprompt before failing. In production the failure
mode is closed: an unparseable verdict never publishes a patch.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import llm
from .llm import Backend, CompletionParams

CLASS_UNACCEPTABLE = 0
CLASS_ACCEPTABLE = 1

DEFAULT_EXEMPLARS_PER_CLASS = 10

JUDGE_INSTRUCTIONS = """You review code patches and predict whether a human engineer would accept them.

Classify the patch into one of two classes:
Class 0: the patch is likely to be unacceptable to a human engineer.
Class 1: the patch is likely to be acceptable to a human engineer.

A patch can be unacceptable even when it makes tests pass: weakening or
disabling the test, reverting the change that exposed the bug, dead or
debug code, use of deprecated interfaces, or unrelated stylistic churn all
count against it.

Respond with exactly two fields:
Reason: a short natural-language explanation of the classification.
Class: the integer 0 or 1."""

REPROMPT_TEXT = "Respond with Reason and Class only."

CLASS_RE = re.compile(r"class\s*[:=]\s*([01])\b", re.IGNORECASE)
REASON_RE = re.compile(
    r"reason\s*:\s*(.+?)(?=\n\s*class\s*[:=]|\Z)", re.IGNORECASE | re.DOTALL
)


class UnparseableVerdictError(Exception):
    """No Class field could be extracted, even after one reprompt."""


@dataclass(frozen=True)
class JudgeVerdict:
    klass: int
    reason: str

    def __post_init__(self):
        if self.klass not in (CLASS_UNACCEPTABLE, CLASS_ACCEPTABLE):
            raise ValueError("class must be 0 or 1")
        if not self.reason:
            raise ValueError("reason must be non-empty")


@dataclass(frozen=True)
class Exemplar:
    patch: str
    label: int
    reason: str


@dataclass(frozen=True)
class LabeledPatch:
    patch: str
    context: str
    label: int

    def __post_init__(self):
        if self.label not in (CLASS_UNACCEPTABLE, CLASS_ACCEPTABLE):
            raise ValueError("label must be 0 or 1")


def load_exemplars(path: str | Path | None = None,
                   per_class: int = DEFAULT_EXEMPLARS_PER_CLASS) -> list[Exemplar]:
    """Load exemplars from a JSON array of {patch, label, reason}.

    Without a path the packaged defaults are used. The per-class count is
    enforced (config-overridable) so the prompt shape stays stable.
    """
    if path is None:
        raw = resources.files("testrepair.data").joinpath("judge_exemplars.json").read_text("utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    items = json.loads(raw)
    exemplars = [Exemplar(patch=i["patch"], label=int(i["label"]), reason=i["reason"]) for i in items]
    for klass in (CLASS_UNACCEPTABLE, CLASS_ACCEPTABLE):
        have = sum(1 for e in exemplars if e.label == klass)
        if have != per_class:
            raise ValueError(
                f"exemplar file must contain exactly {per_class} class-{klass} "
                f"examples, found {have}"
            )
    return exemplars


def build_judge_prompt(patch: str, context: str, exemplars: list[Exemplar]) -> list[llm.ChatMessage]:
    """Instructions, the exemplars in file order, then the input patch."""
    parts = []
    for i, ex in enumerate(exemplars, start=1):
        parts.append(
            f"Example {i}:\n{ex.patch}\nReason: {ex.reason}\nClass: {ex.label}"
        )
    parts.append(f"Task context: {context}" if context else "Task context: (none)")
    parts.append(f"Patch to classify:\n{patch}")
    return [llm.system(JUDGE_INSTRUCTIONS), llm.user("\n\n".join(parts))]


def parse_verdict(text: str) -> JudgeVerdict | None:
    m = CLASS_RE.search(text)
    if not m:
        return None
    klass = int(m.group(1))
    rm = REASON_RE.search(text)
    reason = rm.group(1).strip() if rm and rm.group(1).strip() else "(no reason given)"
    return JudgeVerdict(klass=klass, reason=reason)


def judge_patch(
    backend: Backend,
    patch: str,
    context: str,
    exemplars: list[Exemplar],
    params: CompletionParams | None = None,
) -> JudgeVerdict:
    """Classify one patch; reprompts once before raising UnparseableVerdictError."""
    messages = build_judge_prompt(patch, context, exemplars)
    response = llm.complete(backend, messages, params)
    verdict = parse_verdict(response)
    if verdict is not None:
        return verdict
    retry = messages + [llm.assistant(response or "(empty)"), llm.user(REPROMPT_TEXT)]
    response = llm.complete(backend, retry, params)
    verdict = parse_verdict(response)
    if verdict is not None:
        return verdict
    raise UnparseableVerdictError(f"no Class field in judge response: {response[:200]!r}")


@dataclass
class ClasswiseMetrics:
    """Per-class precision/recall; None marks an undefined (0/0) ratio."""

    precision: dict[int, float | None] = field(default_factory=dict)
    recall: dict[int, float | None] = field(default_factory=dict)
    support: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "support": {str(k): v for k, v in self.support.items()},
        }


def metrics_from_confusion(confusion: dict[tuple[int, int], int]) -> ClasswiseMetrics:
    """Standard precision/recall from an (actual, predicted) count table.

    Zero denominators yield None, never 0.
    """
    metrics = ClasswiseMetrics()
    for klass in (CLASS_UNACCEPTABLE, CLASS_ACCEPTABLE):
        predicted = sum(confusion.get((a, klass), 0) for a in (0, 1))
        actual = sum(confusion.get((klass, p), 0) for p in (0, 1))
        correct = confusion.get((klass, klass), 0)
        metrics.precision[klass] = correct / predicted if predicted else None
        metrics.recall[klass] = correct / actual if actual else None
        metrics.support[klass] = actual
    return metrics


@dataclass
class JudgeEvaluation:
    metrics: ClasswiseMetrics
    confusion: dict[tuple[int, int], int]
    unparseable: int

    def to_json(self) -> dict:
        return {
            "metrics": self.metrics.to_json(),
            "confusion": {f"actual{a}_pred{p}": c for (a, p), c in sorted(self.confusion.items())},
            "unparseable": self.unparseable,
        }


def evaluate_judge(
    backend: Backend,
    dataset: list[LabeledPatch],
    exemplars: list[Exemplar],
    params: CompletionParams | None = None,
) -> JudgeEvaluation:
    """Judge every item and tally the 2x2 confusion matrix.

    Unparseable verdicts are scored as class 0 (the production fail-closed
    behavior) and counted separately.
    """
    confusion: dict[tuple[int, int], int] = {}
    unparseable = 0
    for item in dataset:
        try:
            verdict = judge_patch(backend, item.patch, item.context, exemplars, params)
            predicted = verdict.klass
        except UnparseableVerdictError:
            unparseable += 1
            predicted = CLASS_UNACCEPTABLE
        key = (item.label, predicted)
        confusion[key] = confusion.get(key, 0) + 1
    return JudgeEvaluation(
        metrics=metrics_from_confusion(confusion),
        confusion=confusion,
        unparseable=unparseable,
    )


def load_labeled_dataset(
    path: str | Path, expected_label_counts: dict[int, int] | None = None
) -> list[LabeledPatch]:
    """Load a JSON array of {patch, context, label}.

    A manifest may carry {"expected_label_counts": {...}, "items": [...]}
    instead of a bare array; stated counts are validated at load.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        stated = doc.get("expected_label_counts")
        if stated is not None:
            stated = {int(k): int(v) for k, v in stated.items()}
            expected_label_counts = expected_label_counts or stated
        items = doc["items"]
    else:
        items = doc
    dataset = [
        LabeledPatch(patch=i["patch"], context=i.get("context", ""), label=int(i["label"]))
        for i in items
    ]
    if expected_label_counts is not None:
        for klass, expected in sorted(expected_label_counts.items()):
            have = sum(1 for d in dataset if d.label == klass)
            if have != expected:
                raise ValueError(
                    f"dataset has {have} class-{klass} items, manifest states {expected}"
                )
    return dataset
