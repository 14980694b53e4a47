"""Benchmark curation, suite execution, and metric arithmetic.

Two suites: the full-loop suite drives the agent end to end on repository
fixtures (a specification, a golden human patch, and an oracle command that
fails before the fix and passes after), while the patch-generation suite
exercises the patcher alone, zero-shot, across the three diff formats.
Production counters (published / reviewed / landed) get the same rounding
treatment as offline metrics so reported figures are reproducible.
"""

from __future__ import annotations

import json
import re
import shutil
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable

from . import llm
from .harness import Budget, FeedbackConfig, run_episode
from .llm import Backend, CompletionParams
from .patchkit import (
    FORMAT_LINE,
    FORMAT_SEARCH_REPLACE,
    FORMAT_UNIFIED,
    PatchError,
    apply_line_diff,
    apply_search_replace,
    apply_unified,
    parse_line_diff,
    parse_search_replace,
    parse_unified,
)
from .tfmb import TestFailureTask
from .toolbox import OracleConfig, extract_stack_traces, run_oracle
from .validation import AnalyzerConfig, make_static_feedback, oracle_check
from .workspace import build_index, open_workspace

SIZE_SMALL = "small"
SIZE_MEDIUM = "medium"
SIZE_LARGE = "large"

INSTRUCTION_HIGH_LEVEL = "high_level"
INSTRUCTION_DETAILED = "detailed"

PATCH_FORMATS = (FORMAT_SEARCH_REPLACE, FORMAT_UNIFIED, FORMAT_LINE)


class ZeroPublishedError(ValueError):
    pass


class EmptyInstructionError(ValueError):
    pass


def percent_ratio(numerator: int | float, denominator: int | float) -> str:
    """Render numerator/denominator as a percentage, one decimal, half-up."""
    value = Decimal(numerator) * 100 / Decimal(denominator)
    return str(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)) + "%"


def percent(value: float) -> str:
    return percent_ratio(Decimal(str(value)), 1)


# ---------------------------------------------------------------------------
# Full-loop benchmark examples


@dataclass
class BenchmarkExample:
    id: str
    specification: str
    golden_patch: str  # unified diff text
    oracle_command: list[str]
    repo_fixture: Path
    language: str = ""


@dataclass
class ExampleValidation:
    ok: bool
    reason: str | None = None


def load_suite(path: str | Path) -> list[BenchmarkExample]:
    """Load a suite manifest; fixture and patch paths resolve relative to it."""
    manifest_path = Path(path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent
    examples = []
    for item in doc["examples"]:
        golden = (base / item["golden_patch_file"]).read_text(encoding="utf-8")
        examples.append(
            BenchmarkExample(
                id=item["id"],
                specification=item["specification"],
                golden_patch=golden,
                oracle_command=list(item["oracle"]["argv"]),
                repo_fixture=(base / item["fixture_dir"]).resolve(),
                language=item.get("language", ""),
            )
        )
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate example ids in suite manifest")
    return examples


def validate_example(ex: BenchmarkExample, oracle_timeout: float = 120.0) -> ExampleValidation:
    """Check the example contract on a throwaway copy of the fixture.

    The oracle must fail on the bare fixture and pass once the golden patch
    is applied; the fixture itself is never modified.
    """
    workdir = tempfile.mkdtemp(prefix=f"validate_{ex.id}_")
    try:
        target = Path(workdir) / "ws"
        shutil.copytree(ex.repo_fixture, target)
        ws = open_workspace(target, writable=True)
        oracle = OracleConfig(argv=ex.oracle_command, timeout_seconds=oracle_timeout)
        bare = run_oracle(oracle, str(ws.root))
        if bare.passed:
            return ExampleValidation(False, "oracle passes without patch")
        try:
            apply_unified(ws, parse_unified(ex.golden_patch))
        except (PatchError, FileNotFoundError) as exc:
            return ExampleValidation(False, f"golden patch unappliable: {exc}")
        fixed = run_oracle(oracle, str(ws.root))
        if not fixed.passed:
            return ExampleValidation(False, "oracle still failing with golden patch")
        return ExampleValidation(True)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


# ---------------------------------------------------------------------------
# Curation filters


@dataclass
class PathClassifiers:
    test_globs: tuple[str, ...] = ("**/test_*", "**/*_test.*", "**/tests/**")
    build_globs: tuple[str, ...] = ("**/BUILD", "**/Makefile", "**/CMakeLists.txt", "**/*.bzl")
    config_globs: tuple[str, ...] = ("**/*.json", "**/*.yaml", "**/*.yml", "**/*.toml", "**/*.ini", "**/*.cfg")
    generated_globs: tuple[str, ...] = ("**/*generated*", "**/*.pb.*")

    def non_source(self, path: str) -> bool:
        import fnmatch

        for group in (self.test_globs, self.build_globs, self.config_globs, self.generated_globs):
            for pattern in group:
                if fnmatch.fnmatch(path, pattern):
                    return True
                if pattern.startswith("**/") and fnmatch.fnmatch(path, pattern[3:]):
                    return True
        return False


def curate_filters(
    task_stream: Iterable[dict],
    window_days: int = 90,
    classifiers: PathClassifiers | None = None,
    now: float | None = None,
) -> list[dict]:
    """Select benchmark candidates from resolved failure tasks.

    Keeps tasks from the recency window that a human resolved with landed
    changes touching source files only. Records are dicts with created_at,
    resolved_by_human, landed, and solution_paths keys.
    """
    classifiers = classifiers or PathClassifiers()
    cutoff = (now if now is not None else time.time()) - window_days * 86400.0
    kept = []
    for record in task_stream:
        if float(record.get("created_at", 0)) < cutoff:
            continue
        if not record.get("resolved_by_human") or not record.get("landed"):
            continue
        paths = list(record.get("solution_paths", []))
        if not paths:
            continue
        if any(classifiers.non_source(p) for p in paths):
            continue
        kept.append(record)
    return kept


# ---------------------------------------------------------------------------
# Backtranslation


BACKTRANSLATE_SYSTEM = (
    "You turn code diffs into natural-language edit instructions for a "
    "colleague who will make the change without seeing the diff."
)


def backtranslate(backend: Backend, golden_patch: str, level: str,
                  params: CompletionParams | None = None) -> str:
    """Generate edit instructions from a known-good patch."""
    if level == INSTRUCTION_HIGH_LEVEL:
        directive = (
            "Write a single high-level instruction (one short sentence) asking "
            "for the change shown in the diff, the way a teammate would phrase "
            'a request like "can you add logging to function X?".'
        )
    elif level == INSTRUCTION_DETAILED:
        directive = (
            "Write step-by-step numbered instructions describing exactly how "
            "to make the change shown in the diff, one edit per step."
        )
    else:
        raise ValueError(f"unknown instruction level: {level}")
    messages = [
        llm.system(BACKTRANSLATE_SYSTEM),
        llm.user(f"{directive}\n\n[diff]\n\n{golden_patch}"),
    ]
    instruction = llm.complete(backend, messages, params).strip()
    if not instruction:
        raise EmptyInstructionError("backtranslation produced an empty instruction")
    return instruction


# ---------------------------------------------------------------------------
# Suite execution and metrics


@dataclass
class RunRecord:
    example_id: str
    trial: int  # 0-based trial index
    solved: bool
    patch_generated: bool
    error_occurred: bool
    iteration_count: int
    wall_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "trial": self.trial,
            "solved": self.solved,
            "patch_generated": self.patch_generated,
            "error_occurred": self.error_occurred,
            "iteration_count": self.iteration_count,
            "wall_seconds": round(self.wall_seconds, 3),
        }


@dataclass
class MetricsRow:
    label: str
    n_examples: int
    trials: int
    sr_at: dict[int, float]
    pgr: float
    er: float
    ic_mean: float
    ic_median: float

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "n_examples": self.n_examples,
            "trials": self.trials,
            "sr_at": {str(k): v for k, v in self.sr_at.items()},
            "sr_at_rendered": {str(k): percent(v) for k, v in self.sr_at.items()},
            "pgr": self.pgr,
            "er": self.er,
            "ic_mean": self.ic_mean,
            "ic_median": self.ic_median,
        }


def compute_metrics(records: list[RunRecord], label: str = "") -> MetricsRow:
    """Aggregate raw run records into one ablation-table row.

    SR@k counts an example as solved when any of its first k trials solved
    it; PGR and ER are per-trial fractions; the iteration count is reported
    as both mean and median over trials.
    """
    if not records:
        raise ValueError("no records to aggregate")
    by_example: dict[str, list[RunRecord]] = {}
    for record in records:
        by_example.setdefault(record.example_id, []).append(record)
    for trials in by_example.values():
        trials.sort(key=lambda r: r.trial)
    n_examples = len(by_example)
    max_trials = max(len(t) for t in by_example.values())
    sr_at: dict[int, float] = {}
    for k in range(1, max_trials + 1):
        solved = sum(
            1 for trials in by_example.values() if any(r.solved for r in trials[:k])
        )
        sr_at[k] = solved / n_examples
    total = len(records)
    pgr = sum(1 for r in records if r.patch_generated) / total
    er = sum(1 for r in records if r.error_occurred) / total
    ics = [r.iteration_count for r in records]
    return MetricsRow(
        label=label,
        n_examples=n_examples,
        trials=max_trials,
        sr_at=sr_at,
        pgr=pgr,
        er=er,
        ic_mean=statistics.fmean(ics),
        ic_median=float(statistics.median(ics)),
    )


@dataclass
class SuiteRunConfig:
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    trials: int = 1
    budget: Budget = field(default_factory=Budget)
    params: CompletionParams = field(default_factory=lambda: CompletionParams(temperature=0.8))
    analyzers: list[AnalyzerConfig] = field(default_factory=list)
    oracle_timeout: float = 120.0
    observation_cap: int = 8000
    label: str = ""


@dataclass
class SuiteReport:
    rows: list[MetricsRow]
    records: dict[str, list[RunRecord]]  # label -> raw records

    def to_json(self) -> dict:
        return {
            "rows": [r.to_json() for r in self.rows],
            "records": {
                label: [r.to_json() for r in records]
                for label, records in sorted(self.records.items())
            },
        }


def _example_task(ex: BenchmarkExample) -> TestFailureTask:
    return TestFailureTask(
        id=ex.id,
        test_id=ex.id,
        oracle_command=list(ex.oracle_command),
        failure_output=ex.specification,
        stack_traces=extract_stack_traces(ex.specification),
        title=f"Benchmark example {ex.id}",
    )


def run_one_trial(
    ex: BenchmarkExample,
    trial: int,
    config: SuiteRunConfig,
    backend: Backend,
) -> RunRecord:
    """One fresh-workspace episode followed by the solve-rate oracle run."""
    from .toolbox import ToolEnv

    workdir = tempfile.mkdtemp(prefix=f"trial_{ex.id}_{trial}_")
    started = time.monotonic()
    try:
        target = Path(workdir) / "ws"
        shutil.copytree(ex.repo_fixture, target)
        ws = open_workspace(target, writable=True)
        index = build_index(ws)
        task = _example_task(ex)
        env = ToolEnv(
            workspace=ws,
            index=index,
            task=task,
            oracle=OracleConfig(argv=task.oracle_command, timeout_seconds=config.oracle_timeout),
            static_feedback=make_static_feedback(ws, config.analyzers),
            observation_cap=config.observation_cap,
        )
        episode = run_episode(task, env, config.feedback, config.budget, backend, config.params)
        solved, _ = oracle_check(ws, task)
        return RunRecord(
            example_id=ex.id,
            trial=trial,
            solved=solved,
            patch_generated=episode.patch_generated,
            error_occurred=episode.error_occurred,
            iteration_count=episode.iteration_count,
            wall_seconds=time.monotonic() - started,
        )
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def run_suite(
    suite: list[BenchmarkExample],
    config: SuiteRunConfig,
    backend_factory: Callable[[BenchmarkExample, int], Backend],
    parallel: int = 1,
) -> SuiteReport:
    """Run every example for the configured number of independent trials.

    Each trial gets a private workspace copy and its own backend (a private
    replay cursor, for scripted runs). Records are reduced in (example,
    trial) order regardless of scheduling.
    """
    jobs = [(ex, trial) for ex in suite for trial in range(config.trials)]
    records: list[RunRecord] = []
    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [
                pool.submit(run_one_trial, ex, trial, config, backend_factory(ex, trial))
                for ex, trial in jobs
            ]
            records = [f.result() for f in futures]
    else:
        for ex, trial in jobs:
            records.append(run_one_trial(ex, trial, config, backend_factory(ex, trial)))
    records.sort(key=lambda r: (r.example_id, r.trial))
    label = config.label or "run"
    row = compute_metrics(records, label=label)
    return SuiteReport(rows=[row], records={label: records})


# ---------------------------------------------------------------------------
# Production metrics


@dataclass
class ProductionMetrics:
    published: int
    reviewed: int
    landed: int
    review_rate: float
    land_rate_total: float
    land_rate_reviewed: float | None

    def rendered(self) -> dict[str, str]:
        out = {
            "review_rate": percent_ratio(self.reviewed, self.published),
            "land_rate_total": percent_ratio(self.landed, self.published),
        }
        if self.land_rate_reviewed is None:
            out["land_rate_reviewed"] = "undefined"
        else:
            out["land_rate_reviewed"] = percent_ratio(self.landed, self.reviewed)
        return out

    def to_json(self) -> dict:
        return {
            "published": self.published,
            "reviewed": self.reviewed,
            "landed": self.landed,
            "review_rate": self.review_rate,
            "land_rate_total": self.land_rate_total,
            "land_rate_reviewed": self.land_rate_reviewed,
            "rendered": self.rendered(),
        }


def compute_production_metrics(published: int, reviewed: int, landed: int) -> ProductionMetrics:
    """Review and land rates from raw published/reviewed/landed counts."""
    if published == 0:
        raise ZeroPublishedError("no published diffs; rates are undefined")
    return ProductionMetrics(
        published=published,
        reviewed=reviewed,
        landed=landed,
        review_rate=reviewed / published,
        land_rate_total=landed / published,
        land_rate_reviewed=(landed / reviewed) if reviewed else None,
    )


# ---------------------------------------------------------------------------
# Patch-generation benchmark


@dataclass
class PatchGenExample:
    id: str
    repo_fixture: Path
    input_file: str
    instruction: str
    instruction_level: str
    oracle_command: list[str]
    size_bucket: str

    def __post_init__(self):
        if self.instruction_level not in (INSTRUCTION_HIGH_LEVEL, INSTRUCTION_DETAILED):
            raise ValueError(f"bad instruction level: {self.instruction_level}")
        if self.size_bucket not in (SIZE_SMALL, SIZE_MEDIUM, SIZE_LARGE):
            raise ValueError(f"bad size bucket: {self.size_bucket}")


def changed_line_count(patch_text: str) -> int:
    patch = parse_unified(patch_text)
    count = 0
    for fp in patch.files:
        for hunk in fp.hunks:
            count += sum(1 for tag, _ in hunk.lines if tag in ("add", "delete"))
    return count


def size_bucket_for(changed_lines: int) -> str:
    if changed_lines < 10:
        return SIZE_SMALL
    if changed_lines <= 40:
        return SIZE_MEDIUM
    return SIZE_LARGE


def load_patchgen_suite(path: str | Path) -> list[PatchGenExample]:
    """Load a patch-generation manifest.

    When an example names its golden patch file, the size bucket is derived
    from the patch's changed-line count and any stated bucket must agree.
    A manifest-level expected_bucket_counts entry is validated after load.
    """
    manifest_path = Path(path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent
    examples = []
    for item in doc["examples"]:
        bucket = item.get("size_bucket")
        if item.get("golden_patch_file"):
            golden = (base / item["golden_patch_file"]).read_text(encoding="utf-8")
            derived = size_bucket_for(changed_line_count(golden))
            if bucket is not None and bucket != derived:
                raise ValueError(
                    f"{item['id']}: stated bucket {bucket} != derived {derived}"
                )
            bucket = derived
        if bucket is None:
            raise ValueError(f"{item['id']}: no size bucket and no golden patch to derive it")
        examples.append(
            PatchGenExample(
                id=item["id"],
                repo_fixture=(base / item["fixture_dir"]).resolve(),
                input_file=item["input_file"],
                instruction=item["instruction"],
                instruction_level=item["instruction_level"],
                oracle_command=list(item["oracle"]["argv"]),
                size_bucket=bucket,
            )
        )
    expected = doc.get("expected_bucket_counts")
    if expected:
        for bucket, want in sorted(expected.items()):
            have = sum(1 for e in examples if e.size_bucket == bucket)
            if have != int(want):
                raise ValueError(f"bucket {bucket}: manifest states {want}, found {have}")
    return examples


PATCHGEN_FORMAT_RULES = {
    FORMAT_SEARCH_REPLACE: (
        "Format your changes as diffs using SEARCH/REPLACE block rules: the "
        "file path on its own line, then <<<<<<< SEARCH, the exact existing "
        "lines, =======, the replacement lines, and >>>>>>> REPLACE. Each "
        "search section must match the file exactly and uniquely."
    ),
    FORMAT_UNIFIED: (
        "Format your changes as a unified diff with ---/+++ file headers and "
        "@@ -start,len +start,len @@ hunk headers; context lines start with a "
        "space, removed lines with -, added lines with +."
    ),
    FORMAT_LINE: (
        "Format your changes as a line diff: the file path on its own line, "
        "then one edit per line in the form '- <line>: <exact old text>' for "
        "deletions and '+ <line>: <new text>' for insertions after that "
        "original line number (0 inserts at the top)."
    ),
}


def build_patchgen_prompt(
    fmt: str, file_path: str, file_content: str, instruction: str
) -> list[llm.ChatMessage]:
    from .harness import PATCHER_PROMPT_HEADER

    body = "\n\n".join(
        [
            f"[code]\n\n{file_path}\n\n{file_content}",
            f"[instruction]\n\n{instruction}",
            PATCHGEN_FORMAT_RULES[fmt],
        ]
    )
    return [llm.system(PATCHER_PROMPT_HEADER), llm.user(body)]


FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def strip_fences(text: str) -> str:
    """Join fenced code blocks when present; otherwise return text as-is."""
    blocks = FENCE_RE.findall(text)
    if blocks:
        return "\n".join(b.rstrip("\n") for b in blocks) + "\n"
    return text


@dataclass
class PatchGenRecord:
    example_id: str
    format: str
    instruction_level: str
    size_bucket: str
    solved: bool
    apply_error: str | None = None

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "format": self.format,
            "instruction_level": self.instruction_level,
            "size_bucket": self.size_bucket,
            "solved": self.solved,
            "apply_error": self.apply_error,
        }


def run_patchgen_example(ex: PatchGenExample, fmt: str, backend: Backend,
                         params: CompletionParams | None = None,
                         oracle_timeout: float = 120.0) -> PatchGenRecord:
    """Zero-shot, non-agentic: one completion, one apply, one oracle run."""
    workdir = tempfile.mkdtemp(prefix=f"patchgen_{ex.id}_")
    try:
        target = Path(workdir) / "ws"
        shutil.copytree(ex.repo_fixture, target)
        ws = open_workspace(target, writable=True)
        content = ws.read_file(ex.input_file)
        messages = build_patchgen_prompt(fmt, ex.input_file, content, ex.instruction)
        response = llm.complete(backend, messages, params)
        apply_error = None
        try:
            if fmt == FORMAT_SEARCH_REPLACE:
                blocks = parse_search_replace(response)
                if not blocks:
                    raise PatchError("no search/replace blocks in response")
                apply_search_replace(ws, blocks)
            elif fmt == FORMAT_UNIFIED:
                patch = parse_unified(strip_fences(response))
                if not patch.files:
                    raise PatchError("no file sections in unified diff")
                apply_unified(ws, patch)
            else:
                apply_line_diff(ws, parse_line_diff(strip_fences(response)))
        except (PatchError, FileNotFoundError) as exc:
            apply_error = str(exc)
        solved = False
        if apply_error is None:
            oracle = OracleConfig(argv=ex.oracle_command, timeout_seconds=oracle_timeout)
            solved = run_oracle(oracle, str(ws.root)).passed
        return PatchGenRecord(
            example_id=ex.id,
            format=fmt,
            instruction_level=ex.instruction_level,
            size_bucket=ex.size_bucket,
            solved=solved,
            apply_error=apply_error,
        )
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


@dataclass
class PatchGenReport:
    records: list[PatchGenRecord]

    def solve_rate(self, fmt: str | None = None, level: str | None = None,
                   bucket: str | None = None) -> float | None:
        selected = [
            r
            for r in self.records
            if (fmt is None or r.format == fmt)
            and (level is None or r.instruction_level == level)
            and (bucket is None or r.size_bucket == bucket)
        ]
        if not selected:
            return None
        return sum(1 for r in selected if r.solved) / len(selected)

    def to_json(self) -> dict:
        formats = sorted({r.format for r in self.records})
        levels = sorted({r.instruction_level for r in self.records})
        buckets = sorted({r.size_bucket for r in self.records})
        cells = {}
        for fmt in formats:
            for level in levels:
                rate = self.solve_rate(fmt=fmt, level=level)
                if rate is not None:
                    cells[f"{fmt}/{level}"] = {"rate": rate, "rendered": percent(rate)}
                for bucket in buckets:
                    rate = self.solve_rate(fmt=fmt, level=level, bucket=bucket)
                    if rate is not None:
                        cells[f"{fmt}/{level}/{bucket}"] = {
                            "rate": rate,
                            "rendered": percent(rate),
                        }
        return {
            "cells": cells,
            "records": [r.to_json() for r in self.records],
        }


def run_patchgen_suite(
    suite: list[PatchGenExample],
    fmt: str,
    backend_factory: Callable[[PatchGenExample], Backend],
    params: CompletionParams | None = None,
    oracle_timeout: float = 120.0,
) -> PatchGenReport:
    if fmt not in PATCH_FORMATS:
        raise ValueError(f"unknown patch format: {fmt}")
    records = [
        run_patchgen_example(ex, fmt, backend_factory(ex), params, oracle_timeout)
        for ex in suite
    ]
    records.sort(key=lambda r: r.example_id)
    return PatchGenReport(records=records)
