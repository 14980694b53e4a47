"""Symbolic checks around the loop: static-analysis runners, the breaking-test
oracle gate, the revert validator, and the publish-decision pipeline.

Gates run cheapest first and short-circuit on the first discard: breaking
test, then revert check, then judge, then CI. A patch is only published when
no gate fails.
"""

from __future__ import annotations

import fnmatch
import os
import subprocess
from dataclasses import dataclass, field
from typing import Any, Callable

from .patchkit import PatchSet, patch_similarity
from .toolbox import DEFAULT_ENV_PASSTHROUGH, OracleConfig, TestResult, run_oracle
from .workspace import Workspace

GATE_PASS = "pass"
GATE_FAIL = "fail"
GATE_SKIPPED = "skipped"

JUDGE_ACCEPT = "accept"
JUDGE_REJECT = "reject"

DECISION_PUBLISH = "publish"
DECISION_DISCARD = "discard"

ANALYSIS_FEEDBACK_TEMPLATE = (
    "The edit was successful but {names} detected errors. Please review the "
    "changes and ensure they are correct and that additional errors were not "
    "introduced by this edit. You are able to edit the file again if necessary."
)

DEFAULT_REVERT_THRESHOLD = 0.9


@dataclass
class AnalyzerConfig:
    """One static analyzer: a command template run per changed file.

    The command may contain a single ``{path}`` placeholder; ``applies_to``
    globs select which changed files this analyzer sees.
    """

    name: str
    command: list[str]
    applies_to: list[str] = field(default_factory=lambda: ["*"])
    timeout_seconds: float = 60.0

    def __post_init__(self):
        if not self.command:
            raise ValueError("analyzer command must be non-empty")
        if sum(arg.count("{path}") for arg in self.command) > 1:
            raise ValueError("analyzer command may contain at most one {path} placeholder")

    def matches(self, path: str) -> bool:
        for pattern in self.applies_to:
            if fnmatch.fnmatch(path, pattern):
                return True
            if pattern.startswith("**/") and fnmatch.fnmatch(path, pattern[3:]):
                return True
        return False


@dataclass
class Finding:
    analyzer: str
    path: str
    message: str


def run_static_analysis(
    ws: Workspace, changed_paths: list[str], configs: list[AnalyzerConfig]
) -> list[Finding]:
    """Run every matching analyzer on every changed path.

    A nonzero exit or any output counts as findings; an analyzer that cannot
    run at all is recorded as an ``internal`` finding rather than aborting.
    """
    findings: list[Finding] = []
    env = {k: os.environ[k] for k in DEFAULT_ENV_PASSTHROUGH if k in os.environ}
    for config in sorted(configs, key=lambda c: c.name):
        for path in sorted(changed_paths):
            if not config.matches(path):
                continue
            argv = [arg.replace("{path}", path) for arg in config.command]
            try:
                proc = subprocess.run(
                    argv,
                    cwd=str(ws.root),
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=config.timeout_seconds,
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                findings.append(Finding(config.name, path, f"internal: analyzer crashed: {exc}"))
                continue
            output = ((proc.stdout or "") + (proc.stderr or "")).strip()
            if proc.returncode != 0 or output:
                message = output or f"exit code {proc.returncode}"
                findings.append(Finding(config.name, path, message))
    return findings


def format_analysis_feedback(findings: list[Finding]) -> str:
    """Render analyzer findings into the in-loop feedback message.

    Callers must not invoke this with zero findings; the clean-edit message
    is different.
    """
    if not findings:
        raise ValueError("format_analysis_feedback requires at least one finding")
    names = sorted({f.analyzer for f in findings})
    header = ANALYSIS_FEEDBACK_TEMPLATE.format(names=", ".join(names))
    body = []
    for name in names:
        for f in findings:
            if f.analyzer == name:
                body.append(f"[{f.analyzer}] {f.path}: {f.message}")
    return header + "\n\n" + "\n".join(body)


def make_static_feedback(ws: Workspace, configs: list[AnalyzerConfig]):
    """Build the per-edit feedback hook the toolbox expects."""

    def hook(changed_paths: list[str]) -> str | None:
        findings = run_static_analysis(ws, changed_paths, configs)
        if not findings:
            return None
        return format_analysis_feedback(findings)

    return hook


def oracle_check(ws: Workspace, task) -> tuple[bool, TestResult]:
    """Run the task's oracle once on the (patched) workspace.

    This is the solve-rate bit for an episode: the originally failing tests
    must pass now.
    """
    oracle = OracleConfig(argv=list(task.oracle_command))
    result = run_oracle(oracle, str(ws.root), getattr(task, "test_id", None))
    return result.passed, result


def revert_validator(
    agent_patch: PatchSet,
    blame_patch: PatchSet,
    threshold: float = DEFAULT_REVERT_THRESHOLD,
) -> tuple[bool, float]:
    """Fail patches that merely undo the blame change instead of fixing forward.

    Returns (passed, similarity); fails when similarity >= threshold.
    """
    score = patch_similarity(agent_patch, blame_patch)
    return score < threshold, score


@dataclass
class ValidationReport:
    breaking_test: str = GATE_SKIPPED
    revert_check: str = GATE_SKIPPED
    judge: str = GATE_SKIPPED
    ci: str = GATE_SKIPPED
    decision: str = DECISION_DISCARD
    reasons: list[str] = field(default_factory=list)
    revert_score: float | None = None

    def to_json(self) -> dict:
        return {
            "breaking_test": self.breaking_test,
            "revert_check": self.revert_check,
            "judge": self.judge,
            "ci": self.ci,
            "decision": self.decision,
            "reasons": self.reasons,
            "revert_score": self.revert_score,
        }


@dataclass
class PipelineConfig:
    judge_enabled: bool = False
    judge_fail_closed: bool = True
    ci_commands: list[list[str]] = field(default_factory=list)
    revert_threshold: float = DEFAULT_REVERT_THRESHOLD
    ci_timeout_seconds: float = 600.0
    # (patch_text, context) -> JudgeVerdict; wired to the judge module by the CLI
    judge_fn: Callable[[str, str], Any] | None = None


def run_ci_commands(ws: Workspace, commands: list[list[str]], timeout: float) -> tuple[bool, str]:
    env = {k: os.environ[k] for k in DEFAULT_ENV_PASSTHROUGH if k in os.environ}
    for argv in commands:
        try:
            proc = subprocess.run(
                argv, cwd=str(ws.root), env=env, capture_output=True, text=True, timeout=timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            return False, f"CI command {argv} failed to run: {exc}"
        if proc.returncode != 0:
            tail = ((proc.stdout or "") + (proc.stderr or ""))[-500:]
            return False, f"CI command {argv} exited {proc.returncode}: {tail}"
    return True, ""


def validate_pipeline(episode, task, ws: Workspace, config: PipelineConfig) -> ValidationReport:
    """Run the publish gates in order, short-circuiting on the first discard.

    Order: breaking-test oracle, revert check (free), judge (one model
    call), CI (builds and broader tests). A gate that is not configured is
    recorded as skipped and does not block publishing.
    """
    report = ValidationReport()

    passed, result = oracle_check(ws, task)
    report.breaking_test = GATE_PASS if passed else GATE_FAIL
    if not passed:
        report.reasons.append("breaking test still failing")
        return report

    if task.blame_patch is not None and episode.final_patch is not None:
        ok, score = revert_validator(
            episode.final_patch, task.blame_patch, config.revert_threshold
        )
        report.revert_check = GATE_PASS if ok else GATE_FAIL
        report.revert_score = score
        if not ok:
            report.reasons.append(
                f"patch reverts the blame change (similarity {score:.2f})"
            )
            return report

    if config.judge_enabled and config.judge_fn is not None:
        from .judge import UnparseableVerdictError

        patch_text = ""
        if episode.final_patch is not None and episode.final_patch.unified is not None:
            from .patchkit import render_unified_patch

            patch_text = render_unified_patch(episode.final_patch.unified)
        context = getattr(task, "title", "") or f"fix failing test {task.test_id}"
        try:
            verdict = config.judge_fn(patch_text, context)
        except UnparseableVerdictError:
            if config.judge_fail_closed:
                report.judge = JUDGE_REJECT
                report.reasons.append("judge verdict unparseable (fail-closed)")
                return report
            report.judge = GATE_SKIPPED
            report.reasons.append("judge verdict unparseable (ignored)")
        else:
            if verdict.klass == 1:
                report.judge = JUDGE_ACCEPT
            else:
                report.judge = JUDGE_REJECT
                report.reasons.append(f"judge rejected the patch: {verdict.reason}")
                return report

    if config.ci_commands:
        ok, detail = run_ci_commands(ws, config.ci_commands, config.ci_timeout_seconds)
        report.ci = GATE_PASS if ok else GATE_FAIL
        if not ok:
            report.reasons.append(detail)
            return report

    report.decision = DECISION_PUBLISH
    return report
