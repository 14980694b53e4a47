"""Operator entry point: run the repair agent on a task, run benchmarks,
evaluate the judge, validate suites, apply patches, and bisect failures.

Exit codes are a stable contract: 0 success/published, 1 usage or config
error, 2 validation discard (or failed check), 3 skipped, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import benchkit, reporting
from .benchkit import (
    SuiteRunConfig,
    compute_production_metrics,
    load_patchgen_suite,
    load_suite,
    run_patchgen_suite,
    run_suite,
    validate_example,
)
from .config import (
    BACKEND_REPLAY,
    ConfigError,
    ProjectConfig,
    load_config,
    make_backend,
)
from .harness import FeedbackConfig, write_trajectory
from .judge import evaluate_judge, judge_patch, load_exemplars, load_labeled_dataset
from .llm import CompletionParams, ReplayBackend
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
    render_unified_patch,
)
from .tfmb import (
    CommitSeq,
    DETERMINISTIC_FAIL,
    DiffStore,
    EVENT_AGENT_START,
    EVENT_PUBLISH,
    EVENT_REJECT,
    FLAKY,
    MonotonicityViolatedError,
    RulesConfig,
    TaskStore,
    TestFailureTask,
    bisect,
    flakiness_check,
    rules_engine,
)
from .toolbox import OracleConfig, ToolEnv
from .validation import DECISION_PUBLISH, PipelineConfig, make_static_feedback, validate_pipeline
from .workspace import build_index, open_workspace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DISCARDED = 2
EXIT_SKIPPED = 3
EXIT_INTERNAL = 4

FORMAT_ALIASES = {
    "sr": FORMAT_SEARCH_REPLACE,
    "search_replace": FORMAT_SEARCH_REPLACE,
    "unified": FORMAT_UNIFIED,
    "line": FORMAT_LINE,
}

FEEDBACK_CHOICES = {
    "none": FeedbackConfig(False, False),
    "static": FeedbackConfig(True, False),
    "tests": FeedbackConfig(False, True),
    "static,tests": FeedbackConfig(True, True),
}

FEEDBACK_LABELS = {
    (False, False): "agent",
    (True, False): "agent+static",
    (False, True): "agent+tests",
    (True, True): "agent+static+tests",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse usage failures onto exit code 1
        raise UsageError(message)


def _completion_params(config: ProjectConfig) -> CompletionParams:
    return CompletionParams(
        temperature=config.backend.temperature, max_tokens=config.backend.max_tokens
    )


def _oracle_config(config: ProjectConfig, argv: list[str] | None = None) -> OracleConfig:
    command = argv if argv else config.oracle.argv
    if not command:
        raise UsageError("no oracle command configured (config.oracle.argv)")
    return OracleConfig(
        argv=list(command),
        timeout_seconds=config.oracle.timeout_seconds,
        failure_markers=tuple(config.oracle.failure_markers),
        env_passthrough=tuple(config.oracle.env_passthrough),
    )


def _load_task(config: ProjectConfig, ref: str) -> tuple[TestFailureTask, TaskStore | None]:
    candidate = config.resolve(ref)
    if candidate.is_file():
        task = TestFailureTask.from_json(json.loads(candidate.read_text(encoding="utf-8")))
        return task, None
    store = TaskStore(config.resolve(config.task_store))
    task = store.get(ref)
    if task is None:
        raise UsageError(f"task {ref!r} is neither a file nor a stored task id")
    return task, store


def _suite_backend_factory(config: ProjectConfig, replay_override: str | None):
    """Fresh backend per episode: a private replay cursor for scripted runs."""
    if replay_override or config.backend.kind == BACKEND_REPLAY:
        base = config.resolve(replay_override or config.backend.script_path)

        def factory(ex, trial=0):
            path = base / f"{ex.id}.jsonl" if base.is_dir() else base
            return ReplayBackend.from_script(path)

        return factory
    shared = make_backend(config)

    def factory(ex, trial=0):
        return shared

    return factory


def cmd_repair(args) -> int:
    config = load_config(args.config)
    task, store = _load_task(config, args.task)
    ws = open_workspace(config.resolve(config.workspace_root), writable=True)
    oracle = _oracle_config(config, task.oracle_command)
    out_dir = Path(args.out) / task.id
    out_dir.mkdir(parents=True, exist_ok=True)

    verdict = flakiness_check(ws, oracle, config.flakiness_runs)
    if verdict != DETERMINISTIC_FAIL:
        reason = "flaky" if verdict == FLAKY else "now passing"
        print(f"skipped: test is {reason}")
        if store is not None:
            store.advance(task.id, "skip")
        return EXIT_SKIPPED

    decision = rules_engine(
        task,
        RulesConfig(
            path_blocklist=config.rules.blocklist,
            staleness_days=config.rules.staleness_days,
        ),
    )
    if not decision.proceed:
        print(f"skipped: {decision.reason}")
        if store is not None:
            store.advance(task.id, "skip")
        return EXIT_SKIPPED

    if store is not None:
        task = store.advance(task.id, EVENT_AGENT_START)

    backend = make_backend(config, args.replay, args.record)
    params = _completion_params(config)
    index = build_index(ws)
    env = ToolEnv(
        workspace=ws,
        index=index,
        task=task,
        oracle=oracle,
        static_feedback=make_static_feedback(ws, config.analyzers),
        task_store=store,
        diff_store=DiffStore(config.resolve(config.diff_store)),
        observation_cap=config.observation_cap,
        search_cap=config.search_cap,
        allow_test_edits=config.rules.test_flag,
        test_path_globs=tuple(config.test_path_globs),
    )
    feedback = FEEDBACK_CHOICES[args.feedback] if args.feedback else config.feedback
    from .harness import run_episode

    episode = run_episode(task, env, feedback, config.budget, backend, params)
    write_trajectory(episode, out_dir / "trajectory.jsonl")

    exemplars = None
    judge_fn = None
    if config.judge.enabled:
        exemplars = load_exemplars(
            config.resolve(config.judge.exemplar_path) if config.judge.exemplar_path else None
        )
        judge_fn = lambda patch_text, context: judge_patch(
            backend, patch_text, context, exemplars, params
        )
    pipeline = PipelineConfig(
        judge_enabled=config.judge.enabled,
        judge_fail_closed=config.judge.fail_closed,
        ci_commands=config.ci_commands,
        judge_fn=judge_fn,
    )
    report = validate_pipeline(episode, task, ws, pipeline)
    reporting.atomic_write_json(out_dir / "validation.json", report.to_json())

    if report.decision == DECISION_PUBLISH:
        patch_text = ""
        if episode.final_patch is not None and episode.final_patch.unified is not None:
            patch_text = render_unified_patch(episode.final_patch.unified)
        reporting.atomic_write_text(out_dir / "patch.diff", patch_text)
        if store is not None:
            store.advance(task.id, EVENT_PUBLISH)
        print(f"published: artifacts in {out_dir}")
        return EXIT_OK
    if store is not None:
        store.advance(task.id, EVENT_REJECT)
    print(f"discarded: {'; '.join(report.reasons) or 'validation failed'}")
    return EXIT_DISCARDED


def cmd_bench(args) -> int:
    config = load_config(args.config)
    suite = load_suite(config.resolve(args.suite))
    if not suite:
        raise UsageError("suite contains no examples")
    if args.feedback == "all":
        settings = list(FEEDBACK_CHOICES.values())
    else:
        settings = [FEEDBACK_CHOICES[args.feedback]]
    factory = _suite_backend_factory(config, args.replay)
    rows = []
    all_records = {}
    for feedback in settings:
        label = FEEDBACK_LABELS[(feedback.static_analysis, feedback.test_execution)]
        run_config = SuiteRunConfig(
            feedback=feedback,
            trials=args.trials,
            budget=config.budget,
            params=_completion_params(config),
            analyzers=config.analyzers,
            oracle_timeout=config.oracle.timeout_seconds,
            observation_cap=config.observation_cap,
            label=label,
        )
        report = run_suite(suite, run_config, factory, parallel=args.parallel)
        rows.extend(report.rows)
        all_records.update(report.records)
    combined = benchkit.SuiteReport(rows=rows, records=all_records)
    paths = reporting.write_suite_report(combined, args.out)
    print(reporting.render_metrics_table(rows), end="")
    print(f"report written to {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_patchgen(args) -> int:
    config = load_config(args.config)
    suite = load_patchgen_suite(config.resolve(args.suite))
    if args.format == "all":
        formats = [FORMAT_SEARCH_REPLACE, FORMAT_UNIFIED, FORMAT_LINE]
    else:
        formats = [FORMAT_ALIASES[args.format]]
    factory = _suite_backend_factory(config, args.replay)
    records = []
    for fmt in formats:
        report = run_patchgen_suite(
            suite,
            fmt,
            lambda ex: factory(ex),
            params=_completion_params(config),
            oracle_timeout=config.oracle.timeout_seconds,
        )
        records.extend(report.records)
    combined = benchkit.PatchGenReport(records=records)
    paths = reporting.write_patchgen_report(combined, args.out)
    print(reporting.patchgen_table(combined), end="")
    print(f"report written to {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_judge_eval(args) -> int:
    config = load_config(args.config)
    dataset = load_labeled_dataset(config.resolve(args.dataset))
    exemplars = load_exemplars(
        config.resolve(config.judge.exemplar_path) if config.judge.exemplar_path else None
    )
    backend = make_backend(config, args.replay, args.record)
    evaluation = evaluate_judge(backend, dataset, exemplars, _completion_params(config))
    paths = reporting.write_judge_report(evaluation, args.out)
    print(reporting.judge_table(evaluation), end="")
    print(f"report written to {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_validate_suite(args) -> int:
    config = load_config(args.config) if args.config else None
    suite_path = config.resolve(args.suite) if config else Path(args.suite)
    suite = load_suite(suite_path)
    rejected = 0
    for ex in suite:
        outcome = validate_example(ex)
        if outcome.ok:
            print(f"{ex.id}: ok")
        else:
            rejected += 1
            print(f"{ex.id}: rejected ({outcome.reason})")
    print(f"{len(suite) - rejected}/{len(suite)} examples valid")
    return EXIT_OK if rejected == 0 else EXIT_DISCARDED


def cmd_apply(args) -> int:
    fmt = FORMAT_ALIASES[args.format]
    text = Path(args.patch_file).read_text(encoding="utf-8")
    ws = open_workspace(args.workspace, writable=True)
    try:
        if fmt == FORMAT_SEARCH_REPLACE:
            blocks = parse_search_replace(text)
            if not blocks:
                raise PatchError("no search/replace blocks in patch file")
            applied = apply_search_replace(ws, blocks)
        elif fmt == FORMAT_UNIFIED:
            applied = apply_unified(ws, parse_unified(text))
        else:
            applied = apply_line_diff(ws, parse_line_diff(text))
    except (PatchError, FileNotFoundError) as exc:
        print(f"apply failed: {exc}", file=sys.stderr)
        return EXIT_DISCARDED
    print(f"applied changes to {len(applied.files)} file(s)")
    return EXIT_OK


def cmd_bisect(args) -> int:
    config = load_config(args.config)
    ws_root = config.resolve(config.workspace_root)
    if args.commits_file:
        commits = json.loads(Path(args.commits_file).read_text(encoding="utf-8"))
    else:
        commits = [c for c in args.commits.split(",") if c]
    if len(commits) < 2:
        raise UsageError("need at least two commits (a passing base and a failing head)")
    checkout_template = args.checkout.split()
    oracle = _oracle_config(config)

    def checkout(commit_id: str):
        import subprocess

        argv = [arg.replace("{commit}", commit_id) for arg in checkout_template]
        proc = subprocess.run(argv, cwd=str(ws_root), capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"checkout of {commit_id} failed: {proc.stderr.strip()}")
        return open_workspace(ws_root, writable=False)

    try:
        blame = bisect(CommitSeq(ids=list(commits), checkout=checkout), oracle)
    except MonotonicityViolatedError as exc:
        print(f"bisect failed: {exc}", file=sys.stderr)
        return EXIT_DISCARDED
    print(blame)
    return EXIT_OK


def cmd_production_metrics(args) -> int:
    metrics = compute_production_metrics(args.published, args.reviewed, args.landed)
    print(reporting.production_table(metrics), end="")
    if args.out:
        reporting.atomic_write_json(Path(args.out) / "production.json", metrics.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="testrepair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repair", help="run the agent on one failing-test task")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, help="task id in the store, or a task JSON file")
    p.add_argument("--out", default="out")
    p.add_argument("--feedback", choices=sorted(FEEDBACK_CHOICES), default=None)
    p.add_argument("--replay", default=None, help="replay script overriding the backend")
    p.add_argument("--record", default=None, help="record completions to this JSONL file")
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("bench", help="run the full-loop benchmark suite")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--feedback", choices=sorted(FEEDBACK_CHOICES) + ["all"], default="static,tests")
    p.add_argument("--out", default="out/bench")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--replay", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("patchgen", help="run the patch-generation benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--format", choices=sorted(FORMAT_ALIASES) + ["all"], default="sr")
    p.add_argument("--out", default="out/patchgen")
    p.add_argument("--replay", default=None)
    p.set_defaults(func=cmd_patchgen)

    p = sub.add_parser("judge-eval", help="evaluate the judge on a labeled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="out/judge")
    p.add_argument("--replay", default=None)
    p.add_argument("--record", default=None)
    p.set_defaults(func=cmd_judge_eval)

    p = sub.add_parser("validate-suite", help="check every example's oracle contract")
    p.add_argument("--suite", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_validate_suite)

    p = sub.add_parser("apply", help="apply a standalone patch file to a workspace")
    p.add_argument("patch_file")
    p.add_argument("--format", choices=sorted(FORMAT_ALIASES), default="sr")
    p.add_argument("--workspace", default=".")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("bisect", help="binary-search the commit that broke the oracle")
    p.add_argument("--config", required=True)
    p.add_argument("--commits", default="", help="comma-separated ids, oldest to newest")
    p.add_argument("--commits-file", default=None, help="JSON list of ids, oldest to newest")
    p.add_argument("--checkout", required=True, help="command template with a {commit} placeholder")
    p.set_defaults(func=cmd_bisect)

    p = sub.add_parser("production-metrics", help="render review/land rates from raw counts")
    p.add_argument("published", type=int)
    p.add_argument("reviewed", type=int)
    p.add_argument("landed", type=int)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_production_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - safety net
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
