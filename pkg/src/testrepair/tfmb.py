"""Rule-based test-failure management: task filing, flakiness filtering,
bisection to a blame commit, publish-eligibility rules, and task lifecycle.

Tasks live in a directory-backed store, one JSON document per task holding
the current snapshot plus an append-only event log.
"""

from __future__ import annotations

import fnmatch
import json
import math
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .patchkit import PatchSet, render_unified_patch
from .toolbox import DEFAULT_FAILURE_MARKERS, OracleConfig, extract_stack_traces, run_oracle
from .workspace import Workspace

STATUS_OPEN = "open"
STATUS_AGENT_RUNNING = "agent_running"
STATUS_PUBLISHED = "published"
STATUS_LANDED = "landed"
STATUS_CLOSED = "closed"
STATUS_SKIPPED = "skipped"

ALL_STATUSES = (
    STATUS_OPEN,
    STATUS_AGENT_RUNNING,
    STATUS_PUBLISHED,
    STATUS_LANDED,
    STATUS_CLOSED,
    STATUS_SKIPPED,
)

EVENT_AGENT_START = "agent_start"
EVENT_PUBLISH = "publish"
EVENT_REJECT = "reject"
EVENT_SKIP = "skip"
EVENT_LAND = "land"
EVENT_CLOSE = "close"

ALL_EVENTS = (
    EVENT_AGENT_START,
    EVENT_PUBLISH,
    EVENT_REJECT,
    EVENT_SKIP,
    EVENT_LAND,
    EVENT_CLOSE,
)

# The only legal lifecycle moves; anything else is IllegalTransition.
TRANSITIONS: dict[tuple[str, str], str] = {
    (STATUS_OPEN, EVENT_AGENT_START): STATUS_AGENT_RUNNING,
    (STATUS_OPEN, EVENT_SKIP): STATUS_SKIPPED,
    (STATUS_AGENT_RUNNING, EVENT_PUBLISH): STATUS_PUBLISHED,
    (STATUS_AGENT_RUNNING, EVENT_REJECT): STATUS_OPEN,
    (STATUS_AGENT_RUNNING, EVENT_SKIP): STATUS_SKIPPED,
    (STATUS_PUBLISHED, EVENT_LAND): STATUS_LANDED,
    (STATUS_PUBLISHED, EVENT_REJECT): STATUS_OPEN,
    (STATUS_LANDED, EVENT_CLOSE): STATUS_CLOSED,
}

FLAKY = "flaky"
DETERMINISTIC_FAIL = "deterministic_fail"
NOW_PASSING = "now_passing"


class NoFailureError(Exception):
    """Task filing was attempted on output that shows no failure."""


class IllegalTransitionError(Exception):
    def __init__(self, status: str, event: str):
        super().__init__(f"event {event!r} is not legal in status {status!r}")
        self.status = status
        self.event = event


class MonotonicityViolatedError(Exception):
    """The commit history is not a clean pass->fail transition."""


@dataclass
class TestFailureTask:
    id: str
    test_id: str
    oracle_command: list[str]
    failure_output: str = ""
    stack_traces: list[str] = field(default_factory=list)
    blame_commit: str | None = None
    blame_patch: PatchSet | None = None
    owner: str = ""
    status: str = STATUS_OPEN
    attached_diffs: list[str] = field(default_factory=list)
    title: str = ""
    created_at: float = 0.0  # epoch seconds; 0 means unknown

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "test_id": self.test_id,
            "oracle_command": self.oracle_command,
            "failure_output": self.failure_output,
            "stack_traces": self.stack_traces,
            "blame_commit": self.blame_commit,
            "owner": self.owner,
            "status": self.status,
            "attached_diffs": self.attached_diffs,
            "title": self.title,
            "created_at": self.created_at,
        }
        if self.blame_patch is not None and self.blame_patch.unified is not None:
            out["blame_patch_text"] = render_unified_patch(self.blame_patch.unified)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TestFailureTask":
        blame_patch = None
        if data.get("blame_patch_text"):
            blame_patch = PatchSet.from_unified_text(data["blame_patch_text"])
        return cls(
            id=data["id"],
            test_id=data["test_id"],
            oracle_command=list(data["oracle_command"]),
            failure_output=data.get("failure_output", ""),
            stack_traces=list(data.get("stack_traces", [])),
            blame_commit=data.get("blame_commit"),
            blame_patch=blame_patch,
            owner=data.get("owner", ""),
            status=data.get("status", STATUS_OPEN),
            attached_diffs=list(data.get("attached_diffs", [])),
            title=data.get("title", ""),
            created_at=float(data.get("created_at", 0.0)),
        )


def detect_failure(test_id: str, oracle_command: list[str], run_output: str,
                   task_id: str | None = None, owner: str = "") -> TestFailureTask:
    """File a task from a failing run's output.

    Raises NoFailureError when the output carries no recognizable failure
    markers (tasks are only filed on failures).
    """
    patterns = [re.compile(m) for m in DEFAULT_FAILURE_MARKERS]
    has_failure = any(p.search(line) for line in run_output.split("\n") for p in patterns)
    if not has_failure:
        raise NoFailureError(f"no failure detected in output for {test_id}")
    traces = extract_stack_traces(run_output)
    return TestFailureTask(
        id=task_id or f"T{abs(hash((test_id, run_output))) % 10**8}",
        test_id=test_id,
        oracle_command=list(oracle_command),
        failure_output=run_output,
        stack_traces=traces,
        owner=owner,
        title=f"Test failure: {test_id}",
        created_at=time.time(),
    )


def flakiness_check(ws: Workspace, oracle: OracleConfig, n_runs: int = 3) -> str:
    """Rerun the oracle n times before the agent ever starts.

    All runs failing is the only signal the agent may act on; mixed results
    are flaky and all-passing means the failure is already gone.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be at least 2")
    outcomes = [run_oracle(oracle, str(ws.root)).passed for _ in range(n_runs)]
    if all(outcomes):
        return NOW_PASSING
    if not any(outcomes):
        return DETERMINISTIC_FAIL
    return FLAKY


@dataclass
class CommitSeq:
    """An ordered oldest-to-newest commit range with a checkout hook."""

    ids: list[str]
    checkout: Callable[[str], Workspace]

    def __len__(self) -> int:
        return len(self.ids)


def bisect(
    seq: CommitSeq,
    oracle: OracleConfig | Callable[[Workspace], bool],
    counter: list | None = None,
) -> str:
    """Binary-search the earliest failing commit.

    ``oracle`` may be an OracleConfig (run as a subprocess in each checkout)
    or a plain callable Workspace -> passed. The first commit must pass and
    the last must fail, verified up front; a violated precondition raises
    MonotonicityViolatedError. Total oracle invocations stay within
    ceil(log2(n)) + 2.
    """
    if isinstance(oracle, OracleConfig):
        def probe(ws: Workspace) -> bool:
            return run_oracle(oracle, str(ws.root)).passed
    else:
        probe = oracle

    def run_at(index: int) -> bool:
        if counter is not None:
            counter.append(seq.ids[index])
        return probe(seq.checkout(seq.ids[index]))

    if len(seq) < 2:
        raise MonotonicityViolatedError(
            "need at least a passing predecessor and a failing commit"
        )
    if not run_at(0):
        raise MonotonicityViolatedError(f"first commit {seq.ids[0]} already fails")
    if run_at(len(seq) - 1):
        raise MonotonicityViolatedError(f"last commit {seq.ids[-1]} still passes")
    lo, hi = 0, len(seq) - 1  # lo passes, hi fails
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if run_at(mid):
            lo = mid
        else:
            hi = mid
    return seq.ids[hi]


def max_bisect_probes(n: int) -> int:
    """The documented invocation bound for a sequence of n commits."""
    return math.ceil(math.log2(n)) + 2 if n > 1 else 2


@dataclass
class RulesConfig:
    path_blocklist: list[str] = field(default_factory=list)
    staleness_days: int | None = None


@dataclass
class RuleDecision:
    proceed: bool
    reason: str | None = None


def rules_engine(task: TestFailureTask, rules: RulesConfig,
                 now: float | None = None) -> RuleDecision:
    """Publish-eligibility rules, evaluated in a fixed order.

    A task with diffs already attached means a human fix is in flight; a
    blocklisted path is too risky to auto-patch; a stale task is likely
    already handled.
    """
    if task.attached_diffs:
        return RuleDecision(False, "human fix in flight")
    if rules.path_blocklist:
        touched = sorted(task.blame_patch.touched_paths) if task.blame_patch else []
        for path in touched:
            for pattern in rules.path_blocklist:
                if fnmatch.fnmatch(path, pattern):
                    return RuleDecision(False, "blocklisted path")
    if rules.staleness_days is not None and task.created_at:
        age_days = ((now if now is not None else time.time()) - task.created_at) / 86400.0
        if age_days > rules.staleness_days:
            return RuleDecision(False, "stale")
    return RuleDecision(True)


def advance_status(
    task: TestFailureTask,
    event: str,
    final_oracle_passed: bool | None = None,
) -> TestFailureTask:
    """Apply one lifecycle event, returning the updated task.

    ``land`` auto-closes when a final oracle run on the main workspace
    passes; ``close`` on its own requires that run to have passed.
    """
    if event not in ALL_EVENTS:
        raise IllegalTransitionError(task.status, event)
    key = (task.status, event)
    if key not in TRANSITIONS:
        raise IllegalTransitionError(task.status, event)
    if event == EVENT_CLOSE and final_oracle_passed is not True:
        raise IllegalTransitionError(
            task.status, "close (requires a passing final oracle run)"
        )
    new_status = TRANSITIONS[key]
    updated = replace(task, status=new_status)
    if event == EVENT_LAND and final_oracle_passed:
        updated = replace(updated, status=STATUS_CLOSED)
    return updated


class TaskStore:
    """One JSON document per task: current snapshot plus an event log.

    Status transitions are serialized per store instance; separate tasks do
    not contend beyond the file write itself.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, task_id: str) -> Path:
        return self.root / f"{task_id}.json"

    def save(self, task: TestFailureTask, event: str | None = None) -> None:
        with self._lock:
            path = self._path(task.id)
            if path.exists():
                doc = json.loads(path.read_text(encoding="utf-8"))
            else:
                doc = {"task": {}, "events": []}
            doc["task"] = task.to_json()
            if event is not None:
                doc["events"].append({"event": event, "status": task.status, "at": time.time()})
            tmp = path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
            tmp.replace(path)

    def get(self, task_id: str) -> TestFailureTask | None:
        path = self._path(task_id)
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        return TestFailureTask.from_json(doc["task"])

    def events(self, task_id: str) -> list[dict]:
        path = self._path(task_id)
        if not path.exists():
            return []
        return json.loads(path.read_text(encoding="utf-8"))["events"]

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))

    def advance(self, task_id: str, event: str,
                final_oracle_passed: bool | None = None) -> TestFailureTask:
        task = self.get(task_id)
        if task is None:
            raise KeyError(f"no such task: {task_id}")
        updated = advance_status(task, event, final_oracle_passed)
        self.save(updated, event=event)
        return updated


class DiffStore:
    """File-backed metadata for code changes: title, summary, files changed."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, diff_id: str, title: str, summary: str, files_changed: list[str]) -> None:
        doc = {"id": diff_id, "title": title, "summary": summary, "files_changed": files_changed}
        path = self.root / f"{diff_id}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
        tmp.replace(path)

    def get(self, diff_id: str) -> dict | None:
        path = self.root / f"{diff_id}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))
