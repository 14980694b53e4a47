"""The agent's action surface: request grammar, dispatch, and observations.

An action is one line of the form ``tool key='value' key2="value"`` taken
from the end of a model turn; everything above it is the thought. Every tool
invocation produces exactly one Observation (tool failures become error
observations, never exceptions), and observation text is capped so a single
file read cannot blow the context budget.

Also home to the subprocess oracle runner shared by the triage, validation,
and benchmark modules.
"""

from __future__ import annotations

import fnmatch
import os
import re
import signal
import subprocess
from dataclasses import dataclass, field
from typing import Any, Callable

from .patchkit import PatchError, SearchReplaceBlock, apply_search_replace
from .workspace import CodeIndex, Workspace

DEFAULT_OBSERVATION_CAP = 8000
TRUNCATION_MARKER = "\n[truncated]"

ALL_TESTS_PASSED = "All tests passed"

DEFAULT_TEST_GLOBS = ("**/test_*", "**/*_test.*", "**/tests/**")

# Patterns that pick the "relevant text" out of raw test output. The list is
# per-project configurable; these defaults cover common Python/C++/Rust
# failure shapes with a raw-output fallback when nothing matches.
DEFAULT_FAILURE_MARKERS = (
    r"Traceback \(most recent call last\):",
    r"^\s*[\w.]*(?:Error|Exception|Failure)\b.*",
    r"^\s*assert\b.*",
    r"^FAILED\b.*",
    r"panicked at",
    r"Assertion .* failed",
)

TRACE_START_MARKERS = (
    r"Traceback \(most recent call last\):",
    r"^Backtrace:",
    r"^Stack trace\b.*",
)

DEFAULT_ENV_PASSTHROUGH = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONPATH")


class ActionParseError(Exception):
    pass


class NoActionFoundError(ActionParseError):
    pass


class UnknownToolError(ActionParseError):
    pass


class BadArgumentsError(ActionParseError):
    def __init__(self, tool: str, detail: str):
        super().__init__(f"{tool}: {detail}")
        self.tool = tool
        self.detail = detail


class EmptyPatchError(Exception):
    """The patcher produced no parseable blocks."""


@dataclass
class ActionRequest:
    tool: str
    args: dict[str, str] = field(default_factory=dict)


@dataclass
class Observation:
    text: str
    truncated: bool = False
    is_error: bool = False


@dataclass
class FailureDetails:
    test_name: str | None
    message: str
    stack_trace: str | None


@dataclass
class TestResult:
    passed: bool
    raw_output: str
    failure_details: FailureDetails | None = None

    def __post_init__(self):
        if self.passed and self.failure_details is not None:
            raise ValueError("a passing result cannot carry failure details")

    def render(self) -> str:
        if self.passed:
            return ALL_TESTS_PASSED
        if self.failure_details is None:
            return self.raw_output or "(test run produced no output)"
        parts = [self.failure_details.message]
        if self.failure_details.stack_trace:
            parts.append(self.failure_details.stack_trace)
        return "\n\n".join(parts)


@dataclass
class OracleConfig:
    """How to run and interpret the task's oracle tests."""

    argv: list[str]
    timeout_seconds: float = 300.0
    failure_markers: tuple[str, ...] = DEFAULT_FAILURE_MARKERS
    env_passthrough: tuple[str, ...] = DEFAULT_ENV_PASSTHROUGH


def extract_stack_traces(output: str, markers: tuple[str, ...] = TRACE_START_MARKERS) -> list[str]:
    """Split output into stack-trace blocks, one per trace-start marker."""
    patterns = [re.compile(m) for m in markers]
    lines = output.split("\n")
    starts = [i for i, line in enumerate(lines) if any(p.search(line) for p in patterns)]
    traces = []
    for idx, start in enumerate(starts):
        end = starts[idx + 1] if idx + 1 < len(starts) else len(lines)
        traces.append("\n".join(lines[start:end]).rstrip("\n"))
    return traces


def extract_failure_details(
    output: str,
    markers: tuple[str, ...] = DEFAULT_FAILURE_MARKERS,
    test_name: str | None = None,
) -> FailureDetails:
    """Pick the most relevant failure line and trace out of raw output."""
    patterns = [re.compile(m) for m in markers]
    matching = [line for line in output.split("\n") if any(p.search(line) for p in patterns)]
    if matching:
        # The last matching line is usually the exception/assertion itself
        # (traceback headers come first in most runners' output).
        message = matching[-1].strip()
    else:
        nonempty = [line for line in output.split("\n") if line.strip()]
        message = nonempty[-1].strip() if nonempty else "(no output captured)"
    traces = extract_stack_traces(output)
    return FailureDetails(
        test_name=test_name,
        message=message,
        stack_trace=traces[0] if traces else None,
    )


def run_oracle(oracle: OracleConfig, cwd: str, test_name: str | None = None) -> TestResult:
    """Execute the oracle command; a timeout is a failing result, not an error."""
    env = {k: os.environ[k] for k in oracle.env_passthrough if k in os.environ}
    try:
        proc = subprocess.run(
            oracle.argv,
            cwd=cwd,
            env=env,
            capture_output=True,
            text=True,
            timeout=oracle.timeout_seconds,
            start_new_session=True,
        )
    except subprocess.TimeoutExpired as exc:
        partial = (exc.stdout or b"")
        if isinstance(partial, bytes):
            partial = partial.decode("utf-8", errors="replace")
        note = f"Test run timed out after {oracle.timeout_seconds:g} seconds."
        output = (partial + "\n" + note).strip()
        return TestResult(
            passed=False,
            raw_output=output,
            failure_details=FailureDetails(test_name, note, None),
        )
    except FileNotFoundError as exc:
        note = f"Oracle command could not be started: {exc}"
        return TestResult(False, note, FailureDetails(test_name, note, None))
    output = (proc.stdout or "") + (proc.stderr or "")
    if proc.returncode == 0:
        return TestResult(passed=True, raw_output=output)
    return TestResult(
        passed=False,
        raw_output=output,
        failure_details=extract_failure_details(output, oracle.failure_markers, test_name),
    )


def kill_process_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


# ---------------------------------------------------------------------------
# Tool registry


@dataclass(frozen=True)
class ToolSpec:
    name: str
    args: tuple[str, ...]
    description: str

    @property
    def usage(self) -> str:
        if not self.args:
            return self.name
        return self.name + " " + " ".join(f"{a}=<str>" for a in self.args)


TOOL_REGISTRY: dict[str, ToolSpec] = {
    spec.name: spec
    for spec in [
        ToolSpec("exit", ("summary",), "End the session, reporting a summary of all actions performed."),
        ToolSpec("get_diff_details", ("diff_number",), "Show a code change's metadata: title, summary, and files changed."),
        ToolSpec("get_task_details", ("task_num",), "Show a task's metadata and its recorded failure output."),
        ToolSpec("read_directory", ("directory_path",), "List the entries of a directory."),
        ToolSpec("read_file", ("file_path",), "Print the contents of a file."),
        ToolSpec("find_file", ("file_name",), "Locate files by exact name anywhere in the checkout."),
        ToolSpec("go_to_line", ("file_path", "line"), "Show a numbered window of 50 lines around a target line."),
        ToolSpec("search_code", ("code_str",), "Search all indexed code for a string."),
        ToolSpec("search_code_in_file", ("code_str", "file_path"), "Search for a string inside one file."),
        ToolSpec("search_class", ("class_name",), "Find class declarations by exact name."),
        ToolSpec("search_method", ("method_name",), "Find method or function declarations by exact name."),
        ToolSpec("search_method_in_file", ("method_name", "file_path"), "Find method declarations by name inside one file."),
        ToolSpec("search_method_in_class", ("method_name", "class_name"), "Find method declarations by name inside a class."),
        ToolSpec("run_tests", (), "Run this task's failing tests and report the outcome."),
        ToolSpec("edit", ("file_path", "instructions"), "Change a file: give natural-language instructions and a patch is generated and applied."),
    ]
}

ACTION_LINE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(\s+.*)?$")
ARG_RE = re.compile(r"""\s*([A-Za-z_]\w*)=(?:'([^']*)'|"([^"]*)"|(\S+))""")


def parse_action(model_text: str) -> tuple[str, ActionRequest]:
    """Split a model turn into (thought, action).

    The action is the last non-empty line; values may be single- or
    double-quoted, or bare tokens without whitespace.
    """
    lines = model_text.split("\n")
    last_index = None
    for i in range(len(lines) - 1, -1, -1):
        if lines[i].strip():
            last_index = i
            break
    if last_index is None:
        raise NoActionFoundError("model turn is empty")
    action_line = lines[last_index].strip()
    thought = "\n".join(lines[:last_index]).strip()
    m = ACTION_LINE_RE.match(action_line)
    if not m:
        raise NoActionFoundError(f"last line is not an action: {action_line!r}")
    tool = m.group(1)
    rest = m.group(2) or ""
    args: dict[str, str] = {}
    pos = 0
    parse_ok = True
    while pos < len(rest):
        if not rest[pos:].strip():
            break
        am = ARG_RE.match(rest, pos)
        if not am:
            parse_ok = False
            break
        key = am.group(1)
        value = next(v for v in am.groups()[1:] if v is not None)
        args[key] = value
        pos = am.end()
    if not parse_ok:
        if tool in TOOL_REGISTRY:
            raise BadArgumentsError(tool, f"could not parse arguments: {rest.strip()!r}")
        raise NoActionFoundError(f"last line is not an action: {action_line!r}")
    if tool not in TOOL_REGISTRY:
        raise UnknownToolError(f"unknown tool: {tool}")
    spec = TOOL_REGISTRY[tool]
    missing = [a for a in spec.args if a not in args]
    unknown = [a for a in args if a not in spec.args]
    if missing:
        raise BadArgumentsError(tool, f"missing required argument {missing[0]}")
    if unknown:
        raise BadArgumentsError(tool, f"unknown argument {unknown[0]}")
    return thought, ActionRequest(tool=tool, args=args)


# ---------------------------------------------------------------------------
# Execution environment and dispatch


@dataclass
class ToolEnv:
    """Everything a tool may touch. Stores and callables are duck-typed so
    the harness can wire real components or test stubs interchangeably."""

    workspace: Workspace
    index: CodeIndex
    task: Any | None = None
    oracle: OracleConfig | None = None
    # (file_path, file_content, instructions) -> list of search/replace blocks
    patcher: Callable[[str, str, str], list[SearchReplaceBlock]] | None = None
    # (changed_paths) -> formatted feedback text, or None when clean
    static_feedback: Callable[[list[str]], str | None] | None = None
    task_store: Any | None = None
    diff_store: Any | None = None
    observation_cap: int = DEFAULT_OBSERVATION_CAP
    search_cap: int = 50
    allow_test_edits: bool = True
    test_path_globs: tuple[str, ...] = DEFAULT_TEST_GLOBS


def is_test_path(path: str, globs: tuple[str, ...] = DEFAULT_TEST_GLOBS) -> bool:
    for g in globs:
        if fnmatch.fnmatch(path, g):
            return True
        if g.startswith("**/") and fnmatch.fnmatch(path, g[3:]):
            return True
    return False


def make_observation(text: str, cap: int, is_error: bool = False) -> Observation:
    if len(text) <= cap:
        return Observation(text=text, truncated=False, is_error=is_error)
    keep = max(0, cap - len(TRUNCATION_MARKER))
    return Observation(text=text[:keep] + TRUNCATION_MARKER, truncated=True, is_error=is_error)


def execute_action(req: ActionRequest, env: ToolEnv) -> Observation:
    """Dispatch one action; every failure becomes an error observation."""
    if req.tool == "exit":
        raise ValueError("exit is handled by the harness, not by execute_action")
    handler = _HANDLERS.get(req.tool)
    if handler is None:
        return make_observation(f"unknown tool: {req.tool}", env.observation_cap, is_error=True)
    try:
        text = handler(req, env)
        return make_observation(text, env.observation_cap)
    except _TOOL_ERRORS as exc:
        return make_observation(str(exc), env.observation_cap, is_error=True)
    except Exception as exc:  # never let a tool kill the episode
        return make_observation(
            f"internal tool error in {req.tool}: {exc}", env.observation_cap, is_error=True
        )


def run_tests(env: ToolEnv) -> TestResult:
    if env.oracle is None:
        raise ValueError("no oracle command configured for this task")
    test_name = getattr(env.task, "test_id", None) if env.task is not None else None
    return run_oracle(env.oracle, str(env.workspace.root), test_name)


def _tool_read_file(req: ActionRequest, env: ToolEnv) -> str:
    return env.workspace.read_file(req.args["file_path"])


def _tool_read_directory(req: ActionRequest, env: ToolEnv) -> str:
    entries = env.workspace.read_directory(req.args["directory_path"])
    if not entries:
        return "(empty directory)"
    return "\n".join(name + "/" if kind == "dir" else name for name, kind in entries)


def _tool_find_file(req: ActionRequest, env: ToolEnv) -> str:
    hits = env.workspace.find_file(req.args["file_name"])
    if not hits:
        return f"No files named {req.args['file_name']!r}."
    return "\n".join(hits)


def _tool_go_to_line(req: ActionRequest, env: ToolEnv) -> str:
    try:
        line = int(req.args["line"])
    except ValueError:
        raise BadArgumentsError("go_to_line", f"line must be an integer: {req.args['line']!r}")
    return env.workspace.window_around_line(req.args["file_path"], line)


def _render_search(hits, truncated: bool, cap: int) -> str:
    if not hits:
        return "No matches."
    out = [f"{h.path}:{h.line}: {h.excerpt}" for h in hits]
    if truncated:
        out.append(f"[truncated: first {cap} matches shown]")
    return "\n".join(out)


def _tool_search_code(req: ActionRequest, env: ToolEnv) -> str:
    hits, truncated = env.index.search_code(req.args["code_str"], cap=env.search_cap)
    return _render_search(hits, truncated, env.search_cap)


def _tool_search_code_in_file(req: ActionRequest, env: ToolEnv) -> str:
    hits, truncated = env.index.search_code(
        req.args["code_str"], scope=req.args["file_path"], cap=env.search_cap
    )
    return _render_search(hits, truncated, env.search_cap)


def _render_symbols(entries) -> str:
    if not entries:
        return "No matches."
    out = []
    for s in entries:
        suffix = f" (in {s.enclosing_class})" if s.enclosing_class else ""
        out.append(f"{s.path}:{s.line}: {s.kind} {s.name}{suffix}")
    return "\n".join(out)


def _tool_search_class(req: ActionRequest, env: ToolEnv) -> str:
    return _render_symbols(env.index.search_symbol("class", req.args["class_name"]))


def _tool_search_method(req: ActionRequest, env: ToolEnv) -> str:
    return _render_symbols(env.index.search_symbol("method", req.args["method_name"]))


def _tool_search_method_in_file(req: ActionRequest, env: ToolEnv) -> str:
    return _render_symbols(
        env.index.search_symbol("method", req.args["method_name"], path=req.args["file_path"])
    )


def _tool_search_method_in_class(req: ActionRequest, env: ToolEnv) -> str:
    return _render_symbols(
        env.index.search_symbol(
            "method", req.args["method_name"], enclosing_class=req.args["class_name"]
        )
    )


def _tool_get_task_details(req: ActionRequest, env: ToolEnv) -> str:
    if env.task_store is None:
        raise ValueError("no task store configured")
    task = env.task_store.get(req.args["task_num"])
    if task is None:
        raise ValueError(f"unknown task number: {req.args['task_num']}")
    parts = [f"Task {task.id}: {task.title}" if task.title else f"Task {task.id}",
             f"Failing test: {task.test_id}",
             f"Status: {task.status}"]
    for i, trace in enumerate(task.stack_traces, start=1):
        parts.append(f"Stack trace {i}:\n{trace}")
    if not task.stack_traces and task.failure_output:
        parts.append(task.failure_output)
    return "\n\n".join(parts)


def _tool_get_diff_details(req: ActionRequest, env: ToolEnv) -> str:
    if env.diff_store is None:
        raise ValueError("no diff store configured")
    diff = env.diff_store.get(req.args["diff_number"])
    if diff is None:
        raise ValueError(f"unknown diff number: {req.args['diff_number']}")
    files = "\n".join(diff.get("files_changed", []))
    return (
        f"Diff {diff['id']}: {diff.get('title', '')}\n\n"
        f"{diff.get('summary', '')}\n\nFiles changed:\n{files}"
    )


def _tool_run_tests(req: ActionRequest, env: ToolEnv) -> str:
    return run_tests(env).render()


def _tool_edit(req: ActionRequest, env: ToolEnv) -> str:
    path = req.args["file_path"]
    instructions = req.args["instructions"]
    if env.patcher is None:
        raise ValueError("no patcher configured")
    if not env.allow_test_edits and is_test_path(path, env.test_path_globs):
        raise ValueError(f"editing test files is disabled for this task: {path}")
    content = env.workspace.read_file(path)
    blocks = env.patcher(path, content, instructions)
    for block in blocks:
        if not env.allow_test_edits and is_test_path(block.path, env.test_path_globs):
            raise ValueError(f"editing test files is disabled for this task: {block.path}")
    applied = apply_search_replace(env.workspace, blocks)
    if env.static_feedback is not None:
        feedback = env.static_feedback(sorted(applied.files))
        if feedback:
            return feedback
    return "The edit was successful."


_HANDLERS: dict[str, Callable[[ActionRequest, ToolEnv], str]] = {
    "get_diff_details": _tool_get_diff_details,
    "get_task_details": _tool_get_task_details,
    "read_directory": _tool_read_directory,
    "read_file": _tool_read_file,
    "find_file": _tool_find_file,
    "go_to_line": _tool_go_to_line,
    "search_code": _tool_search_code,
    "search_code_in_file": _tool_search_code_in_file,
    "search_class": _tool_search_class,
    "search_method": _tool_search_method,
    "search_method_in_file": _tool_search_method_in_file,
    "search_method_in_class": _tool_search_method_in_class,
    "run_tests": _tool_run_tests,
    "edit": _tool_edit,
}

# Errors that carry a user-presentable message for the model to react to.
_TOOL_ERRORS = (
    FileNotFoundError,
    NotADirectoryError,
    PermissionError,
    ValueError,  # includes workspace path/line errors and store lookups
    PatchError,
    EmptyPatchError,
    BadArgumentsError,
)
