"""The ReAct loop: prompt assembly, thought/action/observation iteration
under budget limits, trajectory logging, and the patch-generating sub-agent.

The orchestrating agent's persistent memory is the message list itself: each
step appends the assistant turn and the observation, so the context at step
t+1 strictly extends the context at step t. The patcher is a separate
prompt with no tool access; it sees one file, an instruction, and a
summarized history of the orchestrator's trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import llm
from .llm import Backend, ChatMessage, CompletionParams
from .patchkit import (
    PatchSet,
    SearchReplaceBlock,
    contains_block_markers,
    parse_search_replace,
    render_unified,
)
from .toolbox import (
    ActionParseError,
    ActionRequest,
    EmptyPatchError,
    Observation,
    TOOL_REGISTRY,
    ToolEnv,
    execute_action,
    extract_failure_details,
    make_observation,
    parse_action,
    run_tests,
)

TERMINAL_EXITED = "exited"
TERMINAL_ITERATION_BUDGET = "iteration_budget"
TERMINAL_TIMEOUT = "timeout"
TERMINAL_FATAL_ERROR = "fatal_error"

SYSTEM_PROMPT = """You are an autonomous coding agent, here to provide solutions for coding issues.

You have been designed to assist with a wide range of programming tasks, from code editing and debugging to testing.

You have access to a variety of tools and commands that you can use to help you solve problems efficiently.

INSTRUCTIONS:

You are going to solve an issue on your own. You can use any command listed below to complete your task.

Remember, YOU CAN ONLY ENTER ONE COMMAND AT A TIME. You should always wait for feedback after every command.

When you're satisfied with all of the changes you've made, you can indicate that you are done by running the "exit" command.

Try different commands: If you run a command and it doesn't work, try running a different command. A command that did not work once will not work the second time unless you modify it."""

TASK_HEADER = "You are currently trying to complete this task:"
RUN_OUTPUT_HEADER = "Run Output from Test Failure:"
NO_OUTPUT_PLACEHOLDER = "(no output captured)"

TEST_FEEDBACK_HEADER = "Test execution feedback:"

PATCHER_PROMPT_HEADER = """You are a proficient programmer assisting a colleague with code updates.
You'll be given the code and a description of the required changes.
Contextual information will be provided to support your task.
Consider the most effective methods to edit the code. You must respond in the format shown below."""

PATCHER_FORMAT_RULES = """Format your changes as diffs using SEARCH/REPLACE block rules.
- Start each block with the file path on its own line, then <<<<<<< SEARCH, the exact lines to find, =======, the replacement lines, and >>>>>>> REPLACE.
- Every SEARCH section must match the current file content exactly, character for character, including whitespace and comments.
- Each SEARCH section must match exactly one place in the file; include enough surrounding lines to make it unique.
- Keep blocks small: include the changing lines plus only the context needed for uniqueness.
- Use several small blocks rather than one large one when editing multiple places."""

PATCHER_EXAMPLE = """Example response:

I will update the greeting.

app/hello.py
<<<<<<< SEARCH
def greet():
    return "hi"
=======
def greet():
    return "hello"
>>>>>>> REPLACE"""


def build_system_prompt(registry: dict | None = None) -> str:
    """System prompt plus the generated tool catalog (name, description, usage)."""
    tools = registry if registry is not None else TOOL_REGISTRY
    lines = [SYSTEM_PROMPT, "", "COMMANDS:", ""]
    for name in tools:
        spec = tools[name]
        lines.append(f"{spec.name}: {spec.description}")
        lines.append(f"    usage: {spec.usage}")
    return "\n".join(lines)


def build_task_instructions(task) -> str:
    """Render the task-specific instructions: test name, failure, backtraces."""
    parts = [TASK_HEADER, "", RUN_OUTPUT_HEADER, ""]
    traces = list(task.stack_traces)
    if not traces:
        parts.extend(["Stack trace 1:", "", NO_OUTPUT_PLACEHOLDER])
    else:
        total = len(traces)
        for i, trace in enumerate(traces, start=1):
            label = f"Stack trace {i}:" if total == 1 else f"Stack trace {i}/{total}:"
            details = extract_failure_details(trace, test_name=task.test_id)
            parts.extend(
                [
                    label,
                    "",
                    "There was 1 failure:",
                    "",
                    f"1) {task.test_id}: {details.message}",
                    "",
                    "Backtrace:",
                    "",
                    trace,
                    "",
                ]
            )
    return "\n".join(parts).rstrip("\n") + "\n"


@dataclass
class TrajectoryStep:
    t: int
    thought: str
    action: ActionRequest
    observation: Observation


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)
    exit_summary: str | None = None
    terminal_reason: str = TERMINAL_ITERATION_BUDGET

    def last_test_result_text(self) -> str | None:
        for step in reversed(self.steps):
            if step.action.tool == "run_tests" and not step.observation.is_error:
                return step.observation.text
            if step.action.tool == "edit" and TEST_FEEDBACK_HEADER in step.observation.text:
                return step.observation.text.split(TEST_FEEDBACK_HEADER, 1)[1].strip()
        return None


@dataclass
class Budget:
    max_iterations: int = 30
    wall_clock_seconds: float = 1800.0

    def __post_init__(self):
        if self.max_iterations < 1 or self.wall_clock_seconds <= 0:
            raise ValueError("budget values must be positive")


@dataclass
class FeedbackConfig:
    static_analysis: bool = False
    test_execution: bool = False


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    final_patch: PatchSet | None
    patch_generated: bool
    error_occurred: bool
    iteration_count: int

    @property
    def terminal_reason(self) -> str:
        return self.trajectory.terminal_reason


def summarize_trajectory(traj: Trajectory, task=None, limit: int = 2000) -> str:
    """Deterministic extractive summary fed to the patcher sub-agent."""
    lines = []
    if task is not None:
        lines.append(f"Task: fix failing test {task.test_id}")
    for step in traj.steps:
        spec = TOOL_REGISTRY.get(step.action.tool)
        key_arg = ""
        if spec is not None and spec.args:
            key_arg = step.action.args.get(spec.args[0], "")
        elif step.action.args:
            key_arg = next(iter(step.action.args.values()))
        suffix = f" {key_arg}" if key_arg else ""
        lines.append(f"- {step.action.tool}{suffix}")
    last_test = traj.last_test_result_text()
    if last_test is not None:
        first_line = last_test.split("\n", 1)[0]
        lines.append(f"Last test result: {first_line}")
    text = "\n".join(lines)
    return text[:limit]


def build_patcher_prompt(
    file_path: str, file_content: str, instruction: str, context_summary: str
) -> list[ChatMessage]:
    sections = [PATCHER_EXAMPLE]
    if context_summary:
        sections.append(f"Context from the session so far:\n{context_summary}")
    sections.append(f"[code]\n\n{file_path}\n\n{file_content}")
    sections.append(f"[instruction]\n\n{instruction}")
    sections.append(PATCHER_FORMAT_RULES)
    return [llm.system(PATCHER_PROMPT_HEADER), llm.user("\n\n".join(sections))]


def generate_patch(
    backend: Backend,
    file_path: str,
    file_content: str,
    instruction: str,
    context_summary: str = "",
    params: CompletionParams | None = None,
    on_patch_text=None,
) -> list[SearchReplaceBlock]:
    """Ask the patcher sub-agent for search/replace blocks.

    ``on_patch_text`` is called whenever the response contains block-like
    text, parseable or not; this is what the patch-generation metric counts.
    Raises EmptyPatchError when nothing parseable came back.
    """
    messages = build_patcher_prompt(file_path, file_content, instruction, context_summary)
    response = llm.complete(backend, messages, params)
    if on_patch_text is not None and contains_block_markers(response):
        on_patch_text()
    blocks = parse_search_replace(response)  # MalformedBlockError propagates
    if not blocks:
        raise EmptyPatchError("patcher response contained no search/replace blocks")
    return blocks


def _attempted_tool(model_text: str) -> str:
    for line in reversed(model_text.strip().split("\n")):
        if line.strip():
            return line.strip().split()[0][:40]
    return "(empty)"


def run_episode(
    task,
    env: ToolEnv,
    feedback: FeedbackConfig,
    budget: Budget,
    backend: Backend,
    params: CompletionParams | None = None,
) -> EpisodeResult:
    """Drive the thought/action/observation loop until exit or budget.

    The feedback ablation switches are enforced here: static-analysis text
    only reaches observations when feedback.static_analysis is set, and each
    successful edit is followed by an automatic oracle run only when
    feedback.test_execution is set. When env.patcher is unset, the standard
    patcher sub-agent is wired against the same backend.
    """
    env = dataclasses.replace(env)  # never mutate the caller's env
    if not feedback.static_analysis:
        env.static_feedback = None

    traj = Trajectory()
    patch_seen = {"value": False}

    def note_patch_text():
        patch_seen["value"] = True

    if env.patcher is None:
        def default_patcher(path: str, content: str, instructions: str):
            return generate_patch(
                backend,
                path,
                content,
                instructions,
                context_summary=summarize_trajectory(traj, task),
                params=params,
                on_patch_text=note_patch_text,
            )

        env.patcher = default_patcher
    else:
        inner = env.patcher

        def tracking_patcher(path: str, content: str, instructions: str):
            blocks = inner(path, content, instructions)
            note_patch_text()
            return blocks

        env.patcher = tracking_patcher

    snapshot = env.workspace.text_file_map()
    messages = [llm.system(build_system_prompt()), llm.user(build_task_instructions(task))]
    error_occurred = False
    started = time.monotonic()

    for t in range(1, budget.max_iterations + 1):
        if time.monotonic() - started > budget.wall_clock_seconds:
            traj.terminal_reason = TERMINAL_TIMEOUT
            break
        try:
            model_text = llm.complete(backend, messages, params)
        except llm.LLMError:
            traj.terminal_reason = TERMINAL_FATAL_ERROR
            error_occurred = True
            break
        messages.append(llm.assistant(model_text))
        try:
            thought, action = parse_action(model_text)
        except ActionParseError as exc:
            action = ActionRequest(tool=_attempted_tool(model_text), args={})
            obs = make_observation(str(exc), env.observation_cap, is_error=True)
            traj.steps.append(TrajectoryStep(t, model_text.strip(), action, obs))
            messages.append(llm.user(obs.text))
            continue
        if action.tool == "exit":
            obs = Observation(text="Session ended.", truncated=False, is_error=False)
            traj.steps.append(TrajectoryStep(t, thought, action, obs))
            traj.exit_summary = action.args.get("summary", "")
            traj.terminal_reason = TERMINAL_EXITED
            break
        obs = execute_action(action, env)
        if action.tool == "edit" and not obs.is_error and feedback.test_execution:
            result = run_tests(env)
            combined = f"{obs.text}\n\n{TEST_FEEDBACK_HEADER}\n{result.render()}"
            obs = make_observation(combined, env.observation_cap)
        traj.steps.append(TrajectoryStep(t, thought, action, obs))
        messages.append(llm.user(obs.text))
    else:
        traj.terminal_reason = TERMINAL_ITERATION_BUDGET

    after = env.workspace.text_file_map()
    final_patch = None
    diff_text = render_unified(snapshot, after)
    if diff_text:
        final_patch = PatchSet.from_unified_text(diff_text)
    return EpisodeResult(
        trajectory=traj,
        final_patch=final_patch,
        patch_generated=patch_seen["value"],
        error_occurred=error_occurred,
        iteration_count=len(traj.steps),
    )


def trajectory_to_jsonl(result: EpisodeResult) -> str:
    """Serialize a trajectory: one JSON object per step, then the terminal record."""
    lines = []
    for step in result.trajectory.steps:
        lines.append(
            json.dumps(
                {
                    "t": step.t,
                    "thought": step.thought,
                    "action": {"tool": step.action.tool, "args": step.action.args},
                    "observation": {
                        "text": step.observation.text,
                        "truncated": step.observation.truncated,
                        "is_error": step.observation.is_error,
                    },
                }
            )
        )
    lines.append(
        json.dumps(
            {
                "terminal_reason": result.trajectory.terminal_reason,
                "exit_summary": result.trajectory.exit_summary,
                "iteration_count": result.iteration_count,
            }
        )
    )
    return "\n".join(lines) + "\n"


def write_trajectory(result: EpisodeResult, path: str | Path) -> None:
    target = Path(path)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(trajectory_to_jsonl(result), encoding="utf-8")
    tmp.replace(target)
