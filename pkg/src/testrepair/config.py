"""Project configuration: one JSON document binding every module's knobs.

String values may reference environment variables as ``${VAR}`` (for
secrets like API tokens); interpolation happens at load time and a missing
variable is a configuration error.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .harness import Budget, FeedbackConfig
from .llm import Backend, HttpBackend, RecordingBackend, ReplayBackend
from .toolbox import (
    DEFAULT_ENV_PASSTHROUGH,
    DEFAULT_FAILURE_MARKERS,
    DEFAULT_OBSERVATION_CAP,
    DEFAULT_TEST_GLOBS,
)
from .validation import AnalyzerConfig

ENV_VAR_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

BACKEND_HTTP = "http"
BACKEND_REPLAY = "replay"


class ConfigError(ValueError):
    pass


def interpolate_env(value, env: dict | None = None):
    """Expand ${VAR} references in every string of a JSON-like structure."""
    env = env if env is not None else os.environ

    def expand(text: str) -> str:
        def sub(match):
            name = match.group(1)
            if name not in env:
                raise ConfigError(f"config references unset environment variable {name}")
            return env[name]

        return ENV_VAR_RE.sub(sub, text)

    if isinstance(value, str):
        return expand(value)
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    return value


@dataclass
class BackendConfig:
    kind: str = BACKEND_REPLAY
    url: str | None = None
    script_path: str | None = None
    model: str = "default"
    temperature: float = 0.8
    max_tokens: int = 2048

    def __post_init__(self):
        if self.kind not in (BACKEND_HTTP, BACKEND_REPLAY):
            raise ConfigError(f"backend kind must be http or replay, got {self.kind!r}")
        if self.kind == BACKEND_HTTP and not self.url:
            raise ConfigError("http backend requires a url")
        if self.kind == BACKEND_REPLAY and not self.script_path:
            raise ConfigError("replay backend requires a script_path")


@dataclass
class JudgeConfig:
    enabled: bool = False
    exemplar_path: str | None = None
    fail_closed: bool = True


@dataclass
class RulesSettings:
    blocklist: list[str] = field(default_factory=list)
    staleness_days: int | None = None
    test_flag: bool = False


@dataclass
class OracleDefaults:
    argv: list[str] = field(default_factory=list)
    timeout_seconds: float = 120.0
    failure_markers: list[str] = field(default_factory=lambda: list(DEFAULT_FAILURE_MARKERS))
    env_passthrough: list[str] = field(default_factory=lambda: list(DEFAULT_ENV_PASSTHROUGH))


@dataclass
class ProjectConfig:
    workspace_root: str = "."
    oracle: OracleDefaults = field(default_factory=OracleDefaults)
    analyzers: list[AnalyzerConfig] = field(default_factory=list)
    ci_commands: list[list[str]] = field(default_factory=list)
    backend: BackendConfig = field(default_factory=lambda: BackendConfig(script_path="replay.jsonl"))
    budget: Budget = field(default_factory=Budget)
    feedback: FeedbackConfig = field(default_factory=lambda: FeedbackConfig(True, True))
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    rules: RulesSettings = field(default_factory=RulesSettings)
    task_store: str = "tasks"
    diff_store: str = "diffs"
    observation_cap: int = DEFAULT_OBSERVATION_CAP
    search_cap: int = 50
    test_path_globs: list[str] = field(default_factory=lambda: list(DEFAULT_TEST_GLOBS))
    flakiness_runs: int = 3
    parallel: int = 1
    base_dir: Path = field(default_factory=Path)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)


def load_config(path: str | Path, env: dict | None = None) -> ProjectConfig:
    config_path = Path(path)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}")
    return config_from_dict(interpolate_env(raw, env), base_dir=config_path.parent)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ProjectConfig:
    try:
        backend = BackendConfig(**doc.get("backend", {"kind": BACKEND_REPLAY, "script_path": "replay.jsonl"}))
        analyzers = [
            AnalyzerConfig(
                name=a["name"],
                command=list(a["command"]),
                applies_to=list(a.get("applies_to", ["*"])),
                timeout_seconds=float(a.get("timeout_seconds", 60.0)),
            )
            for a in doc.get("analyzers", [])
        ]
        oracle_doc = doc.get("oracle", {})
        oracle = OracleDefaults(
            argv=list(oracle_doc.get("argv", [])),
            timeout_seconds=float(oracle_doc.get("timeout_seconds", 120.0)),
            failure_markers=list(oracle_doc.get("failure_markers", DEFAULT_FAILURE_MARKERS)),
            env_passthrough=list(oracle_doc.get("env_passthrough", DEFAULT_ENV_PASSTHROUGH)),
        )
        budget_doc = doc.get("budget", {})
        budget = Budget(
            max_iterations=int(budget_doc.get("max_iterations", 30)),
            wall_clock_seconds=float(budget_doc.get("wall_clock_seconds", 1800)),
        )
        feedback_doc = doc.get("feedback", {})
        feedback = FeedbackConfig(
            static_analysis=bool(feedback_doc.get("static_analysis", True)),
            test_execution=bool(feedback_doc.get("test_execution", True)),
        )
        judge_doc = doc.get("judge", {})
        judge = JudgeConfig(
            enabled=bool(judge_doc.get("enabled", False)),
            exemplar_path=judge_doc.get("exemplar_path"),
            fail_closed=bool(judge_doc.get("fail_closed", True)),
        )
        rules_doc = doc.get("rules", {})
        rules = RulesSettings(
            blocklist=list(rules_doc.get("blocklist", [])),
            staleness_days=rules_doc.get("staleness_days"),
            test_flag=bool(rules_doc.get("test_flag", False)),
        )
        return ProjectConfig(
            workspace_root=doc.get("workspace", {}).get("root", "."),
            oracle=oracle,
            analyzers=analyzers,
            ci_commands=[list(c) for c in doc.get("ci_commands", [])],
            backend=backend,
            budget=budget,
            feedback=feedback,
            judge=judge,
            rules=rules,
            task_store=doc.get("task_store", "tasks"),
            diff_store=doc.get("diff_store", "diffs"),
            observation_cap=int(doc.get("observation_cap", DEFAULT_OBSERVATION_CAP)),
            search_cap=int(doc.get("search_cap", 50)),
            test_path_globs=list(doc.get("test_path_globs", DEFAULT_TEST_GLOBS)),
            flakiness_runs=int(doc.get("flakiness_runs", 3)),
            parallel=int(doc.get("parallel", 1)),
            base_dir=base_dir or Path("."),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config document: {exc}")


def make_backend(
    config: ProjectConfig,
    replay_override: str | None = None,
    record_path: str | None = None,
) -> Backend:
    """Build the configured backend, honoring --replay/--record overrides."""
    if replay_override:
        backend: Backend = ReplayBackend.from_script(config.resolve(replay_override))
    elif config.backend.kind == BACKEND_REPLAY:
        assert config.backend.script_path is not None
        backend = ReplayBackend.from_script(config.resolve(config.backend.script_path))
    else:
        assert config.backend.url is not None
        backend = HttpBackend(url=config.backend.url, model=config.backend.model)
    if record_path:
        backend = RecordingBackend(backend, config.resolve(record_path))
    return backend
