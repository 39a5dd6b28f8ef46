"""JSON run configuration.

Example::

    {
      "planner":  {"mode": "http", "endpoint": "https://api.example.com/v1",
                   "model": "planner-model", "temperature": 0.7},
      "executor": {"mode": "mock", "script": "executor_script.json"},
      "judge":    {"mode": "rule"},
      "gamma": 0.9,
      "weights": [0.3333333333333333, 0.3333333333333333, 0.3333333333333333],
      "limits": {"max_iterations": 15, "max_parse_retries": 1, "max_calls_per_step": 4},
      "templates": {"planner": "prompts/planner.txt"},
      "tools": "tools.jsonl",
      "polarity": {"affirmative": ["yes", "true", "present"], "negative": ["no", "false", "absent"]}
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backends import BackendConfig, BackendSpec, load_scripts
from .errors import SchemaViolation
from .metrics import DEFAULT_GAMMA, DEFAULT_LEXICON, PolarityLexicon
from .orchestrator import RunLimits
from .preference import DEFAULT_ALPHA, DEFAULT_MARGIN, DEFAULT_MIN_RUNS, EQUAL_WEIGHTS

_HTTP_KEYS = {"endpoint", "model", "api_key_env", "temperature", "max_tokens", "timeout", "retries",
              "backoff", "max_backoff", "max_image_dim"}


@dataclass
class RunConfig:
    planner: Optional[BackendSpec] = None
    executor: Optional[BackendSpec] = None
    judge: Optional[BackendSpec] = None
    gamma: float = DEFAULT_GAMMA
    weights: tuple[float, float, float] = EQUAL_WEIGHTS
    alpha: float = DEFAULT_ALPHA
    min_runs: int = DEFAULT_MIN_RUNS
    margin: float = DEFAULT_MARGIN
    limits: RunLimits = field(default_factory=RunLimits)
    templates: dict[str, Path] = field(default_factory=dict)
    tools: Optional[Path] = None
    replan: bool = False
    audit_log: Optional[str] = "audit.jsonl"
    lexicon: PolarityLexicon = DEFAULT_LEXICON


def _backend(obj: Any, base: Path, name: str, seed: Optional[int]) -> Optional[BackendSpec]:
    if obj is None:
        return None
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{name}: backend entry must be an object")
    mode = obj.get("mode", "mock")
    if mode == "rule":
        return None
    if mode == "http":
        unknown = set(obj) - _HTTP_KEYS - {"mode", "seed"}
        if unknown:
            raise SchemaViolation(f"{name}: unknown http settings {sorted(unknown)}")
        settings = {k: v for k, v in obj.items() if k in _HTTP_KEYS}
        if "endpoint" not in settings or "model" not in settings:
            raise SchemaViolation(f"{name}: http backends need endpoint and model")
        return BackendSpec("http", BackendConfig(**settings, seed=obj.get("seed", seed)))
    if mode == "mock":
        scripts = dict(obj.get("scripts") or {})
        if "script" in obj:
            scripts.update(load_scripts(base / obj["script"]))
        return BackendSpec("mock", scripts={k: list(v) for k, v in scripts.items()}, fallback=obj.get("fallback"))
    raise SchemaViolation(f"{name}: unknown backend mode {mode!r}")


def _lexicon(obj: Any) -> PolarityLexicon:
    if obj is None:
        return DEFAULT_LEXICON
    if not isinstance(obj, dict) or set(obj) - {"affirmative", "negative"}:
        raise SchemaViolation("polarity must map affirmative/negative to word lists")
    words = {k: frozenset(str(w).lower() for w in obj.get(k, ())) for k in ("affirmative", "negative")}
    if words["affirmative"] & words["negative"]:
        raise SchemaViolation("polarity word lists overlap")
    return PolarityLexicon(words["affirmative"] or DEFAULT_LEXICON.affirmative,
                           words["negative"] or DEFAULT_LEXICON.negative)


def load_config(path: Optional[str | Path], seed: Optional[int] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    obj = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise SchemaViolation("config must be a JSON object")
    base = path.parent
    limits = RunLimits(**obj.get("limits", {}))
    weights = tuple(obj.get("weights", EQUAL_WEIGHTS))
    if len(weights) != 3:
        raise SchemaViolation("weights must have three entries")
    return RunConfig(
        planner=_backend(obj.get("planner"), base, "planner", seed),
        executor=_backend(obj.get("executor"), base, "executor", seed),
        judge=_backend(obj.get("judge"), base, "judge", seed),
        gamma=float(obj.get("gamma", DEFAULT_GAMMA)),
        weights=weights,  # type: ignore[arg-type]
        alpha=float(obj.get("alpha", DEFAULT_ALPHA)),
        min_runs=int(obj.get("min_runs", DEFAULT_MIN_RUNS)),
        margin=float(obj.get("margin", DEFAULT_MARGIN)),
        limits=limits,
        templates={k: base / v for k, v in (obj.get("templates") or {}).items()},
        tools=base / obj["tools"] if obj.get("tools") else None,
        replan=bool(obj.get("replan", False)),
        audit_log=obj.get("audit_log", "audit.jsonl"),
        lexicon=_lexicon(obj.get("polarity")),
    )
