"""Runtime: plan with the planner backend, validate and enrich against the library,
then drive the executor backend through a ReAct loop confined to the plan's tools."""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .backends import ChatBackend, ChatMessage
from .errors import (
    BackendError,
    DuplicateTool,
    NoPlanFound,
    PlanUnparseable,
    SchemaViolation,
    Unparseable,
    UnregisteredTool,
)
from .metrics import (
    DEFAULT_GAMMA,
    DEFAULT_LEXICON,
    JudgeBackend,
    PolarityLexicon,
    SampleReport,
    aggregate_reports,
    evaluate_trajectory,
)
from .plan_model import (
    PARSE_ERROR_CALL,
    FinalAnswer,
    MetaPlan,
    TaskRecord,
    ToolCall,
    Trajectory,
    TrajectoryStep,
    iter_json_values,
    parse_meta_plan,
    parse_tool_call,
    read_jsonl,
    trajectory_log_entry,
)
from .prompts import load_template, render
from .task_library import EnrichedPlan, TaskLibrary, enrich_plan, validate_plan

log = logging.getLogger(__name__)

PARAM_TYPES = ("number", "string", "boolean", "list")

ToolImpl = Callable[[dict[str, Any]], str]


@dataclass(frozen=True)
class ParamSpec:
    type: str
    required: bool = True

    def __post_init__(self) -> None:
        if self.type not in PARAM_TYPES:
            raise SchemaViolation(f"unknown parameter type {self.type!r}")

    def accepts(self, value: Any) -> bool:
        if self.type == "number":
            return isinstance(value, (int, float)) and not isinstance(value, bool)
        if self.type == "string":
            return isinstance(value, str)
        if self.type == "boolean":
            return isinstance(value, bool)
        return isinstance(value, list)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    parameters: Mapping[str, ParamSpec] = field(default_factory=dict)

    def check_arguments(self, arguments: Mapping[str, Any]) -> Optional[str]:
        """Return a problem description, or None when the arguments fit the schema."""
        for key, param in self.parameters.items():
            if key not in arguments:
                if param.required:
                    return f"missing required argument {key!r}"
                continue
            if not param.accepts(arguments[key]):
                return f"argument {key!r} should be of type {param.type}"
        return None

    def describe(self) -> str:
        params = ", ".join(
            f"{k}: {p.type}{'' if p.required else ' (optional)'}" for k, p in self.parameters.items()
        )
        return f"- {self.name}({params}): {self.description}"

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "ToolSpec":
        params = {}
        for key, p in (obj.get("parameters") or {}).items():
            if isinstance(p, str):
                p = {"type": p}
            params[key] = ParamSpec(p.get("type", "string"), bool(p.get("required", True)))
        return cls(obj["name"], obj.get("description", ""), params)


@dataclass
class _Entry:
    spec: ToolSpec
    impl: ToolImpl
    lock: Optional[threading.Lock]


class ToolRegistry:
    def __init__(self) -> None:
        self._tools: dict[str, _Entry] = {}
        self._pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix="tool")

    def register(self, spec: ToolSpec, impl: ToolImpl, exclusive: bool = False) -> "ToolRegistry":
        if spec.name in self._tools:
            raise DuplicateTool(f"tool {spec.name!r} is already registered")
        self._tools[spec.name] = _Entry(spec, impl, threading.Lock() if exclusive else None)
        return self

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def spec(self, name: str) -> ToolSpec:
        try:
            return self._tools[name].spec
        except KeyError:
            raise UnregisteredTool(f"tool {name!r} is not registered") from None

    def invoke(self, name: str, arguments: dict[str, Any], timeout: Optional[float] = None) -> tuple[str, str]:
        """Run a tool; returns ``(status, observation)`` and never raises for tool faults."""
        entry = self._tools.get(name)
        if entry is None:
            return "tool_error", f"tool {name!r} is not registered"
        problem = entry.spec.check_arguments(arguments)
        if problem:
            return "tool_error", f"{name}: {problem}"

        def _call() -> str:
            if entry.lock is None:
                return entry.impl(dict(arguments))
            with entry.lock:
                return entry.impl(dict(arguments))

        future = self._pool.submit(_call)
        try:
            result = future.result(timeout=timeout)
        except FutureTimeout:
            return "tool_error", f"{name}: timed out after {timeout}s"
        except Exception as exc:  # noqa: BLE001 - tool faults become observations
            return "tool_error", f"{name}: {type(exc).__name__}: {exc}"
        return "ok", result if isinstance(result, str) else json.dumps(result)


def stub_tool(observation: Optional[str] = None) -> ToolImpl:
    """A tool that returns ``observation``, or echoes its arguments when None."""

    def _impl(arguments: dict[str, Any]) -> str:
        if observation is not None:
            return observation
        return json.dumps(arguments, sort_keys=True)

    return _impl


def load_tool_registry(path: str | Path) -> ToolRegistry:
    """Stub registry from a JSONL file of tool specs with an optional canned ``observation``."""
    registry = ToolRegistry()
    for lineno, obj in read_jsonl(path):
        try:
            registry.register(ToolSpec.from_dict(obj), stub_tool(obj.get("observation")))
        except (KeyError, AttributeError, SchemaViolation) as exc:
            raise SchemaViolation(f"bad tool spec ({exc})", line=lineno) from None
    return registry


def stub_registry(library: TaskLibrary) -> ToolRegistry:
    """Schema-free echo stubs for every tool the library mentions."""
    registry = ToolRegistry()
    for name in library.all_tools:
        registry.register(ToolSpec(name, "stub"), stub_tool())
    return registry


@dataclass(frozen=True)
class RunLimits:
    max_iterations: int = 15
    max_parse_retries: int = 1
    max_calls_per_step: int = 4
    tool_timeout: float = 30.0

    def __post_init__(self) -> None:
        if min(self.max_iterations, self.max_calls_per_step) < 1 or self.max_parse_retries < 0 or self.tool_timeout <= 0:
            raise ValueError("run limits must be positive")


# -- planning ---------------------------------------------------------------------

def generate_plan(
    planner: ChatBackend,
    query: str,
    library: TaskLibrary,
    image_ref: Optional[str] = None,
    template: Optional[str] = None,
    key: Optional[str] = None,
) -> MetaPlan:
    """Ask the planner for a meta plan, with one corrective re-prompt on a bad reply."""
    template = template or load_template("planner")
    if "{operations}" not in template:
        raise ValueError("planner template must contain an {operations} placeholder")
    prompt = render(template, {"query": query, "operations": library.catalog()})
    messages = [ChatMessage("user", prompt, image_ref)]
    reply = planner.complete(messages, key=key)
    try:
        return parse_meta_plan(reply)
    except (NoPlanFound, SchemaViolation) as first:
        log.info("plan for %s unparseable (%s); re-prompting", key, first)
        messages += [
            ChatMessage("assistant", reply or "(empty reply)"),
            ChatMessage("user", f"Your reply could not be used as a plan: {first}. "
                                "Reply with only the JSON array of steps."),
        ]
        reply = planner.complete(messages, key=key)
        try:
            return parse_meta_plan(reply)
        except (NoPlanFound, SchemaViolation) as second:
            raise PlanUnparseable(f"planner output unusable twice: {first}; {second}") from second


# -- execution -------------------------------------------------------------------------

def _is_step_complete(reply: str) -> bool:
    for value in iter_json_values(reply, "{"):
        if isinstance(value, dict):
            return value.get("step_complete") is True and "name" not in value and "final_answer" not in value
    return False


def run_executor_loop(
    executor: ChatBackend,
    enriched: EnrichedPlan,
    registry: ToolRegistry,
    record: TaskRecord,
    limits: RunLimits = RunLimits(),
    template: Optional[str] = None,
) -> Trajectory:
    """ReAct loop over the enriched plan; only the plan's tools may be invoked."""
    allowed: dict[str, None] = {}
    for step in enriched.steps:
        allowed.update(dict.fromkeys(step.tools))
    for name in allowed:
        if name not in registry:
            raise UnregisteredTool(f"tool {name!r} used by the plan is not registered")
    template = template or load_template("executor")

    steps: list[TrajectoryStep] = []
    observations: list[str] = []
    position = calls_in_step = parse_failures = 0
    retry: Optional[tuple[str, str]] = None

    for _ in range(limits.max_iterations):
        current = enriched.steps[position] if position < len(enriched.steps) else None
        if current is not None:
            step_text = current.describe()
            tool_names = list(current.tools)
        else:
            step_text = "All plan steps are done. Give the final answer."
            tool_names = list(allowed)
        prompt = render(template, {
            "query": record.query,
            "step": step_text,
            "tools": "\n".join(registry.spec(n).describe() for n in tool_names),
            "observations": "\n".join(observations) or "(none yet)",
        })
        messages = [ChatMessage("user", prompt, record.image_ref)]
        if retry is not None:
            messages += [ChatMessage("assistant", retry[0] or "(empty reply)"), ChatMessage("user", retry[1])]
            retry = None
        reply = executor.complete(messages, key=record.id)

        if _is_step_complete(reply):
            if current is not None:
                position += 1
                calls_in_step = 0
            continue
        try:
            action = parse_tool_call(reply)
        except Unparseable as exc:
            parse_failures += 1
            if parse_failures <= limits.max_parse_retries:
                retry = (reply, f"{exc}. Reply with exactly one JSON object.")
                continue
            parse_failures = 0
            steps.append(TrajectoryStep(ToolCall(PARSE_ERROR_CALL), str(exc), "parse_error"))
            observations.append(f"[{len(steps)}] unparseable reply")
            continue
        parse_failures = 0
        if isinstance(action, FinalAnswer):
            return Trajectory(tuple(steps), action.text)

        if action.name in allowed:
            status, observation = registry.invoke(action.name, action.arguments, limits.tool_timeout)
        else:
            status, observation = "tool_error", f"tool {action.name!r} is not available for this plan"
        steps.append(TrajectoryStep(action, observation, status))
        observations.append(
            f"[{len(steps)}] {action.name}({json.dumps(action.arguments, ensure_ascii=False)}) -> {observation}"
        )
        calls_in_step += 1
        if current is not None and calls_in_step >= limits.max_calls_per_step:
            position += 1
            calls_in_step = 0

    return Trajectory(tuple(steps), None, truncated=True)


# -- benchmark -------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    gamma: float = DEFAULT_GAMMA
    limits: RunLimits = RunLimits()
    workers: int = 4
    replan: bool = False
    planner_template: Optional[str] = None
    executor_template: Optional[str] = None
    lexicon: PolarityLexicon = DEFAULT_LEXICON


@dataclass
class RecordOutcome:
    record: TaskRecord
    plan: Optional[MetaPlan]
    trajectory: Trajectory
    report: SampleReport

    @property
    def log_entry(self) -> dict[str, Any]:
        return trajectory_log_entry(self.record.id, self.plan, self.trajectory, self.report.flags)


@dataclass
class BenchResult:
    outcomes: list[RecordOutcome]
    aggregate: dict[str, Any]

    @property
    def reports(self) -> list[SampleReport]:
        return [o.report for o in self.outcomes]


_ABORTED = Trajectory((), None, truncated=True)


def _aborted(record: TaskRecord, plan: Optional[MetaPlan], flags: Sequence[str]) -> RecordOutcome:
    return RecordOutcome(record, plan, _ABORTED, SampleReport.zeroed(record.id, len(record.gt_trajectory.steps), flags))


def process_record(
    record: TaskRecord,
    library: TaskLibrary,
    registry: ToolRegistry,
    planner: Optional[ChatBackend],
    executor: ChatBackend,
    judge: Optional[JudgeBackend] = None,
    config: BenchConfig = BenchConfig(),
    plan: Optional[MetaPlan] = None,
) -> RecordOutcome:
    """Plan, validate, execute and score one record. Failures become flags, not exceptions."""
    try:
        if plan is None:
            if planner is None:
                return _aborted(record, None, ["no_plan"])
            plan = generate_plan(planner, record.query, library, record.image_ref, config.planner_template, record.id)
        report = validate_plan(plan, library, record.initial_facts)
        if not report.valid and config.replan and planner is not None:
            plan = generate_plan(planner, record.query, library, record.image_ref, config.planner_template, record.id)
            report = validate_plan(plan, library, record.initial_facts)
        if not report.valid:
            kinds = sorted({f.kind for f in report.failures})
            return _aborted(record, plan, ["invalid_plan", *kinds])
        enriched = enrich_plan(plan, library, record.initial_facts)
        trajectory = run_executor_loop(executor, enriched, registry, record, config.limits, config.executor_template)
        sample = evaluate_trajectory(trajectory, record.gt_trajectory, record, config.gamma, judge, config.lexicon)
        return RecordOutcome(record, plan, trajectory, sample)
    except PlanUnparseable:
        return _aborted(record, None, ["plan_unparseable"])
    except (BackendError, UnregisteredTool, SchemaViolation) as exc:
        log.warning("record %s failed: %s", record.id, exc)
        return _aborted(record, plan, [f"error:{type(exc).__name__}"])


def run_benchmark(
    records: Sequence[TaskRecord],
    library: TaskLibrary,
    registry: ToolRegistry,
    planner: Optional[ChatBackend],
    executor: ChatBackend,
    judge: Optional[JudgeBackend] = None,
    config: BenchConfig = BenchConfig(),
    out_dir: Optional[str | Path] = None,
    plans: Optional[Mapping[str, MetaPlan]] = None,
) -> BenchResult:
    """Run every record (in a bounded pool) and write ordered log and report files."""
    plans = plans or {}

    def _one(record: TaskRecord) -> RecordOutcome:
        return process_record(record, library, registry, planner, executor, judge, config, plans.get(record.id))

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        outcomes = list(pool.map(_one, records))
    result = BenchResult(outcomes, aggregate_reports([o.report for o in outcomes]))
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: BenchResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_path, report_path = out / "trajectories.jsonl", out / "report.jsonl"
    with open(traj_path, "w", encoding="utf-8") as fh:
        for o in result.outcomes:
            fh.write(json.dumps(o.log_entry, ensure_ascii=False) + "\n")
    write_report(result.reports, report_path)
    return traj_path, report_path


def write_report(reports: Sequence[SampleReport], path: str | Path) -> dict[str, Any]:
    """One line per sample plus a trailing aggregate line."""
    aggregate = aggregate_reports(reports)
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
        fh.write(json.dumps(aggregate, ensure_ascii=False) + "\n")
    return aggregate


def write_plan_cache(plans: Mapping[str, MetaPlan], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task_id, plan in plans.items():
            fh.write(json.dumps({"id": task_id, "plan": plan.to_list()}, ensure_ascii=False) + "\n")


def load_plan_cache(path: str | Path) -> dict[str, MetaPlan]:
    plans = {}
    for lineno, obj in read_jsonl(path):
        try:
            plans[str(obj["id"])] = parse_meta_plan(json.dumps(obj["plan"]))
        except (KeyError, TypeError, NoPlanFound, SchemaViolation) as exc:
            raise SchemaViolation(f"bad cached plan ({exc})", line=lineno) from None
    return plans

