"""Data model and wire formats for meta plans, tool calls, trajectories and task records.

Plans travel as a JSON array of ``{"step", "operation", "instruction"}`` objects.
Parsing is lenient about framing (prose, markdown fences) but strict about the
content of the array itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Union

from .errors import DuplicateId, NoPlanFound, SchemaViolation, Unparseable

STEP_KEYS = ("step", "index", "step_index")
STATUSES = ("ok", "tool_error", "parse_error")
ANSWER_TYPES = ("mcq", "numerical", "boolean", "description")

# Tool name recorded for a reply the executor never turned into a call.
PARSE_ERROR_CALL = "<parse_error>"

ArgValue = Union[None, bool, int, float, str, list, dict]


def _reject_constant(token: str) -> Any:
    raise ValueError(f"non-finite number {token!r}")


_DECODER = json.JSONDecoder(parse_constant=_reject_constant)


def iter_json_values(text: str, opener: str) -> Iterator[Any]:
    """Yield every JSON value that decodes cleanly from an ``opener`` position."""
    pos = text.find(opener)
    while pos != -1:
        try:
            value, _ = _DECODER.raw_decode(text, pos)
        except ValueError:
            pass
        else:
            yield value
        pos = text.find(opener, pos + 1)


def check_arg_value(value: Any, path: str = "$") -> None:
    """Raise SchemaViolation unless ``value`` is a finite JSON-like ArgValue."""
    if value is None or isinstance(value, (bool, str, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise SchemaViolation(f"{path}: non-finite number")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            check_arg_value(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise SchemaViolation(f"{path}: map keys must be strings")
            check_arg_value(item, f"{path}.{key}")
        return
    raise SchemaViolation(f"{path}: unsupported value type {type(value).__name__}")


@dataclass(frozen=True)
class MetaStep:
    index: int
    operation: str
    instruction: str

    def __post_init__(self) -> None:
        if isinstance(self.index, bool) or not isinstance(self.index, int) or self.index < 1:
            raise SchemaViolation(f"step index must be a positive integer, got {self.index!r}")
        if not isinstance(self.operation, str) or not self.operation or any(c.isspace() for c in self.operation):
            raise SchemaViolation(f"step {self.index}: operation must be a non-empty identifier")
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise SchemaViolation(f"step {self.index}: instruction must be non-empty")


@dataclass(frozen=True)
class MetaPlan:
    steps: tuple[MetaStep, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise SchemaViolation("meta plan has no steps")
        for position, step in enumerate(self.steps, start=1):
            if step.index != position:
                raise SchemaViolation(
                    f"step indices must run 1..{len(self.steps)} in order; "
                    f"position {position} has index {step.index}"
                )

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def operations(self) -> list[str]:
        return [s.operation for s in self.steps]

    def to_list(self) -> list[dict[str, Any]]:
        return [
            {"step": s.index, "operation": s.operation, "instruction": s.instruction}
            for s in self.steps
        ]

    @classmethod
    def from_steps(cls, items: list[tuple[str, str]]) -> "MetaPlan":
        """Build a plan from ``(operation, instruction)`` pairs, numbering from 1."""
        return cls(tuple(MetaStep(i, op, ins) for i, (op, ins) in enumerate(items, start=1)))


def _step_from_object(obj: dict[str, Any], position: int) -> MetaStep:
    lowered: dict[str, Any] = {}
    for key, value in obj.items():
        lowered[str(key).strip().lower()] = value
    index = next((lowered[k] for k in STEP_KEYS if k in lowered), None)
    if index is None:
        raise SchemaViolation(f"plan item {position} is missing a step index key")
    if isinstance(index, str) and index.strip().isdigit():
        index = int(index.strip())
    for key in ("operation", "instruction"):
        if key not in lowered:
            raise SchemaViolation(f"plan item {position} is missing {key!r}")
    operation = lowered["operation"]
    instruction = lowered["instruction"]
    if not isinstance(operation, str) or not isinstance(instruction, str):
        raise SchemaViolation(f"plan item {position}: operation and instruction must be strings")
    return MetaStep(index, operation.strip(), instruction)


def parse_meta_plan(text: str) -> MetaPlan:
    """Extract the first JSON array of step objects from ``text``.

    Arrays that are not lists of objects (e.g. ``[1, 2]`` in prose) are skipped.
    Indices are checked, never rewritten.
    """
    if not text or not text.strip():
        raise NoPlanFound("empty planner output")
    for value in iter_json_values(text, "["):
        if isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
            steps = tuple(_step_from_object(obj, i) for i, obj in enumerate(value, start=1))
            return MetaPlan(steps)
    raise NoPlanFound("no array of step objects found in planner output")


def serialize_meta_plan(plan: MetaPlan) -> str:
    return json.dumps(plan.to_list(), ensure_ascii=False, indent=2)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise SchemaViolation("tool call name must be a non-empty string")
        if not isinstance(self.arguments, dict):
            raise SchemaViolation(f"arguments of {self.name!r} must be a map")
        check_arg_value(self.arguments, f"{self.name}.arguments")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class FinalAnswer:
    text: str


def _as_tool_call(obj: dict[str, Any]) -> ToolCall | FinalAnswer | None:
    has_call = "name" in obj and "arguments" in obj
    has_answer = "final_answer" in obj
    if has_call == has_answer:
        return None
    if has_answer:
        answer = obj["final_answer"]
        return FinalAnswer(answer if isinstance(answer, str) else json.dumps(answer))
    arguments = obj["arguments"]
    if isinstance(arguments, str):
        # Some endpoints ship arguments as an encoded JSON string.
        try:
            arguments = _DECODER.decode(arguments)
        except ValueError:
            return None
    if not isinstance(obj["name"], str) or not isinstance(arguments, dict):
        return None
    try:
        return ToolCall(obj["name"], arguments)
    except SchemaViolation:
        return None


def parse_tool_call(text: str) -> ToolCall | FinalAnswer:
    """Return the first tool call or final answer object found in ``text``."""
    if text:
        for value in iter_json_values(text, "{"):
            if isinstance(value, dict):
                parsed = _as_tool_call(value)
                if parsed is not None:
                    return parsed
    raise Unparseable("reply contains neither a tool call nor a final answer object")


@dataclass(frozen=True)
class TrajectoryStep:
    call: ToolCall
    observation: str | None = None
    status: str = "ok"

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise SchemaViolation(f"unknown step status {self.status!r}")
        if self.status == "ok" and self.observation is None:
            raise SchemaViolation(f"step calling {self.call.name!r} is ok but has no observation")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.call.name,
            "arguments": self.call.arguments,
            "observation": self.observation,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TrajectoryStep":
        if not isinstance(obj, dict):
            raise SchemaViolation("trajectory step must be an object")
        if "name" not in obj:
            raise SchemaViolation("trajectory step is missing 'name'")
        observation = obj.get("observation")
        if observation is not None and not isinstance(observation, str):
            observation = json.dumps(observation)
        return cls(
            ToolCall(obj["name"], obj.get("arguments") or {}),
            observation,
            obj.get("status", "ok"),
        )


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...] = ()
    final_answer: str | None = None
    truncated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps and self.final_answer is None and not self.truncated:
            raise SchemaViolation("trajectory without steps needs a final answer")

    @property
    def tool_names(self) -> list[str]:
        """Names of attempted calls; replies that never parsed are left out."""
        return [s.call.name for s in self.steps if s.status != "parse_error"]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
        }
        if self.truncated:
            out["truncated"] = True
        return out

    @classmethod
    def from_obj(cls, obj: Any) -> "Trajectory":
        """Accept either ``{"steps": [...], "final_answer": ...}`` or a bare step list."""
        if isinstance(obj, list):
            obj = {"steps": obj}
        if not isinstance(obj, dict):
            raise SchemaViolation("trajectory must be an object or a list of steps")
        answer = obj.get("final_answer")
        if answer is not None and not isinstance(answer, str):
            answer = json.dumps(answer)
        return cls(
            tuple(TrajectoryStep.from_dict(s) for s in obj.get("steps") or []),
            answer,
            bool(obj.get("truncated", False)),
        )


@dataclass(frozen=True)
class TaskRecord:
    id: str
    query: str
    answer_type: str
    gt_trajectory: Trajectory
    gt_answer: str
    image_ref: str | None = None
    gt_values: tuple[float, ...] | None = None
    kips: tuple[str, ...] | None = None
    initial_facts: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise SchemaViolation("record id must be a non-empty string")
        if self.answer_type not in ANSWER_TYPES:
            raise SchemaViolation(f"record {self.id}: unknown answer_type {self.answer_type!r}")
        if self.answer_type == "numerical" and not self.gt_values:
            raise SchemaViolation(f"record {self.id}: numerical answers need gt_values")
        if self.answer_type == "description" and not self.kips:
            raise SchemaViolation(f"record {self.id}: description answers need kips")
        if self.gt_values is not None:
            for v in self.gt_values:
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise SchemaViolation(f"record {self.id}: gt_values must be finite numbers")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TaskRecord":
        if not isinstance(obj, dict):
            raise SchemaViolation("record must be an object")
        missing = [k for k in ("id", "query", "answer_type", "gt_trajectory", "gt_answer") if k not in obj]
        if missing:
            raise SchemaViolation(f"record is missing {', '.join(missing)}")

        def _tuple(key: str) -> tuple | None:
            value = obj.get(key)
            if value is None:
                return None
            if not isinstance(value, list):
                raise SchemaViolation(f"{key} must be a list")
            return tuple(value)

        return cls(
            id=str(obj["id"]),
            query=str(obj["query"]),
            answer_type=obj["answer_type"],
            gt_trajectory=Trajectory.from_obj(obj["gt_trajectory"]),
            gt_answer=str(obj["gt_answer"]),
            image_ref=obj.get("image_ref"),
            gt_values=_tuple("gt_values"),
            kips=_tuple("kips"),
            initial_facts=_tuple("initial_facts") or (),
        )


def read_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield ``(line_number, object)`` for every non-blank line of a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, _DECODER.decode(line)
            except ValueError as exc:
                raise SchemaViolation(f"invalid JSON ({exc})", line=lineno) from None


def load_task_records(path: str | Path) -> list[TaskRecord]:
    records: list[TaskRecord] = []
    seen: set[str] = set()
    for lineno, obj in read_jsonl(path):
        try:
            record = TaskRecord.from_dict(obj)
        except SchemaViolation as exc:
            raise SchemaViolation(str(exc), line=lineno) from None
        if record.id in seen:
            raise DuplicateId(f"line {lineno}: duplicate record id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    return records


def trajectory_log_entry(
    task_id: str, plan: MetaPlan | None, trajectory: Trajectory, flags: list[str] | tuple[str, ...] = ()
) -> dict[str, Any]:
    entry: dict[str, Any] = {"id": task_id, "plan": plan.to_list() if plan else None}
    entry.update(trajectory.to_dict())
    if flags:
        entry["flags"] = list(flags)
    return entry


def load_trajectory_log(path: str | Path) -> dict[str, tuple[MetaPlan | None, Trajectory]]:
    """Read a trajectory log back into ``{task_id: (plan, trajectory)}``."""
    out: dict[str, tuple[MetaPlan | None, Trajectory]] = {}
    for lineno, obj in read_jsonl(path):
        try:
            plan = parse_meta_plan(json.dumps(obj["plan"])) if obj.get("plan") else None
            steps = obj.get("steps") or []
            answer = obj.get("final_answer")
            # Records aborted before execution log no steps and no answer.
            aborted = not steps and answer is None
            trajectory = Trajectory.from_obj(
                {"steps": steps, "final_answer": answer, "truncated": obj.get("truncated", False) or aborted}
            )
            out[str(obj["id"])] = (plan, trajectory)
        except (KeyError, NoPlanFound, SchemaViolation) as exc:
            raise SchemaViolation(str(exc), line=lineno) from None
    return out
