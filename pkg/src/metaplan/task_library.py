"""Operation library: IOPE definitions, plan validation, enrichment and tool pruning.

A library file is JSONL. Each line is either one operation definition::

    {"operation": "detect_objects", "description": "...", "inputs": ["rs_image"],
     "outputs": ["boxes"], "preconditions": ["rs_image"], "effects": ["detections"],
     "tools": ["ObjectDetection"]}

or a header ``{"base_facts": [...]}`` overriding the facts every plan starts with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from .errors import DuplicateOperation, NotValidated, SchemaViolation, UnknownOperation
from .plan_model import MetaPlan, MetaStep, read_jsonl

DEFAULT_BASE_FACTS = frozenset({"user_query", "rs_image"})


def _check_tokens(tokens: Iterable[str], what: str) -> frozenset[str]:
    out = set()
    for token in tokens:
        if not isinstance(token, str) or not token or any(c.isspace() for c in token):
            raise SchemaViolation(f"{what}: fact tokens must be non-empty and whitespace-free, got {token!r}")
        out.add(token)
    return frozenset(out)


@dataclass(frozen=True)
class MetaTaskDef:
    operation: str
    description: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    preconditions: frozenset[str]
    effects: frozenset[str]
    tools: tuple[str, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.operation, str) or not self.operation or any(c.isspace() for c in self.operation):
            raise SchemaViolation(f"invalid operation name {self.operation!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "preconditions", _check_tokens(self.preconditions, self.operation))
        object.__setattr__(self, "effects", _check_tokens(self.effects, self.operation))
        object.__setattr__(self, "tools", tuple(self.tools))
        if not self.tools:
            raise SchemaViolation(f"operation {self.operation!r} maps to no tools")
        if any(not isinstance(t, str) or not t for t in self.tools):
            raise SchemaViolation(f"operation {self.operation!r} has an empty tool name")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "MetaTaskDef":
        if "operation" not in obj:
            raise SchemaViolation("definition is missing 'operation'")
        for key in ("inputs", "outputs", "preconditions", "effects", "tools"):
            if not isinstance(obj.get(key, []), list):
                raise SchemaViolation(f"{obj['operation']}: {key} must be a list")
        return cls(
            operation=obj["operation"],
            description=str(obj.get("description", "")),
            inputs=tuple(obj.get("inputs", [])),
            outputs=tuple(obj.get("outputs", [])),
            preconditions=frozenset(obj.get("preconditions", [])),
            effects=frozenset(obj.get("effects", [])),
            tools=tuple(obj.get("tools", [])),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "operation": self.operation,
            "description": self.description,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "preconditions": sorted(self.preconditions),
            "effects": sorted(self.effects),
            "tools": list(self.tools),
        }


@dataclass(frozen=True)
class TaskLibrary:
    defs: dict[str, MetaTaskDef]
    base_facts: frozenset[str] = DEFAULT_BASE_FACTS

    def __post_init__(self) -> None:
        if not self.defs:
            raise SchemaViolation("library defines no operations")
        object.__setattr__(self, "base_facts", _check_tokens(self.base_facts, "base_facts"))

    @classmethod
    def from_defs(cls, defs: Iterable[MetaTaskDef], base_facts: Iterable[str] = DEFAULT_BASE_FACTS) -> "TaskLibrary":
        table: dict[str, MetaTaskDef] = {}
        for d in defs:
            if d.operation in table:
                raise DuplicateOperation(f"operation {d.operation!r} defined twice")
            table[d.operation] = d
        return cls(table, frozenset(base_facts))

    def __len__(self) -> int:
        return len(self.defs)

    def __contains__(self, operation: str) -> bool:
        return operation in self.defs

    @property
    def all_tools(self) -> list[str]:
        seen: dict[str, None] = {}
        for d in self.defs.values():
            seen.update(dict.fromkeys(d.tools))
        return list(seen)

    def catalog(self) -> str:
        """One line per operation, for embedding into planner prompts."""
        lines = []
        for d in self.defs.values():
            pre = ", ".join(sorted(d.preconditions)) or "-"
            eff = ", ".join(sorted(d.effects)) or "-"
            lines.append(f"- {d.operation}: {d.description} (requires: {pre}; provides: {eff})")
        return "\n".join(lines)


def load_library(path: str | Path) -> TaskLibrary:
    defs: list[MetaTaskDef] = []
    seen: set[str] = set()
    base_facts: Iterable[str] = DEFAULT_BASE_FACTS
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj, dict):
            raise SchemaViolation("library entries must be objects", line=lineno)
        if "base_facts" in obj and "operation" not in obj:
            if not isinstance(obj["base_facts"], list):
                raise SchemaViolation("base_facts must be a list", line=lineno)
            base_facts = obj["base_facts"]
            continue
        try:
            d = MetaTaskDef.from_dict(obj)
        except SchemaViolation as exc:
            raise SchemaViolation(str(exc), line=lineno) from None
        if d.operation in seen:
            raise DuplicateOperation(f"line {lineno}: operation {d.operation!r} defined twice")
        seen.add(d.operation)
        defs.append(d)
    try:
        return TaskLibrary.from_defs(defs, base_facts)
    except SchemaViolation as exc:
        raise SchemaViolation(f"{path}: {exc}") from None


def sample_library() -> TaskLibrary:
    """The bundled example library over nine remote-sensing tool roles."""
    ref = resources.files("metaplan") / "data" / "sample_library.jsonl"
    with resources.as_file(ref) as p:
        return load_library(p)


@dataclass(frozen=True)
class ValidationFailure:
    step: int
    kind: str  # "unknown_operation" | "unmet_precondition"
    detail: str
    missing: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"step": self.step, "kind": self.kind, "detail": self.detail}
        if self.missing:
            out["missing"] = list(self.missing)
        return out


@dataclass(frozen=True)
class ValidationReport:
    failures: tuple[ValidationFailure, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.valid


def validate_plan(plan: MetaPlan, lib: TaskLibrary, extra_facts: Iterable[str] = ()) -> ValidationReport:
    """Check that each step's preconditions hold given the effects of earlier steps.

    Unknown operations are reported and contribute no effects.
    """
    facts = set(lib.base_facts) | set(extra_facts)
    failures: list[ValidationFailure] = []
    for step in plan.steps:
        d = lib.defs.get(step.operation)
        if d is None:
            failures.append(
                ValidationFailure(step.index, "unknown_operation", f"operation {step.operation!r} is not in the library")
            )
            continue
        missing = tuple(sorted(d.preconditions - facts))
        if missing:
            failures.append(
                ValidationFailure(
                    step.index,
                    "unmet_precondition",
                    f"{step.operation} requires {', '.join(missing)}",
                    missing,
                )
            )
            continue
        facts |= d.effects
    return ValidationReport(tuple(failures))


@dataclass(frozen=True)
class EnrichedStep:
    meta: MetaStep
    definition: MetaTaskDef

    @property
    def tools(self) -> tuple[str, ...]:
        return self.definition.tools

    def describe(self) -> str:
        d = self.definition
        return "\n".join(
            [
                f"Step {self.meta.index}: {self.meta.operation}",
                f"Instruction: {self.meta.instruction}",
                f"Operation: {d.description}",
                f"Inputs: {', '.join(d.inputs) or '-'}",
                f"Outputs: {', '.join(d.outputs) or '-'}",
                f"Preconditions: {', '.join(sorted(d.preconditions)) or '-'}",
                f"Effects: {', '.join(sorted(d.effects)) or '-'}",
            ]
        )


@dataclass(frozen=True)
class EnrichedPlan:
    steps: tuple[EnrichedStep, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.steps)


def enrich_plan(plan: MetaPlan, lib: TaskLibrary, extra_facts: Iterable[str] = ()) -> EnrichedPlan:
    report = validate_plan(plan, lib, extra_facts)
    if not report.valid:
        first = report.failures[0]
        raise NotValidated(f"plan failed validation at step {first.step}: {first.detail}")
    return EnrichedPlan(tuple(EnrichedStep(s, lib.defs[s.operation]) for s in plan.steps))


def pruned_toolset(plan: MetaPlan, lib: TaskLibrary) -> list[str]:
    """Union of the per-step tool lists, ordered by first appearance."""
    seen: dict[str, None] = {}
    for step in plan.steps:
        d = lib.defs.get(step.operation)
        if d is None:
            raise UnknownOperation(f"operation {step.operation!r} is not in the library")
        for tool in d.tools:
            seen.setdefault(tool, None)
    return list(seen)
