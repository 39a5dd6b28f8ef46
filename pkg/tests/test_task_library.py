import pytest
from hypothesis import given, settings, strategies as st

from helpers import FACTS, libraries_and_plans, make_def, wide_library
from metaplan.errors import DuplicateOperation, NotValidated, SchemaViolation, UnknownOperation
from metaplan.plan_model import MetaPlan
from metaplan.task_library import (
    TaskLibrary,
    enrich_plan,
    load_library,
    pruned_toolset,
    sample_library,
    validate_plan,
)

DETECT = make_def("detect_objects", {"rs_image"}, {"detections"}, ("ObjectDetection",))
COUNT = make_def("count_objects", {"detections"}, {"count"}, ("CountGivenObject",))


@pytest.fixture
def small_lib():
    return TaskLibrary.from_defs([DETECT, COUNT])


def plan_of(*ops):
    return MetaPlan.from_steps([(op, f"run {op}") for op in ops])


def test_load_library(write_jsonl):
    path = write_jsonl("lib.jsonl", [DETECT.to_dict(), COUNT.to_dict()])
    lib = load_library(path)
    assert len(lib) == 2
    assert lib.base_facts == {"user_query", "rs_image"}


def test_load_library_header_sets_base_facts(write_jsonl):
    path = write_jsonl("lib.jsonl", [{"base_facts": ["rs_image"]}, DETECT.to_dict()])
    assert load_library(path).base_facts == {"rs_image"}


def test_duplicate_operation(write_jsonl):
    path = write_jsonl("lib.jsonl", [DETECT.to_dict(), DETECT.to_dict()])
    with pytest.raises(DuplicateOperation):
        load_library(path)


def test_empty_tools_rejected(write_jsonl):
    path = write_jsonl("lib.jsonl", [{**DETECT.to_dict(), "tools": []}])
    with pytest.raises(SchemaViolation, match="line 1"):
        load_library(path)


def test_sample_library_is_self_consistent():
    lib = sample_library()
    assert len(lib) == 12
    assert len(lib.all_tools) == 9
    assert validate_plan(plan_of("detect_objects", "count_objects"), lib).valid


def test_chained_plan_valid(small_lib):
    assert validate_plan(plan_of("detect_objects", "count_objects"), small_lib).valid


def test_reversed_plan_fails_at_step_one(small_lib):
    report = validate_plan(plan_of("count_objects", "detect_objects"), small_lib)
    assert not report.valid
    first = report.failures[0]
    assert (first.step, first.kind, first.missing) == (1, "unmet_precondition", ("detections",))


def test_unknown_operation(small_lib):
    report = validate_plan(plan_of("detect_objects", "fly_drone"), small_lib)
    assert [(f.step, f.kind) for f in report.failures] == [(2, "unknown_operation")]


def test_unknown_operation_contributes_no_effects(small_lib):
    report = validate_plan(plan_of("fly_drone", "count_objects"), small_lib)
    assert [f.kind for f in report.failures] == ["unknown_operation", "unmet_precondition"]


def test_extra_facts_unlock_a_step(small_lib):
    assert validate_plan(plan_of("count_objects"), small_lib, ["detections"]).valid


def test_enrich(small_lib):
    enriched = enrich_plan(plan_of("detect_objects", "count_objects"), small_lib)
    assert len(enriched) == 2
    assert all(step.tools for step in enriched.steps)
    assert "Preconditions: detections" in enriched.steps[1].describe()
    with pytest.raises(NotValidated):
        enrich_plan(plan_of("count_objects"), small_lib)


def test_enrich_preserves_tool_order():
    lib = TaskLibrary.from_defs([make_def("op", tools=("t2", "t1"))])
    assert enrich_plan(plan_of("op"), lib).steps[0].tools == ("t2", "t1")


def test_pruned_union_keeps_first_appearance():
    lib = TaskLibrary.from_defs([make_def("a", tools=("t1", "t2")), make_def("b", tools=("t2", "t3"))])
    assert pruned_toolset(plan_of("a", "b"), lib) == ["t1", "t2", "t3"]
    assert pruned_toolset(plan_of("b"), lib) == ["t2", "t3"]
    with pytest.raises(UnknownOperation):
        pruned_toolset(plan_of("c"), lib)


def test_pruning_over_104_tools():
    pad = [f"pad_{i:02d}" for i in range(97)]
    lib = TaskLibrary.from_defs([
        make_def("three", tools=("x1", "x2", "x3")),
        make_def("four", tools=("y1", "y2", "y3", "y4")),
        *[make_def(f"pad_op{k}", tools=pad[4 * k:4 * k + 4]) for k in range(25)],
    ])
    assert len(lib.all_tools) == 104
    exposed = pruned_toolset(plan_of("three", "four"), lib)
    assert exposed == ["x1", "x2", "x3", "y1", "y2", "y3", "y4"]


def test_wide_fixture_has_104_tools():
    lib = wide_library()
    assert len(lib.all_tools) == 104


@settings(max_examples=200)
@given(libraries_and_plans())
def test_prefix_failures_are_a_restriction(case):
    lib, plan = case
    full = validate_plan(plan, lib).failures
    for k in range(1, len(plan) + 1):
        prefix = MetaPlan(plan.steps[:k])
        assert validate_plan(prefix, lib).failures == tuple(f for f in full if f.step <= k)


@settings(max_examples=200)
@given(libraries_and_plans(), st.sets(st.sampled_from(FACTS + ["f_x"]), max_size=4))
def test_more_facts_never_add_failures(case, extra):
    lib, plan = case
    base_steps = {f.step for f in validate_plan(plan, lib).failures}
    more_steps = {f.step for f in validate_plan(plan, lib, extra).failures}
    assert more_steps <= base_steps


def test_catalog_lists_every_operation(small_lib):
    lines = small_lib.catalog().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("- count_objects:") and "requires: detections" in lines[1]
