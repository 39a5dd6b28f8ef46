"""Acceptance checks, one test group per criterion.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion (see conftest.py).
"""

import itertools
import json
import math
import random

import pytest

from helpers import wide_library
from metaplan.backends import ScriptedBackend
from metaplan.cli import dispatch
from metaplan.metrics import (
    StepScore,
    discounted_aggregate,
    grade_answer,
    lcs_length,
    sequence_scores,
    step_score,
    value_fidelity,
)
from metaplan.orchestrator import ToolRegistry, ToolSpec, run_executor_loop, stub_tool
from metaplan.plan_model import MetaPlan, TaskRecord, ToolCall, Trajectory, TrajectoryStep
from metaplan.preference import CandidateScores, build_pairs, dpo_loss, gamma_sweep, sft_nll
from metaplan.task_library import MetaTaskDef, TaskLibrary, enrich_plan, pruned_toolset, validate_plan

criterion = pytest.mark.criterion


def brute_lcs(a, b):
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        if any(is_subseq(c, b) for c in itertools.combinations(a, k)):
            return k
    return 0


def plan_of(*ops):
    return MetaPlan.from_steps([(op, f"run {op}") for op in ops])


def gt_record(answer_type, gt_answer, **kw):
    gt = Trajectory((TrajectoryStep(ToolCall("T"), "o"),), gt_answer)
    return TaskRecord("r", "q", answer_type, gt, gt_answer, **kw)


# 1 ---------------------------------------------------------------------------


@criterion(1, "lcs_length equals brute-force enumeration on 500 random pairs")
def test_lcs_oracle_equivalence():
    rng = random.Random(2024)
    for _ in range(500):
        alphabet = "ABCD"[:rng.randint(1, 4)]
        a = [rng.choice(alphabet) for _ in range(rng.randint(0, 8))]
        b = [rng.choice(alphabet) for _ in range(rng.randint(0, 8))]
        assert lcs_length(a, b) == brute_lcs(a, b), (a, b)


# 2 ---------------------------------------------------------------------------


@criterion(2, "discounted aggregate fixture and gamma=1 mean")
def test_discounted_fixture():
    assert abs(discounted_aggregate([1, 0, 1], 0.9) - 1.81 / 2.71) <= 1e-9


@criterion(2, "discounted aggregate fixture and gamma=1 mean")
def test_gamma_one_is_mean():
    rng = random.Random(7)
    for _ in range(100):
        scores = [rng.random() for _ in range(rng.randint(1, 20))]
        assert abs(discounted_aggregate(scores, 1.0) - sum(scores) / len(scores)) <= 1e-12


# 3 ---------------------------------------------------------------------------


@criterion(3, "value fidelity fixtures: list, string, indicator")
def test_value_fidelity_fixtures():
    assert abs(value_fidelity([1, 2, 3], [2, 3, 4]) - 2 / 3) <= 1e-9
    assert abs(value_fidelity("the cat sat", "the cat") - 0.8) <= 1e-9
    assert value_fidelity(5, 5) == 1.0
    assert value_fidelity(5, 6) == 0.0
    assert value_fidelity(2.5, 2.5) == 1.0


# 4 ---------------------------------------------------------------------------


@criterion(4, "answer grading constants: 5% numeric band, option match, boolean polarity")
def test_answer_constants():
    numeric = gt_record("numerical", "100.0", gt_values=(100.0,))
    assert grade_answer("104.9", numeric).score == 1.0
    assert grade_answer("105.1", numeric).score == 0.0
    assert grade_answer("The correct option is B.", gt_record("mcq", "B")).score == 1.0
    assert grade_answer("Yes", gt_record("boolean", "True")).score == 1.0


# 5 ---------------------------------------------------------------------------


def random_call(rng):
    keys = rng.sample("abcde", rng.randint(0, 4))
    values = [0, 1, 2.5, "x", "y z", True, [1, 2], [2, 3]]
    return ToolCall(rng.choice(["T1", "T2", "T3"]), {k: rng.choice(values) for k in keys})


@criterion(5, "metric hierarchy invariants on randomized inputs")
def test_step_hierarchy():
    rng = random.Random(5)
    for _ in range(1000):
        pred, gt = random_call(rng), random_call(rng)
        if rng.random() < 0.4:
            pred = ToolCall(gt.name, dict(pred.arguments))
        s = step_score(pred, gt)
        if s.tsa == 0:
            assert s.asf1 == 0 and s.acf == 0
        if s.asf1 < 1:
            assert s.acf == 0


@criterion(5, "metric hierarchy invariants on randomized inputs")
def test_sequence_hierarchy():
    rng = random.Random(6)
    names = [f"tool{i}" for i in range(8)]
    for _ in range(1000):
        gt = rng.sample(names, rng.randint(1, 6))
        pred = rng.sample(names, rng.randint(0, 6))
        s = sequence_scores(pred, gt)
        assert s.tem <= s.tio <= s.tao


# 6 ---------------------------------------------------------------------------


def random_library(rng):
    facts = ["rs_image", "user_query", "f1", "f2", "f3", "f4"]
    defs = []
    for i in range(rng.randint(1, 6)):
        pre = rng.sample(facts, rng.randint(0, 2))
        eff = rng.sample(facts[2:], rng.randint(0, 2))
        defs.append(MetaTaskDef(f"op{i}", "", (), (), frozenset(pre), frozenset(eff), (f"tool{i}",)))
    return TaskLibrary.from_defs(defs)


@criterion(6, "precondition chaining, prefix and fact monotonicity")
def test_chaining_fixture():
    lib = TaskLibrary.from_defs([
        MetaTaskDef("detect_objects", "", (), (), frozenset({"rs_image"}), frozenset({"detections"}), ("Det",)),
        MetaTaskDef("count_objects", "", (), (), frozenset({"detections"}), frozenset({"count"}), ("Cnt",)),
    ])
    bad = validate_plan(plan_of("count_objects", "detect_objects"), lib)
    assert not bad.valid
    assert (bad.failures[0].step, bad.failures[0].kind) == (1, "unmet_precondition")
    assert validate_plan(plan_of("detect_objects", "count_objects"), lib).valid


@criterion(6, "precondition chaining, prefix and fact monotonicity")
def test_chaining_properties():
    rng = random.Random(66)
    for _ in range(200):
        lib = random_library(rng)
        ops = [rng.choice(list(lib.defs) + ["unknown"]) for _ in range(rng.randint(1, 6))]
        plan = plan_of(*ops)
        failures = validate_plan(plan, lib).failures
        if not failures:
            for k in range(1, len(plan) + 1):
                assert validate_plan(MetaPlan(plan.steps[:k]), lib).valid
        for k in range(1, len(plan) + 1):
            prefix = validate_plan(MetaPlan(plan.steps[:k]), lib).failures
            assert prefix == tuple(f for f in failures if f.step <= k)
        extra = rng.sample(["f1", "f2", "f3", "f4", "zz"], rng.randint(1, 3))
        more = validate_plan(plan, lib, extra).failures
        assert {f.step for f in more} <= {f.step for f in failures}


# 7 ---------------------------------------------------------------------------


@criterion(7, "tool-space pruning: refused call never reaches the tool; union over 104 tools")
def test_unpruned_tool_is_never_invoked():
    lib = wide_library()
    plan = plan_of("op_00", "op_01")
    allowed = set(pruned_toolset(plan, lib))
    outside = next(t for t in lib.all_tools if t not in allowed)
    spy_calls = []

    registry = ToolRegistry()
    for name in lib.all_tools:
        impl = (lambda args: spy_calls.append(args) or "spied") if name == outside else stub_tool("obs")
        registry.register(ToolSpec(name), impl)

    gt = Trajectory((TrajectoryStep(ToolCall("tool_000"), "obs"),), "done")
    record = TaskRecord("r", "q", "description", gt, "done", kips=("done",))
    executor = ScriptedBackend({"r": [
        json.dumps({"name": outside, "arguments": {"x": 1}}),
        json.dumps({"name": "tool_000", "arguments": {}}),
        json.dumps({"final_answer": "done"}),
    ]})
    traj = run_executor_loop(executor, enrich_plan(plan, lib), registry, record)
    assert traj.steps[0].status == "tool_error"
    assert traj.steps[1].status == "ok"
    assert traj.final_answer == "done"
    assert spy_calls == []


@criterion(7, "tool-space pruning: refused call never reaches the tool; union over 104 tools")
def test_pruned_union_over_104_tools():
    lib = wide_library()
    assert len(lib.all_tools) == 104
    rng = random.Random(77)
    for _ in range(100):
        ops = rng.sample(list(lib.defs), rng.randint(1, 6))
        expected = set()
        for op in ops:
            expected |= set(lib.defs[op].tools)
        exposed = pruned_toolset(plan_of(*ops), lib)
        assert len(exposed) == len(set(exposed))
        assert set(exposed) == expected


# 8 ---------------------------------------------------------------------------

FULL, ZERO = StepScore(1, 1.0, 1.0), StepScore(0, 0.0, 0.0)


@criterion(8, "preference pairs and discount sweep")
def test_separation_pair():
    pairs = build_pairs([CandidateScores("t", "w", (0.9, 0.8, 0.85)), CandidateScores("t", "l", (0.3, 0.2, 0.25))])
    assert len(pairs) == 1
    assert pairs[0].p_value == 0.05


@criterion(8, "preference pairs and discount sweep")
def test_identical_distributions_no_pair():
    runs = (0.4, 0.6, 0.5)
    assert build_pairs([CandidateScores("t", "a", runs), CandidateScores("t", "b", runs)]) == []


@criterion(8, "preference pairs and discount sweep")
def test_sweep_at_baseline():
    raw = {"t": {"a": [[FULL, FULL, ZERO]] * 3, "b": [[ZERO, ZERO, ZERO]] * 3}}
    entry = gamma_sweep(raw, [0.5, 0.9, 1.0], baseline=0.9).entry(0.9)
    assert entry.sor == 1.0 and entry.ptr == 0


@criterion(8, "preference pairs and discount sweep")
def test_sweep_flip():
    raw = {"t": {"early": [[FULL, ZERO, ZERO, ZERO]] * 3, "late": [[ZERO, FULL, FULL, FULL]] * 3}}
    assert gamma_sweep(raw, [0.5, 1.0], baseline=1.0).entry(0.5).ptr >= 1


# 9 ---------------------------------------------------------------------------


@criterion(9, "training objectives")
def test_objectives():
    assert abs(dpo_loss(-2.0, -2.0, -4.0, -4.0) - math.log(2)) <= 1e-12
    # -log(sigmoid(0.2)), 40-digit decimal evaluation
    assert abs(dpo_loss(-1.0, -2.0, -3.0, -2.0, beta=0.1) - 0.5981388693815918396849437) <= 1e-9
    assert sft_nll([-0.5, -1.5]) == 2.0


# 10 --------------------------------------------------------------------------


@criterion(10, "bench is byte-for-byte deterministic and scores scripted ground truth at 1.0")
def test_bench_determinism(bench_dir, tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = dispatch(["bench", "--config", str(bench_dir / "config.json"),
                         "--records", str(bench_dir / "records.jsonl"),
                         "--out", str(out), "--seed", "11", "--workers", "4"])
        assert code == 0
        outputs.append(((out / "trajectories.jsonl").read_bytes(), (out / "report.jsonl").read_bytes()))
    assert outputs[0] == outputs[1]
    aggregate = json.loads(outputs[0][1].decode().splitlines()[-1])["aggregate"]
    assert aggregate["tsa"] == 1.0
    assert aggregate["faa"] == 1.0
