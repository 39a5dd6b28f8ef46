"""Execution-feedback preference data: rewards, significance-gated pairs, teacher anchors,
discount sweeps and DPO dataset export, plus the scalar SFT/DPO objectives."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import (
    BaselineMissing,
    EmptyGroundTruth,
    InsufficientRuns,
    PositiveLogProb,
    UnknownTask,
    UnvalidatedTeacher,
)
from .metrics import DEFAULT_GAMMA, StepScore, align_steps, discounted_aggregate
from .plan_model import MetaPlan, TaskRecord, Trajectory, serialize_meta_plan
from .significance import mann_whitney_greater
from .task_library import TaskLibrary, validate_plan

EQUAL_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)
DEFAULT_ALPHA = 0.05
DEFAULT_MIN_RUNS = 3
DEFAULT_MARGIN = 0.05
DEFAULT_BETA = 0.1

# Adapter settings of the downstream trainer, carried as dataset metadata only.
TRAINER_DEFAULTS = {"lora_rank": 32, "lora_alpha": 16, "beta": DEFAULT_BETA}

_EPS = 1e-12


def _check_weights(weights: Sequence[float]) -> tuple[float, float, float]:
    if len(weights) != 3 or any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise ValueError(f"weights must be three non-negative reals summing to 1, got {weights}")
    return tuple(weights)  # type: ignore[return-value]


def composite_reward(scores: Sequence[StepScore], gamma: float = DEFAULT_GAMMA,
                     weights: Sequence[float] = EQUAL_WEIGHTS) -> float:
    weights = _check_weights(weights)
    return discounted_aggregate([s.composite(weights) for s in scores], gamma)


def trajectory_reward(pred: Trajectory, gt: Trajectory, gamma: float = DEFAULT_GAMMA,
                      weights: Sequence[float] = EQUAL_WEIGHTS) -> float:
    """Step-aware discounted reward of one execution run."""
    if not gt.steps:
        raise EmptyGroundTruth("ground-truth trajectory has no steps")
    return composite_reward(align_steps(pred, gt), gamma, weights)


@dataclass(frozen=True)
class CandidateScores:
    task_id: str
    plan_id: str
    runs: tuple[float, ...]
    plan: Optional[MetaPlan] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "runs", tuple(self.runs))
        if not self.runs:
            raise ValueError(f"{self.task_id}/{self.plan_id}: no runs")
        for r in self.runs:
            if not (isinstance(r, (int, float)) and math.isfinite(r) and 0.0 <= r <= 1.0):
                raise ValueError(f"{self.task_id}/{self.plan_id}: run reward {r!r} outside [0, 1]")

    @property
    def mean(self) -> float:
        return math.fsum(self.runs) / len(self.runs)


@dataclass(frozen=True)
class PreferencePair:
    task_id: str
    winner: str
    loser: str
    winner_mean: float
    loser_mean: float
    p_value: Optional[float]
    source: str  # "self_generated" | "teacher_augmented"
    winner_plan: Optional[MetaPlan] = field(default=None, compare=False)
    loser_plan: Optional[MetaPlan] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.winner_mean > self.loser_mean:
            raise ValueError("winner mean must exceed loser mean")

    @property
    def key(self) -> tuple[str, frozenset[str]]:
        return (self.task_id, frozenset((self.winner, self.loser)))


def _group_by_task(candidates: Iterable[CandidateScores]) -> dict[str, list[CandidateScores]]:
    groups: dict[str, list[CandidateScores]] = {}
    for c in candidates:
        groups.setdefault(c.task_id, []).append(c)
    return groups


def build_pairs(candidates: Iterable[CandidateScores], alpha: float = DEFAULT_ALPHA,
                min_runs: int = DEFAULT_MIN_RUNS) -> list[PreferencePair]:
    """Pair candidates of the same task whose run distributions differ significantly."""
    candidates = list(candidates)
    for c in candidates:
        if len(c.runs) < min_runs:
            raise InsufficientRuns(f"{c.task_id}/{c.plan_id} has {len(c.runs)} runs, need {min_runs}")
    pairs: list[PreferencePair] = []
    for task_id, group in _group_by_task(candidates).items():
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                pair = _test_pair(task_id, a, b, alpha)
                if pair is not None:
                    pairs.append(pair)
    return pairs


def _test_pair(task_id: str, a: CandidateScores, b: CandidateScores, alpha: float) -> PreferencePair | None:
    for w, l in ((a, b), (b, a)):
        if w.mean <= l.mean:
            continue
        p = mann_whitney_greater(w.runs, l.runs)
        if p <= alpha:
            return PreferencePair(task_id, w.plan_id, l.plan_id, w.mean, l.mean, p,
                                  "self_generated", w.plan, l.plan)
    return None


def add_teacher_anchors(
    candidates: Iterable[CandidateScores],
    teacher_plan: MetaPlan,
    teacher_runs: Sequence[float],
    library: TaskLibrary,
    *,
    extra_facts: Iterable[str] = (),
    margin: float = DEFAULT_MARGIN,
    teacher_id: str = "teacher",
) -> list[PreferencePair]:
    """Teacher plan wins against every candidate whose mean trails it by ``margin``.

    ``candidates`` are the sampled plans of a single task.
    """
    report = validate_plan(teacher_plan, library, extra_facts)
    if not report.valid:
        raise UnvalidatedTeacher(f"teacher plan fails validation: {report.failures[0].detail}")
    candidates = list(candidates)
    if not candidates:
        return []
    teacher = CandidateScores(candidates[0].task_id, teacher_id, tuple(teacher_runs), teacher_plan)
    pairs = []
    for c in candidates:
        if c.task_id != teacher.task_id:
            raise ValueError("teacher anchors are built per task; got candidates of several tasks")
        if teacher.mean - c.mean >= margin - _EPS:
            pairs.append(PreferencePair(c.task_id, teacher_id, c.plan_id, teacher.mean, c.mean, None,
                                        "teacher_augmented", teacher_plan, c.plan))
    return pairs


def mix_hybrid(self_pairs: Sequence[PreferencePair], teacher_pairs: Sequence[PreferencePair],
               seed: int = 0) -> list[PreferencePair]:
    """Equal parts self-generated and teacher-augmented pairs.

    The larger side is downsampled with a seeded RNG; survivors keep their order.
    """
    n = min(len(self_pairs), len(teacher_pairs))
    rng = random.Random(seed)

    def _take(pairs: Sequence[PreferencePair]) -> list[PreferencePair]:
        if len(pairs) == n:
            return list(pairs)
        keep = sorted(rng.sample(range(len(pairs)), n))
        return [pairs[i] for i in keep]

    return _take(self_pairs) + _take(teacher_pairs)


# -- discount sweep ------------------------------------------------------------

# task_id -> plan_id -> runs -> per-step scores
RawScores = Mapping[str, Mapping[str, Sequence[Sequence[StepScore]]]]


@dataclass(frozen=True)
class SweepEntry:
    gamma: float
    npp: int
    sor: float
    ptr: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"gamma": self.gamma, "npp": self.npp, "sor": self.sor, "ptr": self.ptr, "flags": list(self.flags)}


@dataclass(frozen=True)
class SweepReport:
    baseline: float
    entries: tuple[SweepEntry, ...]

    def entry(self, gamma: float) -> SweepEntry:
        for e in self.entries:
            if math.isclose(e.gamma, gamma):
                return e
        raise KeyError(gamma)

    def to_dict(self) -> dict[str, Any]:
        return {"baseline": self.baseline, "entries": [e.to_dict() for e in self.entries]}

    def table(self) -> str:
        lines = [f"{'gamma':>6} {'NPP':>5} {'SOR':>6} {'PTR':>4}"]
        for e in self.entries:
            mark = " *" if math.isclose(e.gamma, self.baseline) else ""
            lines.append(f"{e.gamma:6.2f} {e.npp:5d} {e.sor:6.3f} {e.ptr:4d}{mark}")
        return "\n".join(lines)


def candidates_at(raw: RawScores, gamma: float, weights: Sequence[float] = EQUAL_WEIGHTS) -> list[CandidateScores]:
    out = []
    for task_id, plans in raw.items():
        for plan_id, runs in plans.items():
            out.append(CandidateScores(task_id, plan_id, tuple(composite_reward(r, gamma, weights) for r in runs)))
    return out


def gamma_sweep(raw: RawScores, gammas: Sequence[float], baseline: float = DEFAULT_GAMMA,
                alpha: float = DEFAULT_ALPHA, weights: Sequence[float] = EQUAL_WEIGHTS,
                min_runs: int = DEFAULT_MIN_RUNS) -> SweepReport:
    """Rebuild the pair set at each discount and compare it with the baseline's."""
    if not any(math.isclose(g, baseline) for g in gammas):
        raise BaselineMissing(f"baseline gamma {baseline} is not among {list(gammas)}")
    base = {p.key: p for p in build_pairs(candidates_at(raw, baseline, weights), alpha, min_runs)}
    entries = []
    for g in gammas:
        pairs = build_pairs(candidates_at(raw, g, weights), alpha, min_runs)
        same = flipped = 0
        for p in pairs:
            b = base.get(p.key)
            if b is None:
                continue
            if b.winner == p.winner:
                same += 1
            else:
                flipped += 1
        flags: tuple[str, ...] = ()
        if base:
            sor = same / len(base)
        else:
            sor, flags = 1.0, ("empty_baseline",)
        entries.append(SweepEntry(g, len(pairs), sor, flipped, flags))
    return SweepReport(baseline, tuple(entries))


# -- export ----------------------------------------------------------------------

def export_dpo_dataset(pairs: Sequence[PreferencePair], records: Mapping[str, TaskRecord], path: str | Path,
                       metadata: Optional[Mapping[str, Any]] = None) -> int:
    """Write one prompt/chosen/rejected line per pair; returns the line count."""
    lines = []
    for pair in pairs:
        record = records.get(pair.task_id)
        if record is None:
            raise UnknownTask(f"pair references unknown task {pair.task_id!r}")
        if pair.winner_plan is None or pair.loser_plan is None:
            raise ValueError(f"pair {pair.task_id}/{pair.winner}>{pair.loser} carries no plans")
        prompt: dict[str, Any] = {"query": record.query}
        if record.image_ref:
            prompt["image"] = record.image_ref
        meta: dict[str, Any] = {
            "task_id": pair.task_id,
            "winner": pair.winner,
            "loser": pair.loser,
            "source": pair.source,
            "p_value": pair.p_value,
            "winner_mean": pair.winner_mean,
            "loser_mean": pair.loser_mean,
        }
        if metadata:
            meta.update(metadata)
        lines.append(json.dumps({
            "prompt": prompt,
            "chosen": serialize_meta_plan(pair.winner_plan),
            "rejected": serialize_meta_plan(pair.loser_plan),
            "meta": meta,
        }, ensure_ascii=False))
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    return len(lines)


# -- scalar objectives -------------------------------------------------------------

def sft_nll(token_logprobs: Sequence[float]) -> float:
    """Negative log-likelihood of one target sequence."""
    for lp in token_logprobs:
        if not math.isfinite(lp):
            raise ValueError("log-probabilities must be finite")
        if lp > 0:
            raise PositiveLogProb(f"log-probability {lp} > 0")
    return -math.fsum(token_logprobs) + 0.0


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def dpo_loss(logp_w_policy: float, logp_w_ref: float, logp_l_policy: float, logp_l_ref: float,
             beta: float = DEFAULT_BETA) -> float:
    """``-log sigmoid(r_w - r_l)`` with ``r = beta * (log pi - log pi_ref)``."""
    values = (logp_w_policy, logp_w_ref, logp_l_policy, logp_l_ref)
    if not all(math.isfinite(v) for v in values):
        raise ValueError("log-probabilities must be finite")
    if not beta > 0:
        raise ValueError("beta must be positive")
    margin = beta * (logp_w_policy - logp_w_ref) - beta * (logp_l_policy - logp_l_ref)
    return softplus(-margin)
