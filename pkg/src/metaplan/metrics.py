"""Process and outcome scoring for agent trajectories.

Step level (teacher forcing, positional alignment):
    tsa   tool name matches exactly
    asf1  F1 of argument key sets, only when tsa == 1
    acf   mean value fidelity over gt keys, only when the key sets match exactly

Steps are folded into a sample score with a geometric discount that favours
early steps. Outcome level: tool-sequence recall (any order, LCS, prefix) and
final-answer accuracy under a per-answer-type protocol.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

from .errors import EmptyGroundTruth, EmptyInput
from .plan_model import TaskRecord, ToolCall, Trajectory

DEFAULT_GAMMA = 0.9
NUMERIC_REL_TOL = 0.05
REAL_EQ_REL_TOL = 1e-9

METRIC_FIELDS = ("tsa", "asf1", "acf", "faa", "tao", "tio", "tem")

JudgeBackend = Callable[[str, str, Sequence[str], str], float]


# -- sequence primitives -----------------------------------------------------

def lcs_length(a: Sequence[Any], b: Sequence[Any]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def lcp_length(a: Sequence[Any], b: Sequence[Any]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def tokenize(text: str) -> list[str]:
    """Lowercase, turn every non-alphanumeric character into a space, split."""
    return "".join(c if c.isalnum() else " " for c in text.lower()).split()


def _f1(matched_pred: int, n_pred: int, matched_gt: int, n_gt: int) -> float:
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    p = matched_pred / n_pred
    r = matched_gt / n_gt
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_l(candidate: str, reference: str) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    return _f1(lcs, len(cand), lcs, len(ref))


# -- argument value fidelity ---------------------------------------------------

def values_equal(a: Any, b: Any) -> bool:
    """Deep equality: bools and integers exact, reals within a relative 1e-9."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        return math.isclose(a, b, rel_tol=REAL_EQ_REL_TOL, abs_tol=0.0)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(values_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(values_equal(a[k], b[k]) for k in a)
    if type(a) is not type(b):
        return False
    return a == b


def _distinct(items: Iterable[Any]) -> list[Any]:
    out: list[Any] = []
    for item in items:
        if not any(values_equal(item, seen) for seen in out):
            out.append(item)
    return out


def list_f1(pred: Sequence[Any], gt: Sequence[Any]) -> float:
    p, g = _distinct(pred), _distinct(gt)
    matched_p = sum(1 for x in p if any(values_equal(x, y) for y in g))
    matched_g = sum(1 for y in g if any(values_equal(x, y) for x in p))
    return _f1(matched_p, len(p), matched_g, len(g))


def value_fidelity(pred: Any, gt: Any) -> float:
    if isinstance(gt, (list, tuple)):
        return list_f1(pred, gt) if isinstance(pred, (list, tuple)) else 0.0
    if isinstance(gt, str):
        return rouge_l(pred, gt) if isinstance(pred, str) else 0.0
    return 1.0 if values_equal(pred, gt) else 0.0


# -- step level ----------------------------------------------------------------

@dataclass(frozen=True)
class StepScore:
    tsa: int
    asf1: float
    acf: float

    def __post_init__(self) -> None:
        if self.tsa not in (0, 1):
            raise ValueError("tsa must be 0 or 1")
        if not (0.0 <= self.asf1 <= 1.0 and 0.0 <= self.acf <= 1.0):
            raise ValueError("asf1 and acf must lie in [0, 1]")
        if self.tsa == 0 and (self.asf1 or self.acf):
            raise ValueError("asf1 and acf must be 0 when tsa is 0")
        if self.asf1 < 1.0 and self.acf:
            raise ValueError("acf must be 0 unless the key sets match exactly")

    def composite(self, weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> float:
        w1, w2, w3 = weights
        return min(1.0, max(0.0, w1 * self.tsa + w2 * self.asf1 + w3 * self.acf))


ZERO_STEP = StepScore(0, 0.0, 0.0)


def step_score(pred: ToolCall | None, gt: ToolCall) -> StepScore:
    if pred is None or pred.name != gt.name:
        return ZERO_STEP
    k_pred, k_gt = set(pred.arguments), set(gt.arguments)
    common = len(k_pred & k_gt)
    asf1 = _f1(common, len(k_pred), common, len(k_gt))
    if k_pred != k_gt:
        return StepScore(1, asf1, 0.0)
    if not k_gt:
        return StepScore(1, 1.0, 1.0)
    acf = math.fsum(value_fidelity(pred.arguments[k], gt.arguments[k]) for k in k_gt) / len(k_gt)
    return StepScore(1, 1.0, acf)


def discounted_aggregate(scores: Sequence[float], gamma: float = DEFAULT_GAMMA) -> float:
    """Weighted mean of ``scores`` with weight ``gamma**(t-1)`` on step t."""
    if len(scores) == 0:
        raise EmptyInput("no step scores to aggregate")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"step score {s} outside [0, 1]")
    if gamma == 1.0:
        return math.fsum(scores) / len(scores)
    weights = [gamma**t for t in range(len(scores))]
    value = math.fsum(w * s for w, s in zip(weights, scores)) / math.fsum(weights)
    # rounding can push a constant sequence a hair outside its range
    return min(max(value, min(scores)), max(scores))


def align_steps(pred: Trajectory, gt: Trajectory) -> list[StepScore]:
    """Positional step scores over the gt length; missing pred steps score zero."""
    out = []
    for t, gt_step in enumerate(gt.steps):
        pred_call = pred.steps[t].call if t < len(pred.steps) else None
        out.append(step_score(pred_call, gt_step.call))
    return out


# -- sequence level ------------------------------------------------------------

@dataclass(frozen=True)
class SequenceScores:
    tao: float
    tio: float
    tem: float


def sequence_scores(pred_names: Sequence[str], gt_names: Sequence[str]) -> SequenceScores:
    """Any-order recall, in-order (LCS) recall and exact-prefix recall of tool names.

    Any-order recall counts multiset overlap, so repeated gt tools must be
    repeated in the prediction; it reduces to set recall for duplicate-free gt.
    """
    if not gt_names:
        raise EmptyGroundTruth("ground-truth tool sequence is empty")
    n = len(gt_names)
    overlap = sum((Counter(pred_names) & Counter(gt_names)).values())
    return SequenceScores(
        tao=overlap / n,
        tio=lcs_length(pred_names, gt_names) / n,
        tem=lcp_length(pred_names, gt_names) / n,
    )


# -- final answers -------------------------------------------------------------

@dataclass(frozen=True)
class AnswerGrade:
    score: float
    unextractable: bool = False


_OPTION_EXPLICIT = re.compile(
    r"(?:answer|option|choice)\s*(?:is|:|=)?\s*(?:option\s*)?[\(\[]?((?-i:[A-H]))\b[\)\]]?",
    re.IGNORECASE,
)
_OPTION_STANDALONE = re.compile(r"(?<![A-Za-z])[\(\[]?([A-H])[\)\]]?(?![A-Za-z])")


def extract_option(text: str) -> str | None:
    """Pull a single option letter out of a reply, or None when ambiguous."""
    stripped = text.strip()
    m = re.fullmatch(r"[\(\[]?([A-Ha-h])[\)\]\.:]?", stripped)
    if m:
        return m.group(1).upper()
    explicit = _OPTION_EXPLICIT.findall(text)
    if explicit:
        return explicit[-1].upper()
    letters = set()
    for m in _OPTION_STANDALONE.finditer(text):
        # a bare "A " is far more often the article than option A
        if m.group(0) == "A" and text[m.end():m.end() + 1] == " ":
            continue
        letters.add(m.group(1))
    return letters.pop() if len(letters) == 1 else None


_NUMBER = re.compile(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:[eE][-+]?\d+)?|[-+]?\.\d+(?:[eE][-+]?\d+)?")


def extract_numbers(text: str) -> list[int | float]:
    """Every decimal literal in ``text``; integers stay integers."""
    out: list[int | float] = []
    for m in _NUMBER.finditer(text):
        token = m.group(0).replace(",", "")
        if "." in token or "e" in token.lower():
            value = float(token)
            if math.isfinite(value):
                out.append(value)
        else:
            out.append(int(token))
    return out


def number_matches(pred: int | float, gt: int | float, rel_tol: float = NUMERIC_REL_TOL) -> bool:
    if isinstance(gt, int):
        return pred == gt
    return abs(pred - gt) <= rel_tol * abs(gt)


def numeric_recall(pred_text: str, gt_values: Sequence[int | float], rel_tol: float = NUMERIC_REL_TOL) -> AnswerGrade:
    found = extract_numbers(pred_text)
    if not found:
        return AnswerGrade(0.0, unextractable=True)
    unused = list(found)
    hits = 0
    for g in gt_values:
        candidates = [v for v in unused if number_matches(v, g, rel_tol)]
        if not candidates:
            continue
        best = min(candidates, key=lambda v: abs(v - g))
        unused.remove(best)
        hits += 1
    return AnswerGrade(hits / len(gt_values))


@dataclass(frozen=True)
class PolarityLexicon:
    affirmative: frozenset[str] = frozenset({"yes", "true", "affirmative", "correct", "y"})
    negative: frozenset[str] = frozenset({"no", "false", "negative", "incorrect", "n"})

    def polarity(self, text: str) -> bool | None:
        """Polarity of the first polar token in ``text``."""
        for token in tokenize(text):
            if token in self.affirmative:
                return True
            if token in self.negative:
                return False
        return None


DEFAULT_LEXICON = PolarityLexicon()


def kip_recall(pred_text: str, kips: Sequence[str]) -> float:
    """Share of KIPs whose every token appears in the prediction."""
    if not kips:
        return 0.0
    pred_tokens = set(tokenize(pred_text))
    hits = sum(1 for kip in kips if tokenize(kip) and set(tokenize(kip)) <= pred_tokens)
    return hits / len(kips)


def rule_based_judge(question: str, gt_answer: str, kips: Sequence[str], pred: str) -> float:
    return kip_recall(pred, kips)


def grade_answer(
    pred_answer: str | None,
    record: TaskRecord,
    judge: JudgeBackend | None = None,
    lexicon: PolarityLexicon = DEFAULT_LEXICON,
) -> AnswerGrade:
    if pred_answer is None or not pred_answer.strip():
        return AnswerGrade(0.0, unextractable=True)
    kind = record.answer_type
    if kind == "mcq":
        gt = extract_option(record.gt_answer)
        got = extract_option(pred_answer)
        if got is None:
            return AnswerGrade(0.0, unextractable=True)
        return AnswerGrade(1.0 if gt is not None and got == gt else 0.0)
    if kind == "numerical":
        return numeric_recall(pred_answer, record.gt_values or ())
    if kind == "boolean":
        got = lexicon.polarity(pred_answer)
        if got is None:
            return AnswerGrade(0.0, unextractable=True)
        return AnswerGrade(1.0 if got == lexicon.polarity(record.gt_answer) else 0.0)
    judge = judge or rule_based_judge
    score = float(judge(record.query, record.gt_answer, record.kips or (), pred_answer))
    return AnswerGrade(min(1.0, max(0.0, score)))


def faa_score(pred_answer: str | None, record: TaskRecord, judge: JudgeBackend | None = None) -> float:
    return grade_answer(pred_answer, record, judge).score


# -- sample level ----------------------------------------------------------------

@dataclass(frozen=True)
class SampleReport:
    task_id: str
    tsa: float
    asf1: float
    acf: float
    faa: float
    tao: float
    tio: float
    tem: float
    t: int
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.tem <= self.tio <= self.tao + 1e-12:
            raise ValueError(f"{self.task_id}: expected tem <= tio <= tao")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["flags"] = list(self.flags)
        return out

    @classmethod
    def zeroed(cls, task_id: str, t: int, flags: Sequence[str]) -> "SampleReport":
        return cls(task_id, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, t, tuple(flags))


def evaluate_trajectory(
    pred: Trajectory,
    gt: Trajectory,
    record: TaskRecord,
    gamma: float = DEFAULT_GAMMA,
    judge: Optional[JudgeBackend] = None,
    lexicon: PolarityLexicon = DEFAULT_LEXICON,
) -> SampleReport:
    if not gt.steps:
        raise EmptyGroundTruth(f"{record.id}: ground-truth trajectory has no steps")
    scores = align_steps(pred, gt)
    seq = sequence_scores(pred.tool_names, gt.tool_names)
    grade = grade_answer(pred.final_answer, record, judge, lexicon)
    flags = []
    if grade.unextractable:
        flags.append("unextractable_answer")
    if pred.truncated:
        flags.append("truncated")
    return SampleReport(
        task_id=record.id,
        tsa=discounted_aggregate([s.tsa for s in scores], gamma),
        asf1=discounted_aggregate([s.asf1 for s in scores], gamma),
        acf=discounted_aggregate([s.acf for s in scores], gamma),
        faa=grade.score,
        tao=seq.tao,
        tio=seq.tio,
        tem=seq.tem,
        t=len(gt.steps),
        flags=tuple(flags),
    )


def aggregate_reports(reports: Sequence[SampleReport]) -> dict[str, Any]:
    """Unweighted per-metric means."""
    n = len(reports)
    means = {m: (math.fsum(getattr(r, m) for r in reports) / n if n else 0.0) for m in METRIC_FIELDS}
    return {"aggregate": means, "n": n, "flagged": sum(1 for r in reports if r.flags)}


def format_summary(aggregate: dict[str, Any]) -> str:
    means = aggregate["aggregate"]
    header = " ".join(f"{m.upper():>6}" for m in METRIC_FIELDS)
    row = " ".join(f"{means[m]:6.3f}" for m in METRIC_FIELDS)
    return f"{header}\n{row}\n(n={aggregate['n']}, flagged={aggregate['flagged']})"
