"""Model-backed graders: KIP scoring of description answers and pairwise plan review."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from .backends import ChatBackend, ChatMessage
from .metrics import kip_recall
from .plan_model import MetaPlan, iter_json_values, serialize_meta_plan
from .prompts import load_template, render

log = logging.getLogger(__name__)

VERDICTS = ("a", "b", "tie")
CRITERIA = ("correctness", "followability", "standardization", "overall")


def _first_object_with(text: str, key: str) -> Optional[dict]:
    for value in iter_json_values(text, "{"):
        if isinstance(value, dict) and key in value:
            return value
    return None


def parse_score(text: str) -> Optional[float]:
    """Score from a ``{"score": ...}`` (or ``matched``/``total``) object in a reply."""
    obj = _first_object_with(text, "score")
    if obj is not None and isinstance(obj["score"], (int, float)) and not isinstance(obj["score"], bool):
        return min(1.0, max(0.0, float(obj["score"])))
    obj = _first_object_with(text, "matched")
    if obj is not None:
        try:
            total = float(obj["total"])
            return min(1.0, max(0.0, float(obj["matched"]) / total)) if total > 0 else None
        except (KeyError, TypeError, ValueError):
            return None
    return None


class LlmJudge:
    """Grades description answers through a chat backend.

    Replies without a readable score fall back to rule-based KIP recall.
    """

    def __init__(self, backend: ChatBackend, template: Optional[str] = None):
        self.backend = backend
        self.template = template or load_template("answer_judge")

    def __call__(self, question: str, gt_answer: str, kips: Sequence[str], pred: str) -> float:
        prompt = render(self.template, {
            "question": question,
            "gt_answer": gt_answer,
            "kips": "\n".join(f"- {k}" for k in kips),
            "prediction": pred,
        })
        reply = self.backend.complete([ChatMessage("user", prompt)], key="judge")
        score = parse_score(reply)
        if score is None:
            log.warning("judge reply had no score; using rule-based KIP recall")
            return kip_recall(pred, kips)
        return score


@dataclass(frozen=True)
class PlanComparison:
    verdicts: dict[str, str]
    reasons: dict[str, str]


def compare_plans(backend: ChatBackend, task: str, plan_a: MetaPlan, plan_b: MetaPlan,
                  template: Optional[str] = None, key: Optional[str] = None) -> PlanComparison:
    prompt = render(template or load_template("plan_compare"), {
        "task": task,
        "plan_a": serialize_meta_plan(plan_a),
        "plan_b": serialize_meta_plan(plan_b),
    })
    reply = backend.complete([ChatMessage("user", prompt)], key=key)
    obj = _first_object_with(reply, "overall_better")
    if obj is None:
        raise ValueError("plan comparison reply has no overall_better field")
    verdicts, reasons = {}, {}
    for c in CRITERIA:
        v = str(obj.get(f"{c}_better", "tie")).strip().lower()
        verdicts[c] = v if v in VERDICTS else "tie"
        if f"{c}_reason" in obj:
            reasons[c] = str(obj[f"{c}_reason"])
    return PlanComparison(verdicts, reasons)


def head_to_head(comparisons: Sequence[PlanComparison]) -> dict[str, dict[str, float]]:
    """Win/tie/loss rates of plan A per criterion."""
    out = {}
    n = len(comparisons) or 1
    for c in CRITERIA:
        counts = Counter(cmp.verdicts[c] for cmp in comparisons)
        out[c] = {"win": counts["a"] / n, "tie": counts["tie"] / n, "loss": counts["b"] / n}
    return out


def format_head_to_head(rates: dict[str, dict[str, float]]) -> str:
    lines = [f"{'criterion':<16} {'win':>6} {'tie':>6} {'loss':>6}"]
    for c, r in rates.items():
        lines.append(f"{c:<16} {r['win']:6.1%} {r['tie']:6.1%} {r['loss']:6.1%}")
    return "\n".join(lines)


def dumps_comparison(cmp: PlanComparison) -> str:
    return json.dumps({"verdicts": cmp.verdicts, "reasons": cmp.reasons}, ensure_ascii=False)
