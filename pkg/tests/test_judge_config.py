import json

import pytest

from metaplan.backends import ScriptedBackend
from metaplan.config import load_config
from metaplan.errors import SchemaViolation
from metaplan.judge import LlmJudge, compare_plans, format_head_to_head, head_to_head, parse_score
from metaplan.plan_model import MetaPlan
from metaplan.prompts import BUILTIN, load_template, render


def test_render_leaves_json_braces_alone():
    assert render('{query} -> {"a": 1} {unknown}', {"query": "q"}) == 'q -> {"a": 1} {unknown}'


@pytest.mark.parametrize("name", BUILTIN)
def test_builtin_templates_load(name):
    assert load_template(name).strip()


def test_template_override(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("custom {query}")
    assert load_template("planner", path) == "custom {query}"
    with pytest.raises(FileNotFoundError):
        load_template("nope")


@pytest.mark.parametrize("reply, expected", [
    ('{"matched": 1, "total": 2, "score": 0.5}', 0.5),
    ('Verdict: {"matched": 3, "total": 4}', 0.75),
    ('{"score": 7}', 1.0),
    ("no json", None),
    ('{"matched": 1, "total": 0}', None),
])
def test_parse_score(reply, expected):
    assert parse_score(reply) == expected


def test_llm_judge_and_fallback():
    judge = LlmJudge(ScriptedBackend({"judge": ['{"score": 0.4}', "I cannot decide"]}))
    assert judge("q", "gt", ["bridge", "flooded"], "the bridge is flooded") == 0.4
    assert judge("q", "gt", ["bridge", "flooded"], "the bridge is intact") == 0.5


def test_compare_plans():
    a = MetaPlan.from_steps([("detect_objects", "find ships")])
    b = MetaPlan.from_steps([("describe_scene", "describe")])
    reply = json.dumps({"correctness_better": "a", "correctness_reason": "direct", "followability_better": "tie",
                        "standardization_better": "B", "overall_better": "a"})
    cmp = compare_plans(ScriptedBackend({}, fallback=reply), "count ships", a, b)
    assert cmp.verdicts == {"correctness": "a", "followability": "tie", "standardization": "b", "overall": "a"}
    rates = head_to_head([cmp, cmp])
    assert rates["overall"] == {"win": 1.0, "tie": 0.0, "loss": 0.0}
    assert "overall" in format_head_to_head(rates)


def test_config_resolution(tmp_path):
    (tmp_path / "script.json").write_text(json.dumps({"r1": ["x"]}))
    (tmp_path / "config.json").write_text(json.dumps({
        "planner": {"mode": "http", "endpoint": "https://x/v1", "model": "m", "temperature": 0.7},
        "executor": {"mode": "mock", "script": "script.json"},
        "judge": {"mode": "rule"},
        "gamma": 0.5,
        "limits": {"max_iterations": 9},
        "templates": {"planner": "planner.txt"},
    }))
    cfg = load_config(tmp_path / "config.json", seed=4)
    assert cfg.planner.mode == "http" and cfg.planner.http.seed == 4 and cfg.planner.http.temperature == 0.7
    assert cfg.executor.scripts == {"r1": ["x"]}
    assert cfg.judge is None
    assert cfg.gamma == 0.5 and cfg.limits.max_iterations == 9
    assert cfg.templates["planner"] == tmp_path / "planner.txt"


def test_polarity_lexicon_from_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"polarity": {"affirmative": ["Present"]}}))
    lexicon = load_config(tmp_path / "c.json").lexicon
    assert lexicon.polarity("present in the image") is True
    assert lexicon.polarity("no") is False


@pytest.mark.parametrize("bad", [
    {"polarity": {"affirmative": ["yes"], "negative": ["yes"]}},
    {"polarity": {"maybe": ["x"]}},
    {"planner": {"mode": "http", "model": "m"}},
    {"planner": {"mode": "http", "endpoint": "e", "model": "m", "api_key": "sk-inline"}},
    {"planner": {"mode": "carrier-pigeon"}},
    {"weights": [0.5, 0.5]},
])
def test_config_rejects(tmp_path, bad):
    (tmp_path / "c.json").write_text(json.dumps(bad))
    with pytest.raises(SchemaViolation):
        load_config(tmp_path / "c.json")
