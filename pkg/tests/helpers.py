"""Builders shared by several test modules."""

import random

from hypothesis import strategies as st

from metaplan.plan_model import MetaPlan
from metaplan.task_library import MetaTaskDef, TaskLibrary

FACTS = ["rs_image", "user_query", "f_a", "f_b", "f_c", "f_d", "f_e"]


def make_def(operation, pre=(), eff=(), tools=("Tool",)):
    return MetaTaskDef(operation, f"{operation} step", (), (), frozenset(pre), frozenset(eff), tuple(tools))


def wide_library(n_tools=104, n_ops=26, seed=7):
    """Library whose operations cover ``n_tools`` distinct tools, four apiece.

    About half the operations also borrow the last tool of their neighbour, so
    per-plan unions are not plain concatenations.
    """
    rng = random.Random(seed)
    tools = [f"tool_{i:03d}" for i in range(n_tools)]
    defs = []
    for k in range(n_ops):
        own = tools[4 * k:4 * k + 4]
        borrowed = [tools[4 * k - 1]] if k and rng.random() < 0.5 else []
        defs.append(make_def(f"op_{k:02d}", tools=own + borrowed))
    return TaskLibrary.from_defs(defs)


@st.composite
def libraries_and_plans(draw, max_ops=6, max_steps=7):
    """A random library over a small fact alphabet and a plan that may use unknown ops."""
    n_ops = draw(st.integers(1, max_ops))
    facts = st.sets(st.sampled_from(FACTS), max_size=3)
    defs = [make_def(f"op{i}", draw(facts), draw(facts), (f"tool{i}",)) for i in range(n_ops)]
    lib = TaskLibrary.from_defs(defs)
    names = [d.operation for d in defs] + ["unknown_op"]
    ops = draw(st.lists(st.sampled_from(names), min_size=1, max_size=max_steps))
    plan = MetaPlan.from_steps([(op, f"do {op}") for op in ops])
    return lib, plan
