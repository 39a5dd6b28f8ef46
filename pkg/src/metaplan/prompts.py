"""Prompt templates with ``{name}`` placeholders.

Only known placeholder names are substituted, so templates may contain literal
JSON braces.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

BUILTIN = ("planner", "executor", "answer_judge", "plan_compare")


def load_template(name_or_path: str | Path, override: Optional[str | Path] = None) -> str:
    """Read a template from ``override`` if given, else the bundled copy of ``name``."""
    if override is not None:
        return Path(override).read_text(encoding="utf-8")
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return path.read_text(encoding="utf-8")
    name = str(name_or_path)
    if name not in BUILTIN:
        raise FileNotFoundError(f"no template {name!r}")
    return (resources.files("metaplan") / "templates" / f"{name}.txt").read_text(encoding="utf-8")


def render(template: str, values: Mapping[str, object]) -> str:
    if not values:
        return template
    pattern = re.compile(r"\{(" + "|".join(re.escape(k) for k in values) + r")\}")
    return pattern.sub(lambda m: str(values[m.group(1)]), template)
