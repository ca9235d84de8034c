"""Instruction templates that wrap a condition annotation into a prompt."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

__all__ = ["UnknownConditionType", "TemplateTable", "default_templates"]


class UnknownConditionType(KeyError):
    """Condition type has no template entry."""


class TemplateTable:
    """condition_type -> list of prompt templates, each with one {z} slot.

    Training draws a template uniformly at random per sample; evaluation
    always takes the first one so scores are deterministic.
    """

    def __init__(self, table: dict[str, list[str]]):
        for ctype, templates in table.items():
            if not templates:
                raise ValueError(f"no templates for condition type '{ctype}'")
            for t in templates:
                if "{z}" not in t:
                    raise ValueError(f"template for '{ctype}' lacks a {{z}} placeholder: {t!r}")
        self.table = dict(table)

    @classmethod
    def from_json(cls, path) -> "TemplateTable":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def condition_types(self) -> list[str]:
        return sorted(self.table)

    def render(
        self,
        condition_text: str,
        condition_type: str,
        rng: np.random.Generator | None = None,
        disable_template: bool = False,
    ) -> str:
        """Substitute the condition into a template.

        With `disable_template` the raw condition text is returned
        unwrapped (the no-prompt ablation). `rng` picks among multiple
        phrasings; without it the first template is used.
        """
        if not condition_text:
            raise ValueError("empty condition text")
        if disable_template:
            return condition_text
        if condition_type not in self.table:
            raise UnknownConditionType(
                f"unknown condition type '{condition_type}'; known: {', '.join(self.condition_types())}"
            )
        templates = self.table[condition_type]
        idx = int(rng.integers(len(templates))) if rng is not None and len(templates) > 1 else 0
        return templates[idx].replace("{z}", condition_text)


def default_templates() -> TemplateTable:
    """The template table shipped with the package."""
    text = resources.files("megan").joinpath("templates.json").read_text(encoding="utf-8")
    return TemplateTable(json.loads(text))
