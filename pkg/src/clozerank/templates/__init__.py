"""Prompt templates shipped with the package, overridable from a directory."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

NAMES = ("mask_verb", "mask_color", "completion", "completion_repair", "comparison", "comparison_repair")
_FIELD = re.compile(r"\{(\w+)\}")


class Templates:
    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in NAMES:
            raise KeyError(name)
        if name not in self._cache:
            path = self.override_dir / f"{name}.txt" if self.override_dir else None
            if path is not None and path.exists():
                text = path.read_text(encoding="utf-8")
            else:
                text = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
            self._cache[name] = text.rstrip("\n")
        return self._cache[name]

    def render(self, name: str, **values: object) -> str:
        # single pass: substituted text is never rescanned for fields
        return _FIELD.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), self.get(name))


DEFAULT = Templates()
