"""Run hyper-parameters.

Defaults: three candidates, exponential decay with base 0.5, ``alpha1 = 1``
and ``alpha2 = 0.075``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import DecayPolicy, FusionWeights
from .errors import InvalidInputError


@dataclass(frozen=True)
class RunConfig:
    topn: int = 3
    beta: float = 0.5
    linear_d: float | None = None
    alpha1: float = 1.0
    alpha2: float = 0.075
    normalize_s1: bool = False
    workers: int = 4
    ks: tuple[int, ...] = (1, 5, 10)
    templates_dir: str | None = None

    def __post_init__(self):
        if self.topn < 1:
            raise InvalidInputError("topn must be >= 1")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")
        self.policy()
        self.weights()

    def policy(self) -> DecayPolicy:
        if self.linear_d is not None:
            return DecayPolicy.linear(self.linear_d)
        return DecayPolicy.exponential(self.beta)

    def weights(self) -> FusionWeights:
        return FusionWeights(self.alpha1, self.alpha2)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        out = {
            "topn": self.topn,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "normalize_s1": self.normalize_s1,
            "ks": list(self.ks),
        }
        out.update(self.policy().describe())
        return out


@dataclass
class FileConfig:
    """Values read from ``--config``; keys mirror the long CLI flags."""

    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None) -> "FileConfig":
        if path is None:
            return cls()
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        return cls({k.replace("-", "_"): v for k, v in data.items()})

    def get(self, key: str, default=None):
        return self.values.get(key, default)
