"""Structured result records shared by the verification modules and the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


PASS = "PASS"
FAIL = "FAIL"
INCONCLUSIVE = "INCONCLUSIVE"


@dataclass
class ExperimentReport:
    """Outcome of one inequality check.

    ``left`` and ``right`` are the two sides of the inequality as computed
    (point estimates or certified bounds), ``left_se``/``right_se`` their
    standard errors when Monte-Carlo estimated (None for exact values).
    ``verdict`` is PASS, FAIL, or INCONCLUSIVE; ``detail`` carries witnesses
    and diagnostics.
    """

    experiment: str
    verdict: str
    left: float | None = None
    right: float | None = None
    left_se: float | None = None
    right_se: float | None = None
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)
    wall_time: float | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        out = {
            "experiment": self.experiment,
            "verdict": self.verdict,
            "left": _jsonable(self.left),
            "right": _jsonable(self.right),
            "left_se": _jsonable(self.left_se),
            "right_se": _jsonable(self.right_se),
            "seed": self.seed,
            "inputs": {k: _jsonable(v) for k, v in self.inputs.items()},
            "detail": {k: _jsonable(v) for k, v in self.detail.items()},
            "wall_time": self.wall_time,
        }
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _jsonable(value):
    """Coerce numpy scalars/arrays and non-finite floats to JSON-safe values."""
    import numpy as np

    if value is None or isinstance(value, (str, bool, int)):
        return value
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value
