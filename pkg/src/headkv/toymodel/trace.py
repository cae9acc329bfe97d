from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvariantViolation
from ..kvstore import HeadId


@dataclass
class StepRecord:
    """One decoding step: the emitted token and, per head, attention over the visible positions.

    ``positions[h][i]`` is the original token position that ``attention[h][i]`` refers to.
    """

    emitted_token: int
    attention: dict[HeadId, np.ndarray]
    positions: dict[HeadId, np.ndarray]
    argmax_token: int | None = None


@dataclass
class AttentionTrace:
    shape: tuple[int, int]
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def emitted(self) -> list[int]:
        return [s.emitted_token for s in self.steps]

    def check(self, tol: float = 1e-9) -> None:
        for t, step in enumerate(self.steps):
            for h, a in step.attention.items():
                if len(a) != len(step.positions[h]):
                    raise InvariantViolation(f"step {t} head {h}: attention/positions length mismatch")
                if abs(a.sum() - 1.0) > tol:
                    raise InvariantViolation(f"step {t} head {h}: attention sums to {a.sum()!r}")
