"""Recording and replay of discrete selections (FPS indices, EMD assignments).

Finite-difference gradient checks perturb one parameter at a time; if a
farthest-point selection or an assignment plan flips between the two probes
the difference quotient measures a jump, not a derivative. Running the
forward pass once under ``PlanTape.record()`` and then every probe under
``PlanTape.replay()`` pins those choices.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

_active: ContextVar["PlanTape | None"] = ContextVar("telereg_plan_tape", default=None)


class PlanTape:
    def __init__(self):
        self._plans: list = []
        self._cursor = 0
        self._replaying = False

    def __len__(self):
        return len(self._plans)

    @contextmanager
    def record(self):
        self._plans.clear()
        self._replaying = False
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)

    @contextmanager
    def replay(self):
        self._cursor = 0
        self._replaying = True
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)
            self._replaying = False

    def _take(self, compute):
        if self._replaying:
            if self._cursor >= len(self._plans):
                raise RuntimeError("plan tape exhausted: replayed forward pass differs from the recorded one")
            plan = self._plans[self._cursor]
            self._cursor += 1
            return plan
        plan = compute()
        self._plans.append(plan)
        return plan


def planned(compute):
    """Return ``compute()``, or the matching recorded plan when a tape is replaying."""
    tape = _active.get()
    if tape is None:
        return compute()
    return tape._take(compute)
