"""Time-division slot assignment for anchor broadcasts."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CapacityError, InvalidArgumentError

DEFAULT_SLOT = 2.2e-3
MAX_ANCHORS = 128


@dataclass(frozen=True)
class Slot:
    anchor_id: int
    start: float
    length: float

    @property
    def end(self) -> float:
        return self.start + self.length


def tdma_schedule(anchor_ids, slot: float = DEFAULT_SLOT) -> list[Slot]:
    """Consecutive equal slots in ascending id order."""
    ids = sorted(int(i) for i in anchor_ids)
    if len(ids) > MAX_ANCHORS:
        raise CapacityError(f"{len(ids)} anchors exceed the {MAX_ANCHORS}-slot frame")
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("duplicate anchor ids")
    if slot <= 0:
        raise InvalidArgumentError("slot length must be positive")
    return [Slot(a, k * slot, slot) for k, a in enumerate(ids)]
