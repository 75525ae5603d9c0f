"""
Residency buffer for class prompts.

With many classes, only the prompts of the classes in the current batch need
to live next to the model. `PagingBuffer` keeps at most `capacity` classes
resident, evicting the least recently used ones. A class's optimizer moments
travel with its prompts, so paging never changes the numbers a run produces.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from collections.abc import Iterable
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .optim import Moments, OptimizerState, moments_state
from .utils import DMLError

if TYPE_CHECKING:
    from .proxy import ClassPromptStore

logger = logging.getLogger(__name__)


class PagingError(DMLError):
    """Raised when a non-resident class is touched or the buffer is overcommitted."""


@dataclass
class PagingStats:
    page_ins: int = 0
    page_outs: int = 0
    resident_bytes: int = 0
    peak_resident_bytes: int = 0


class PagingBuffer:
    """
    LRU residency manager over a ClassPromptStore.

    The buffer starts with classes 0..capacity-1 resident (counted as page
    ins). `capacity=None` keeps every class resident for the whole run.
    """

    def __init__(self, store: ClassPromptStore, optimizer: OptimizerState,
                 capacity: int | None = None) -> None:
        self.store = store
        self.optimizer = optimizer
        self.capacity = store.num_classes if capacity is None else capacity
        if self.capacity < 1:
            raise PagingError("Paging capacity must be at least 1")
        self.stats = PagingStats()
        self.logger = logging.getLogger(__name__)
        self._lru: OrderedDict[int, None] = OrderedDict()
        self._moments: dict[int, Moments | None] = {}

        for label in range(store.num_classes):
            if label < self.capacity:
                self._lru[label] = None
                self.stats.page_ins += 1
            else:
                store.evict(label)
                self._moments[label] = None
        self._refresh_bytes()
        self.logger.debug(
            "Paging buffer holds %d of %d classes", len(self._lru), store.num_classes
        )

    @property
    def resident(self) -> list[int]:
        return list(self._lru)

    @property
    def bytes_per_class(self) -> int:
        return self.store.bytes_per_class

    def page(self, classes_in: Iterable[int]) -> None:
        """
        Make every class in `classes_in` resident.

        Raises:
            PagingError: If more classes are requested than the capacity holds
        """
        wanted = list(dict.fromkeys(int(c) for c in classes_in))
        if len(wanted) > self.capacity:
            raise PagingError(
                f"Batch needs {len(wanted)} resident classes but capacity is {self.capacity}"
            )
        for label in wanted:
            if label in self._lru:
                self._lru.move_to_end(label)
        missing = [label for label in wanted if label not in self._lru]
        keep = set(wanted)
        while len(self._lru) + len(missing) > self.capacity:
            victim = next(label for label in self._lru if label not in keep)
            self._page_out(victim)
        for label in missing:
            self._page_in(label)
        self._refresh_bytes()

    def _page_out(self, label: int) -> None:
        del self._lru[label]
        self.store.evict(label)
        self._moments[label] = self.optimizer.pop(self.store.name(label))
        self.stats.page_outs += 1

    def _page_in(self, label: int) -> None:
        self.store.restore(label)
        self.optimizer.push(self.store.name(label), self._moments.pop(label))
        self._lru[label] = None
        self.stats.page_ins += 1

    def _refresh_bytes(self) -> None:
        size = self.store.resident_bytes
        self.stats.resident_bytes = size
        self.stats.peak_resident_bytes = max(self.stats.peak_resident_bytes, size)

    def adopt_moments(self) -> None:
        """Move moments of non-resident classes out of the optimizer (after a load)."""
        for label in list(self._moments):
            moments = self.optimizer.pop(self.store.name(label))
            if moments is not None:
                self._moments[label] = moments

    def state_dict(self) -> dict[str, np.ndarray]:
        """Optimizer moments of evicted classes, keyed like OptimizerState.state_dict."""
        state: dict[str, np.ndarray] = {}
        for label, moments in sorted(self._moments.items()):
            if moments is not None:
                state.update(moments_state(self.store.name(label), moments))
        return state


def page(classes_in: Iterable[int], buffer: PagingBuffer) -> None:
    buffer.page(classes_in)
