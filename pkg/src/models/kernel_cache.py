"""Thread-safe LRU cache for resampling pseudoinverses.

Readers and writers share one lock; entries are computed outside the lock
and inserted only if no other thread got there first.
"""
from collections import OrderedDict
import threading
from typing import Any, Callable, Hashable, Optional


class KernelCache:
    def __init__(self, max_size: int = 64):
        self.max_size = max_size
        self._store: "OrderedDict[Hashable, Any]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable) -> Optional[Any]:
        with self._lock:
            if key in self._store:
                self._store.move_to_end(key)
                self.hits += 1
                return self._store[key]
            self.misses += 1
            return None

    def set(self, key: Hashable, value: Any) -> Any:
        with self._lock:
            if key in self._store:
                # first insertion wins
                self._store.move_to_end(key)
                return self._store[key]
            self._store[key] = value
            if len(self._store) > self.max_size:
                self._store.popitem(last=False)
            return value

    def get_or_create(self, key: Hashable, factory: Callable[[], Any]) -> Any:
        value = self.get(key)
        if value is None:
            value = self.set(key, factory())
        return value

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
            self.hits = self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._store
