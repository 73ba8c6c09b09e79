"""Virtual-time asyncio loop for deterministic, faster-than-real-time runs.

The loop never blocks on I/O: whenever asyncio would wait in ``select`` for the
next timer, the virtual clock jumps forward by the wait instead. Coroutines
written against ``asyncio.sleep``/``loop.time`` therefore run unchanged on a
real loop or a virtual one.
"""

from __future__ import annotations

import asyncio
import selectors
from typing import Any, Awaitable, Callable, TypeVar

T = TypeVar("T")


class VirtualTimeDeadlock(RuntimeError):
    """Every task is blocked on something other than a timer."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self) -> None:
        self._map: dict[int, selectors.SelectorKey] = {}
        self.loop: VirtualTimeLoop | None = None

    def register(self, fileobj, events, data=None):
        fd = fileobj if isinstance(fileobj, int) else fileobj.fileno()
        key = selectors.SelectorKey(fileobj, fd, events, data)
        self._map[fd] = key
        return key

    def unregister(self, fileobj):
        fd = fileobj if isinstance(fileobj, int) else fileobj.fileno()
        return self._map.pop(fd)

    def select(self, timeout=None):
        if timeout is None:
            raise VirtualTimeDeadlock("no runnable task and no pending timer")
        if timeout > 0:
            loop = self.loop
            head = loop._scheduled[0]._when if loop._scheduled else None
            # Land exactly on the next deadline so timer arithmetic stays exact.
            loop._now = head if head is not None and head <= loop._now + timeout else loop._now + timeout
        return []

    def get_map(self):
        return self._map

    def close(self) -> None:
        self._map.clear()


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0) -> None:
        selector = _VirtualSelector()
        self._now = start
        super().__init__(selector)
        selector.loop = self

    def time(self) -> float:
        return self._now


def run_virtual(main: Callable[[], Awaitable[T]] | Awaitable[T], start: float = 0.0) -> T:
    """Run a coroutine to completion on a fresh :class:`VirtualTimeLoop`."""
    loop = VirtualTimeLoop(start)
    try:
        coro = main() if callable(main) else main
        return loop.run_until_complete(coro)
    finally:
        _cancel_remaining(loop)
        loop.close()


def run(main: Callable[[], Awaitable[T]], virtual: bool = True) -> T:
    if virtual:
        return run_virtual(main)
    return asyncio.run(main())


def _cancel_remaining(loop: asyncio.AbstractEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))


def loop_clock() -> Callable[[], float]:
    """Clock bound to the running loop; valid only inside that loop."""
    loop = asyncio.get_running_loop()
    return loop.time


def now() -> float:
    return asyncio.get_running_loop().time()


Clock = Callable[[], float]
AnyDict = dict[str, Any]
