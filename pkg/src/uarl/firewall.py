"""Access audit keeping the target-proxy dataset out of every training path.

Training entry points run inside :func:`training_scope`. A dataset marked
``guarded`` records a violation (and raises) when its contents are read while
any training scope is active.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

_scope: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("uarl_training_scope", default=())


class FirewallViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class Violation:
    dataset: str
    scope: tuple[str, ...]


class AccessAudit:
    def __init__(self) -> None:
        self.violations: list[Violation] = []
        self.guarded_reads = 0

    def reset(self) -> None:
        self.violations.clear()
        self.guarded_reads = 0


AUDIT = AccessAudit()


@contextlib.contextmanager
def training_scope(name: str):
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def active_scope() -> tuple[str, ...]:
    return _scope.get()


def check_read(dataset_name: str) -> None:
    AUDIT.guarded_reads += 1
    scope = _scope.get()
    if scope:
        AUDIT.violations.append(Violation(dataset_name, scope))
        raise FirewallViolation(f"guarded dataset {dataset_name!r} read inside training scope {'/'.join(scope)}")
