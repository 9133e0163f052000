"""Per-key linearizability check for key-value client histories.

Each key is an independent register, so a history is linearizable when
every per-key sub-history is. The search tries to order operations one at a
time: an operation may go next only if it was invoked before the earliest
response among the operations still unplaced. Operations that never got a
response may take effect at any point after invocation, or not at all.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional

from .bench import HistoryOp
from .core import Op


@dataclass(frozen=True)
class LinearizabilityResult:
    ok: bool
    keys_checked: int
    failed_key: Optional[bytes] = None

    def __bool__(self) -> bool:
        return self.ok


def check_history(history: Iterable[HistoryOp]) -> LinearizabilityResult:
    by_key: dict[bytes, list[HistoryOp]] = defaultdict(list)
    for op in history:
        by_key[op.key].append(op)
    for key in sorted(by_key):
        if not check_register(by_key[key]):
            return LinearizabilityResult(False, len(by_key), key)
    return LinearizabilityResult(True, len(by_key))


def check_register(ops: list[HistoryOp], initial: Optional[bytes] = None) -> bool:
    """Whether operations on one key admit a legal sequential order."""
    # unanswered reads constrain nothing
    ops = [o for o in ops if o.respond is not None or o.op == Op.PUT]
    ops.sort(key=lambda o: o.invoke)
    n = len(ops)
    if n == 0:
        return True
    resp = [o.respond if o.respond is not None else math.inf for o in ops]
    required = 0
    for i, o in enumerate(ops):
        if o.respond is not None:
            required |= 1 << i
    seen: set[tuple[int, Optional[bytes]]] = set()
    stack: list[tuple[int, Optional[bytes]]] = [(0, initial)]
    while stack:
        done, cur = stack.pop()
        if done & required == required:
            return True
        if (done, cur) in seen:
            continue
        seen.add((done, cur))
        horizon = min(resp[i] for i in range(n) if not done >> i & 1)
        for i in range(n):
            if done >> i & 1:
                continue
            o = ops[i]
            if o.invoke > horizon:
                break
            if o.op == Op.PUT:
                stack.append((done | 1 << i, o.value))
            elif (o.found and cur == o.result) or (not o.found and cur is None):
                stack.append((done | 1 << i, cur))
    return False
