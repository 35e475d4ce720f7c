"""Order-independent reduction of numbered partial sums."""
from __future__ import annotations


def add_parts(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def pairwise(parts: list[dict]) -> dict:
    while len(parts) > 1:
        nxt = [add_parts(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


class DyadicSum:
    """Partial sums keyed by block number, combined along a fixed binary tree.

    Two siblings are added (left + right) as soon as both are present, so the
    stored nodes depend only on the set of inserted blocks and the final total
    is bit-identical whatever the insertion or merge order.
    """

    def __init__(self):
        self.nodes: dict[tuple[int, int], dict] = {}

    def insert(self, level: int, index: int, part: dict):
        key = (level, index)
        while True:
            if self._overlaps(*key):
                raise ValueError(f"block range {key} was accumulated twice")
            sib = (key[0], key[1] ^ 1)
            if sib not in self.nodes:
                self.nodes[key] = part
                return
            other = self.nodes.pop(sib)
            part = add_parts(other, part) if sib[1] < key[1] else add_parts(part, other)
            key = (key[0] + 1, key[1] >> 1)

    def _overlaps(self, level: int, index: int) -> bool:
        lo, hi = index << level, (index + 1) << level
        return any((ix << lv) < hi and lo < ((ix + 1) << lv) for lv, ix in self.nodes)

    def items(self):
        return sorted(self.nodes.items(), key=lambda kv: kv[0][1] << kv[0][0])

    def merge_from(self, other: "DyadicSum"):
        for (level, index), part in other.items():
            self.insert(level, index, {k: v.copy() for k, v in part.items()})

    def total(self) -> dict | None:
        out = None
        for _, p in self.items():
            out = p if out is None else add_parts(out, p)
        return out
