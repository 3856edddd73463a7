"""Pruning schedules: where tokens are pruned, how many, and the TPR.

Block numbers are 1-based: an entry ``{block: b, r: R}`` prunes R tokens
after the b-th transformer block. With Last Layer Fusion the last two
blocks carry no entries (pruned tokens would be reinserted immediately);
without it only the final block is excluded.

Token counts reported by :meth:`PruningSchedule.trajectory` are sequence
lengths, CLS included. When a CLS token is present the first module prunes
one extra token, so the sequence length after it is again ``M0 - R``. The
total pruning ratio (TPR) counts patch tokens only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import ScheduleError


@dataclass
class Curriculum:
    enabled: bool = False
    start_r: int = 1
    final_r: int = 0
    warmup_epochs: int = 0


@dataclass(frozen=True)
class Entry:
    block: int
    r: int


@dataclass
class PruningSchedule:
    depth: int
    m0: int
    cls: bool = False
    llf: bool = False
    entries: list = field(default_factory=list)
    curriculum: Curriculum = field(default_factory=Curriculum)
    prefer_div8: bool = False

    def __post_init__(self):
        self.entries = [e if isinstance(e, Entry) else Entry(int(e["block"]), int(e["r"]))
                        for e in self.entries]
        if isinstance(self.curriculum, dict):
            self.curriculum = Curriculum(**self.curriculum)
        self.validate()

    # -- invariants -----------------------------------------------------------
    @property
    def last_block(self):
        """Highest block number that may carry an entry."""
        return self.depth - 2 if self.llf else self.depth - 1

    def validate(self):
        if self.depth < 1 or self.m0 < 1:
            raise ScheduleError("depth and m0 must be positive")
        prev = 0
        for e in self.entries:
            if e.block <= prev:
                raise ScheduleError("entry blocks must be strictly increasing and >= 1")
            if e.block > self.last_block:
                raise ScheduleError(
                    f"entry after block {e.block} not allowed (last allowed: {self.last_block}, llf={self.llf})")
            if e.r < 1:
                raise ScheduleError(f"prune count must be >= 1, got {e.r} at block {e.block}")
            prev = e.block
        if self.entries and self.trajectory()[-1] < 1 + int(self.cls):
            raise ScheduleError(f"schedule prunes {self.total_pruned} of {self.m0} patch tokens; at least one must remain")

    # -- derived quantities ---------------------------------------------------
    def effective_counts(self):
        """Tokens actually removed per entry (first entry +1 with CLS)."""
        return [e.r + (1 if self.cls and i == 0 else 0) for i, e in enumerate(self.entries)]

    def prune_map(self):
        return {e.block: r for e, r in zip(self.entries, self.effective_counts())}

    def trajectory(self):
        """Sequence length before the first entry and after every entry."""
        n = self.m0 + int(self.cls)
        out = [n]
        for r in self.effective_counts():
            n -= r
            out.append(n)
        return out

    def tokens_per_block(self):
        """Sequence length seen by each of the ``depth`` blocks (LLF-aware)."""
        pm = self.prune_map()
        n = self.m0 + int(self.cls)
        out = []
        for b in range(1, self.depth + 1):
            if self.llf and b == self.depth:
                out.append(self.m0 + int(self.cls))
            else:
                out.append(n)
            n -= pm.get(b, 0)
        return out

    @property
    def total_pruned(self):
        return sum(self.effective_counts())

    @property
    def final_tokens(self):
        """Sequence length (CLS included) leaving the last pruning module."""
        return self.trajectory()[-1]

    @property
    def final_patch_tokens(self):
        return self.final_tokens - int(self.cls)

    @property
    def tpr(self):
        return self.total_pruned / self.m0

    # -- curriculum -----------------------------------------------------------
    def at_rate(self, r):
        """Copy with every entry's R rescaled so that the largest equals ``r``.

        For per-block schedules (all entries equal) this simply sets every R.
        Entries scaled to zero are dropped.
        """
        if not self.entries:
            return self
        top = max(e.r for e in self.entries)
        entries = []
        for e in self.entries:
            new_r = _round_half_up(e.r * r / top)
            if new_r >= 1:
                entries.append(Entry(e.block, new_r))
        return PruningSchedule(self.depth, self.m0, self.cls, self.llf, entries,
                               self.curriculum, self.prefer_div8)

    def for_epoch(self, epoch):
        if not self.curriculum.enabled:
            return self
        return self.at_rate(curriculum_r(epoch, self.curriculum))

    # -- serialisation --------------------------------------------------------
    def to_dict(self):
        return {
            "depth": self.depth,
            "m0": self.m0,
            "cls": self.cls,
            "llf": self.llf,
            "entries": [{"block": e.block, "r": e.r} for e in self.entries],
            "curriculum": asdict(self.curriculum),
            "prefer_div8": self.prefer_div8,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            depth=int(d["depth"]),
            m0=int(d["m0"]),
            cls=bool(d.get("cls", False)),
            llf=bool(d.get("llf", False)),
            entries=list(d.get("entries", [])),
            curriculum=Curriculum(**d.get("curriculum", {})),
            prefer_div8=bool(d.get("prefer_div8", False)),
        )

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def build_per_block(depth, m0, r, llf=False, cls=False, **kw):
    """Prune ``r`` tokens after every eligible block."""
    if r < 0:
        raise ScheduleError("prune rate must be non-negative")
    last = depth - 2 if llf else depth - 1
    entries = [Entry(b, r) for b in range(1, last + 1)] if r > 0 else []
    return PruningSchedule(depth, m0, cls, llf, entries, **kw)


def build_staged(stages, m0, llf=False, cls=False, depth=None, **kw):
    """Schedule with exactly the given ``{block, r}`` stages."""
    entries = [s if isinstance(s, Entry) else Entry(int(s["block"]), int(s["r"])) for s in stages]
    if depth is None:
        last = max((e.block for e in entries), default=0)
        depth = last + (2 if llf else 1)
    return PruningSchedule(depth, m0, cls, llf, entries, **kw)


def staged_from_keep_targets(blocks, keep_targets, m0, llf=False, cls=False, depth=None, **kw):
    """Staged schedule reducing the patch count to each target in turn."""
    if len(blocks) != len(keep_targets):
        raise ScheduleError("blocks and keep targets differ in length")
    stages, prev = [], m0
    for i, (b, k) in enumerate(zip(blocks, keep_targets)):
        r = prev - k - (1 if cls and i == 0 else 0)
        stages.append({"block": b, "r": r})
        prev = k
    return build_staged(stages, m0, llf, cls, depth, **kw)


def tpr(schedule):
    return schedule.tpr


def tpr_percent(schedule):
    return _round_half_up(100 * schedule.tpr)


def curriculum_r(epoch, curriculum):
    """Linear ramp from ``start_r`` (epoch 0) to ``final_r`` (epoch warmup-1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    c = curriculum
    if not c.enabled or c.warmup_epochs <= 1 or epoch >= c.warmup_epochs - 1:
        return c.final_r
    return _round_half_up(c.start_r + (c.final_r - c.start_r) * epoch / (c.warmup_epochs - 1))


def validate_div8(schedule):
    """Warnings for every post-prune sequence length not divisible by 8."""
    if not schedule.prefer_div8:
        return []
    warnings = []
    for e, n in zip(schedule.entries, schedule.trajectory()[1:]):
        if n % 8:
            warnings.append(f"after block {e.block}: {n} tokens remain ({n} mod 8 = {n % 8})")
    return warnings


def format_table(schedule):
    """Human-readable trajectory table (one line for an empty schedule)."""
    if not schedule.entries:
        return f"no pruning: {schedule.final_tokens} tokens through {schedule.depth} blocks, TPR 0%"
    lines = [f"{'block':>5} {'pruned':>7} {'tokens':>7}"]
    lines.append(f"{'in':>5} {'':>7} {schedule.trajectory()[0]:>7}")
    for e, r, n in zip(schedule.entries, schedule.effective_counts(), schedule.trajectory()[1:]):
        lines.append(f"{e.block:>5} {r:>7} {n:>7}")
    lines.append(f"final tokens: {schedule.final_tokens}  TPR: {tpr_percent(schedule)}%")
    return "\n".join(lines)
