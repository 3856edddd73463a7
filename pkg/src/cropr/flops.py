"""Analytic FLOP model for (pruned) ViTs.

One multiply-add counts as 2 FLOPs. Per block with M tokens and width D:
attention logits and attention-weighted values ``2 * 2 M^2 D``; q/k/v/out
projections ``2 * 4 M D^2``; MLP ``2 * 2 r M D^2`` for MLP ratio r. A folded
router costs ``2 M D`` at every pruning entry. Norms, softmax, GELU and
residual adds are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .schedule import PruningSchedule

CONVENTION = "1 multiply-add = 2 FLOPs"


@dataclass
class CostModel:
    tokens_per_block: list
    width: int
    heads: int
    mlp_ratio: float
    m0: int
    patch_dim: int
    num_classes: int
    router_tokens: list = field(default_factory=list)
    dense_head: bool = False

    @classmethod
    def from_config(cls, config, schedule=None, dense_head=False):
        if schedule is None:
            tokens = [config.num_patches + int(config.cls_token)] * config.depth
            router = []
        else:
            tokens = schedule.tokens_per_block()
            traj = schedule.trajectory()
            router = traj[:-1]
        return cls(tokens, config.width, config.heads, config.mlp_ratio, config.num_patches,
                   config.channels * config.patch_size ** 2, config.num_classes, list(router), dense_head)

    def block_flops(self, m):
        d = self.width
        attention = 2 * 2 * m * m * d
        projections = 2 * 4 * m * d * d
        mlp = 2 * 2 * self.mlp_ratio * m * d * d
        return attention + projections + mlp

    def embed_flops(self):
        return 2 * self.m0 * self.patch_dim * self.width

    def head_flops(self):
        rows = self.m0 if self.dense_head else 1
        return 2 * rows * self.width * self.num_classes

    def router_flops(self):
        return [2 * m * self.width for m in self.router_tokens]


@dataclass
class FlopReport:
    total: float
    per_block: list
    embed: float
    head: float
    router: float

    def as_row(self):
        return {"total_flops": self.total, "embed_flops": self.embed, "head_flops": self.head,
                "router_flops": self.router, "block_flops": sum(self.per_block)}


def flops(config, schedule=None, dense_head=False):
    """Total and per-block FLOPs of ``config`` run under ``schedule``.

    ``schedule=None`` (or an entry-free schedule) gives the unpruned count.
    """
    if schedule is not None and not isinstance(schedule, PruningSchedule):
        schedule = PruningSchedule.from_dict(schedule)
    cm = CostModel.from_config(config, schedule, dense_head)
    per_block = [cm.block_flops(m) for m in cm.tokens_per_block]
    embed, head = cm.embed_flops(), cm.head_flops()
    router = sum(cm.router_flops())
    return FlopReport(sum(per_block) + embed + head + router, per_block, embed, head, router)


def flop_ratio(config, schedule, dense_head=False):
    """Pruned / unpruned FLOPs."""
    return flops(config, schedule, dense_head).total / flops(config, None, dense_head).total
