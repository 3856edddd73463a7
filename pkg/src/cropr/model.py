"""A toy ViT with pruning modules, selectors and fusion wired together."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion as F
from . import pruner as P
from . import selectors as S
from . import tensor as T
from .errors import ConfigError, ScheduleError
from .nn import Module
from .schedule import PruningSchedule
from .vit import Block, ViT, ViTConfig

SELECTORS = ("cropr", "non_salient", "random", "variance", "attn_cls", "attn_avg")
FUSIONS = ("none", "llf", "token_concat", "cross_attn", "cross_attn_concat", "mhsa_concat", "dtop")


@dataclass
class ForwardResult:
    logits: T.Tensor
    loss: T.Tensor = None
    main_loss: T.Tensor = None
    aux_losses: dict = field(default_factory=dict)
    routes: list = field(default_factory=list)
    final: object = None
    kept_positions: np.ndarray = None
    stage_map: np.ndarray = None


class PrunedViT(Module):
    """Backbone + one pruning module per schedule entry + a fusion strategy.

    ``selector`` picks how tokens are scored ("cropr" trains a pruning
    module per entry; "non_salient" trains the same modules but prunes the
    highest-scoring tokens; the others are training-free baselines).
    """

    def __init__(self, config, schedule, task="classification", selector="cropr",
                 fusion="none", variant=None, seed=0):
        if selector not in SELECTORS:
            raise ConfigError(f"unknown selector {selector!r}")
        if fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {fusion!r}")
        if task not in P.TASKS:
            raise ConfigError(f"unknown task {task!r}")
        if schedule.depth != config.depth or schedule.m0 != config.num_patches:
            raise ScheduleError(
                f"schedule (depth={schedule.depth}, m0={schedule.m0}) does not fit model "
                f"(depth={config.depth}, patches={config.num_patches})")
        if schedule.cls != config.cls_token:
            raise ScheduleError("schedule.cls must match the model's cls_token")
        if (fusion == "llf") != schedule.llf:
            raise ScheduleError("schedule.llf must be set exactly when fusion == 'llf'")
        if task == "segmentation" and fusion == "none" and schedule.entries:
            raise ConfigError("segmentation with pruning needs a fusion that restores the grid")
        if fusion == "dtop" and selector not in ("cropr", "non_salient"):
            raise ConfigError("dtop logit fusion needs auxiliary heads (selector cropr)")
        self.config = config
        self.schedule = schedule
        self.task = task
        self.selector = selector
        self.fusion = fusion
        self.variant = variant or P.CroprVariant()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.vit = ViT(config, rng)
        self.croprs = {}
        if selector in ("cropr", "non_salient"):
            n_q = config.num_patches if task == "segmentation" else 1
            for e in schedule.entries:
                self.croprs[str(e.block)] = P.CroprModule(
                    rng, config.width, config.num_classes, task, n_q, config.mlp_ratio, self.variant)
        self.fuser = None
        if fusion in ("cross_attn", "cross_attn_concat"):
            self.fuser = F.CrossAttnFuser(rng, config.width, config.heads, config.hidden, config.num_patches)
        elif fusion == "mhsa_concat":
            self.fuser = Block(rng, config.width, config.heads, config.hidden)
        self.rng = np.random.default_rng(seed + 1)
        self.folded = None

    # -- bookkeeping ----------------------------------------------------------
    def backbone_parameters(self):
        """Parameters used at inference (backbone + fusion), routers excluded."""
        params = list(self.vit.parameters())
        if self.fuser is not None:
            params += self.fuser.parameters()
        return params

    def inference_num_parameters(self):
        return int(sum(p.size for p in self.backbone_parameters()))

    @property
    def folded_only(self):
        """True after loading a folded checkpoint (pruning modules gone)."""
        return self.selector in ("cropr", "non_salient") and not self.croprs and bool(self.folded)

    def fold(self):
        """Replace every pruning module by its summed-query router."""
        if self.folded_only:
            return self.folded
        self.folded = {}
        for key, module in self.croprs.items():
            router = P.fold(module)
            router.block = int(key)
            router.prune_count = self.schedule.prune_map().get(int(key), 0)
            self.folded[int(key)] = router
        return self.folded

    # -- forward --------------------------------------------------------------
    def _scores(self, x, block, blk, images, var_cache):
        b, m = x.positions.shape
        if self.selector == "random":
            return S.random_score(b, m, self._rng)
        if self.selector == "variance":
            if "v" not in var_cache:
                var_cache["v"] = S.variance_score(images, self.config.patch_size)
            return S.scores_at_positions(var_cache["v"], x.positions)
        if self.selector in ("attn_cls", "attn_avg"):
            return S.attn_topk_score(blk.attn.last_probs, self.selector[5:], x.cls_present)
        raise AssertionError(self.selector)

    def _route(self, x, block, r, blk, images, aux_targets, training, use_folded, var_cache, out):
        k = x.num_tokens - r
        if self.selector not in ("cropr", "non_salient"):
            route = P.select_topk(x, self._scores(x, block, blk, images, var_cache), k, stage=block)
            return route
        invert = self.selector == "non_salient"
        if use_folded:
            a = P.folded_score(x, self.folded[block])
            return P.select_topk(x, -a if invert else a, k, stage=block)
        module = self.croprs[str(block)]
        need_aux = aux_targets is not None and (training or self.fusion == "dtop")
        if need_aux:
            # sampling only while training; evaluation is deterministic Top-K
            sampling = training and module.variant.selector == "sampling"
            route, loss = P.cropr_forward_train(x, module, r, aux_targets, self._rng, block, invert, sampling)
            out.aux_losses[block] = loss
            return route
        keys = P._keys(x, module)
        A, a = P.score(x, module, keys)
        route = P.select_topk(x, -a if invert else a, k, A, block)
        route.scores = a
        if self.fusion == "dtop":
            route.aggregated = P.aggregate(keys, A, module)
        return route

    def forward(self, images, targets=None, training=False, schedule=None, folded=False, rng=None,
                aux_weight=1.0):
        """Run the network.

        ``targets`` are class ids (B,), patch label grids (B, h, w) or binary
        vectors (B, C) depending on the task; when given, the main loss and
        (in training mode) the auxiliary losses are computed.
        """
        schedule = schedule or self.schedule
        folded = folded or self.folded_only
        if folded and self.folded is None:
            self.fold()
        if folded and self.fusion == "dtop":
            raise ConfigError("dtop fusion keeps its auxiliary heads; it cannot run folded")
        self._rng = rng if rng is not None else self.rng
        cfg = self.config
        m0 = cfg.num_patches
        images = np.asarray(images)
        aux_targets = None if targets is None else np.asarray(targets)
        out = ForwardResult(logits=None)
        x = self.vit.patch_embed(images)
        pruned = []
        var_cache = {}
        prune_map = schedule.prune_map()
        blocks = self.vit.blocks
        for i, blk in enumerate(blocks):
            b = i + 1
            if self.fusion == "llf" and b == len(blocks):
                x = F.llf_fuse(x, pruned, m0, blk, training, self._rng)
                continue
            blk.attn.keep_probs = self.selector in ("attn_cls", "attn_avg") and b in prune_map
            x = x.with_tokens(blk(x.tokens, training, self._rng))
            blk.attn.keep_probs = False
            if b in prune_map:
                route = self._route(x, b, prune_map[b], blk, images, aux_targets, training, folded, var_cache, out)
                route.pruned.stages = np.full(route.pruned.positions.shape, b, dtype=np.int64)
                out.routes.append(route)
                pruned.append(route.pruned)
                x = route.keep
        kept = x
        out.kept_positions = _patch_positions(kept)
        final = self._fuse(kept, pruned, training)
        out.final = final
        out.logits = self._head(final, kept, pruned, out.routes)
        out.stage_map = _stage_map(kept, pruned, images.shape[0], m0)
        if targets is not None:
            out.main_loss = self._main_loss(out.logits, np.asarray(targets))
            loss = out.main_loss
            for aux in out.aux_losses.values():
                loss = loss + (aux * aux_weight if aux_weight != 1.0 else aux)
            out.loss = loss
        return out

    __call__ = forward

    def _fuse(self, kept, pruned, training):
        m0 = self.config.num_patches
        f = self.fusion
        if f in ("none", "llf", "dtop"):
            return kept
        if f == "token_concat":
            return F.token_concat_fuse(kept, pruned, m0)
        if f == "cross_attn":
            return F.cross_attn_fuse(kept, self.fuser)
        if f == "cross_attn_concat":
            return F.cross_attn_concat_fuse(kept, pruned, m0, self.fuser)
        return F.mhsa_concat_fuse(kept, pruned, m0, self.fuser, training, self._rng)

    def _head(self, final, kept, pruned, routes):
        vit = self.vit
        if self.task != "segmentation":
            if self.fusion in ("cross_attn", "cross_attn_concat"):
                return vit.pool_and_head(final, "avg")
            return vit.pool_and_head(final)
        m0 = self.config.num_patches
        if self.fusion == "dtop":
            kept_nc = _drop_cls(kept)
            kept_logits = kept_nc.with_tokens(vit.dense_head(kept_nc.tokens))
            stage_logits = []
            for route, pb in zip(routes, pruned):
                module = self.croprs[str(route.prune_stage)]
                grid = P.head_logits(route.aggregated, module)
                stage_logits.append(pb.with_tokens(T.gather_rows(grid, pb.positions)))
            merged = F.dtop_logit_fuse(kept_logits, stage_logits, m0)
            return merged.tokens
        final = _drop_cls(final)
        if final.num_tokens != m0:
            raise ConfigError("dense head needs the full token grid")
        return vit.dense_head(final.tokens)

    def _main_loss(self, logits, targets):
        if self.task == "classification":
            return T.cross_entropy(logits, targets)
        if self.task == "multilabel":
            return T.binary_cross_entropy_with_logits(logits, targets)
        b = targets.shape[0]
        return T.cross_entropy(logits, targets.reshape(b, -1), ignore_index=P.IGNORE_INDEX)

    def predict(self, images, folded=False, rng=None):
        with T.no_grad():
            return self.forward(images, folded=folded, rng=rng)


def _drop_cls(batch):
    if not batch.cls_present:
        return batch
    n = batch.num_tokens
    idx = np.broadcast_to(np.arange(1, n), (batch.batch, n - 1))
    stages = None if batch.stages is None else batch.stages[:, 1:]
    return type(batch)(T.gather_rows(batch.tokens, idx), batch.positions[:, 1:], False, stages)


def _patch_positions(batch):
    pos = batch.positions
    return pos[:, 1:] if batch.cls_present else pos


def _stage_map(kept, pruned, b, m0):
    """(B, m0) array: block after which each patch was pruned, 0 if kept."""
    out = np.zeros((b, m0), dtype=np.int64)
    for pb in pruned:
        rows = np.broadcast_to(np.arange(b)[:, None], pb.positions.shape)
        out[rows, pb.positions] = pb.stages
    return out


def build_model(model_cfg, schedule_cfg, task="classification", selector="cropr", fusion="none",
                variant=None, seed=0):
    """Construct a :class:`PrunedViT` from plain dicts (run-config sections)."""
    config = model_cfg if isinstance(model_cfg, ViTConfig) else ViTConfig.from_dict(model_cfg)
    schedule = schedule_cfg if isinstance(schedule_cfg, PruningSchedule) else PruningSchedule.from_dict(schedule_cfg)
    if isinstance(variant, dict):
        variant = P.CroprVariant(**variant)
    return PrunedViT(config, schedule, task, selector, fusion, variant, seed)
