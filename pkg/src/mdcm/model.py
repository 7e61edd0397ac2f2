"""Full model assembly: backbone stages with cue activation, per-stage token
selection with deep-to-shallow propagation, per-stage heads, and gated
aggregation, wired according to the run configuration's module toggles.

Modes:
  - full: four stage heads + gated aggregate prediction (five loss terms)
  - aggregation disabled: four stage heads (four loss terms; the plain sum
    of the stacked head logits serves as the evaluation prediction)
  - selection disabled ("baseline"): a single linear classifier on the final
    stage's cls token, trained with plain one-hot CE
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import msca, msda, msts, tensor as T
from .backbone import (
    BackboneParams,
    StageOutput,
    cls_vector,
    forward_stages,
    init_backbone,
)
from .config import RunConfig, validate
from .errors import ConfigError
from .losses import PredictionSet, combined_loss
from .msda import GateParams
from .msts import CttParams, MergeParams, StageHeadParams
from .params import named_buffers, named_parameters, trunc_normal
from .tensor import Tensor


@dataclass
class ClsHeadParams:
    w: Tensor
    b: Tensor


@dataclass
class ModelParams:
    backbone: BackboneParams
    merges: list[MergeParams] | None
    ctts: list[CttParams] | None
    heads: list[StageHeadParams] | None
    gate: GateParams | None
    cls_head: ClsHeadParams | None


@dataclass
class ModelOutput:
    """Everything downstream consumers need from one forward pass.

    All tensors carry a leading batch axis.  ``selections`` maps stage index
    (1-based) to the kept merged-cell indices, ``merged_grids`` to the merged
    grid shape, both for overlay rendering.
    """
    stage_logits: list[Tensor] | None
    mr_gate: Tensor | None
    mr_sum: Tensor | None
    baseline: Tensor | None
    z3: Tensor | None
    z4: Tensor | None
    gates: Tensor | None
    selections: dict[int, np.ndarray] = field(default_factory=dict)
    merged_grids: dict[int, tuple[int, int]] = field(default_factory=dict)
    stage_outputs: list[StageOutput] = field(default_factory=list)


class Model:
    """Parameter container plus the forward/loss wiring for one config."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        validate(cfg)
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        bcfg = cfg.backbone
        n = cfg.data.n_classes
        backbone = init_backbone(rng, bcfg)
        merges = ctts = heads = gate = cls_head = None
        if cfg.msts.enabled:
            merges = [msts.init_merge(rng, c) for c in bcfg.stage_dims]
            c4 = bcfg.stage_dims[3]
            ctts = [msts.init_ctt(rng, c4, bcfg.stage_dims[i])
                    for i in range(3)]
            heads = [msts.init_stage_head(rng, bcfg.stage_dims[i],
                                          bcfg.stage_heads[i], n,
                                          cfg.msts.se_reduction)
                     for i in range(4)]
            if cfg.msda.enabled:
                gate = msda.init_gate(rng, bcfg.stage_dims, n)
        else:
            cls_head = ClsHeadParams(
                T.parameter(trunc_normal(rng, (bcfg.stage_dims[3], n))),
                T.parameter(np.zeros(n)))
        self.params = ModelParams(backbone=backbone, merges=merges,
                                  ctts=ctts, heads=heads, gate=gate,
                                  cls_head=cls_head)

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    def named_buffers(self) -> dict[str, np.ndarray]:
        return named_buffers(self.params)

    # -- forward ------------------------------------------------------------

    def forward(self, images: np.ndarray, train: bool = False,
                fixed_selections: dict[int, np.ndarray] | None = None
                ) -> ModelOutput:
        """Run the model.  ``fixed_selections`` pins the kept token indices
        per stage (used by gradient checks, where the discrete top-k must not
        flip under parameter perturbation)."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        stage_outputs = forward_stages(images, cfg.backbone, self.params.backbone,
                                       cfg.msca)
        z4_cls = cls_vector(stage_outputs[3].seq)

        if not cfg.msts.enabled:
            logits = T.linear(z4_cls, self.params.cls_head.w,
                              self.params.cls_head.b)
            return ModelOutput(stage_logits=None, mr_gate=None, mr_sum=None,
                               baseline=logits, z3=None, z4=None, gates=None,
                               stage_outputs=stage_outputs)

        bsz = images.shape[0]
        merged_list = [msts.patch_merge(o.seq, mp)
                       for o, mp in zip(stage_outputs, self.params.merges)]
        scores = [msts.token_scores(m) for m in merged_list]
        ks = [msts.keep_count(cfg.msts.keep_ratio[i], s.shape[-1])
              for i, s in enumerate(scores)]

        if fixed_selections is not None:
            selections = {s: np.asarray(idx, dtype=np.int64)
                          for s, idx in fixed_selections.items()}
        else:
            deep = cfg.msts.deep_stage
            deep_idx = msts.select_topk(scores[deep - 1], ks[deep - 1])
            selections = {}
            for i in range(4):
                stage = i + 1
                if stage >= deep:
                    selections[stage] = msts.select_topk(scores[i], ks[i])
                    continue
                rows = []
                for b in range(bsz):
                    prop = msts.propagate_deep_indices(
                        deep_idx[b], merged_list[deep - 1].grid,
                        merged_list[i].grid)
                    rows.append(msts.final_selection(scores[i][b], ks[i], prop))
                selections[stage] = np.stack(rows)

        refined: list[Tensor] = []
        etas: list[Tensor] = []
        for i in range(4):
            sel = msts.gather_tokens(merged_list[i], selections[i + 1])
            if i == 3:
                cls_i = z4_cls
            else:
                cls_i = msts.cls_token_transfer(z4_cls, self.params.ctts[i],
                                                train)
            z_i, eta_i = msts.stage_head(cls_i, sel, self.params.heads[i],
                                         cfg.backbone.ln_eps)
            refined.append(z_i)
            etas.append(eta_i)

        mc_parts = ([T.softmax_lastdim(e) for e in etas]
                    if cfg.msda.pre_softmax else etas)
        mc = msda.stack_logits(mc_parts)
        mr_sum = msda.aggregate_sum(mc)
        mr_gate = gates = None
        if cfg.msda.enabled:
            mf = msda.build_feature(refined)
            gates = msda.gating_weights(mf, self.params.gate)
            mr_gate = msda.aggregate(mc, gates)

        return ModelOutput(
            stage_logits=etas, mr_gate=mr_gate, mr_sum=mr_sum, baseline=None,
            z3=refined[2], z4=refined[3], gates=gates,
            selections=selections,
            merged_grids={i + 1: merged_list[i].grid for i in range(4)},
            stage_outputs=stage_outputs)

    # -- loss ---------------------------------------------------------------

    def loss(self, out: ModelOutput,
             labels: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(total, smoothed-CE, contrastive) for the active mode."""
        cfg = self.cfg
        if out.baseline is not None:
            preds = PredictionSet([out.baseline], [])
        elif out.mr_gate is not None:
            preds = PredictionSet(list(out.stage_logits) + [out.mr_gate],
                                  [out.z3, out.z4])
        else:
            preds = PredictionSet(list(out.stage_logits), [out.z3, out.z4])
        return combined_loss(preds, labels, cfg.loss.betas, cfg.loss.alpha,
                             cfg.data.n_classes,
                             cfg.loss.normalized_smoothing)

    # -- predictions ----------------------------------------------------------

    def primary_logits(self, out: ModelOutput) -> np.ndarray:
        """The logits used for top-1 accuracy in the active mode."""
        if out.baseline is not None:
            return out.baseline.data
        if out.mr_gate is not None and self.cfg.eval.aggregation == "gate":
            return out.mr_gate.data
        return out.mr_sum.data


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lower class index."""
    return np.argmax(logits, axis=-1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict_labels(logits) == np.asarray(labels)))
