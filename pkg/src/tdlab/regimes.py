"""Training regimes: baseline, naive distillation, CLIP-TD (AF stage + targeted
distillation), semi-supervised distillation and the second-stage-pretraining ablation."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from tdlab.distillation import (
    CorpusStats,
    DistillConfig,
    confidence_ratio,
    gate_weight,
    l1_feature_loss,
    select_for_text,
)
from tdlab.errors import ConfigError, TrainingDiverged, ValidationError
from tdlab.student import (
    StudentModel,
    choice_logits,
    instance_batch,
    itm_pairs,
    make_batch,
    mlm_loss,
    predict,
    sample_mlm_mask,
)
from tdlab.synth_world import N_CHOICES, Instance, Splits, Vocab, caption_corpus, render_scene_features
from tdlab.teacher import TeacherCache, TeacherModel, build_cache, parameter_digest, qa_text

log = logging.getLogger(__name__)

REGIMES = ("baseline", "naive", "clip_td", "semi_supervised", "second_stage_pretrain")
OPTIMIZERS = ("sgd", "adam")
LOG_COLUMNS = ("step", "L_t", "L_dv", "L_dt", "L_dt_prime", "gate_value", "total", "lr", "stage", "L_mlm", "L_itm")


@dataclass(frozen=True)
class RegimeSpec:
    name: str
    labeled_split: str = "train_subset"
    unlabeled_split: str | None = None
    epochs: int = 40
    lr: float = 3e-4
    optimizer: str = "adam"
    warmup_steps: int = 20
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    batch_size: int = 16
    unlabeled_batch_size: int = 16
    af_epochs: int = 4
    af_lr: float = 1e-3
    af_batch_size: int = 32
    mask_rate: float = 0.15
    patience: int = 5
    zero_regions: bool = False

    def __post_init__(self) -> None:
        if self.name not in REGIMES:
            raise ConfigError(f"unknown regime {self.name!r}; expected one of {REGIMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.name == "semi_supervised" and self.unlabeled_split is None:
            raise ConfigError("semi_supervised requires unlabeled_split")
        if self.name in ("baseline", "second_stage_pretrain") and (self.distill.w != 0 or (self.distill.w_prime or 0) != 0):
            raise ConfigError(f"{self.name} forbids distillation terms (w must be 0)")
        if self.epochs < 0 or self.af_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def uses_af_stage(self) -> bool:
        if self.name == "second_stage_pretrain":
            return True
        return self.name in ("clip_td", "semi_supervised") and self.distill.enable_af


def baseline_distill() -> DistillConfig:
    return DistillConfig(w=0.0)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    # per-step, per-instance components kept when ``keep_trace`` is set
    trace: list[dict] = field(default_factory=list)
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    teacher_digest_before: str | None = None
    teacher_digest_after: str | None = None

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in LOG_COLUMNS})

    def digest(self) -> str:
        import hashlib
        import json

        return hashlib.sha256(json.dumps(self.rows, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------- distillation context


@dataclass
class DistillContext:
    """Frozen teacher outputs and token selections, computed once per dataset."""

    cache: TeacherCache
    selections: dict[tuple[int, int], tuple[int, ...]]
    corpus: CorpusStats
    vocab: Vocab
    n_shapes: int
    n_colors: int
    captions: dict[int, tuple[int, ...]]

    @classmethod
    def build(cls, teacher: TeacherModel, instances: Sequence[Instance], corpus_docs: Sequence[Instance],
              vocab: Vocab, m: int, n_shapes: int, n_colors: int, seed: int = 0, alias_rate: float = 0.1) -> "DistillContext":
        cache = build_cache(teacher, instances)
        corpus = build_corpus(corpus_docs, vocab)
        sel = {}
        for inst in instances:
            for k in range(N_CHOICES):
                s = select_for_text(cache.image_cls[inst.instance_id], cache.text_tokens[inst.instance_id][k],
                                    qa_text(inst, k), corpus, m)
                sel[(inst.instance_id, k)] = s.indices
        caps = caption_corpus([i.scene for i in instances], vocab, seed + 7, alias_rate)
        captions = {inst.instance_id: c for inst, c in zip(instances, caps)}
        return cls(cache, sel, corpus, vocab, n_shapes, n_colors, captions)


def build_corpus(instances: Sequence[Instance], vocab: Vocab, n_max: int = 2) -> CorpusStats:
    """One document per question+answer text of the training split."""
    return CorpusStats.build((qa_text(i, k) for i in instances for k in range(N_CHOICES)), vocab, n_max=n_max)


# ---------------------------------------------------------------------- loss pieces


def _distill_terms(model: StudentModel, out, instances: Sequence[Instance], ctx: DistillContext,
                   cfg: DistillConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-pair L_dv, L_dt, L_dt' as [B, 4] tensors (teacher side carries no gradient)."""
    B = len(instances)
    dtype = out.cls_feature.dtype
    ids = [i.instance_id for i in instances]
    t_img = torch.stack([ctx.cache.image_cls[i] for i in ids]).to(dtype)  # [B, d]
    t_eos = torch.stack([ctx.cache.text_eos[i] for i in ids]).to(dtype)  # [B, 4, d]
    s_img = model.project(out.img_feature).view(B, N_CHOICES, -1)
    s_cls = model.project(out.cls_feature).view(B, N_CHOICES, -1)
    red = cfg.l1_reduction
    dv = l1_feature_loss(t_img[:, None].expand_as(s_img), s_img, red)
    dt = l1_feature_loss(t_eos, s_cls, red)
    if not cfg.use_vision:
        dv = torch.zeros_like(dv)
    if not cfg.use_language:
        dt = torch.zeros_like(dt)
    if not cfg.enable_ts:
        return dv, dt, torch.zeros_like(dv)
    s_tok = model.project(out.text_token_features)  # [B*4, T, d]
    d = s_tok.shape[-1]
    m = cfg.m
    idx = torch.zeros(B * N_CHOICES, m, dtype=torch.long)
    valid = torch.zeros(B * N_CHOICES, m, dtype=dtype)
    t_sel = torch.zeros(B * N_CHOICES, m, d, dtype=dtype)
    for b, iid in enumerate(ids):
        for k in range(N_CHOICES):
            sel = ctx.selections[(iid, k)]
            row = b * N_CHOICES + k
            if sel:
                n = len(sel)
                idx[row, :n] = torch.as_tensor(sel)
                valid[row, :n] = 1.0
                t_sel[row, :n] = ctx.cache.text_tokens[iid][k][list(sel)].to(dtype)
    s_sel = torch.gather(s_tok, 1, idx[:, :, None].expand(-1, -1, d))
    per_tok = l1_feature_loss(t_sel, s_sel, red)  # [B*4, m]
    count = valid.sum(1)
    dtp = (per_tok * valid).sum(1) / count.clamp(min=1.0)
    return dv, dt, dtp.view(B, N_CHOICES)


def _scope(x: torch.Tensor, gold: torch.Tensor | None, cfg: DistillConfig) -> torch.Tensor:
    """Reduce [B, 4] per-pair terms to [B] per-instance terms."""
    if cfg.cw_scope == "gold_only" and gold is not None:
        return x.gather(1, gold[:, None]).squeeze(1)
    return x.mean(1)


@dataclass
class StepLoss:
    total: torch.Tensor  # float64 scalar, the value backpropagated
    parts: dict[str, torch.Tensor]  # per-instance float64 components


def labeled_step_loss(model: StudentModel, instances: Sequence[Instance], ctx: DistillContext | None,
                      cfg: DistillConfig, *, zero_regions: bool = False) -> StepLoss:
    dtype = next(model.parameters()).dtype
    batch = instance_batch(instances, model.config.n_shapes, model.config.n_colors,
                           zero_regions=zero_regions, dtype=dtype)
    logits, out = choice_logits(model, batch)
    gold = torch.tensor([i.gold_index for i in instances])
    lt = F.cross_entropy(logits, gold, reduction="none").double()
    B = len(instances)
    zeros = torch.zeros(B, dtype=torch.float64)
    base = cfg.base_weight
    if base == 0 or ctx is None:
        return StepLoss(lt.mean(), {"L_t": lt, "L_dv": zeros, "L_dt": zeros, "L_dt_prime": zeros, "gate": zeros})
    dv, dt, dtp = _distill_terms(model, out, instances, ctx, cfg)
    dv, dt, dtp = (_scope(x, gold, cfg).double() for x in (dv, dt, dtp))
    gate = _gate(logits, instances, ctx, cfg)
    distill = dv + dt + dtp if cfg.enable_ts else dv + dt
    total = (lt + gate * distill).mean()
    return StepLoss(total, {"L_t": lt, "L_dv": dv, "L_dt": dt, "L_dt_prime": dtp, "gate": gate})


def unlabeled_step_loss(model: StudentModel, instances: Sequence[Instance], ctx: DistillContext,
                        cfg: DistillConfig) -> StepLoss:
    """Gated distillation on all four pairs; gold labels are never read."""
    dtype = next(model.parameters()).dtype
    batch = instance_batch(instances, ctx.n_shapes, ctx.n_colors, dtype=dtype)
    logits, out = choice_logits(model, batch)
    cfg_all = replace(cfg, cw_scope="all_choices")
    dv, dt, dtp = _distill_terms(model, out, instances, ctx, cfg_all)
    dv, dt, dtp = (x.mean(1).double() for x in (dv, dt, dtp))
    gate = _gate(logits, instances, ctx, cfg)
    distill = dv + dt + dtp if cfg.enable_ts else dv + dt
    total = (gate * distill).mean()
    zeros = torch.zeros(len(instances), dtype=torch.float64)
    return StepLoss(total, {"L_t": zeros, "L_dv": dv, "L_dt": dt, "L_dt_prime": dtp, "gate": gate})


def _gate(student_logits: torch.Tensor, instances, ctx: DistillContext, cfg: DistillConfig) -> torch.Tensor:
    base = cfg.base_weight
    B = len(instances)
    if not cfg.enable_cw:
        return torch.full((B,), base, dtype=torch.float64)
    t_logits = torch.stack([ctx.cache.logits[i.instance_id] for i in instances]).double()
    r = confidence_ratio(t_logits, student_logits.detach().double(), cfg.T)
    return gate_weight(r, base)


def af_step_loss(model: StudentModel, instances: Sequence[Instance], ctx: DistillContext, cfg: DistillConfig,
                 w: float, mask_rate: float, rng: np.random.Generator) -> tuple[torch.Tensor, dict[str, float]]:
    """MLM on one question+answer text per instance, caption-level ITM, plus w * L_d on all pairs."""
    dtype = next(model.parameters()).dtype
    ns, nc = ctx.n_shapes, ctx.n_colors
    ks = rng.integers(N_CHOICES, size=len(instances))
    feats = [render_scene_features(i.scene, ns, nc) for i in instances]
    texts = [qa_text(i, int(k)) for i, k in zip(instances, ks)]
    segs = [(0,) * len(i.question) + (1,) * len(i.answers[int(k)]) for i, k in zip(instances, ks)]
    mb = make_batch(feats, texts, segs, dtype=dtype)
    mask = sample_mlm_mask(mb.text_lengths, mb.text.shape[1], mask_rate, rng)
    l_mlm = mlm_loss(model, mb, mask_rate, rng, mask=mask)
    ib, labels = itm_pairs([i.scene for i in instances], [ctx.captions[i.instance_id] for i in instances], ns, nc, rng, dtype)
    l_itm = F.binary_cross_entropy_with_logits(model.itm_head(model(ib).cls_feature).squeeze(-1), labels.to(dtype))
    total = (l_mlm + l_itm).double()
    parts = {"L_mlm": l_mlm.item(), "L_itm": l_itm.item(), "L_dv": 0.0, "L_dt": 0.0}
    if w > 0:
        batch = instance_batch(instances, ns, nc, dtype=dtype)
        out = model(batch)
        dv, dt, _ = _distill_terms(model, out, instances, ctx, replace(cfg, enable_ts=False))
        l_d = (dv.mean(1) + dt.mean(1)).double().mean()
        total = total + w * l_d
        parts.update(L_dv=dv.mean().item(), L_dt=dt.mean().item())
    return total, parts


# ---------------------------------------------------------------------- loops


def _optimizer(model, name: str, lr: float):
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr)
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)


def _lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


def _check_finite(loss: torch.Tensor, stage: str, step: int, instances) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at {stage} step {step}",
            {"stage": stage, "step": step, "instance_ids": [i.instance_id for i in instances]},
        )


def accuracy(model: StudentModel, instances: Sequence[Instance], n_shapes: int, n_colors: int,
             zero_regions: bool = False) -> float:
    if not instances:
        raise ValidationError("empty split")
    logits = predict(model, instances, n_shapes, n_colors, zero_regions=zero_regions)
    gold = torch.tensor([i.gold_index for i in instances])
    return float((logits.argmax(1) == gold).double().mean())


def run_af_stage(model: StudentModel, pool: Sequence[Instance], ctx: DistillContext, spec: RegimeSpec,
                 tlog: TrainLog, rng: np.random.Generator) -> None:
    w = spec.distill.w if spec.name != "second_stage_pretrain" else 0.0
    opt = _optimizer(model, spec.optimizer, spec.af_lr)
    step = 0
    for _ in range(spec.af_epochs):
        order = rng.permutation(len(pool))
        for s in range(0, len(order) - 1, spec.af_batch_size):
            idx = order[s:s + spec.af_batch_size]
            if len(idx) < 2:
                continue
            items = [pool[i] for i in idx]
            lr = _lr_at(step, spec.af_lr, spec.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            loss, parts = af_step_loss(model, items, ctx, spec.distill, w, spec.mask_rate, rng)
            _check_finite(loss, "af", step, items)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tlog.rows.append({"stage": "af", "step": step, "L_t": 0.0, "L_dv": parts["L_dv"], "L_dt": parts["L_dt"],
                              "L_dt_prime": 0.0, "gate_value": w, "total": loss.item(), "lr": lr,
                              "L_mlm": parts["L_mlm"], "L_itm": parts["L_itm"]})
            step += 1


def run_task_stage(model: StudentModel, labeled: Sequence[Instance], unlabeled: Sequence[Instance],
                   val: Sequence[Instance], ctx: DistillContext | None, spec: RegimeSpec, cfg: DistillConfig,
                   tlog: TrainLog, rng: np.random.Generator, n_shapes: int, n_colors: int,
                   keep_trace: bool = False) -> None:
    if spec.epochs == 0 or not labeled:
        return
    opt = _optimizer(model, spec.optimizer, spec.lr)
    best_state, best_acc, best_epoch, bad = None, -1.0, None, 0
    u_order = rng.permutation(len(unlabeled)) if unlabeled else None
    u_pos = 0
    step = 0
    for epoch in range(spec.epochs):
        order = rng.permutation(len(labeled))
        for s in range(0, len(order), spec.batch_size):
            items = [labeled[i] for i in order[s:s + spec.batch_size]]
            lr = _lr_at(step, spec.lr, spec.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            sl = labeled_step_loss(model, items, ctx, cfg, zero_regions=spec.zero_regions)
            total = sl.total
            parts = {k: v.mean() for k, v in sl.parts.items()}
            u_parts = None
            if unlabeled:
                u_idx = []
                for _ in range(spec.unlabeled_batch_size):
                    if u_pos == len(u_order):
                        u_order, u_pos = rng.permutation(len(unlabeled)), 0
                    u_idx.append(u_order[u_pos])
                    u_pos += 1
                u_items = [unlabeled[i] for i in u_idx]
                ul = unlabeled_step_loss(model, u_items, ctx, cfg)
                total = total + ul.total
                u_parts = ul.parts
            _check_finite(total, "task", step, items)
            opt.zero_grad()
            total.backward()
            opt.step()
            row = {"stage": "task", "step": step, **{k: parts[k].item() for k in ("L_t", "L_dv", "L_dt", "L_dt_prime")},
                   "gate_value": parts["gate"].item(), "total": total.item(), "lr": lr, "L_mlm": 0.0, "L_itm": 0.0}
            tlog.rows.append(row)
            if keep_trace:
                rec = {"step": step, "labeled": {k: v.tolist() for k, v in sl.parts.items()},
                       "enable_ts": cfg.enable_ts, "total": total.item()}
                if u_parts is not None:
                    rec["unlabeled"] = {k: v.tolist() for k, v in u_parts.items()}
                tlog.trace.append(rec)
            step += 1
        if val and spec.patience > 0:
            acc = accuracy(model, val, n_shapes, n_colors, zero_regions=spec.zero_regions)
            if acc > best_acc:
                best_acc, best_epoch, bad = acc, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad += 1
                if bad >= spec.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
        tlog.best_val_accuracy, tlog.best_epoch = best_acc, best_epoch


def train(
    regime: RegimeSpec,
    teacher: TeacherModel | None,
    student_init: StudentModel,
    splits: Splits,
    *,
    ctx: DistillContext | None = None,
    vocab: Vocab | None = None,
    keep_trace: bool = False,
) -> tuple[StudentModel, TrainLog]:
    """Train a copy of ``student_init`` under ``regime``; the teacher is never updated."""
    model = copy.deepcopy(student_init)
    tlog = TrainLog()
    cfg = regime.distill
    n_shapes, n_colors = _dims(model, ctx, splits)
    needs_ctx = cfg.base_weight > 0 or regime.uses_af_stage
    if needs_ctx and ctx is None:
        if teacher is None or vocab is None:
            raise ConfigError(f"regime {regime.name} needs a teacher and vocab")
        pool = splits.train_subset + splits.unlabeled_pool
        ctx = DistillContext.build(teacher, pool, splits.train_subset + splits.unlabeled_pool, vocab, cfg.m,
                                   n_shapes, n_colors, regime.seed)
    if teacher is not None:
        tlog.teacher_digest_before = parameter_digest(teacher)
    unlabeled = splits.unlabeled_pool if regime.name == "semi_supervised" else ()
    if set(i.instance_id for i in unlabeled) & set(i.instance_id for i in splits.train_subset):
        raise ValidationError("labeled and unlabeled pools overlap")
    unlabeled = tuple(_redact(i) for i in unlabeled)
    rng = np.random.default_rng(regime.seed)
    model.train()
    if regime.uses_af_stage and regime.af_epochs > 0:
        pool = tuple(_redact(i) for i in splits.train_subset + splits.unlabeled_pool)
        run_af_stage(model, pool, ctx, regime, tlog, rng)
    task_cfg = cfg if regime.name != "second_stage_pretrain" else baseline_distill()
    run_task_stage(model, splits.train_subset, unlabeled, splits.val, ctx, regime, task_cfg, tlog, rng,
                   n_shapes, n_colors, keep_trace=keep_trace)
    model.eval()
    if teacher is not None:
        tlog.teacher_digest_after = parameter_digest(teacher)
    return model, tlog


def train_semi_supervised(regime: RegimeSpec, teacher, student_init, splits: Splits, **kw):
    if regime.name != "semi_supervised":
        regime = replace(regime, name="semi_supervised", unlabeled_split=regime.unlabeled_split or "unlabeled_pool")
    return train(regime, teacher, student_init, splits, **kw)


def _redact(inst: Instance) -> Instance:
    """Copy with gold_index fixed to 0 so no label information can leak."""
    return replace(inst, gold_index=0)


def _dims(model: StudentModel, ctx: DistillContext | None, splits: Splits) -> tuple[int, int]:
    return model.config.n_shapes, model.config.n_colors
