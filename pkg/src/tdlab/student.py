"""Single-stream cross-modal transformer student.

Input layout per (question, answer) pair::

    [CLS] q_0 .. q_n a_0 .. a_m <pad..> [IMG] r_0 .. r_k <pad..>

Text is padded to a batch-wide width so [IMG] sits at a fixed column. Each
pair yields one task logit; the four logits of an instance are softmaxed jointly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from tdlab.blocks import Block, padding_mask
from tdlab.errors import ConfigError, ValidationError
from tdlab.synth_world import (
    CLS,
    IMG,
    MASK,
    N_CHOICES,
    Instance,
    RegionFeatures,
    Scene,
    region_feature_dim,
    render_scene_features,
)

HEAD_KINDS = ("cls", "fusion", "cosine")


@dataclass(frozen=True)
class StudentConfig:
    vocab_size: int
    n_shapes: int
    n_colors: int
    d_model: int = 32
    layers: int = 2
    heads: int = 4
    d_ff: int = 64
    max_seq: int = 64
    max_text: int = 48
    # -1 = final layer; otherwise the block index whose output feeds text-token distillation
    text_feature_layer: int = -1
    head: str = "fusion"
    # d_embed of the teacher when it differs from d_model (adds a learned projection)
    teacher_dim: int | None = None

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if min(self.layers, self.heads, self.d_model, self.vocab_size, self.n_shapes, self.n_colors) < 1:
            raise ConfigError("student sizes must be >= 1")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if not -self.layers <= self.text_feature_layer < self.layers:
            raise ConfigError("text_feature_layer out of range")

    @property
    def d_vis(self) -> int:
        return region_feature_dim(self.n_shapes, self.n_colors)


PRESETS = {
    "small": dict(layers=1, heads=2, d_ff=64),
    "base": dict(layers=2, heads=4, d_ff=64),
    "large": dict(layers=3, heads=4, d_ff=128),
}


def preset(name: str, vocab_size: int, n_shapes: int, n_colors: int, **overrides) -> StudentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown student preset {name!r}; expected one of {sorted(PRESETS)}")
    return StudentConfig(vocab_size=vocab_size, n_shapes=n_shapes, n_colors=n_colors, **{**PRESETS[name], **overrides})


@dataclass
class StudentOutput:
    task_logit: torch.Tensor  # [N]
    cls_feature: torch.Tensor  # [N, d]
    img_feature: torch.Tensor  # [N, d]
    text_token_features: torch.Tensor  # [N, T, d] (valid up to text_lengths)
    text_lengths: torch.Tensor  # [N]
    attentions: torch.Tensor | None  # [N, layers, heads, S, S]
    valid: torch.Tensor  # bool [N, S]
    img_pos: int
    hidden: torch.Tensor  # [N, S, d] final layer

    def vision_positions(self) -> torch.Tensor:
        """bool [N, S] marking [IMG] and region positions."""
        pos = torch.zeros_like(self.valid)
        pos[:, self.img_pos:] = True
        return pos & self.valid


@dataclass
class Batch:
    """Padded encoder input for N (scene, text) sequences."""

    text: torch.Tensor  # long [N, T]
    segment: torch.Tensor  # long [N, T] 0 = question, 1 = answer
    text_lengths: torch.Tensor  # [N]
    whole: torch.Tensor  # [N, d_vis]
    regions: torch.Tensor  # [N, R, d_vis]
    region_counts: torch.Tensor  # [N]

    def __len__(self) -> int:
        return self.text.shape[0]


def make_batch(
    features: Sequence[RegionFeatures],
    texts: Sequence[Sequence[int]],
    segments: Sequence[Sequence[int]] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    if len(features) != len(texts):
        raise ValidationError("features/texts length mismatch")
    if any(len(t) == 0 for t in texts):
        raise ValidationError("empty text")
    N = len(texts)
    T = max(len(t) for t in texts)
    R = max(f.objects.shape[0] for f in features)
    d_vis = features[0].vectors.shape[1]
    text = torch.zeros(N, T, dtype=torch.long)
    seg = torch.zeros(N, T, dtype=torch.long)
    regions = torch.zeros(N, R, d_vis, dtype=dtype)
    whole = torch.zeros(N, d_vis, dtype=dtype)
    for i, (f, t) in enumerate(zip(features, texts)):
        text[i, : len(t)] = torch.as_tensor(t)
        if segments is not None:
            seg[i, : len(t)] = torch.as_tensor(segments[i])
        regions[i, : f.objects.shape[0]] = torch.as_tensor(f.objects, dtype=dtype)
        whole[i] = torch.as_tensor(f.whole, dtype=dtype)
    return Batch(
        text=text,
        segment=seg,
        text_lengths=torch.tensor([len(t) for t in texts]),
        whole=whole,
        regions=regions,
        region_counts=torch.tensor([f.objects.shape[0] for f in features]),
    )


class StudentModel(nn.Module):
    def __init__(self, config: StudentConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        self.tok = nn.Embedding(config.vocab_size, d)
        self.pos = nn.Parameter(torch.randn(config.max_text + 1, d) * 0.02)
        self.segment = nn.Embedding(3, d)  # question, answer, vision
        self.region_proj = nn.Linear(config.d_vis, d)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.d_ff) for _ in range(config.layers))
        self.ln = nn.LayerNorm(d)
        self.task_head = nn.Linear(d if config.head == "cls" else 2 * d, 1)
        # "cosine" adds a scaled [CLS]/[IMG] similarity in the teacher space
        self.sim_scale = nn.Parameter(torch.tensor(5.0)) if config.head == "cosine" else None
        self.mlm_head = nn.Linear(d, config.vocab_size)
        self.itm_head = nn.Linear(d, 1)
        self.to_teacher = (
            nn.Linear(d, config.teacher_dim, bias=False)
            if config.teacher_dim is not None and config.teacher_dim != d
            else None
        )

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Map student features into the teacher's embedding space (identity when dims match)."""
        return x if self.to_teacher is None else self.to_teacher(x)

    def forward(self, batch: Batch, *, keep_attentions: bool = False, text_override: torch.Tensor | None = None) -> StudentOutput:
        cfg = self.config
        N, T = batch.text.shape
        R = batch.regions.shape[1]
        if T > cfg.max_text:
            raise ValidationError(f"text length {T} exceeds max_text={cfg.max_text}")
        if int((batch.text_lengths + batch.region_counts).max()) + 2 > cfg.max_seq:
            raise ValidationError(f"sequence exceeds max_seq={cfg.max_seq}")
        text_ids = batch.text if text_override is None else text_override
        cls = self.tok.weight[CLS] + self.pos[0] + self.segment.weight[0]
        x_text = self.tok(text_ids) + self.pos[1 : T + 1] + self.segment(batch.segment)
        vis = self.segment.weight[2]
        x_img = self.tok.weight[IMG] + self.region_proj(batch.whole) + vis
        x_reg = self.region_proj(batch.regions) + vis
        x = torch.cat([cls.expand(N, 1, -1), x_text, x_img[:, None], x_reg], dim=1)

        ar_t = torch.arange(T)
        ar_r = torch.arange(R)
        valid = torch.cat(
            [
                torch.ones(N, 1, dtype=torch.bool),
                ar_t[None] < batch.text_lengths[:, None],
                torch.ones(N, 1, dtype=torch.bool),
                ar_r[None] < batch.region_counts[:, None],
            ],
            dim=1,
        )
        mask = padding_mask(valid)
        attns = []
        hidden_by_layer = []
        for blk in self.blocks:
            x, a = blk(x, mask)
            hidden_by_layer.append(x)
            if keep_attentions:
                attns.append(a)
        h = self.ln(x)
        img_pos = 1 + T
        cls_f = h[:, 0]
        img_f = h[:, img_pos]
        layer = cfg.text_feature_layer % cfg.layers
        tok_src = h if layer == cfg.layers - 1 else self.ln(hidden_by_layer[layer])
        tok_f = tok_src[:, 1 : 1 + T]
        if cfg.head in ("fusion", "cosine"):
            logit = self.task_head(torch.cat([cls_f, cls_f * img_f], dim=-1)).squeeze(-1)
            if self.sim_scale is not None:
                sim = F.cosine_similarity(self.project(cls_f), self.project(img_f), dim=-1)
                logit = logit + self.sim_scale * sim
        else:
            logit = self.task_head(cls_f).squeeze(-1)
        return StudentOutput(
            task_logit=logit,
            cls_feature=cls_f,
            img_feature=img_f,
            text_token_features=tok_f,
            text_lengths=batch.text_lengths,
            attentions=torch.stack(attns, dim=1) if keep_attentions else None,
            valid=valid,
            img_pos=img_pos,
            hidden=h,
        )


# ---------------------------------------------------------------------- instance helpers


def instance_batch(
    instances: Sequence[Instance],
    n_shapes: int,
    n_colors: int,
    *,
    zero_regions: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Expand each instance into its 4 (question+answer_k) sequences, instance-major."""
    feats, texts, segs = [], [], []
    for inst in instances:
        f = render_scene_features(inst.scene, n_shapes, n_colors)
        if zero_regions:
            f = RegionFeatures(np.zeros_like(f.vectors))
        for a in inst.answers:
            feats.append(f)
            texts.append(inst.question + a)
            segs.append((0,) * len(inst.question) + (1,) * len(a))
    return make_batch(feats, texts, segs, dtype=dtype)


def choice_logits(model: StudentModel, batch: Batch, **kw) -> tuple[torch.Tensor, StudentOutput]:
    out = model(batch, **kw)
    return out.task_logit.view(-1, N_CHOICES), out


def task_loss_from_logits(logits: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Per-instance cross-entropy over the choice logits: [B, C] -> [B]."""
    return F.cross_entropy(logits, gold, reduction="none")


def task_loss(model: StudentModel, instance: Instance, n_shapes: int, n_colors: int) -> torch.Tensor:
    logits, _ = choice_logits(model, instance_batch([instance], n_shapes, n_colors, dtype=_dtype(model)))
    return task_loss_from_logits(logits, torch.tensor([instance.gold_index]))[0]


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict(model: StudentModel, instances: Sequence[Instance], n_shapes: int, n_colors: int,
            *, zero_regions: bool = False, chunk: int = 256) -> torch.Tensor:
    """Choice logits [len(instances), 4] with gradients disabled."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(instances), chunk):
            b = instance_batch(instances[i:i + chunk], n_shapes, n_colors, zero_regions=zero_regions, dtype=_dtype(model))
            outs.append(choice_logits(model, b)[0])
    return torch.cat(outs) if outs else torch.zeros(0, N_CHOICES)


# ---------------------------------------------------------------------- pretraining heads


def sample_mlm_mask(lengths: torch.Tensor, width: int, rate: float, rng: np.random.Generator,
                    maskable: torch.Tensor | None = None) -> torch.Tensor:
    """Bernoulli(rate) mask over valid text positions; resample once if empty, then fail."""
    if not 0.0 < rate < 1.0:
        raise ValidationError("mask_rate must be in (0, 1)")
    valid = torch.arange(width)[None] < lengths[:, None]
    if maskable is not None:
        valid = valid & maskable
    for _ in range(2):
        m = torch.from_numpy(rng.random((len(lengths), width)) < rate) & valid
        if m.any():
            return m
    raise ValidationError("MLM sampled no masked positions")


def mlm_loss(model: StudentModel, batch: Batch, mask_rate: float, rng: np.random.Generator,
             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy over masked text positions only."""
    if mask is None:
        mask = sample_mlm_mask(batch.text_lengths, batch.text.shape[1], mask_rate, rng)
    if not mask.any():
        raise ValidationError("MLM mask is empty")
    masked = batch.text.masked_fill(mask, MASK)
    out = model(batch, text_override=masked)
    logits = model.mlm_head(out.hidden[:, 1 : 1 + batch.text.shape[1]])
    return F.cross_entropy(logits[mask], batch.text[mask])


def itm_logits(model: StudentModel, batch: Batch) -> torch.Tensor:
    return model.itm_head(model(batch).cls_feature).squeeze(-1)


def itm_loss(model: StudentModel, batch: Batch, is_matched: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the ITM head on [CLS]."""
    return F.binary_cross_entropy_with_logits(itm_logits(model, batch), is_matched.to(batch.whole.dtype))


def itm_pairs(scenes: Sequence[Scene], captions: Sequence[Sequence[int]], n_shapes: int, n_colors: int,
              rng: np.random.Generator, dtype: torch.dtype = torch.float32) -> tuple[Batch, torch.Tensor]:
    """Matched (scene, caption) pairs plus negatives made by shuffling scenes within the batch."""
    n = len(scenes)
    if n < 2:
        raise ValidationError("ITM negatives need at least 2 scenes in the batch")
    feats = [render_scene_features(s, n_shapes, n_colors) for s in scenes]
    # rotation is a derangement, so every negative is a true mismatch
    perm = np.roll(np.arange(n), 1 + int(rng.integers(n - 1)))
    neg_feats = [feats[j] for j in perm]
    texts = list(captions) + list(captions)
    batch = make_batch(feats + neg_feats, texts, [(0,) * len(t) for t in texts], dtype=dtype)
    return batch, torch.cat([torch.ones(n), torch.zeros(n)])
