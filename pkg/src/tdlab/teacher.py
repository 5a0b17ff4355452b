"""Contrastive dual-encoder teacher (CLIP analog).

The vision side is a small ViT over grid cells; the text side is a causal
transformer pooled at its last token. Both project into a shared unit-norm
embedding space trained with symmetric InfoNCE over scene captions.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from tdlab.blocks import Block, causal_mask, padding_mask
from tdlab.errors import ConfigError, ValidationError
from tdlab.synth_world import (
    N_CHOICES,
    Dataset,
    GeneratorConfig,
    Instance,
    Scene,
    Vocab,
    _rng,
    _sample_scene,
    caption_corpus,
    make_caption,
    perturb_scene,
)

log = logging.getLogger(__name__)

ZERO_SHOT_MODES = ("IQA", "IA")


@dataclass(frozen=True)
class TeacherConfig:
    vocab_size: int
    n_shapes: int = 4
    n_colors: int = 4
    grid_size: int = 3
    d_embed: int = 32
    text_layers: int = 2
    vision_layers: int = 2
    heads: int = 4
    temperature_contrastive: float = 0.07
    max_text_len: int = 48
    d_ff: int = 64

    def validate(self) -> None:
        if min(self.d_embed, self.text_layers, self.vision_layers, self.heads, self.vocab_size) < 1:
            raise ConfigError("teacher counts must be >= 1")
        if self.d_embed % self.heads:
            raise ConfigError("d_embed must be divisible by heads")
        if self.temperature_contrastive <= 0:
            raise ConfigError("temperature_contrastive must be > 0")


@dataclass
class TeacherOutput:
    image_cls: torch.Tensor  # [d]
    text_tokens: torch.Tensor  # [z+1, d]
    text_eos: torch.Tensor  # [d]
    choice_logits: torch.Tensor | None = None  # [4]


class TeacherModel(nn.Module):
    def __init__(self, config: TeacherConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_embed
        g2 = config.grid_size ** 2
        # index 0 = empty cell
        self.cell_shape = nn.Embedding(config.n_shapes + 1, d)
        self.cell_color = nn.Embedding(config.n_colors + 1, d)
        self.cell_pos = nn.Parameter(torch.randn(g2 + 1, d) * 0.02)
        self.vision_cls = nn.Parameter(torch.randn(d) * 0.02)
        self.vision_blocks = nn.ModuleList(Block(d, config.heads, config.d_ff) for _ in range(config.vision_layers))
        self.vision_ln = nn.LayerNorm(d)
        self.vision_proj = nn.Linear(d, d, bias=False)

        self.tok = nn.Embedding(config.vocab_size, d)
        self.text_pos = nn.Parameter(torch.randn(config.max_text_len, d) * 0.02)
        self.text_blocks = nn.ModuleList(Block(d, config.heads, config.d_ff) for _ in range(config.text_layers))
        self.text_ln = nn.LayerNorm(d)
        self.text_proj = nn.Linear(d, d, bias=False)

    # ------------------------------------------------------------------ encoders

    def scene_cells(self, scenes: Sequence[Scene]) -> tuple[torch.Tensor, torch.Tensor]:
        g = self.config.grid_size
        shape = torch.zeros(len(scenes), g * g, dtype=torch.long)
        color = torch.zeros(len(scenes), g * g, dtype=torch.long)
        for b, sc in enumerate(scenes):
            for s, c, r, col in sc.objects:
                shape[b, r * g + col] = s + 1
                color[b, r * g + col] = c + 1
        return shape, color

    def encode_images(self, scenes: Sequence[Scene]) -> torch.Tensor:
        shape, color = self.scene_cells(scenes)
        x = self.cell_shape(shape) + self.cell_color(color)
        cls = self.vision_cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.cell_pos
        for blk in self.vision_blocks:
            x, _ = blk(x)
        return F.normalize(self.vision_proj(self.vision_ln(x[:, 0])), dim=-1)

    def encode_texts(self, texts: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (token embeddings [B, S, d], eos embeddings [B, d], lengths [B])."""
        if any(len(t) == 0 for t in texts):
            raise ValidationError("empty text")
        lengths = torch.tensor([len(t) for t in texts])
        S = int(lengths.max())
        if S > self.config.max_text_len:
            raise ValidationError(f"text longer than max_text_len={self.config.max_text_len}")
        ids = torch.zeros(len(texts), S, dtype=torch.long)
        for b, t in enumerate(texts):
            ids[b, : len(t)] = torch.as_tensor(t)
        x = self.tok(ids) + self.text_pos[:S]
        mask = causal_mask(lengths, S)
        for blk in self.text_blocks:
            x, _ = blk(x, mask)
        tokens = F.normalize(self.text_proj(self.text_ln(x)), dim=-1)
        eos = tokens[torch.arange(len(texts)), lengths - 1]
        return tokens, eos, lengths

    def parameter_digest(self) -> str:
        return parameter_digest(self)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def encode_image(model: TeacherModel, scene: Scene) -> torch.Tensor:
    with torch.no_grad():
        return model.encode_images([scene])[0]


def encode_text(model: TeacherModel, text: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    with torch.no_grad():
        tokens, eos, _ = model.encode_texts([tuple(text)])
    return tokens[0], eos[0]


# ---------------------------------------------------------------------- contrastive pretraining


def info_nce(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropies.

    ``text_emb`` may hold extra rows after the first B; they act as additional
    negatives for the image->text direction only.
    """
    b = image_emb.shape[0]
    if b < 2:
        raise ValidationError("InfoNCE needs a batch of at least 2 pairs")
    logits = image_emb @ text_emb.T / temperature
    target = torch.arange(b)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits[:, :b].T, target))


def _negative_caption(scene: Scene, dataset: Dataset, seed: int, step: int, rng: np.random.Generator):
    cfg = dataset.config
    neg = perturb_scene(scene, rng, cfg.n_shapes, cfg.n_colors)
    # same caption stream as the positive, so wording differs only where the scene does
    return make_caption(neg, dataset.vocab, _rng(seed, scene.scene_id, 2), cfg.alias_rate)


@dataclass
class PretrainLog:
    losses: list[float] = field(default_factory=list)
    heldout_retrieval: float | None = None


def pretraining_scenes(dataset: Dataset, extra_scenes: int, seed: int) -> list[Scene]:
    """Train-split scenes plus freshly sampled caption-only scenes (web-scale data analog)."""
    scenes = [inst.scene for inst in dataset.train]
    cfg = dataset.config
    base = 10_000_000
    scenes += [_sample_scene(_rng(seed, base + i, 4), cfg, base + i) for i in range(extra_scenes)]
    return scenes


def pretrain_contrastive(
    dataset: Dataset,
    config: TeacherConfig,
    seed: int,
    *,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 2e-3,
    extra_scenes: int = 0,
    heldout: int = 256,
    hard_negatives: bool = True,
) -> tuple[TeacherModel, PretrainLog]:
    """Train a teacher on (scene, caption) pairs; QA text is never used.

    With ``hard_negatives`` every image also competes against the caption of a
    minimally edited copy of its own scene, which forces attribute binding.
    """
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2 for InfoNCE")
    scenes = pretraining_scenes(dataset, extra_scenes, seed)
    if not scenes:
        raise ValidationError("no scenes to pretrain on")
    torch.manual_seed(seed)
    model = TeacherModel(config)
    log_ = PretrainLog()
    captions = caption_corpus(scenes, dataset.vocab, seed, dataset.config.alias_rate)
    if steps > 0:
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
        rng = np.random.default_rng(seed)
        bs = min(batch_size, len(scenes))
        for step in range(steps):
            idx = rng.choice(len(scenes), size=bs, replace=False)
            img = model.encode_images([scenes[i] for i in idx])
            texts = [captions[i] for i in idx]
            if hard_negatives:
                texts += [_negative_caption(scenes[i], dataset, seed, step, rng) for i in idx]
            _, eos, _ = model.encode_texts(texts)
            loss = info_nce(img, eos, config.temperature_contrastive)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log_.losses.append(loss.item())
            if step % 250 == 0:
                log.info("teacher step %d loss %.4f", step, loss.item())
    model.eval()
    val_scenes = [inst.scene for inst in dataset.val[:heldout]]
    if len(val_scenes) >= 2:
        log_.heldout_retrieval = retrieval_accuracy(model, val_scenes, dataset.vocab, seed, dataset.config.alias_rate)
    return model, log_


def retrieval_accuracy(model: TeacherModel, scenes: Sequence[Scene], vocab: Vocab, seed: int,
                       alias_rate: float = 0.1, batch: int = 32) -> float:
    """Top-1 image->caption retrieval accuracy within consecutive batches of ``batch`` pairs."""
    captions = caption_corpus(scenes, vocab, seed + 1, alias_rate)
    hits, total = 0, 0
    with torch.no_grad():
        for i in range(0, len(scenes) - 1, batch):
            sc, cp = scenes[i:i + batch], captions[i:i + batch]
            if len(sc) < 2:
                break
            img = model.encode_images(sc)
            _, eos, _ = model.encode_texts(cp)
            pred = (img @ eos.T).argmax(dim=1)
            hits += int((pred == torch.arange(len(sc))).sum())
            total += len(sc)
    return hits / total


# ---------------------------------------------------------------------- zero-shot scoring


def qa_text(instance: Instance, k: int) -> tuple[int, ...]:
    return instance.question + instance.answers[k]


def zero_shot_answer(model: TeacherModel, instance: Instance, mode: str = "IQA") -> tuple[int, torch.Tensor]:
    """Cosine of the image embedding against each candidate text; ties go to the lowest index."""
    if mode not in ZERO_SHOT_MODES:
        raise ConfigError(f"unknown zero-shot mode {mode!r}")
    texts = [qa_text(instance, k) if mode == "IQA" else instance.answers[k] for k in range(N_CHOICES)]
    with torch.no_grad():
        img = model.encode_images([instance.scene])[0]
        _, eos, _ = model.encode_texts(texts)
        logits = eos @ img
    return int(torch.argmax(logits)), logits


def teacher_logits(model: TeacherModel, instance: Instance, mode: str = "IQA") -> torch.Tensor:
    """Per-choice cosines scaled by 1/temperature (input to the confidence softmax)."""
    _, cos = zero_shot_answer(model, instance, mode)
    return cos / model.config.temperature_contrastive


@dataclass
class TeacherCache:
    """Frozen teacher outputs for a list of instances, keyed by instance_id."""

    image_cls: dict[int, torch.Tensor]
    text_tokens: dict[int, list[torch.Tensor]]
    text_eos: dict[int, torch.Tensor]  # [4, d]
    logits: dict[int, torch.Tensor]  # [4], already divided by temperature

    def output(self, instance_id: int, k: int) -> TeacherOutput:
        return TeacherOutput(
            self.image_cls[instance_id],
            self.text_tokens[instance_id][k],
            self.text_eos[instance_id][k],
            self.logits[instance_id],
        )


def build_cache(model: TeacherModel, instances: Sequence[Instance], mode: str = "IQA", chunk: int = 256) -> TeacherCache:
    image_cls, tokens, eos_d, logits = {}, {}, {}, {}
    tau = model.config.temperature_contrastive
    with torch.no_grad():
        for i in range(0, len(instances), chunk):
            part = instances[i:i + chunk]
            img = model.encode_images([inst.scene for inst in part])
            qa = [qa_text(inst, k) for inst in part for k in range(N_CHOICES)]
            tok, eos, lengths = model.encode_texts(qa)
            if mode == "IA":
                _, score_eos, _ = model.encode_texts([a for inst in part for a in inst.answers])
            else:
                score_eos = eos
            for j, inst in enumerate(part):
                sl = slice(j * N_CHOICES, (j + 1) * N_CHOICES)
                image_cls[inst.instance_id] = img[j]
                tokens[inst.instance_id] = [tok[b, : lengths[b]] for b in range(sl.start, sl.stop)]
                eos_d[inst.instance_id] = eos[sl]
                logits[inst.instance_id] = score_eos[sl] @ img[j] / tau
    return TeacherCache(image_cls, tokens, eos_d, logits)


# ---------------------------------------------------------------------- adapters over a frozen teacher

ADAPTER_KINDS = ("mlp", "attention")
ADAPTER_FUSIONS = ("concat", "cosine")


@dataclass(frozen=True)
class AdapterSpec:
    num_layers: int = 1
    kind: str = "mlp"
    fusion: str = "concat"

    def validate(self) -> None:
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.fusion not in ADAPTER_FUSIONS:
            raise ConfigError(f"unknown adapter fusion {self.fusion!r}")
        if self.num_layers < 1:
            raise ConfigError("adapter num_layers must be >= 1")


def _mlp(width: int, num_layers: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(num_layers):
        layers += [nn.Linear(width, width), nn.GELU()]
    return nn.Sequential(*layers)


class AdapterModel(nn.Module):
    """Trainable head over frozen teacher embeddings; scores each (image, question+answer) pair."""

    def __init__(self, teacher: TeacherModel, spec: AdapterSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.teacher = teacher
        for p in teacher.parameters():
            p.requires_grad_(False)
        d = teacher.config.d_embed
        if spec.kind == "mlp":
            if spec.fusion == "concat":
                self.body = _mlp(2 * d, spec.num_layers)
            else:
                self.img_adapter = _mlp(d, spec.num_layers)
                self.txt_adapter = _mlp(d, spec.num_layers)
        else:
            self.blocks = nn.ModuleList(Block(d, teacher.config.heads, 2 * d) for _ in range(spec.num_layers))
        self.head = nn.Linear(2 * d, 1) if spec.fusion == "concat" else None
        self.scale = nn.Parameter(torch.tensor(1.0 / teacher.config.temperature_contrastive))

    def adapter_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("teacher.")]

    def forward(self, img: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
        """img [B, d], txt [B, d] -> logits [B]."""
        if self.spec.kind == "attention":
            x = torch.stack([img, txt], dim=1)
            for blk in self.blocks:
                x, _ = blk(x)
            img, txt = x[:, 0], x[:, 1]
            if self.spec.fusion == "concat":
                return self.head(torch.cat([img, txt], -1)).squeeze(-1)
            return self.scale * F.cosine_similarity(img, txt, dim=-1)
        if self.spec.fusion == "concat":
            return self.head(self.body(torch.cat([img, txt], -1))).squeeze(-1)
        return self.scale * F.cosine_similarity(self.img_adapter(img), self.txt_adapter(txt), dim=-1)

    def choice_logits(self, cache: TeacherCache, instances: Sequence[Instance]) -> torch.Tensor:
        img = torch.stack([cache.image_cls[i.instance_id] for i in instances])
        txt = torch.stack([cache.text_eos[i.instance_id] for i in instances])  # [B, 4, d]
        B = len(instances)
        out = self(img[:, None].expand(-1, N_CHOICES, -1).reshape(B * N_CHOICES, -1), txt.reshape(B * N_CHOICES, -1))
        return out.view(B, N_CHOICES)


def adapter_finetune(
    teacher: TeacherModel,
    instances: Sequence[Instance],
    spec: AdapterSpec,
    seed: int,
    *,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 32,
    cache: TeacherCache | None = None,
) -> AdapterModel:
    """Finetune only the adapter; the teacher's parameters are left untouched."""
    spec.validate()
    torch.manual_seed(seed)
    model = AdapterModel(teacher, spec)
    cache = cache or build_cache(teacher, instances)
    if epochs <= 0 or not instances:
        return model.eval()
    opt = torch.optim.Adam(model.adapter_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    gold = torch.tensor([i.gold_index for i in instances])
    for _ in range(epochs):
        order = rng.permutation(len(instances))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            logits = model.choice_logits(cache, [instances[i] for i in idx])
            loss = F.cross_entropy(logits, gold[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


def adapter_accuracy(model: AdapterModel, instances: Sequence[Instance], cache: TeacherCache | None = None) -> float:
    cache = cache or build_cache(model.teacher, instances)
    with torch.no_grad():
        logits = model.choice_logits(cache, instances)
    gold = torch.tensor([i.gold_index for i in instances])
    return float((logits.argmax(1) == gold).float().mean())
