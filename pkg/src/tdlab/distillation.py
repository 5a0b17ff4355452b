"""Targeted distillation losses.

Feature distillation compares teacher and student vectors with an L1 measure.
Token-selective distillation scores every text token by visual relevance
(teacher image/token cosine) plus keyword importance, keeps the top ``m``, and
distils those token features too. Confidence weighting zeroes the distillation
weight whenever the teacher is not more confident than the student.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from tdlab.errors import ConfigError, ValidationError
from tdlab.synth_world import Vocab

REDUCTIONS = ("mean", "sum")
CW_SCOPES = ("gold_only", "all_choices")


@dataclass(frozen=True)
class DistillConfig:
    w: float = 0.05
    # None -> 2w/3 (keeps three terms on the same footing as naive's two)
    w_prime: float | None = None
    T: float = 1.0
    m: int = 2
    enable_ts: bool = False
    enable_cw: bool = False
    enable_af: bool = False
    cw_scope: str = "all_choices"
    l1_reduction: str = "mean"
    use_vision: bool = True
    use_language: bool = True

    def __post_init__(self) -> None:
        if self.w < 0 or (self.w_prime is not None and self.w_prime < 0):
            raise ConfigError("distillation weights must be >= 0")
        if self.T <= 0:
            raise ConfigError("T must be > 0")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.cw_scope not in CW_SCOPES:
            raise ConfigError(f"cw_scope must be one of {CW_SCOPES}")
        if self.l1_reduction not in REDUCTIONS:
            raise ConfigError(f"l1_reduction must be one of {REDUCTIONS}")

    @property
    def effective_w_prime(self) -> float:
        return 2.0 * self.w / 3.0 if self.w_prime is None else self.w_prime

    @property
    def base_weight(self) -> float:
        """Weight multiplying the distillation sum before any confidence gate."""
        return self.effective_w_prime if self.enable_ts else self.w


def _t(x, dtype=torch.float64) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------- feature losses


def l1_feature_loss(a, b, reduction: str = "mean") -> torch.Tensor:
    """Mean or sum of |a - b| over the last axis."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValidationError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    diff = (a - b).abs()
    if reduction == "mean":
        return diff.mean(dim=-1)
    if reduction == "sum":
        return diff.sum(dim=-1)
    raise ConfigError(f"unknown reduction {reduction!r}")


def naive_vl_loss(
    teacher_image, teacher_eos, student_img, student_cls, reduction: str = "mean",
    *, use_vision: bool = True, use_language: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_dv, L_dt, L_dv + L_dt) between teacher pooled features and student [IMG]/[CLS]."""
    teacher_image, teacher_eos = _t(teacher_image), _t(teacher_eos)
    student_img, student_cls = _t(student_img), _t(student_cls)
    if teacher_image.shape[-1] != student_img.shape[-1] or teacher_eos.shape[-1] != student_cls.shape[-1]:
        raise ValidationError("teacher/student feature dims differ; configure a projection")
    dv = l1_feature_loss(teacher_image, student_img, reduction)
    dt = l1_feature_loss(teacher_eos, student_cls, reduction)
    if not use_vision:
        dv = torch.zeros_like(dv)
    if not use_language:
        dt = torch.zeros_like(dt)
    return dv, dt, dv + dt


# ---------------------------------------------------------------------- token scoring


def visual_relevance_scores(image_emb, token_embs) -> torch.Tensor:
    """Cosine of every token embedding with the image embedding."""
    image_emb, token_embs = _t(image_emb), _t(token_embs)
    img_norm = image_emb.norm()
    tok_norm = token_embs.norm(dim=-1)
    if img_norm == 0 or bool((tok_norm == 0).any()):
        raise ValidationError("zero-norm vector in visual relevance scoring")
    return (token_embs @ image_emb) / (tok_norm * img_norm)


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies over a training corpus (one document per text sequence)."""

    n_docs: int
    df: dict[int, int]
    ngram_df: dict[tuple[int, ...], int]
    stopword_ids: frozenset[int]
    vocab_size: int
    n_max: int
    min_ngram_df: int
    position_decay: float = 0.1
    ngram_boost: float = 0.5

    @classmethod
    def build(cls, docs: Iterable[Sequence[int]], vocab: Vocab, n_max: int = 2, min_ngram_df: int = 5,
              position_decay: float = 0.1, ngram_boost: float = 0.5) -> "CorpusStats":
        stop = frozenset(i for i in range(len(vocab)) if not vocab.is_content(i))
        df: Counter = Counter()
        ngram_df: Counter = Counter()
        n = 0
        for doc in docs:
            n += 1
            df.update(set(doc))
            grams = set()
            for k in range(2, n_max + 1):
                for i in range(len(doc) - k + 1):
                    g = tuple(doc[i:i + k])
                    if not any(t in stop for t in g):
                        grams.add(g)
            ngram_df.update(grams)
        frequent = {g: c for g, c in ngram_df.items() if c >= min_ngram_df}
        return cls(n, dict(df), frequent, stop, len(vocab), n_max, min_ngram_df, position_decay, ngram_boost)

    def idf(self, token: int) -> float:
        d = self.df.get(token, 0)
        return math.log(self.n_docs / d) if d else math.log(self.n_docs + 1)

    def ngram_idf(self, gram: tuple[int, ...]) -> float:
        return math.log(self.n_docs / self.ngram_df[gram])


def keyword_scores(text: Sequence[int], corpus: CorpusStats, n_max: int | None = None) -> torch.Tensor:
    """Statistical keyword importance per token.

    score_l = tf(w_l) * idf(w_l) * decay(l) * (1 + boost * max idf of frequent n-grams covering l),
    with tf the in-text count over text length, decay(l) = 1 / (1 + position_decay * l),
    and stopwords scored 0.
    """
    n_max = corpus.n_max if n_max is None else n_max
    if any(not 0 <= t < corpus.vocab_size for t in text):
        raise ValidationError("unknown token id in keyword scoring")
    L = len(text)
    counts = Counter(text)
    bonus = [0.0] * L
    for k in range(2, n_max + 1):
        for i in range(L - k + 1):
            g = tuple(text[i:i + k])
            if g in corpus.ngram_df:
                v = corpus.ngram_idf(g)
                for j in range(i, i + k):
                    bonus[j] = max(bonus[j], v)
    out = []
    for l, w in enumerate(text):
        if w in corpus.stopword_ids:
            out.append(0.0)
            continue
        tf = counts[w] / L
        decay = 1.0 / (1.0 + corpus.position_decay * l)
        out.append(tf * corpus.idf(w) * decay * (1.0 + corpus.ngram_boost * bonus[l]))
    return torch.tensor(out, dtype=torch.float64)


def combine_scores(s_vr, s_si) -> tuple[torch.Tensor, bool]:
    """Sum of the two L1-normalised score vectors.

    A vector with zero L1 norm contributes zeros. Returns (combined, no_signal),
    where no_signal is True when both norms are zero.
    """
    s_vr, s_si = _t(s_vr), _t(s_si)
    if s_vr.shape != s_si.shape:
        raise ValidationError("score vectors differ in length")
    out = torch.zeros_like(s_vr)
    n_vr, n_si = s_vr.abs().sum(), s_si.abs().sum()
    if n_vr > 0:
        out = out + s_vr / n_vr
    if n_si > 0:
        out = out + s_si / n_si
    return out, bool(n_vr == 0 and n_si == 0)


def select_tokens(combined, m: int) -> list[int]:
    """Indices of the min(m, len) largest scores, ties to the lowest index, sorted ascending."""
    if m < 1:
        raise ValidationError("m must be >= 1")
    s = np.asarray(_t(combined).detach().cpu().numpy(), dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    return sorted(int(i) for i in order[:m])


def token_selective_loss(indices: Sequence[int], teacher_tokens, student_tokens, reduction: str = "mean") -> torch.Tensor:
    """Mean over the selected rows of the per-row L1 feature loss."""
    teacher_tokens, student_tokens = _t(teacher_tokens), _t(student_tokens)
    n = min(teacher_tokens.shape[0], student_tokens.shape[0])
    if not indices:
        raise ValidationError("no token indices selected")
    if any(not 0 <= i < n for i in indices):
        raise ValidationError("token index out of range")
    idx = torch.as_tensor(list(indices))
    return l1_feature_loss(teacher_tokens[idx], student_tokens[idx], reduction).mean()


# ---------------------------------------------------------------------- confidence weighting


def confidence_ratio(teacher_logits, student_logits, T: float = 1.0) -> torch.Tensor:
    """T * max softmax(teacher) / max softmax(student), over the last axis."""
    if T <= 0:
        raise ConfigError("T must be > 0")
    tl, sl = _t(teacher_logits), _t(student_logits)
    return T * tl.softmax(-1).amax(-1) / sl.softmax(-1).amax(-1)


def gate_weight(r, w: float):
    """w when r > 1, else 0 (the boundary r == 1 gives 0)."""
    if w < 0:
        raise ConfigError("w must be >= 0")
    if isinstance(r, torch.Tensor):
        return torch.where(r > 1, torch.full_like(r, w), torch.zeros_like(r))
    return w if r > 1 else 0.0


# ---------------------------------------------------------------------- composition


def total_loss(task, L_dv, L_dt, L_dt_prime, config: DistillConfig, gate=None):
    """Task loss plus the weighted distillation terms.

    Naive: task + w*(L_dv + L_dt). Token-selective: task + w'*(L_dv + L_dt + L_dt').
    With confidence weighting the caller passes the gated weight in ``gate``.
    """
    if gate is not None and not config.enable_cw:
        raise ConfigError("gate given while confidence weighting is disabled")
    if config.enable_cw and gate is None:
        raise ConfigError("confidence weighting enabled but no gate given")
    weight = gate if config.enable_cw else config.base_weight
    if config.enable_ts:
        return task + weight * (L_dv + L_dt + L_dt_prime)
    return task + weight * (L_dv + L_dt)


def adaptive_finetune_loss(mlm, itm, L_d, w: float):
    """Pretraining objectives (MLM + ITM) plus w * L_d."""
    return (mlm + itm) + w * L_d


# ---------------------------------------------------------------------- per-instance token selection


@dataclass(frozen=True)
class TokenSelection:
    s_vr: torch.Tensor
    s_si: torch.Tensor
    combined: torch.Tensor
    indices: tuple[int, ...]
    no_signal: bool


def select_for_text(image_emb, teacher_tokens, text: Sequence[int], corpus: CorpusStats, m: int) -> TokenSelection:
    s_vr = visual_relevance_scores(_t(image_emb).double(), _t(teacher_tokens).double())
    s_si = keyword_scores(text, corpus)
    combined, no_signal = combine_scores(s_vr, s_si)
    idx = () if no_signal else tuple(select_tokens(combined, m))
    return TokenSelection(s_vr, s_si, combined, idx, no_signal)
