"""Evaluation protocol: data-availability splits, shortcut-mitigated test
transforms, implicit-mitigation partitioning, zero-shot k-means and metrics."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from tdlab.errors import ConfigError, ValidationError
from tdlab.student import StudentModel, predict
from tdlab.synth_world import COLORS, N_CHOICES, SHAPES, Dataset, Instance, Splits, Vocab, overlap
from tdlab.teacher import TeacherModel, teacher_logits

SPLIT_REGIMES = ("zero_shot", "low_shot_A", "low_shot_B", "semi", "full")
EVAL_MODES = ("std", "sm", "em", "im")
DEFAULT_COUNTS = {"low_shot_A": 100, "low_shot_B": 1000, "semi": 100}


@dataclass(frozen=True)
class SplitPlan:
    regime: str
    per_category_count: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.regime not in SPLIT_REGIMES:
            raise ConfigError(f"unknown split regime {self.regime!r}; expected one of {SPLIT_REGIMES}")
        if self.per_category_count is not None and self.per_category_count < 1:
            raise ConfigError("per_category_count must be positive")

    @property
    def count(self) -> int | None:
        if self.regime in ("zero_shot", "full"):
            return None
        return self.per_category_count if self.per_category_count is not None else DEFAULT_COUNTS[self.regime]


def make_splits(dataset: Dataset, plan: SplitPlan) -> Splits:
    """Per-category labeled subset plus the label-free remainder of train.

    The remainder is exposed as ``unlabeled_pool`` for every regime except
    ``full``; only label-free stages (adaptive finetuning, semi-supervised
    distillation) read it, and train() redacts its labels.
    """
    train = dataset.train
    if plan.regime == "full":
        return Splits(train, (), dataset.val, dataset.test)
    if plan.regime == "zero_shot":
        return Splits((), train, dataset.val, dataset.test)
    n = plan.count
    rng = np.random.default_rng([plan.seed, 0x5EED])
    chosen: set[int] = set()
    for cat in sorted({i.category for i in train}):
        members = [i.instance_id for i in train if i.category == cat]
        if n > len(members):
            raise ValidationError(f"category {cat} has {len(members)} instances, {n} requested")
        chosen.update(int(members[j]) for j in rng.choice(len(members), size=n, replace=False))
    subset = tuple(i for i in train if i.instance_id in chosen)
    pool = tuple(i for i in train if i.instance_id not in chosen)
    return Splits(subset, pool, dataset.val, dataset.test)


# ---------------------------------------------------------------------- transforms


def shortcut_mitigated_transform(instances: Sequence[Instance], vocab: Vocab) -> list[Instance]:
    """Strip injected shortcut tokens from gold answers.

    Templates never let an answer share a content token with its question, so
    every shared content token in the gold answer came from injection.
    """
    out = []
    for inst in instances:
        if inst.shortcut_strength == 0:
            out.append(inst)
            continue
        q = {t for t in inst.question if vocab.is_content(t)}
        answers = list(inst.answers)
        answers[inst.gold_index] = tuple(t for t in answers[inst.gold_index] if t not in q)
        out.append(replace(inst, answers=tuple(answers)))
    return out


@dataclass(frozen=True)
class CooccurrenceStats:
    """Question/answer co-occurrence counts of content n-grams over a training corpus."""

    counts: dict[tuple[int, ...], int]
    threshold: float
    n_max: int

    @classmethod
    def build(cls, instances: Sequence[Instance], vocab: Vocab, n_max: int = 2, quantile: float = 0.9) -> "CooccurrenceStats":
        """Counts use all four answers, so no gold label is read."""
        counts: Counter = Counter()
        seen: set[tuple[int, ...]] = set()
        for inst in instances:
            q = _grams(inst.question, vocab, n_max)
            a = set()
            for ans in inst.answers:
                a |= _grams(ans, vocab, n_max)
            seen |= a
            counts.update(q & a)
        values = np.array([counts.get(g, 0) for g in sorted(seen)] or [0], dtype=float)
        positive = values[values > 0]
        thr = float(np.quantile(positive, quantile)) if positive.size else float("inf")
        return cls(dict(counts), thr, n_max)

    def frequent(self, gram: tuple[int, ...]) -> bool:
        return self.counts.get(gram, 0) >= self.threshold


def _grams(tokens: Sequence[int], vocab: Vocab, n_max: int) -> set[tuple[int, ...]]:
    out = set()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            g = tuple(tokens[i:i + n])
            if all(vocab.is_content(t) for t in g):
                out.add(g)
    return out


def synonym_table(vocab: Vocab) -> dict[int, int]:
    """Content token id -> alias token id (each canonical token has exactly one)."""
    table = {}
    for name, alias in vocab.aliases.items():
        table[vocab.index[name]] = vocab.index[alias]
    return table


@dataclass(frozen=True)
class Replacement:
    instance_id: int
    answer: int
    position: int
    old: int
    new: int | None  # None: no alias available, left unchanged

    def to_json(self) -> dict:
        return asdict(self)


def explicit_mitigation(
    instances: Sequence[Instance],
    stats: CooccurrenceStats,
    synonyms: dict[int, int],
    vocab: Vocab,
    n_max: int | None = None,
) -> tuple[list[Instance], list[Replacement]]:
    """Swap frequent answer tokens that overlap the question or scene objects for aliases.

    A token is replaced when it sits inside an answer n-gram that also occurs in
    the question (or names a scene object) and that n-gram's co-occurrence count
    reaches the top-decile threshold.
    """
    n_max = stats.n_max if n_max is None else n_max
    out, log_ = [], []
    for inst in instances:
        q = _grams(inst.question, vocab, n_max)
        scene_tokens = {(vocab.index[f"{COLORS[c]}_{SHAPES[s]}"],) for s, c, _, _ in inst.scene.objects}
        anchors = q | scene_tokens
        question_ids = set(inst.question)
        answers = []
        for k, ans in enumerate(inst.answers):
            ans = list(ans)
            hit: set[int] = set()
            for n in range(1, n_max + 1):
                for i in range(len(ans) - n + 1):
                    g = tuple(ans[i:i + n])
                    if g in anchors and stats.frequent(g):
                        hit.update(range(i, i + n))
            for pos in sorted(hit):
                old = ans[pos]
                new = synonyms.get(old)
                if new is None or new in question_ids:
                    log_.append(Replacement(inst.instance_id, k, pos, old, None))
                    continue
                ans[pos] = new
                log_.append(Replacement(inst.instance_id, k, pos, old, new))
            answers.append(tuple(ans))
        out.append(replace(inst, answers=tuple(answers)))
    return out, log_


def write_replacement_log(path: Path, entries: Sequence[Replacement]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json()) + "\n")


@dataclass(frozen=True)
class IMPartition:
    language_biased: tuple[Instance, ...]
    image_biased: tuple[Instance, ...]
    neither: tuple[Instance, ...]

    @property
    def evaluation_set(self) -> tuple[Instance, ...]:
        return self.image_biased + self.neither


def implicit_mitigation_partition(
    instances: Sequence[Instance], text_only_model: StudentModel, n_shapes: int, n_colors: int, gamma: float = 0.9,
) -> IMPartition:
    """Split by a text-only model: confident-correct, incorrect, and the rest."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError("gamma must lie in (0, 1)")
    instances = list(instances)
    if not instances:
        return IMPartition((), (), ())
    probs = predict(text_only_model, instances, n_shapes, n_colors, zero_regions=True).double().softmax(-1)
    conf, pred = probs.max(-1)
    lb, ib, nb = [], [], []
    for inst, c, p in zip(instances, conf.tolist(), pred.tolist()):
        if p != inst.gold_index:
            ib.append(inst)
        elif c >= gamma:
            lb.append(inst)
        else:
            nb.append(inst)
    return IMPartition(tuple(lb), tuple(ib), tuple(nb))


# ---------------------------------------------------------------------- zero-shot k-means


@dataclass(frozen=True)
class KMeansResult:
    centroids: tuple[float, ...]
    assignment: np.ndarray  # class index per point, ordered by ascending centroid
    accuracy: float | None
    sse: float


def optimal_1d_partition(xs: Sequence[float], k: int) -> list[int]:
    """Cut positions (in sorted order) of the minimum-SSE partition into k contiguous groups."""
    xs = np.sort(np.asarray(xs, dtype=float))
    n = len(xs)
    c1 = np.concatenate([[0.0], np.cumsum(xs)])
    c2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
    D = np.full((k + 1, n + 1), np.inf)
    B = np.zeros((k + 1, n + 1), dtype=int)
    D[0, 0] = 0.0
    for m in range(1, k + 1):
        for j in range(m, n + 1):
            i = np.arange(m - 1, j)
            s = c1[j] - c1[i]
            cost = c2[j] - c2[i] - s * s / (j - i)
            v = D[m - 1, i] + cost
            a = int(np.argmin(v))
            D[m, j], B[m, j] = v[a], i[a]
    cuts, j = [], n
    for m in range(k, 0, -1):
        j = int(B[m, j])
        cuts.append(j)
    return sorted(cuts)[1:]


def kmeans_1d(xs: Sequence[float], k: int = 3, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from min/median/max, then an exact 1-D optimality check.

    1-D optimal clusters are contiguous in sorted order, so the global optimum is
    found by dynamic programming; it replaces the Lloyd solution whenever its SSE
    is strictly lower. Returns (centroids ascending, labels, sse).
    """
    xs = np.asarray(xs, dtype=float)
    if len(np.unique(xs)) < k:
        raise ValidationError(f"need at least {k} distinct values for k-means")
    if k == 3:
        cent = np.array([xs.min(), float(np.median(xs)), xs.max()])
    else:
        cent = np.quantile(xs, np.linspace(0, 1, k))
    labels = np.zeros(len(xs), dtype=int)
    for it in range(max_iter):
        new = np.argmin(np.abs(xs[:, None] - cent[None, :]), axis=1)
        if it and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                cent[j] = xs[labels == j].mean()
    sse = float(sum(((xs[labels == j] - cent[j]) ** 2).sum() for j in range(k)))

    order = np.argsort(xs, kind="stable")
    cuts = optimal_1d_partition(xs, k)
    opt = np.empty(len(xs), dtype=int)
    bounds = [0, *cuts, len(xs)]
    for j in range(k):
        opt[order[bounds[j]:bounds[j + 1]]] = j
    opt_cent = np.array([xs[opt == j].mean() for j in range(k)])
    opt_sse = float(sum(((xs[opt == j] - opt_cent[j]) ** 2).sum() for j in range(k)))
    if opt_sse < sse - 1e-12 * max(1.0, sse):
        labels, cent, sse = opt, opt_cent, opt_sse
    # relabel by ascending centroid
    rank = np.argsort(np.argsort(cent, kind="stable"), kind="stable")
    return np.sort(cent), rank[labels], sse


def kmeans_zero_shot(similarities: Sequence[float], k: int = 3, labels: Sequence[int] | None = None) -> KMeansResult:
    """Cluster scalar similarities; clusters map to classes by ascending centroid.

    Labels only enter the final accuracy, never the clustering.
    """
    cent, assign, sse = kmeans_1d(similarities, k)
    acc = None
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(assign):
            raise ValidationError("labels and similarities differ in length")
        acc = float((assign == labels).mean())
    return KMeansResult(tuple(float(c) for c in cent), assign, acc, sse)


# ---------------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    mode: str
    n: int
    accuracy: float
    per_category: dict[int, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mode": self.mode, "n": self.n, "accuracy": self.accuracy,
                "per_category": {str(k): v for k, v in self.per_category.items()}, "extra": self.extra}

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(d["mode"], d["n"], d["accuracy"], {int(k): v for k, v in d["per_category"].items()}, d.get("extra", {}))


def choice_scores(model, instances: Sequence[Instance], n_shapes: int, n_colors: int) -> torch.Tensor:
    """[N, 4] logits from a student or a teacher (zero-shot IQA)."""
    if isinstance(model, TeacherModel):
        if not instances:
            return torch.zeros(0, N_CHOICES)
        return torch.stack([teacher_logits(model, i) for i in instances])
    if isinstance(model, StudentModel):
        return predict(model, instances, n_shapes, n_colors)
    raise ValidationError(f"cannot evaluate object of type {type(model).__name__}")


def score_predictions(logits: torch.Tensor, instances: Sequence[Instance], mode: str = "std") -> MetricsReport:
    if not instances:
        raise ValidationError("empty split")
    pred = logits.argmax(-1).tolist()
    hits = [p == i.gold_index for p, i in zip(pred, instances)]
    per: dict[int, list[bool]] = {}
    for h, i in zip(hits, instances):
        per.setdefault(i.category, []).append(h)
    return MetricsReport(mode, len(instances), float(np.mean(hits)), {c: float(np.mean(v)) for c, v in sorted(per.items())})


def evaluate(
    model,
    instances: Sequence[Instance],
    mode: str = "std",
    *,
    vocab: Vocab,
    n_shapes: int,
    n_colors: int,
    cooccurrence: CooccurrenceStats | None = None,
    text_only: StudentModel | None = None,
    gamma: float = 0.9,
) -> MetricsReport:
    """Accuracy under one evaluation configuration.

    ``em`` needs ``cooccurrence`` from the training split; ``im`` needs a
    text-only student and scores image_biased plus neither (each bucket's
    accuracy is reported in ``extra``).
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    instances = list(instances)
    if not instances:
        raise ValidationError("empty split")
    extra: dict = {}
    if mode == "sm":
        instances = shortcut_mitigated_transform(instances, vocab)
    elif mode == "em":
        if cooccurrence is None:
            raise ConfigError("em evaluation needs co-occurrence statistics")
        instances, log_ = explicit_mitigation(instances, cooccurrence, synonym_table(vocab), vocab)
        extra["replacements"] = sum(1 for r in log_ if r.new is not None)
    elif mode == "im":
        if text_only is None:
            raise ConfigError("im evaluation needs a text-only model")
        part = implicit_mitigation_partition(instances, text_only, n_shapes, n_colors, gamma)
        for name in ("language_biased", "image_biased", "neither"):
            bucket = list(getattr(part, name))
            extra[f"n_{name}"] = len(bucket)
            if bucket:
                extra[f"acc_{name}"] = score_predictions(choice_scores(model, bucket, n_shapes, n_colors), bucket).accuracy
        instances = list(part.evaluation_set)
        if not instances:
            raise ValidationError("implicit mitigation left no instances to evaluate")
    rep = score_predictions(choice_scores(model, instances, n_shapes, n_colors), instances, mode)
    rep.extra.update(extra)
    return rep


@dataclass
class MitigationReport:
    mean_overlap_gold: float
    mean_overlap_distractor: float
    pct_gold_more_overlap: float
    replaced_ngrams: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def bias_statistics(instances: Sequence[Instance], vocab: Vocab, replaced: Sequence = ()) -> MitigationReport:
    """Question/answer content-token overlap for gold vs the mean distractor."""
    if not instances:
        raise ValidationError("empty split")
    gold, dist, more = [], [], 0
    for inst in instances:
        o = [overlap(inst.question, a, vocab) for a in inst.answers]
        g = o[inst.gold_index]
        d = float(np.mean([x for k, x in enumerate(o) if k != inst.gold_index]))
        gold.append(g)
        dist.append(d)
        more += g > d
    return MitigationReport(float(np.mean(gold)), float(np.mean(dist)), 100.0 * more / len(instances), list(replaced))


def label_digest(instances: Sequence[Instance]) -> str:
    """Hash of the (instance_id, gold_index) column."""
    h = hashlib.sha256()
    for i in instances:
        h.update(f"{i.instance_id}:{i.gold_index};".encode())
    return h.hexdigest()
