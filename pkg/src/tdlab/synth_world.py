"""Synthetic grid-world vision-language corpus.

Scenes are small grids of coloured shapes. Each instance pairs a scene with a
templated question and four candidate answers; a lexical shortcut (question
n-gram copied into the gold answer) can be injected at a controlled rate.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tdlab.errors import ConfigError, ValidationError

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[IMG]", "[MASK]")
PAD, CLS, SEP, IMG, MASK = range(len(SPECIALS))

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
COLOR_ALIASES = ("crimson", "emerald", "azure", "amber", "violet", "tangerine", "ivory", "ebony")
SHAPES = ("square", "circle", "triangle", "star", "hexagon", "diamond", "cross", "heart")
SHAPE_ALIASES = ("box", "ring", "wedge", "asterisk", "honeycomb", "rhombus", "plus", "valentine")
NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
           "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen")
NUMBER_ALIASES = ("none", "single", "pair", "trio", "quartet", "quintet", "sextet", "septet",
                  "octet", "nonet", "decet", "undecet", "dozen", "tredecet", "quattuordecet",
                  "quindecet", "sexdecet")

# Template function words; keyword scoring treats these as stopwords.
STOPWORDS = (
    "what", "color", "shape", "is", "the", "it", "which", "in", "scene", "how", "many",
    "objects", "object", "are", "there", "where", "at", "of", "left", "right", "above",
    "below", "a", "and",
)
RELATIONS = ("left", "right", "above", "below")

CATEGORY_NAMES = (
    "attribute_color",
    "attribute_shape",
    "which_object",
    "counting",
    "position",
    "spatial_relation",
    "occupancy",
)
N_CHOICES = 4


@dataclass(frozen=True)
class GeneratorConfig:
    n_train: int = 700
    n_val: int = 140
    n_test: int = 700
    n_categories: int = 7
    n_shapes: int = 4
    n_colors: int = 4
    grid_size: int = 3
    min_objects: int = 3
    max_objects: int = 5
    shortcut_strength: float = 0.0
    # None means "same as shortcut_strength".
    test_shortcut_strength: float | None = None
    category_weights: tuple[float, ...] | None = None
    alias_rate: float = 0.1

    def validate(self) -> None:
        if not 1 <= self.n_categories <= len(CATEGORY_NAMES):
            raise ConfigError(f"n_categories must be in [1, {len(CATEGORY_NAMES)}], got {self.n_categories}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if not N_CHOICES <= self.n_colors <= len(COLORS):
            raise ConfigError(f"n_colors must be in [{N_CHOICES}, {len(COLORS)}] to build 4 distinct answers")
        if not N_CHOICES <= self.n_shapes <= len(SHAPES):
            raise ConfigError(f"n_shapes must be in [{N_CHOICES}, {len(SHAPES)}] to build 4 distinct answers")
        if self.grid_size < 2 or self.grid_size ** 2 > len(NUMBERS) - 1:
            raise ConfigError("grid_size must be in [2, 4]")
        if not 2 <= self.min_objects <= self.max_objects <= self.grid_size ** 2:
            raise ConfigError("need 2 <= min_objects <= max_objects <= grid_size**2")
        if self.max_objects < N_CHOICES - 1:
            raise ConfigError("max_objects too small for 4 distinct counting answers")
        for s in (self.shortcut_strength, self.test_shortcut_strength):
            if s is not None and not 0.0 <= s <= 1.0:
                raise ConfigError(f"shortcut strength {s} outside [0, 1]")
        if not 0.0 <= self.alias_rate < 1.0:
            raise ConfigError("alias_rate must be in [0, 1)")
        if self.category_weights is not None:
            w = self.category_weights
            if len(w) != self.n_categories or min(w) < 0 or sum(w) <= 0:
                raise ConfigError("category_weights must have one non-negative weight per category")


# --------------------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    aliases: dict[str, str]
    stopwords: frozenset[str]
    n_shapes: int
    n_colors: int
    grid_size: int
    index: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def build(cls, n_shapes: int, n_colors: int, grid_size: int) -> "Vocab":
        tokens: list[str] = list(SPECIALS) + list(STOPWORDS)
        aliases: dict[str, str] = {}

        def content(name: str, alias: str) -> None:
            tokens.extend((name, alias))
            aliases[name] = alias

        for c in range(n_colors):
            content(COLORS[c], COLOR_ALIASES[c])
        for s in range(n_shapes):
            content(SHAPES[s], SHAPE_ALIASES[s])
        for c in range(n_colors):
            for s in range(n_shapes):
                content(f"{COLORS[c]}_{SHAPES[s]}", f"{COLOR_ALIASES[c]}_{SHAPES[s]}")
        for n in range(grid_size ** 2 + 1):
            content(NUMBERS[n], NUMBER_ALIASES[n])
        for r in range(grid_size):
            content(f"row{r}", f"line{r}")
        for c in range(grid_size):
            content(f"col{c}", f"column{c}")
        return cls(
            tokens=tuple(tokens),
            aliases=aliases,
            stopwords=frozenset(STOPWORDS),
            n_shapes=n_shapes,
            n_colors=n_colors,
            grid_size=grid_size,
            index={t: i for i, t in enumerate(tokens)},
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index[w] for w in words)

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def is_content(self, token_id: int) -> bool:
        tok = self.tokens[token_id]
        return token_id >= len(SPECIALS) and tok not in self.stopwords

    def canonical(self, token_id: int) -> int:
        """Map an alias back to its canonical token id (identity otherwise)."""
        tok = self.tokens[token_id]
        inverse = self._inverse_aliases()
        return self.index[inverse[tok]] if tok in inverse else token_id

    def _inverse_aliases(self) -> dict[str, str]:
        inv = self.__dict__.get("_inv")
        if inv is None:
            inv = {v: k for k, v in self.aliases.items()}
            object.__setattr__(self, "_inv", inv)
        return inv

    def alias_id(self, token_id: int) -> int | None:
        alias = self.aliases.get(self.tokens[token_id])
        return None if alias is None else self.index[alias]

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "aliases": self.aliases,
            "stopwords": sorted(self.stopwords),
            "specials": list(SPECIALS),
            "n_shapes": self.n_shapes,
            "n_colors": self.n_colors,
            "grid_size": self.grid_size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        v = cls.build(d["n_shapes"], d["n_colors"], d["grid_size"])
        if list(v.tokens) != d["tokens"]:
            raise ValidationError("vocab.json token table does not match its declared dimensions")
        return v


# --------------------------------------------------------------------------- core types


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: tuple[tuple[int, int, int, int], ...]  # (shape_id, color_id, row, col)
    scene_id: int

    def validate(self, n_shapes: int, n_colors: int) -> None:
        if not 1 <= len(self.objects) <= self.grid_size ** 2:
            raise ValidationError("scene must hold between 1 and grid_size**2 objects")
        cells = {(r, c) for _, _, r, c in self.objects}
        if len(cells) != len(self.objects):
            raise ValidationError("two objects share a cell")
        for s, c, r, col in self.objects:
            if not (0 <= s < n_shapes and 0 <= c < n_colors):
                raise ValidationError("shape/color id outside vocabulary")
            if not (0 <= r < self.grid_size and 0 <= col < self.grid_size):
                raise ValidationError("object position outside grid")


@dataclass(frozen=True)
class Instance:
    instance_id: int
    scene: Scene
    question: tuple[int, ...]
    answers: tuple[tuple[int, ...], ...]
    gold_index: int
    category: int
    shortcut_strength: float = 0.0

    def __post_init__(self) -> None:
        if len(self.answers) != N_CHOICES:
            raise ValidationError(f"instance needs exactly {N_CHOICES} answers")
        if not 0 <= self.gold_index < N_CHOICES:
            raise ValidationError("gold_index out of range")
        if not self.question or any(not a for a in self.answers):
            raise ValidationError("empty text sequence")

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "scene": {"grid_size": self.scene.grid_size, "objects": [list(o) for o in self.scene.objects]},
            "question": list(self.question),
            "answers": [list(a) for a in self.answers],
            "gold_index": self.gold_index,
            "category": self.category,
            "shortcut_strength": self.shortcut_strength,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Instance":
        scene = Scene(
            grid_size=d["scene"]["grid_size"],
            objects=tuple(tuple(o) for o in d["scene"]["objects"]),
            scene_id=d["instance_id"],
        )
        return cls(
            instance_id=d["instance_id"],
            scene=scene,
            question=tuple(d["question"]),
            answers=tuple(tuple(a) for a in d["answers"]),
            gold_index=d["gold_index"],
            category=d["category"],
            shortcut_strength=float(d["shortcut_strength"]),
        )


@dataclass(frozen=True)
class Dataset:
    train: tuple[Instance, ...]
    val: tuple[Instance, ...]
    test: tuple[Instance, ...]
    vocab: Vocab
    config: GeneratorConfig
    seed: int

    def split(self, name: str) -> tuple[Instance, ...]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_instances(self) -> tuple[Instance, ...]:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class Splits:
    """Materialised data-availability split (see ``eval_protocol.make_splits``)."""

    train_subset: tuple[Instance, ...]
    unlabeled_pool: tuple[Instance, ...]
    val: tuple[Instance, ...]
    test: tuple[Instance, ...]


# --------------------------------------------------------------------------- generation


def _rng(seed: int, instance_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, instance_id, stream])


def _allocate(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` over ``weights``."""
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def category_counts(config: GeneratorConfig, n: int) -> list[int]:
    weights = config.category_weights or (1.0,) * config.n_categories
    return _allocate(n, weights)


def _sample_scene(rng: np.random.Generator, cfg: GeneratorConfig, scene_id: int) -> Scene:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cells = rng.choice(cfg.grid_size ** 2, size=n, replace=False)
    objs = []
    for cell in cells:
        r, c = divmod(int(cell), cfg.grid_size)
        objs.append((int(rng.integers(cfg.n_shapes)), int(rng.integers(cfg.n_colors)), r, c))
    return Scene(cfg.grid_size, tuple(objs), scene_id)


def _composite(s: int, c: int) -> str:
    return f"{COLORS[c]}_{SHAPES[s]}"


def _unique(values: list) -> list:
    return [v for v in values if values.count(v) == 1]


def _pick_distractors(rng: np.random.Generator, pool: list, k: int = N_CHOICES - 1) -> list | None:
    pool = list(dict.fromkeys(pool))
    if len(pool) < k:
        return None
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def _template(category: int, scene: Scene, rng: np.random.Generator, cfg: GeneratorConfig):
    """Return (question words, gold answer words, distractor answer words) or None."""
    objs = scene.objects
    shapes = [o[0] for o in objs]
    colors = [o[1] for o in objs]
    comps = [(o[0], o[1]) for o in objs]
    all_comps = [(s, c) for c in range(cfg.n_colors) for s in range(cfg.n_shapes)]
    name = CATEGORY_NAMES[category]

    if name == "attribute_color":
        cands = [i for i, o in enumerate(objs) if shapes.count(o[0]) == 1]
        if not cands:
            return None
        t = objs[cands[int(rng.integers(len(cands)))]]
        d = _pick_distractors(rng, [c for c in range(cfg.n_colors) if c != t[1]])
        return (["what", "color", "is", "the", SHAPES[t[0]]], ["it", "is", COLORS[t[1]]],
                [["it", "is", COLORS[c]] for c in d])

    if name == "attribute_shape":
        cands = [i for i, o in enumerate(objs) if colors.count(o[1]) == 1]
        if not cands:
            return None
        t = objs[cands[int(rng.integers(len(cands)))]]
        d = _pick_distractors(rng, [s for s in range(cfg.n_shapes) if s != t[0]])
        return (["what", "shape", "is", "the", COLORS[t[1]], "object"], ["it", "is", SHAPES[t[0]]],
                [["it", "is", SHAPES[s]] for s in d])

    if name == "which_object":
        s = shapes[int(rng.integers(len(shapes)))]
        present = [c for (sh, c) in comps if sh == s]
        gold_c = present[int(rng.integers(len(present)))]
        d = _pick_distractors(rng, [c for c in range(cfg.n_colors) if c not in present])
        if d is None:
            return None
        return (["which", SHAPES[s], "is", "in", "the", "scene"], ["the", _composite(s, gold_c)],
                [["the", _composite(s, c)] for c in d])

    if name == "counting":
        c = colors[int(rng.integers(len(colors)))]
        n = colors.count(c)
        d = _pick_distractors(rng, [k for k in range(cfg.max_objects + 1) if k != n])
        return (["how", "many", COLORS[c], "objects", "are", "there"], ["there", "are", NUMBERS[n]],
                [["there", "are", NUMBERS[k]] for k in d])

    if name == "position":
        cands = [i for i, o in enumerate(objs) if comps.count((o[0], o[1])) == 1]
        if not cands:
            return None
        t = objs[cands[int(rng.integers(len(cands)))]]
        cells = [(r, c) for r in range(cfg.grid_size) for c in range(cfg.grid_size) if (r, c) != (t[2], t[3])]
        d = _pick_distractors(rng, cells)
        return (["where", "is", "the", _composite(t[0], t[1])], ["at", f"row{t[2]}", f"col{t[3]}"],
                [["at", f"row{r}", f"col{c}"] for r, c in d])

    if name == "spatial_relation":
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        cands = [i for i, o in enumerate(objs) if comps.count((o[0], o[1])) == 1]
        rng.shuffle(cands)
        for i in cands:
            t = objs[i]
            sat = [o for o in objs if o is not t and _holds(rel, o, t)]
            if not sat:
                continue
            sat_comps = {(o[0], o[1]) for o in sat}
            g = sat[int(rng.integers(len(sat)))]
            pool = [x for x in all_comps if x not in sat_comps and x != (t[0], t[1])]
            # Prefer distractors that are in the scene so the image matters.
            in_scene = [x for x in dict.fromkeys(comps) if x in pool]
            absent = [x for x in pool if x not in in_scene]
            d = _pick_distractors(rng, in_scene + absent) if len(in_scene) < 3 else _pick_distractors(rng, in_scene)
            if d is None:
                continue
            return (["what", "is", rel, "of", "the", _composite(t[0], t[1])], ["the", _composite(g[0], g[1])],
                    [["the", _composite(*x)] for x in d])
        return None

    if name == "occupancy":
        t = objs[int(rng.integers(len(objs)))]
        d = _pick_distractors(rng, [x for x in all_comps if x != (t[0], t[1])])
        return (["what", "is", "at", f"row{t[2]}", f"col{t[3]}"], ["the", _composite(t[0], t[1])],
                [["the", _composite(*x)] for x in d])

    raise ConfigError(f"unknown category {category}")


def _holds(rel: str, o: tuple, t: tuple) -> bool:
    if rel == "left":
        return o[3] < t[3]
    if rel == "right":
        return o[3] > t[3]
    if rel == "above":
        return o[2] < t[2]
    return o[2] > t[2]


def _alias_words(words: list[str], vocab: Vocab, rate: float, rng: np.random.Generator) -> list[str]:
    out = []
    for w in words:
        if w in vocab.aliases and rng.random() < rate:
            out.append(vocab.aliases[w])
        else:
            out.append(w)
    return out


def make_instance(instance_id: int, category: int, cfg: GeneratorConfig, vocab: Vocab, seed: int) -> Instance:
    """Sample one shortcut-free instance of ``category``; deterministic in (seed, instance_id)."""
    rng = _rng(seed, instance_id)
    for _ in range(1000):
        scene = _sample_scene(rng, cfg, instance_id)
        out = _template(category, scene, rng, cfg)
        if out is not None:
            break
    else:  # pragma: no cover - templates are satisfiable for any validated config
        raise ConfigError(f"could not realise category {category}")
    q_words, gold, distractors = out
    q = _alias_words(q_words, vocab, cfg.alias_rate, rng)
    choices = [gold] + distractors
    choices = [_alias_words(a, vocab, cfg.alias_rate, rng) for a in choices]
    order = rng.permutation(N_CHOICES)
    answers = tuple(vocab.ids(choices[j]) for j in order)
    gold_index = int(np.flatnonzero(order == 0)[0])
    return Instance(instance_id, scene, vocab.ids(q), answers, gold_index, category, 0.0)


def content_ngrams(tokens: Sequence[int], vocab: Vocab, n_max: int = 2) -> list[tuple[int, ...]]:
    """All contiguous n-grams (n <= n_max) made only of content tokens."""
    grams = []
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            g = tuple(tokens[i:i + n])
            if all(vocab.is_content(t) for t in g):
                grams.append(g)
    return grams


def inject_shortcut(instance: Instance, strength: float, vocab: Vocab, rng: np.random.Generator) -> Instance:
    """With probability ``strength`` append a question content n-gram to the gold answer."""
    if not 0.0 <= strength <= 1.0:
        raise ValidationError(f"shortcut strength {strength} outside [0, 1]")
    if strength == 0.0:
        return instance
    inst = replace(instance, shortcut_strength=float(strength))
    if rng.random() >= strength:
        return inst
    grams = content_ngrams(instance.question, vocab)
    if not grams:
        return inst
    g = grams[int(rng.integers(len(grams)))]
    answers = list(inst.answers)
    answers[inst.gold_index] = answers[inst.gold_index] + g
    return replace(inst, answers=tuple(answers))


def generate_dataset(config: GeneratorConfig, seed: int) -> Dataset:
    config.validate()
    vocab = Vocab.build(config.n_shapes, config.n_colors, config.grid_size)
    test_strength = config.shortcut_strength if config.test_shortcut_strength is None else config.test_shortcut_strength
    splits = {}
    next_id = 0
    for name, n, strength in (
        ("train", config.n_train, config.shortcut_strength),
        ("val", config.n_val, config.shortcut_strength),
        ("test", config.n_test, test_strength),
    ):
        cats = [c for c, k in enumerate(category_counts(config, n)) for _ in range(k)]
        items = []
        for cat in cats:
            inst = make_instance(next_id, cat, config, vocab, seed)
            inst = inject_shortcut(inst, strength, vocab, _rng(seed, next_id, 1))
            items.append(inst)
            next_id += 1
        splits[name] = tuple(items)
    return Dataset(splits["train"], splits["val"], splits["test"], vocab, config, seed)


# --------------------------------------------------------------------------- features & captions


def region_feature_dim(n_shapes: int, n_colors: int) -> int:
    return n_shapes + n_colors + 2


@dataclass(frozen=True)
class RegionFeatures:
    vectors: np.ndarray  # [n_objects + 1, d_vis]; last row is the whole-scene row

    @property
    def objects(self) -> np.ndarray:
        return self.vectors[:-1]

    @property
    def whole(self) -> np.ndarray:
        return self.vectors[-1]


def render_scene_features(scene: Scene, n_shapes: int, n_colors: int) -> RegionFeatures:
    """One-hot shape, one-hot colour and (row+0.5)/grid, (col+0.5)/grid per object, plus the mean row."""
    d = region_feature_dim(n_shapes, n_colors)
    rows = np.zeros((len(scene.objects) + 1, d), dtype=np.float64)
    g = float(scene.grid_size)
    for i, (s, c, r, col) in enumerate(scene.objects):
        rows[i, s] = 1.0
        rows[i, n_shapes + c] = 1.0
        rows[i, -2] = (r + 0.5) / g
        rows[i, -1] = (col + 0.5) / g
    rows[-1] = rows[:-1].mean(axis=0)
    return RegionFeatures(rows)


def _object_phrase(s: int, c: int, rng: np.random.Generator) -> list[str]:
    return [_composite(s, c)] if rng.random() < 0.5 else [COLORS[c], SHAPES[s]]


def _fact_clauses(scene: Scene, rng: np.random.Generator) -> list[list[str]]:
    """Declarative facts about a scene: one per object plus counts and a relation."""
    objs = scene.objects
    clauses = []
    for s, c, r, col in objs:
        form = int(rng.integers(3))
        if form == 0:
            clauses.append(["a", *_object_phrase(s, c, rng), "at", f"row{r}", f"col{col}"])
        elif form == 1:
            clauses.append(["the", *_object_phrase(s, c, rng), "is", "at", f"row{r}", f"col{col}"])
        else:
            clauses.append(["at", f"row{r}", f"col{col}", "is", "the", *_object_phrase(s, c, rng)])
    colors = [o[1] for o in objs]
    c = colors[int(rng.integers(len(colors)))]
    clauses.append(["there", "are", NUMBERS[colors.count(c)], COLORS[c], "objects"])
    if len(objs) > 1:
        a, b = rng.choice(len(objs), size=2, replace=False)
        oa, ob = objs[int(a)], objs[int(b)]
        rels = [rel for rel in RELATIONS if _holds(rel, oa, ob)]
        if rels:
            rel = rels[int(rng.integers(len(rels)))]
            clauses.append(["the", _composite(oa[0], oa[1]), "is", rel, "of", "the", _composite(ob[0], ob[1])])
    return clauses


def make_caption(scene: Scene, vocab: Vocab, rng: np.random.Generator, alias_rate: float = 0.1,
                 max_len: int = 46) -> tuple[int, ...]:
    """Templated scene description used for contrastive teacher pretraining.

    A shuffled run of declarative fact clauses joined by "and", truncated at a
    clause boundary so it fits ``max_len`` tokens.
    """
    clauses = _fact_clauses(scene, rng)
    words: list[str] = []
    for i in rng.permutation(len(clauses)):
        extra = (["and"] if words else []) + clauses[int(i)]
        if len(words) + len(extra) > max_len:
            continue
        words.extend(extra)
    return vocab.ids(_alias_words(words, vocab, alias_rate, rng))


def perturb_scene(scene: Scene, rng: np.random.Generator, n_shapes: int, n_colors: int) -> Scene:
    """Minimal edit of one object (move, recolor or reshape) used as a hard negative."""
    objs = list(scene.objects)
    i = int(rng.integers(len(objs)))
    s, c, r, col = objs[i]
    taken = {(o[2], o[3]) for o in objs}
    free = [(a, b) for a in range(scene.grid_size) for b in range(scene.grid_size) if (a, b) not in taken]
    op = int(rng.choice(3, p=[0.5, 0.25, 0.25]))
    if op == 0 and free:
        r, col = free[int(rng.integers(len(free)))]
    elif op == 1 or (op == 0 and not free):
        c = (c + 1 + int(rng.integers(n_colors - 1))) % n_colors
    else:
        s = (s + 1 + int(rng.integers(n_shapes - 1))) % n_shapes
    objs[i] = (s, c, r, col)
    return Scene(scene.grid_size, tuple(objs), scene.scene_id)


def caption_corpus(scenes: Sequence[Scene], vocab: Vocab, seed: int, alias_rate: float = 0.1) -> list[tuple[int, ...]]:
    return [make_caption(s, vocab, _rng(seed, s.scene_id, 2), alias_rate) for s in scenes]


# --------------------------------------------------------------------------- 3-class entailment analog

ENTAIL_LABELS = ("contradiction", "neutral", "entailment")


@dataclass(frozen=True)
class EntailmentInstance:
    scene: Scene
    hypothesis: tuple[int, ...]
    label: int  # 0 contradiction, 1 neutral, 2 entailment


def generate_entailment(config: GeneratorConfig, seed: int, n: int) -> list[EntailmentInstance]:
    """Hypotheses that fully match (entail), partially match (neutral) or name an absent object (contradict)."""
    config.validate()
    vocab = Vocab.build(config.n_shapes, config.n_colors, config.grid_size)
    out = []
    for i in range(n):
        rng = _rng(seed, i, 3)
        scene = _sample_scene(rng, config, i)
        label = i % 3
        t = scene.objects[int(rng.integers(len(scene.objects)))]
        present = {(o[0], o[1]) for o in scene.objects}
        if label == 2:
            words = ["a", _composite(t[0], t[1]), "at", f"row{t[2]}", f"col{t[3]}"]
        elif label == 1:
            cells = [(r, c) for r in range(config.grid_size) for c in range(config.grid_size) if (r, c) != (t[2], t[3])]
            r, c = cells[int(rng.integers(len(cells)))]
            words = ["a", _composite(t[0], t[1]), "at", f"row{r}", f"col{c}"]
        else:
            absent = [(s, c) for c in range(config.n_colors) for s in range(config.n_shapes) if (s, c) not in present]
            s, c = absent[int(rng.integers(len(absent)))]
            r, col = divmod(int(rng.integers(config.grid_size ** 2)), config.grid_size)
            words = ["a", _composite(s, c), "at", f"row{r}", f"col{col}"]
        out.append(EntailmentInstance(scene, vocab.ids(words), label))
    return out


# --------------------------------------------------------------------------- serialization


def overlap(a: Sequence[int], b: Sequence[int], vocab: Vocab) -> int:
    """Number of distinct content tokens shared by two sequences."""
    return len({t for t in a if vocab.is_content(t)} & {t for t in b if vocab.is_content(t)})


def write_jsonl(path: Path, instances: Iterable[Instance]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path: Path) -> list[Instance]:
    with Path(path).open(encoding="utf-8") as fh:
        return [Instance.from_json(json.loads(line)) for line in fh if line.strip()]


def save_dataset(ds: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_jsonl(out_dir / f"{name}.jsonl", ds.split(name))
    (out_dir / "vocab.json").write_text(json.dumps(ds.vocab.to_json(), indent=1, sort_keys=True))
    meta = {"seed": ds.seed, "config": _config_json(ds.config)}
    (out_dir / "generator.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(out_dir: Path) -> Dataset:
    out_dir = Path(out_dir)
    vocab = Vocab.from_json(json.loads((out_dir / "vocab.json").read_text()))
    meta = json.loads((out_dir / "generator.json").read_text())
    cfg = meta["config"]
    if cfg.get("category_weights") is not None:
        cfg["category_weights"] = tuple(cfg["category_weights"])
    splits = [tuple(read_jsonl(out_dir / f"{n}.jsonl")) for n in ("train", "val", "test")]
    return Dataset(*splits, vocab=vocab, config=GeneratorConfig(**cfg), seed=meta["seed"])


def _config_json(cfg: GeneratorConfig) -> dict:
    d = dict(cfg.__dict__)
    if d["category_weights"] is not None:
        d["category_weights"] = list(d["category_weights"])
    return d


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for name in ("train", "val", "test"):
        for inst in ds.split(name):
            h.update(json.dumps(inst.to_json(), separators=(",", ":")).encode())
            h.update(b"\n")
    h.update(json.dumps(ds.vocab.to_json(), sort_keys=True).encode())
    return h.hexdigest()
