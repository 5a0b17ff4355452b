import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tdlab.errors import ConfigError, ValidationError
from tdlab.synth_world import (
    GeneratorConfig,
    Instance,
    Scene,
    Vocab,
    category_counts,
    content_ngrams,
    dataset_digest,
    generate_dataset,
    generate_entailment,
    inject_shortcut,
    load_dataset,
    make_caption,
    make_instance,
    overlap,
    perturb_scene,
    render_scene_features,
    save_dataset,
)


def test_zero_instances_gives_empty_splits():
    ds = generate_dataset(GeneratorConfig(n_train=0, n_val=0, n_test=0), 0)
    assert ds.train == ds.val == ds.test == ()


def test_generation_is_deterministic(tmp_path):
    cfg = GeneratorConfig(n_train=50, n_val=10, n_test=10, shortcut_strength=0.5)
    a, b = generate_dataset(cfg, 7), generate_dataset(cfg, 7)
    assert dataset_digest(a) == dataset_digest(b)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert dataset_digest(generate_dataset(cfg, 8)) != dataset_digest(a)


def test_jsonl_round_trip_and_field_set(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path)
    back = load_dataset(tmp_path)
    assert dataset_digest(back) == dataset_digest(small_ds)
    first = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert set(first) == {"instance_id", "scene", "question", "answers", "gold_index", "category", "shortcut_strength"}
    assert set(first["scene"]) == {"grid_size", "objects"}


@pytest.mark.parametrize("bad", [
    dict(n_categories=0), dict(n_colors=3), dict(n_shapes=9), dict(shortcut_strength=1.5),
    dict(min_objects=1), dict(grid_size=5),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        generate_dataset(GeneratorConfig(**bad), 0)


def test_split_disjointness_and_category_balance(small_ds):
    ids = [{i.scene.scene_id for i in small_ds.split(s)} for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    for name, n in (("train", 140), ("val", 28), ("test", 70)):
        counts = np.bincount([i.category for i in small_ds.split(name)], minlength=7)
        assert counts.tolist() == category_counts(small_ds.config, n)


def test_scene_invariants(small_ds):
    for inst in small_ds.all_instances():
        inst.scene.validate(4, 4)
        assert len(inst.answers) == 4 and 0 <= inst.gold_index < 4
        assert all(0 <= t < len(small_ds.vocab) for t in inst.question)


def _independent_overlap(q, a, vocab):
    qs = {vocab.tokens[t] for t in q if vocab.tokens[t] not in vocab.stopwords and not vocab.tokens[t].startswith("[")}
    return len(qs & {vocab.tokens[t] for t in a})


def test_shortcut_raises_gold_overlap_independent_counter(tmp_path):
    ds = generate_dataset(GeneratorConfig(n_train=1000, n_val=0, n_test=0, shortcut_strength=0.8), 1)
    save_dataset(ds, tmp_path)
    vocab = ds.vocab
    gold, dist = [], []
    for line in (tmp_path / "train.jsonl").read_text().splitlines():
        d = json.loads(line)
        for k, a in enumerate(d["answers"]):
            (gold if k == d["gold_index"] else dist).append(_independent_overlap(d["question"], a, vocab))
    assert np.mean(gold) - np.mean(dist) > 0


def test_no_shortcut_means_overlap_parity():
    ds = generate_dataset(GeneratorConfig(n_train=3500, n_val=0, n_test=0, shortcut_strength=0.0), 2)
    g = np.mean([overlap(i.question, i.answers[i.gold_index], ds.vocab) for i in ds.train])
    d = np.mean([overlap(i.question, a, ds.vocab) for i in ds.train for k, a in enumerate(i.answers) if k != i.gold_index])
    assert abs(g - d) < 0.05


def test_inject_strength_zero_unchanged(small_ds, rng):
    inst = small_ds.train[0]
    assert inject_shortcut(inst, 0.0, small_ds.vocab, rng) is inst


def test_inject_strength_one_copies_question_ngram():
    vocab = Vocab.build(4, 4, 3)
    scene = Scene(3, ((0, 0, 0, 0), (1, 1, 1, 1), (2, 2, 2, 2)), 0)
    q = vocab.ids(["what", "is", "left", "of", "the", "red_square"])
    answers = tuple(vocab.ids([w]) for w in ("green", "blue", "yellow", "red"))
    inst = Instance(0, scene, q, answers, 2, 0)
    for seed in range(20):
        out = inject_shortcut(inst, 1.0, vocab, np.random.default_rng(seed))
        added = out.answers[2][1:]
        assert added in content_ngrams(q, vocab)
        assert out.answers[:2] == answers[:2] and out.answers[3] == answers[3]
    outs = {inject_shortcut(inst, 1.0, vocab, np.random.default_rng(s)).answers[2] for s in range(50)}
    assert any(vocab.index["red_square"] in a for a in outs)


def test_inject_rejects_out_of_range(small_ds, rng):
    with pytest.raises(ValidationError):
        inject_shortcut(small_ds.train[0], 1.2, small_ds.vocab, rng)


def test_injection_rate_calibrated():
    cfg = GeneratorConfig()
    vocab = Vocab.build(4, 4, 3)
    hits = 0
    n = 10_000
    for i in range(n):
        inst = make_instance(i, i % 7, cfg, vocab, 5)
        out = inject_shortcut(inst, 0.5, vocab, np.random.default_rng([5, i, 1]))
        hits += out.answers != inst.answers
    # every template question carries a content n-gram, so injection == coin flip
    assert abs(hits / n - 0.5) <= 0.02


def test_region_features_singleton_and_mean():
    one = render_scene_features(Scene(3, ((1, 2, 0, 0),), 0), 4, 4)
    np.testing.assert_array_equal(one.whole, one.objects[0])
    s = Scene(2, ((0, 0, 0, 0), (1, 1, 1, 1)), 0)
    f = render_scene_features(s, 4, 4)
    # per-object positions are (row+0.5)/grid; the scene row averages them
    np.testing.assert_allclose(f.objects[:, -2:], [[0.25, 0.25], [0.75, 0.75]])
    np.testing.assert_allclose(f.whole[-2:], [0.5, 0.5])
    perm = render_scene_features(Scene(2, tuple(reversed(s.objects)), 0), 4, 4)
    np.testing.assert_array_equal(perm.whole, f.whole)


def test_region_features_deterministic_and_finite(small_ds):
    for inst in small_ds.train[:20]:
        a = render_scene_features(inst.scene, 4, 4)
        b = render_scene_features(inst.scene, 4, 4)
        np.testing.assert_array_equal(a.vectors, b.vectors)
        assert np.isfinite(a.vectors).all()


def test_captions_describe_scene(small_ds):
    vocab = small_ds.vocab
    for inst in small_ds.train[:30]:
        cap = make_caption(inst.scene, vocab, np.random.default_rng(inst.instance_id), alias_rate=0.0)
        words = set(vocab.words(cap))
        assert len(cap) <= 46
        assert any(f"row{r}" in words for _, _, r, _ in inst.scene.objects)


def test_perturbed_scene_differs_and_stays_valid(small_ds):
    for inst in small_ds.train[:50]:
        p = perturb_scene(inst.scene, np.random.default_rng(inst.instance_id), 4, 4)
        p.validate(4, 4)
        assert p.objects != inst.scene.objects


def test_entailment_labels_balanced():
    items = generate_entailment(GeneratorConfig(), 0, 300)
    assert np.bincount([e.label for e in items]).tolist() == [100, 100, 100]


@given(st.integers(0, 10_000))
def test_make_instance_valid_for_any_id(i):
    vocab = Vocab.build(4, 4, 3)
    inst = make_instance(i, i % 7, GeneratorConfig(), vocab, 0)
    inst.scene.validate(4, 4)
    assert len({a for a in inst.answers}) == 4
