import numpy as np
import pytest
import torch
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from tdlab.errors import ConfigError, ValidationError
from tdlab.eval_protocol import (
    CooccurrenceStats,
    SplitPlan,
    bias_statistics,
    evaluate,
    explicit_mitigation,
    implicit_mitigation_partition,
    kmeans_1d,
    kmeans_zero_shot,
    label_digest,
    make_splits,
    score_predictions,
    shortcut_mitigated_transform,
    synonym_table,
)
from tdlab.student import StudentModel, predict, preset
from tdlab.synth_world import SPECIALS, GeneratorConfig, Instance, Scene, generate_dataset


def test_split_counts_and_determinism(small_ds):
    full = make_splits(small_ds, SplitPlan("full"))
    assert full.train_subset == small_ds.train and full.unlabeled_pool == ()
    assert make_splits(small_ds, SplitPlan("zero_shot")).train_subset == ()
    plan = SplitPlan("low_shot_A", 10, seed=4)
    a, b = make_splits(small_ds, plan), make_splits(small_ds, plan)
    assert len(a.train_subset) == 70
    assert [i.instance_id for i in a.train_subset] == [i.instance_id for i in b.train_subset]
    assert np.all(np.bincount([i.category for i in a.train_subset]) == 10)
    ids = {i.instance_id for i in a.train_subset}
    assert ids.isdisjoint(i.instance_id for i in a.unlabeled_pool)
    assert len(a.train_subset) + len(a.unlabeled_pool) == len(small_ds.train)
    with pytest.raises(ValidationError):
        make_splits(small_ds, SplitPlan("low_shot_B", 1000))
    with pytest.raises(ConfigError):
        SplitPlan("few_shot")
    with pytest.raises(ConfigError):
        SplitPlan("low_shot_A", 0)


def test_sm_restores_parity_and_keeps_labels(small_ds):
    test = list(small_ds.test)
    before = bias_statistics(test, small_ds.vocab)
    out = shortcut_mitigated_transform(test, small_ds.vocab)
    after = bias_statistics(out, small_ds.vocab)
    assert before.mean_overlap_gold - before.mean_overlap_distractor > 0.3
    assert abs(after.mean_overlap_gold - after.mean_overlap_distractor) <= 0.05
    assert label_digest(out) == label_digest(test)


def test_sm_leaves_clean_instances_alone(clean_ds):
    assert shortcut_mitigated_transform(clean_ds.test, clean_ds.vocab) == list(clean_ds.test)


def _manual(vocab, q, answers, gold=0, iid=0):
    return Instance(iid, Scene(3, ((0, 0, 0, 0),), iid), vocab.ids(q), tuple(vocab.ids(a) for a in answers), gold, 0)


def test_em_replaces_frequent_shared_token(clean_ds):
    v = clean_ds.vocab
    inst = _manual(v, ["where", "is", "the", "red_square"],
                   [["the", "red_square", "is", "in", "row0"], ["row1"], ["row2"], ["col1"]])
    stats = CooccurrenceStats({(v.index["red_square"],): 9}, 1.0, 2)
    out, log = explicit_mitigation([inst], stats, synonym_table(v), v)
    assert "crimson_square" in v.words(out[0].answers[0])
    assert "red_square" not in v.words(out[0].answers[0])
    assert out[0].gold_index == inst.gold_index and out[0].question == inst.question
    assert [(e.old, e.new) for e in log] == [(v.index["red_square"], v.index["crimson_square"])]


def test_em_no_overlap_unchanged_and_missing_alias_logged(clean_ds):
    v = clean_ds.vocab
    inst = _manual(v, ["what", "color", "is", "the", "star"], [["it", "is", "red"], ["blue"], ["green"], ["yellow"]])
    stats = CooccurrenceStats({(v.index["red"],): 9}, 1.0, 2)
    out, log = explicit_mitigation([inst], stats, synonym_table(v), v)
    assert out == [inst] and log == []
    shared = _manual(v, ["is", "the", "red", "object", "left"], [["red"], ["blue"], ["green"], ["yellow"]])
    out, log = explicit_mitigation([shared], stats, {}, v)
    assert out == [shared] and len(log) == 1 and log[0].new is None


def test_em_threshold_is_top_decile(small_ds):
    stats = CooccurrenceStats.build(small_ds.train, small_ds.vocab)
    assert stats.threshold == np.quantile(np.array(list(stats.counts.values()), dtype=float), 0.9)


def _model(vocab, uniform=False):
    torch.manual_seed(0)
    m = StudentModel(preset("small", len(vocab), 4, 4, d_model=16)).eval()
    if uniform:
        with torch.no_grad():
            for p in m.task_head.parameters():
                p.zero_()
    return m


def test_im_partition_law(small_ds):
    m = _model(small_ds.vocab)
    for gamma in (0.26, 0.5, 0.9):
        part = implicit_mitigation_partition(small_ds.test, m, 4, 4, gamma)
        sizes = len(part.language_biased) + len(part.image_biased) + len(part.neither)
        assert sizes == len(small_ds.test)
        ids = [i.instance_id for b in (part.language_biased, part.image_biased, part.neither) for i in b]
        assert sorted(ids) == sorted(i.instance_id for i in small_ds.test)
        pred = {i.instance_id: int(p) for i, p in zip(small_ds.test, predict(m, small_ds.test, 4, 4, zero_regions=True).argmax(1))}
        assert all(pred[i.instance_id] != i.gold_index for i in part.image_biased)
        assert all(pred[i.instance_id] == i.gold_index for i in part.language_biased + part.neither)
    for bad in (0.0, 1.0 + 1e-9):
        with pytest.raises(ValidationError):
            implicit_mitigation_partition(small_ds.test, m, 4, 4, bad)


def test_im_uniform_model_has_no_language_biased(small_ds):
    part = implicit_mitigation_partition(small_ds.test, _model(small_ds.vocab, uniform=True), 4, 4)
    assert part.language_biased == ()
    # ties resolve to choice 0, so exactly the gold==0 instances count as correct
    assert {i.instance_id for i in part.neither} == {i.instance_id for i in small_ds.test if i.gold_index == 0}


def _dp_oracle(xs, k):
    """Exhaustive search over contiguous cut points of the sorted data."""
    import itertools

    xs = np.sort(xs)
    best = (np.inf, None)
    for cuts in itertools.combinations(range(1, len(xs)), k - 1):
        groups = np.split(xs, cuts)
        sse = sum(((g - g.mean()) ** 2).sum() for g in groups)
        if sse < best[0]:
            best = (sse, cuts)
    return best


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=14, unique=True))
def test_kmeans_matches_exhaustive_oracle(xs):
    xs = np.asarray(xs)
    cent, labels, sse = kmeans_1d(xs, 3)
    want, _ = _dp_oracle(xs, 3)
    assert sse == pytest.approx(want, rel=1e-9, abs=1e-12)
    assert np.all(np.diff(cent) >= 0)


def test_kmeans_200_points_equals_dp_partition():
    from tdlab.eval_protocol import optimal_1d_partition

    xs = np.random.default_rng(7).normal(size=200)
    _, labels, sse = kmeans_1d(xs, 3)
    order = np.argsort(xs)
    cuts = optimal_1d_partition(xs, 3)
    want = np.repeat([0, 1, 2], np.diff([0, *cuts, 200]))
    assert np.array_equal(labels[order], want)


def test_kmeans_separated_and_errors():
    n = 20
    sims = np.concatenate([-np.ones(n), np.zeros(n), np.ones(n)])
    labels = np.repeat([0, 1, 2], n)
    res = kmeans_zero_shot(sims, 3, labels)
    assert res.centroids == (-1.0, 0.0, 1.0) and res.accuracy == 1.0
    with pytest.raises(ValidationError):
        kmeans_zero_shot([0.0, 0.0, 1.0, 1.0])
    with pytest.raises(ValidationError):
        kmeans_zero_shot(sims, 3, labels[:5])


def test_kmeans_random_similarities_near_third():
    rng = np.random.default_rng(0)
    res = kmeans_zero_shot(rng.uniform(-1, 1, 3000), 3, rng.integers(3, size=3000))
    assert abs(res.accuracy - 1 / 3) <= 0.05


def test_kmeans_ignores_labels_for_clustering():
    xs = np.random.default_rng(1).normal(size=50)
    a = kmeans_zero_shot(xs, 3, np.zeros(50, dtype=int))
    b = kmeans_zero_shot(xs, 3, np.arange(50) % 3)
    assert np.array_equal(a.assignment, b.assignment) and a.centroids == b.centroids


def test_accuracy_perfect_and_random():
    ds = generate_dataset(GeneratorConfig(n_train=0, n_val=0, n_test=10000), 2)
    gold = torch.tensor([i.gold_index for i in ds.test])
    assert score_predictions(torch.nn.functional.one_hot(gold, 4).float(), ds.test).accuracy == 1.0
    rnd = torch.rand(len(ds.test), 4, generator=torch.Generator().manual_seed(0))
    assert abs(score_predictions(rnd, ds.test).accuracy - 0.25) <= 0.01
    with pytest.raises(ValidationError):
        score_predictions(torch.zeros(0, 4), [])


def test_evaluate_modes_and_errors(small_ds):
    m = _model(small_ds.vocab)
    kw = dict(vocab=small_ds.vocab, n_shapes=4, n_colors=4)
    std = evaluate(m, small_ds.test, "std", **kw)
    assert std.n == len(small_ds.test) and 0 <= std.accuracy <= 1
    assert evaluate(m, small_ds.test, "sm", **kw).n == len(small_ds.test)
    with pytest.raises(ConfigError):
        evaluate(m, small_ds.test, "em", **kw)
    with pytest.raises(ConfigError):
        evaluate(m, small_ds.test, "im", **kw)
    with pytest.raises(ConfigError):
        evaluate(m, small_ds.test, "xx", **kw)
    with pytest.raises(ValidationError):
        evaluate(m, [], "std", **kw)
    stats = CooccurrenceStats.build(small_ds.train, small_ds.vocab)
    em = evaluate(m, small_ds.test, "em", cooccurrence=stats, **kw)
    assert em.extra["replacements"] > 0
    im = evaluate(m, small_ds.test, "im", text_only=m, **kw)
    assert im.n == im.extra["n_image_biased"] + im.extra["n_neither"]


def test_bias_statistics_match_independent_counter(clean_ds):
    v = clean_ds.vocab
    words = lambda ids: {v.tokens[t] for t in ids} - v.stopwords - set(SPECIALS)
    more = 0
    for inst in clean_ds.test:
        q = words(inst.question)
        o = [len(q & words(a)) for a in inst.answers]
        more += o[inst.gold_index] > sum(o[k] for k in range(4) if k != inst.gold_index) / 3
    rep = bias_statistics(clean_ds.test, v)
    assert rep.pct_gold_more_overlap == pytest.approx(100 * more / len(clean_ds.test), abs=1e-9)
    assert 0 <= rep.pct_gold_more_overlap <= 100


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_transforms_preserve_labels(seed):
    ds = _em_ds()
    rng = np.random.default_rng(seed)
    sample = [ds.test[i] for i in rng.choice(len(ds.test), 10, replace=False)]
    stats = _em_stats()
    em, _ = explicit_mitigation(sample, stats, synonym_table(ds.vocab), ds.vocab)
    sm = shortcut_mitigated_transform(sample, ds.vocab)
    assert label_digest(em) == label_digest(sm) == label_digest(sample)


_C = {}


def _em_ds():
    if "ds" not in _C:
        _C["ds"] = generate_dataset(GeneratorConfig(n_train=140, n_val=0, n_test=70, shortcut_strength=0.8), 3)
    return _C["ds"]


def _em_stats():
    if "st" not in _C:
        _C["st"] = CooccurrenceStats.build(_em_ds().train, _em_ds().vocab)
    return _C["st"]
