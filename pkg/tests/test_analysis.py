import copy

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tdlab.analysis import (
    MITable,
    attention_trace,
    ensemble_from_logits,
    ensemble_predict,
    mi_from_attention,
    modality_importance,
    write_traces,
)
from tdlab.distillation import combine_scores, keyword_scores, visual_relevance_scores
from tdlab.errors import ValidationError
from tdlab.regimes import DistillContext, build_corpus
from tdlab.student import StudentModel, predict, preset
from tdlab.synth_world import Instance, Scene
from tdlab.teacher import TeacherConfig, TeacherModel, encode_image, encode_text, parameter_digest, qa_text


def _student(vocab, seed=0):
    torch.manual_seed(seed)
    return StudentModel(preset("small", len(vocab), 4, 4, d_model=16)).eval()


def test_uniform_attention_gives_position_share():
    S, nv, nt = 9, 5, 3  # [CLS] + 5 vision + 3 text
    attn = torch.full((2, 3, 2, S, S), 1.0 / S)
    vis = torch.zeros(2, S, dtype=torch.bool)
    vis[:, 1:6] = True
    txt = torch.zeros(2, S, dtype=torch.bool)
    txt[:, 6:] = True
    tab = mi_from_attention(attn, vis, txt)
    assert np.allclose(tab.mi_vision, nv / (nv + nt), atol=1e-12)
    assert np.allclose(tab.mi_text, nt / (nv + nt), atol=1e-12)


def test_hand_built_two_layer_table():
    # one sequence: [CLS], v1, v2, t1 ; one head per layer
    attn = torch.zeros(1, 2, 1, 4, 4, dtype=torch.float64)
    attn[0, 0, 0, 0] = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    attn[0, 1, 0, 0] = torch.tensor([0.5, 0.05, 0.05, 0.4], dtype=torch.float64)
    vis = torch.tensor([[False, True, True, False]])
    txt = torch.tensor([[False, False, False, True]])
    tab = mi_from_attention(attn, vis, txt)
    np.testing.assert_allclose(tab.mi_vision[:, 0], [0.5 / 0.9, 0.1 / 0.5], atol=1e-9)
    np.testing.assert_allclose(tab.mi_text[:, 0], [0.4 / 0.9, 0.4 / 0.5], atol=1e-9)
    assert tab.gap() == pytest.approx(np.mean([abs(0.5 - 0.4) / 0.9, abs(0.1 - 0.4) / 0.5]), abs=1e-12)


@given(st.integers(0, 10**6))
def test_mi_normalisation_law(seed):
    g = torch.Generator().manual_seed(seed)
    attn = torch.rand(3, 2, 2, 7, 7, generator=g, dtype=torch.float64).softmax(-1)
    vis = torch.zeros(3, 7, dtype=torch.bool)
    vis[:, 1:4] = True
    txt = ~vis
    txt[:, 0] = False
    tab = mi_from_attention(attn, vis, txt)
    np.testing.assert_allclose(tab.mi_vision + tab.mi_text, 1.0, atol=1e-12)
    assert np.all((tab.mi_vision >= 0) & (tab.mi_vision <= 1))


def test_mi_rejects_bad_input(small_ds):
    with pytest.raises(ValidationError):
        mi_from_attention(torch.zeros(2, 2, 2), torch.zeros(2, 2, dtype=torch.bool), torch.zeros(2, 2, dtype=torch.bool))
    with pytest.raises(ValidationError):
        modality_importance(_student(small_ds.vocab), [], 4, 4)


def test_modality_importance_on_student(small_ds):
    tab = modality_importance(_student(small_ds.vocab), small_ds.test[:30], 4, 4, chunk=7)
    assert tab.mi_vision.shape == (1, 2)
    np.testing.assert_allclose(tab.mi_vision + tab.mi_text, 1.0, atol=1e-5)


def test_csv_round_trip_and_render(tmp_path):
    tab = MITable(np.array([[0.1, 0.7], [0.3, 1 / 3]]), np.array([[0.9, 0.3], [0.7, 2 / 3]]))
    tab.to_csv(tmp_path / "mi.csv")
    back = MITable.from_csv(tmp_path / "mi.csv")
    assert np.array_equal(back.mi_vision, tab.mi_vision) and np.array_equal(back.mi_text, tab.mi_text)
    line, heat = tab.render(tmp_path)
    assert line.stat().st_size > 0 and heat.stat().st_size > 0


@pytest.fixture(scope="module")
def trace_setup(small_ds):
    torch.manual_seed(0)
    teacher = TeacherModel(TeacherConfig(vocab_size=len(small_ds.vocab), d_embed=32)).eval()
    corpus = build_corpus(small_ds.train, small_ds.vocab)
    return teacher, corpus


def test_trace_matches_distillation_module(small_ds, trace_setup):
    teacher, corpus = trace_setup
    before, after = _student(small_ds.vocab, 0), _student(small_ds.vocab, 1)
    insts = small_ds.test[:5]
    ctx = DistillContext.build(teacher, insts, small_ds.train, small_ds.vocab, 2, 4, 4)
    for inst in insts:
        for k in range(4):
            rec = attention_trace(after, inst, teacher, corpus, small_ds.vocab, m=2, k=k, before=before,
                                  n_shapes=4, n_colors=4)
            text = qa_text(inst, k)
            with torch.no_grad():
                s_vr = visual_relevance_scores(encode_image(teacher, inst.scene).double(),
                                               encode_text(teacher, text)[0].double())
            s_si = keyword_scores(text, corpus)
            comb, _ = combine_scores(s_vr, s_si)
            toks = rec["tokens"]
            assert len(toks) == len(text)
            np.testing.assert_allclose([t["s_vr"] for t in toks], s_vr.numpy(), atol=1e-12, rtol=0)
            np.testing.assert_allclose([t["s_si"] for t in toks], s_si.numpy(), atol=1e-12, rtol=0)
            np.testing.assert_allclose([t["combined"] for t in toks], comb.numpy(), atol=1e-12, rtol=0)
            chosen = tuple(t["position"] for t in toks if t["selected"])
            assert len(chosen) == min(2, len(text))
            assert chosen == ctx.selections[(inst.instance_id, k)]
            assert all(t["attn_pre"] is not None for t in toks)


def test_all_stopword_text_has_zero_keyword_scores(small_ds, trace_setup):
    teacher, corpus = trace_setup
    v = small_ds.vocab
    inst = Instance(0, Scene(3, ((0, 0, 0, 0),), 0), v.ids(["what", "is", "the", "object"]),
                    tuple(v.ids(w) for w in (["it", "is"], ["there", "are"], ["a"], ["the"])), 0, 0)
    rec = attention_trace(_student(v), inst, teacher, corpus, v, m=2, n_shapes=4, n_colors=4)
    assert all(t["s_si"] == 0.0 for t in rec["tokens"])
    assert all(t["attn_pre"] is None for t in rec["tokens"])


def test_trace_has_no_side_effects(small_ds, trace_setup, tmp_path):
    teacher, corpus = trace_setup
    s = _student(small_ds.vocab)
    s_state, t_digest = copy.deepcopy(s.state_dict()), parameter_digest(teacher)
    recs = [attention_trace(s, i, teacher, corpus, small_ds.vocab, n_shapes=4, n_colors=4) for i in small_ds.test[:3]]
    assert all(torch.equal(a, b) for a, b in zip(s.state_dict().values(), s_state.values()))
    assert parameter_digest(teacher) == t_digest and not s.training
    write_traces(tmp_path / "t.jsonl", recs)
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 3


def test_ensemble_single_model_and_tie(small_ds):
    m = _student(small_ds.vocab)
    pred, _ = ensemble_predict([m], small_ds.test, 4, 4)
    assert torch.equal(pred, predict(m, small_ds.test, 4, 4).argmax(1))
    big = 50.0
    a = torch.tensor([[big, 0, 0, 0]])
    b = torch.tensor([[0, big, 0, 0]])
    p, probs = ensemble_from_logits([b, a])
    assert int(p[0]) == 0 and probs[0, 0] == probs[0, 1]
    with pytest.raises(ValidationError):
        ensemble_from_logits([])


@given(st.integers(0, 10**6), st.permutations(range(3)))
def test_ensemble_order_invariant(seed, perm):
    g = torch.Generator().manual_seed(seed)
    logits = [torch.randn(6, 4, generator=g) * 3 for _ in range(3)]
    p1, pr1 = ensemble_from_logits(logits)
    p2, pr2 = ensemble_from_logits([logits[i] for i in perm])
    assert torch.equal(p1, p2) and torch.equal(pr1, pr2)
