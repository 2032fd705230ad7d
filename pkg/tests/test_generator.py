"""Prompt assembly spans and truncation, the answer-masked loss, decoding,
and candidate scoring."""

import numpy as np
import pytest

from raglab import backbone as bb
from raglab import generator as gen
from raglab.generator import QDATuple, answer, build_prompt, rag_it_loss, score_candidate
from raglab.tokenizer import BOS, EOS, SEP, detokenize, tokenize


def test_qda_tuple_validation():
    t = QDATuple("q?", "d1", "ans")
    assert t.answer == "ans"
    for bad in (("", "d", "a"), ("q", "", "a"), ("q", "d", "")):
        with pytest.raises(ValueError, match="non-empty"):
            QDATuple(*bad)


def test_prompt_layout_single_doc():
    lay = build_prompt("Q?", ["doc text"], "ans", 64)
    ids = list(lay.ids)
    doc = list(tokenize("doc text").ids)
    q = list(tokenize("Q?").ids)
    a = list(tokenize("ans").ids)
    assert ids == [BOS, *doc, SEP, *q, SEP, *a, EOS]
    s, e = lay.doc_span
    assert ids[s:e] == doc
    s, e = lay.question_span
    assert ids[s:e] == q
    s, e = lay.answer_span
    assert ids[s:e] == a
    # mask marks answer tokens plus the closing EOS, nothing else
    assert list(lay.target_mask) == [0] * (len(ids) - len(a) - 1) + [1] * (len(a) + 1)
    assert not lay.doc_truncated and not lay.no_context


def test_prompt_layout_multi_doc_in_given_order():
    lay = build_prompt("Q?", ["first", "second", "third"], None, 128)
    s, e = lay.doc_span
    region = list(lay.ids)[s:e]
    expect = list(tokenize("first").ids) + [SEP] + list(tokenize("second").ids) + [SEP] + list(tokenize("third").ids)
    assert region == expect
    assert sum(lay.target_mask) == 0  # inference prompt: no targets
    with pytest.raises(ValueError, match="at most 3"):
        build_prompt("Q?", ["a", "b", "c", "d"], None, 128)


def test_prompt_no_context_degrades():
    lay = build_prompt("Q?", [], "ans", 64)
    q = list(tokenize("Q?").ids)
    a = list(tokenize("ans").ids)
    assert list(lay.ids) == [BOS, *q, SEP, *a, EOS]
    assert lay.no_context
    assert lay.doc_span == (1, 1)


def test_prompt_doc_region_head_truncated():
    # window forces the doc region to shed bytes from its FRONT
    question, ans = "Q?", "a"
    q_len = len(tokenize(question).ids)
    max_len = 16
    doc = "0123456789abcdefXYZ"
    lay = build_prompt(question, [doc], ans, max_len)
    assert lay.doc_truncated
    assert len(lay.ids) <= max_len
    s, e = lay.doc_span
    kept = detokenize(list(lay.ids)[s:e])
    assert doc.endswith(kept)  # tail survives
    # question and answer are intact
    s, e = lay.question_span
    assert detokenize(list(lay.ids)[s:e]) == question
    s, e = lay.answer_span
    assert detokenize(list(lay.ids)[s:e]) == ans
    assert lay.ids[-1] == EOS


def test_prompt_truncation_spares_question_and_answer_across_budgets():
    for max_len in range(12, 40):
        lay = build_prompt("Why?", ["x" * 60], "ok", max_len)
        assert len(lay.ids) <= max_len
        s, e = lay.question_span
        assert detokenize(list(lay.ids)[s:e]) == "Why?"
        s, e = lay.answer_span
        assert detokenize(list(lay.ids)[s:e]) == "ok"


def test_prompt_window_overflow_raises():
    with pytest.raises(ValueError, match="exceed"):
        build_prompt("q" * 40, ["doc"], "a" * 40, 16)
    with pytest.raises(ValueError, match="non-empty"):
        build_prompt("", ["doc"], "a", 64)
    with pytest.raises(ValueError, match="answer"):
        build_prompt("q", ["doc"], "", 64)


def test_rag_it_loss_matches_masked_oracle(make_params, make_adapter):
    p = make_params(seed=1)
    ad = make_adapter(role="generation", seed=2)
    lays = [
        build_prompt("Q1?", ["alpha"], "x", p.config.max_seq_len),
        build_prompt("Q2?", ["beta"], "yz", p.config.max_seq_len),
    ]
    got = rag_it_loss(p, ad, lays)
    expect = bb.masked_token_loss(
        p, [list(l.ids) for l in lays], [list(l.target_mask) for l in lays], ad
    )
    assert float(got.data) == float(expect.data)
    with pytest.raises(ValueError, match="empty batch"):
        rag_it_loss(p, ad, [])
    with pytest.raises(ValueError, match="no target"):
        rag_it_loss(p, ad, [build_prompt("Q?", ["d"], None, 64)])


def test_rag_it_loss_only_scores_answer_region(make_params, make_adapter):
    # changing a doc byte the mask ignores must not change WHICH positions
    # are scored; it may change the loss value through attention
    p = make_params(seed=3)
    ad = make_adapter(role="generation", seed=4)
    lay = build_prompt("Q?", ["doc"], "a", p.config.max_seq_len)
    n_targets = sum(lay.target_mask)
    a_start, a_stop = lay.answer_span
    assert n_targets == (a_stop - a_start) + 1
    mask_idx = [j for j, f in enumerate(lay.target_mask) if f]
    assert mask_idx == list(range(a_start, a_stop + 1))


def test_answer_decodes_greedily(make_params, make_adapter):
    p = make_params(seed=5)
    ad = make_adapter(role="generation", seed=6)
    text, no_ctx = answer(p, ad, "Q?", ["some doc"], max_new=6)
    assert isinstance(text, str) and not no_ctx
    lay = build_prompt("Q?", ["some doc"], None, p.config.max_seq_len)
    expect = detokenize(bb.greedy_decode(p, list(lay.ids), 6, ad))
    assert text == expect
    _, no_ctx = answer(p, ad, "Q?", [], max_new=2)
    assert no_ctx


def test_score_candidate_matches_sequence_logprob(make_params, make_adapter):
    p = make_params(seed=7)
    ad = make_adapter(role="generation", seed=8)
    got = score_candidate(p, ad, "Which?", "Widget Nine")
    lay = build_prompt("Which?", [], None, p.config.max_seq_len)
    expect = bb.sequence_logprob(p, list(lay.ids), list(tokenize("Widget Nine").ids), ad)
    assert got == expect
    assert got <= 0.0
    with pytest.raises(ValueError, match="title"):
        score_candidate(p, ad, "Which?", "")


def test_score_candidate_ranks_memorized_title_higher(tiny_cfg, make_params, make_adapter):
    # overfit a tiny model to one continuation; its score must then dominate
    p = make_params(seed=9, frozen=True)
    ad = make_adapter(role="generation", seed=10, trainable=True)
    lay = build_prompt("Which?", [], None, tiny_cfg.max_seq_len)
    ctx = list(lay.ids)
    target_ids = list(tokenize("AB").ids)
    seq = ctx + target_ids + [EOS]
    mask = [0] * len(ctx) + [1] * (len(target_ids) + 1)
    from raglab import autograd as ag

    for _ in range(60):
        for t in ad.tensors.values():
            t.grad = None
        loss = bb.masked_token_loss(p, [seq], [mask], ad)
        loss.backward()
        for t in ad.trainable():
            if t.grad is not None:
                t.data -= 0.2 * t.grad
    good = score_candidate(p, ad, "Which?", "AB")
    bad = score_candidate(p, ad, "Which?", "zq")
    assert good > bad
