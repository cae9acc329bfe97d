import numpy as np
import pytest

from headkv.errors import HeadKVError
from headkv.numkit import SeededRng
from headkv.probes import (QUESTION_MARK, RELATION, Span, VocabLayout, answer_for, gen_haystack,
                           insertion_start, make_multi_needle_task, make_r2_example,
                           make_retrieval_example, read_corpus, sample_r2_example,
                           sample_retrieval_example, write_corpus)


def test_haystack_determinism_and_vocab():
    a = gen_haystack(SeededRng(3), 100, 512)
    assert len(a) == 100
    assert np.array_equal(a, gen_haystack(SeededRng(3), 100, 512))
    lay = VocabLayout.for_vocab(512)
    assert set(a.tolist()) <= set(lay.filler)
    assert not set(lay.filler) & set(lay.needle)


def test_vocab_too_small():
    with pytest.raises(HeadKVError):
        VocabLayout.for_vocab(16)


@pytest.mark.parametrize("depth, want", [(0.0, 0), (1.0, 96), (0.5, 48)])
def test_insertion_start(depth, want):
    assert insertion_start(depth, 100, 4) == want


def test_retrieval_boundaries():
    hay = np.full(100, 200)
    ex = make_retrieval_example(hay, [9, 10, 11, 12], [3, 4], 1.0)
    assert ex.needle_span == Span(96, 100)
    assert ex.context[96:].tolist() == [9, 10, 11, 12]
    assert len(ex.context) == 100
    assert ex.prompt.tolist()[-2:] == [3, 4]
    assert make_retrieval_example(hay, [9], [3], 0.0).needle_span.start == 0


def test_r2_spans_and_target():
    hay = np.full(1000, 300)
    ex = make_r2_example(hay, [1, 2], [5, 6], [7, 8], [3], 0.5)
    r, c1, c2 = ex.reasoning_span, ex.wrong_span, ex.correct_span
    assert r.stop == c1.start and c1.stop == c2.start
    assert ex.target.tolist() == [7, 8]
    assert ex.context[c2.start:c2.stop].tolist() == [7, 8]
    starts = {make_r2_example(hay, [1, 2], [5, 6], [7, 8], [3], d).needle_span.start
              for d in (0, 0.25, 0.5, 0.75, 1.0)}
    assert len(starts) == 5
    with pytest.raises(HeadKVError):
        make_r2_example(hay, [], [5], [7], [3], 0.5)


def test_sampled_examples_have_requested_length():
    ex = sample_retrieval_example(SeededRng(1), 256, 512, 0.25)
    assert len(ex.prompt) == 256 and len(ex.needle_span) == 4
    ex2 = sample_r2_example(SeededRng(1), 256, 512, 0.75)
    assert len(ex2.prompt) == 256 and len(ex2.correct_span) == 4
    # needle tokens are unique, so span membership is never ambiguous
    assert len(set(ex2.context[ex2.needle_span.start:ex2.needle_span.stop].tolist())) == 12


def test_answer_for_last_fact_wins():
    M, J = 100, 101
    bathroom, hallway = 150, 151
    assert answer_for([(M, RELATION, bathroom), (M, RELATION, hallway)], M) == hallway
    facts = [(J, RELATION, 152), (M, RELATION, bathroom), (J, RELATION, 153)]
    assert answer_for(facts, M) == bathroom
    assert answer_for([facts[2], facts[1], facts[0]], M) == bathroom
    with pytest.raises(HeadKVError):
        answer_for(facts, 999)


def test_multi_needle_task_consistency():
    ctx, task = make_multi_needle_task(SeededRng(4), 8, 510, 512)
    assert len(ctx) == 510
    assert task.question.tolist() == [QUESTION_MARK, task.question_entity]
    for span, fact in zip(task.fact_spans, task.facts):
        assert tuple(ctx[span.start:span.stop].tolist()) == tuple(fact)
    assert ctx[task.answer_span.start] == task.answer == answer_for(task.facts, task.question_entity)
    assert len(task.entity_spans) >= 2


def test_corpus_roundtrip(tmp_path):
    exs = [sample_r2_example(SeededRng(i), 64, 512, 0.5) for i in range(3)]
    write_corpus(tmp_path / "c.jsonl", exs)
    back = read_corpus(tmp_path / "c.jsonl")
    for a, b in zip(exs, back):
        assert np.array_equal(a.prompt, b.prompt) and a.correct_span == b.correct_span
