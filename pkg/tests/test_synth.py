"""Benchmark generator invariants: determinism, answer containment, split
bookkeeping, grade structure, the lexical sanity bound, and length budgets."""

import pytest

from raglab import datapipe as dp
from raglab import synth
from raglab.synth import SynthSpec, generate, lexical_hit_at_1, lexical_rank


def test_spec_validation():
    with pytest.raises(ValueError, match="n_docs"):
        SynthSpec(n_docs=0)
    with pytest.raises(ValueError, match="n_facts_per_doc"):
        SynthSpec(n_facts_per_doc=7)
    with pytest.raises(ValueError, match="heldout_per_doc"):
        SynthSpec(n_facts_per_doc=2, heldout_per_doc=2)


def test_generation_is_deterministic():
    a = generate(SynthSpec(n_docs=12, seed=5))
    b = generate(SynthSpec(n_docs=12, seed=5))
    c = generate(SynthSpec(n_docs=12, seed=6))
    assert [d.to_json() for d in a.docs] == [d.to_json() for d in b.docs]
    assert a.queries == b.queries and a.answers == b.answers and a.qrels == b.qrels
    assert [d.contents for d in a.docs] != [d.contents for d in c.docs]


def test_document_structure_and_entity_restatement():
    data = generate(SynthSpec(n_docs=20, seed=1))
    assert [d.id for d in data.docs] == [f"doc-{i:04d}" for i in range(20)]
    for d in data.docs:
        category = data.categories[d.id]
        assert d.title.endswith(" " + category)
        entity = d.title[: -len(" " + category)]
        # every fact sentence restates the product name
        assert d.contents.startswith(f"{entity} ")
        assert d.contents.count(entity) == 3
        assert d.contents.count(": ") == 3
        assert d.contents.endswith(".")
        assert d.type_one == category
        assert d.cnt_details["quality_score"] >= dp.DEFAULT_QUALITY_THRESHOLD
    # entities unique across the corpus
    entities = [d.title for d in data.docs]
    assert len(set(entities)) == len(entities)


def test_answers_contained_verbatim_in_gold_doc():
    data = generate(SynthSpec(n_docs=25, seed=2))
    docs_by_id = {d.id: d for d in data.docs}
    for qid, _, _ in data.queries:
        answer = data.answers[qid]
        gold_doc = docs_by_id[data.gold[qid]]
        assert answer in gold_doc.contents


def test_query_split_counts_and_qda_rows():
    spec = SynthSpec(n_docs=15, n_facts_per_doc=3, heldout_per_doc=1, seed=3)
    data = generate(spec)
    assert len(data.queries) == 15 * 3
    heldout = [q for q in data.queries if q[1] == "heldout"]
    train = [q for q in data.queries if q[1] == "train"]
    assert len(heldout) == 15 and len(train) == 30
    # exactly heldout_per_doc per document
    per_doc = {}
    for qid, split, _ in data.queries:
        if split == "heldout":
            per_doc[data.gold[qid]] = per_doc.get(data.gold[qid], 0) + 1
    assert set(per_doc.values()) == {1}
    # supervision rows mirror the train split exactly, in order
    train_qids = [qid for qid, split, _ in data.queries if split == "train"]
    assert len(data.qda_rows) == len(train_qids)
    for row, qid in zip(data.qda_rows, train_qids):
        assert row["doc_id"] == data.gold[qid]
        assert row["answer"] == data.answers[qid]


def test_qrels_grades_gold_two_same_category_one():
    data = generate(SynthSpec(n_docs=30, seed=4))
    by_cat = {}
    for doc_id, cat in data.categories.items():
        by_cat.setdefault(cat, []).append(doc_id)
    for qid, _, _ in data.queries:
        grades = data.qrels[qid]
        gold_id = data.gold[qid]
        assert grades[gold_id] == 2
        cat = data.categories[gold_id]
        for other in by_cat[cat]:
            if other != gold_id:
                assert grades[other] == 1
        assert len(grades) == len(by_cat[cat])
        assert set(grades.values()) <= {1, 2}


def test_question_names_title_and_asked_attribute():
    data = generate(SynthSpec(n_docs=10, seed=7))
    docs_by_id = {d.id: d for d in data.docs}
    for qid, _, text in data.queries:
        gold_doc = docs_by_id[data.gold[qid]]
        category = data.categories[gold_doc.id]
        entity = gold_doc.title[: -len(" " + category)]
        # the question names the category and ends with the product name
        attribute = text[len("What is the ") : text.index(" of the ")]
        assert text == f"What is the {attribute} of the {category} {entity}?"
        # the asked attribute has a matching fact sentence holding the answer
        assert f"{entity} {attribute}: {data.answers[qid]}." in gold_doc.contents


def test_attribute_values_unique_within_attribute():
    data = generate(SynthSpec(n_docs=40, seed=8))
    seen = {}
    for qid, _, text in data.queries:
        attr = text[len("What is the ") : text.index(" of the ")]
        value = data.answers[qid]
        assert seen.setdefault((attr, value), qid) == qid  # no (attr, value) reuse


def test_single_doc_prompt_fits_default_window():
    data = generate(SynthSpec(n_docs=60, seed=9))
    docs_by_id = {d.id: d for d in data.docs}
    for qid, _, text in data.queries:
        d = docs_by_id[data.gold[qid]]
        doc_text = f"{d.title} {d.contents}"
        total = 1 + len(doc_text.encode()) + 1 + len(text.encode()) + 1 + len(data.answers[qid].encode()) + 1
        assert total <= 256


def test_lexical_ranking_upper_bound():
    data = generate(SynthSpec(n_docs=30, seed=10))
    assert lexical_hit_at_1(data) == 1.0
    ranked = lexical_rank(data, data.queries[0][2])
    assert len(ranked) == 30 and len(set(ranked)) == 30


def test_too_many_docs_raises():
    with pytest.raises(ValueError, match="vocabulary"):
        generate(SynthSpec(n_docs=24 * 16 + 1))


def test_out_dir_files_round_trip(tmp_path):
    data = generate(SynthSpec(n_docs=8, seed=11), out_dir=str(tmp_path))
    assert dp.read_documents(str(tmp_path / "documents.jsonl")) == data.docs
    assert dp.read_queries(str(tmp_path / "queries.txt")) == data.queries
    assert dp.read_qrels(str(tmp_path / "qrels.txt")) == data.qrels
    rows = dp.read_jsonl(str(tmp_path / "qda.jsonl"))
    assert rows == data.qda_rows
