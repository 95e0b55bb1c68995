import json
import random

import pytest

from synicl import lexical, treekernel, treepoly
from synicl.pipeline import (
    BatchSelectionError,
    InvalidConfig,
    MissingPrecomputation,
    SelectionConfig,
    Selector,
    assemble_examples,
    export_results,
    load_results,
    random_baseline,
    select,
)
from synicl.treebank import Corpus, Example, LabelVocab

from conftest import build_tree, leaf, node, make_synth_corpus, random_tree_spec


def toy_corpus(specs, vocab=None):
    vocab = vocab if vocab is not None else LabelVocab()
    examples = []
    for i, spec in enumerate(specs):
        tree = build_tree(spec, vocab, sentence_id=i)
        tokens = [f"s{i}w{j}" for j in range(tree.n_tokens)]
        examples.append(
            Example(id=i, source=" ".join(tokens), target=" ".join(tokens),
                    source_tokens=tokens, tree=tree)
        )
    return Corpus(examples=examples, vocab=vocab)


def random_corpus(n, seed, vocab, labels, max_nodes=8):
    rng = random.Random(seed)
    return toy_corpus([random_tree_spec(rng, rng.randint(1, max_nodes), labels) for _ in range(n)],
                      vocab)


def query_example(spec, vocab, qid=0):
    tree = build_tree(spec, vocab, sentence_id=qid)
    tokens = [f"q{qid}w{j}" for j in range(tree.n_tokens)]
    return Example(id=qid, source=" ".join(tokens), target=" ".join(tokens),
                   source_tokens=tokens, tree=tree)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation():
    SelectionConfig().validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(stage1="none", stage2="none").validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(stage1="bogus").validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(stage2="bogus").validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(shots=0).validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(shots=8, candidate_size=4).validate()
    with pytest.raises(InvalidConfig):
        SelectionConfig(error_weight=0.0).validate()


def test_defaults_match_documented_values():
    config = SelectionConfig()
    assert config.candidate_size == 1000
    assert config.shots == 4
    assert config.error_weight == 2.0


# ---------------------------------------------------------------------------
# selection behavior
# ---------------------------------------------------------------------------

def test_stage1_passthrough_when_stage2_none():
    corpus = make_synth_corpus(50, seed=5)
    query = make_synth_corpus(1, seed=99, vocab=corpus.vocab)[0]
    config = SelectionConfig(stage1="bm25", stage2="none", candidate_size=50, shots=4)
    result = Selector(corpus, config).select(query)
    index = lexical.build_bm25(corpus)
    assert result.chosen == lexical.bm25_topk(index, query.source, 4)
    assert result.stage1_pool_size == 50


def test_two_stage_equals_single_stage_when_pool_covers_corpus():
    vocab = LabelVocab()
    labels = ["Root", "a", "b", "S"]
    corpus = random_corpus(40, 1, vocab, labels)
    query = query_example(random_tree_spec(random.Random(2), 6, labels), vocab, qid=0)
    for stage2 in ("tree_kernel", "poly", "weighted_poly"):
        two = SelectionConfig(stage1="bm25", stage2=stage2, candidate_size=40, shots=4)
        one = SelectionConfig(stage1="none", stage2=stage2, candidate_size=40, shots=4)
        chosen_two = Selector(corpus, two).select(query).chosen
        chosen_one = Selector(corpus, one).select(query).chosen
        assert chosen_two == chosen_one


def test_poly_ranking_matches_exhaustive_oracle():
    vocab = LabelVocab()
    labels = ["Root", "a", "b", "c", "S"]
    corpus = random_corpus(10, 3, vocab, labels)
    query = query_example(random_tree_spec(random.Random(4), 6, labels), vocab)
    config = SelectionConfig(stage1="none", stage2="poly", candidate_size=10, shots=10)
    result = Selector(corpus, config).select(query)

    qpoly = treepoly.tree_to_polynomial(query.tree, vocab)
    oracle = []
    for ex in corpus.examples:
        poly = treepoly.tree_to_polynomial(ex.tree, vocab)
        oracle.append((ex.id, treepoly.poly_distance(qpoly, poly)))
    oracle.sort(key=lambda item: (item[1], item[0]))
    assert result.chosen == oracle


def test_tree_kernel_ranking_matches_exhaustive_oracle():
    vocab = LabelVocab()
    labels = ["Root", "a", "b", "S"]
    corpus = random_corpus(12, 8, vocab, labels)
    query = query_example(random_tree_spec(random.Random(9), 7, labels), vocab)
    config = SelectionConfig(stage1="none", stage2="tree_kernel", candidate_size=12, shots=12)
    result = Selector(corpus, config).select(query)
    oracle = [
        (ex.id, treekernel.tree_kernel_similarity(query.tree, ex.tree))
        for ex in corpus.examples
    ]
    oracle.sort(key=lambda item: (-item[1], item[0]))
    assert result.chosen == oracle


def test_chosen_ids_come_from_stage1_pool():
    corpus = make_synth_corpus(100, seed=6)
    queries = make_synth_corpus(5, seed=60, vocab=corpus.vocab)
    config = SelectionConfig(stage1="bm25", stage2="tree_kernel", candidate_size=10, shots=4)
    selector = Selector(corpus, config)
    index = lexical.build_bm25(corpus)
    for query in queries.examples:
        result = selector.select(query)
        pool = {i for i, _ in lexical.bm25_topk(index, query.source, 10)}
        assert set(result.chosen_ids()) <= pool
        assert len(result.chosen) == 4
        assert len(set(result.chosen_ids())) == 4


def test_enlarging_pool_never_worsens_best_score():
    corpus = make_synth_corpus(200, seed=13, max_tokens=12)
    queries = make_synth_corpus(6, seed=14, vocab=corpus.vocab, max_tokens=12)
    for stage2, better in (("tree_kernel", lambda a, b: a >= b), ("poly", lambda a, b: a <= b)):
        prev_best = {}
        for size in (4, 20, 100, 200):
            config = SelectionConfig(stage1="bm25", stage2=stage2, candidate_size=size, shots=4)
            selector = Selector(corpus, config)
            for query in queries.examples:
                best = selector.select(query).chosen[0][1]
                if query.id in prev_best:
                    assert better(best, prev_best[query.id])
                prev_best[query.id] = best


def test_batch_equals_individual_and_parallel_equals_serial():
    corpus = make_synth_corpus(80, seed=21)
    queries = make_synth_corpus(10, seed=22, vocab=corpus.vocab)
    config = SelectionConfig(stage1="bm25", stage2="tree_kernel", candidate_size=30, shots=4)
    selector = Selector(corpus, config)
    serial = selector.select_batch(queries.examples, jobs=1)
    parallel = selector.select_batch(queries.examples, jobs=4)
    individual = [selector.select(q) for q in queries.examples]
    assert serial == parallel == individual
    single = selector.select_batch(queries.examples[:1])
    assert single == [individual[0]]


def test_random_stage2_is_reproducible_and_pool_bound():
    corpus = make_synth_corpus(50, seed=31)
    queries = make_synth_corpus(3, seed=32, vocab=corpus.vocab)
    config = SelectionConfig(stage1="bm25", stage2="random", candidate_size=10,
                             shots=4, random_seed=7)
    one = Selector(corpus, config).select_batch(queries.examples)
    two = Selector(corpus, config).select_batch(queries.examples)
    assert one == two
    index = lexical.build_bm25(corpus)
    for query, result in zip(queries.examples, one):
        pool = {i for i, _ in lexical.bm25_topk(index, query.source, 10)}
        assert set(result.chosen_ids()) <= pool


def test_random_baseline():
    corpus = make_synth_corpus(1000, seed=41)
    assert random_baseline(corpus, 8, seed=5) == random_baseline(corpus, 8, seed=5)
    full = random_baseline(make_synth_corpus(20, seed=42), 20, seed=1)
    assert sorted(full) == list(range(20))
    differing = sum(
        random_baseline(corpus, 8, seed=s) != random_baseline(corpus, 8, seed=s + 100)
        for s in range(10)
    )
    assert differing >= 9
    with pytest.raises(ValueError):
        random_baseline(make_synth_corpus(3, seed=43), 5, seed=0)


def test_poly_budget_fallbacks():
    vocab = LabelVocab()
    wide = node("r",
                node("a", leaf("u"), leaf("v")),
                node("b", leaf("u"), leaf("w")),
                node("c", leaf("v"), leaf("w")),
                node("a", leaf("w"), leaf("u")))
    small = node("r", leaf("u"))
    corpus = toy_corpus([small, wide, small], vocab)
    config = SelectionConfig(stage1="none", stage2="poly", candidate_size=3, shots=3,
                             term_budget=6)
    selector = Selector(corpus, config)
    assert selector.poly_budget_ids == [1]

    query = query_example(node("r", leaf("u"), leaf("v")), vocab, qid=0)
    result = selector.select(query)
    # over-budget candidate ranks last and is flagged
    assert result.chosen_ids()[-1] == 1
    assert {f["kind"] for f in result.fallbacks} == {"candidate_poly_budget"}

    blown_query = query_example(wide, vocab, qid=1)
    result = selector.select(blown_query)
    assert any(f["kind"] == "query_poly_budget" for f in result.fallbacks)
    kernel_ranked = [
        (ex.id, treekernel.tree_kernel_similarity(blown_query.tree, ex.tree))
        for ex in corpus.examples
    ]
    kernel_ranked.sort(key=lambda item: (-item[1], item[0]))
    assert result.chosen == kernel_ranked


def test_dense_stage1_requires_embeddings():
    corpus = make_synth_corpus(10, seed=51)
    config = SelectionConfig(stage1="dense", stage2="tree_kernel", candidate_size=10, shots=2)
    with pytest.raises(MissingPrecomputation):
        Selector(corpus, config)

    with_emb = make_synth_corpus(10, seed=51, embedding_dim=4)
    selector = Selector(with_emb, config)
    query = make_synth_corpus(1, seed=52, vocab=with_emb.vocab)[0]  # no embedding
    with pytest.raises(MissingPrecomputation):
        selector.select(query)


def test_batch_aggregates_failures_with_query_ids():
    corpus = make_synth_corpus(10, seed=61, embedding_dim=4)
    config = SelectionConfig(stage1="dense", stage2="none", candidate_size=10, shots=2)
    selector = Selector(corpus, config)
    good = make_synth_corpus(2, seed=62, vocab=corpus.vocab, embedding_dim=4)
    bad = make_synth_corpus(1, seed=63, vocab=corpus.vocab)  # missing embedding
    bad.examples[0].id = 77
    with pytest.raises(BatchSelectionError) as excinfo:
        selector.select_batch(good.examples + bad.examples)
    assert "query 77" in str(excinfo.value)


def test_select_convenience_wrapper():
    vocab = LabelVocab()
    labels = ["Root", "a", "b"]
    corpus = random_corpus(5, 71, vocab, labels)
    query = query_example(random_tree_spec(random.Random(72), 4, labels), vocab)
    config = SelectionConfig(stage1="none", stage2="tree_kernel", candidate_size=5, shots=2)
    assert select(config, corpus, query) == Selector(corpus, config).select(query)


def test_assemble_examples_order_flag():
    corpus = make_synth_corpus(10, seed=81)
    config = SelectionConfig(stage1="bm25", stage2="none", candidate_size=10, shots=3)
    result = Selector(corpus, config).select(make_synth_corpus(1, seed=82, vocab=corpus.vocab)[0])
    forward = assemble_examples(result, corpus)
    backward = assemble_examples(result, corpus, most_similar_last=True)
    assert forward == list(reversed(backward))
    assert forward[0][0] == corpus[result.chosen_ids()[0]].source


def test_export_and_load_results_roundtrip(tmp_path):
    corpus = make_synth_corpus(20, seed=91)
    queries = make_synth_corpus(4, seed=92, vocab=corpus.vocab)
    config = SelectionConfig(stage1="bm25", stage2="tree_kernel", candidate_size=10, shots=3)
    results = Selector(corpus, config).select_batch(queries.examples)
    path = tmp_path / "selections.jsonl"
    export_results(results, config, str(path))
    loaded = load_results(str(path))
    assert [r.query_id for r in loaded] == [r.query_id for r in results]
    assert [r.chosen for r in loaded] == [r.chosen for r in results]
    with open(path, encoding="utf-8") as f:
        first = json.loads(f.readline())
    assert first["stage1"] == "bm25" and first["stage2"] == "tree_kernel"
