"""Example selection pipelines: single-stage or two-stage select-then-rank.

Stage I shrinks the training pool with a cheap lexical (BM25) or dense
(cosine) retriever; stage II re-ranks the candidate pool with a syntactic
similarity (tree kernel or polynomial distance) and keeps the top `shots`
examples. Either stage can be disabled (but not both). All rankings break
ties by lower example id, so results are deterministic and independent of
worker parallelism.
"""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import lexical, treekernel, treepoly
from .treebank import Corpus, Example

STAGE1_METHODS = ("none", "bm25", "dense")
STAGE2_METHODS = ("none", "tree_kernel", "poly", "weighted_poly", "random")


class InvalidConfig(ValueError):
    pass


class MissingPrecomputation(RuntimeError):
    pass


class BatchSelectionError(RuntimeError):
    """Raised by select_batch after the batch finishes with per-query failures."""

    def __init__(self, failures: List[Tuple[int, Exception]]):
        self.failures = failures
        summary = "; ".join(f"query {qid}: {exc}" for qid, exc in failures[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"{len(failures)} queries failed: {summary}{more}")


@dataclass
class SelectionConfig:
    stage1: str = "bm25"
    stage2: str = "tree_kernel"
    candidate_size: int = 1000
    shots: int = 4
    random_seed: int = 0
    error_weight: float = 2.0
    term_budget: Optional[int] = treepoly.DEFAULT_TERM_BUDGET
    most_similar_last: bool = False  # prompt-order flag; selection output is unaffected

    def validate(self) -> None:
        if self.stage1 not in STAGE1_METHODS:
            raise InvalidConfig(f"stage1 must be one of {STAGE1_METHODS}, got {self.stage1!r}")
        if self.stage2 not in STAGE2_METHODS:
            raise InvalidConfig(f"stage2 must be one of {STAGE2_METHODS}, got {self.stage2!r}")
        if self.stage1 == "none" and self.stage2 == "none":
            raise InvalidConfig("stage1 and stage2 cannot both be 'none'")
        if self.shots < 1:
            raise InvalidConfig("shots must be >= 1")
        if self.candidate_size < self.shots:
            raise InvalidConfig("candidate_size must be >= shots")
        if self.error_weight <= 0:
            raise InvalidConfig("error_weight must be > 0")


@dataclass
class SelectionResult:
    query_id: int
    chosen: List[Tuple[int, float]]  # (example id, stage-II score, or stage-I when stage2=none)
    stage1_pool_size: int
    fallbacks: List[Dict[str, object]] = field(default_factory=list)

    def chosen_ids(self) -> List[int]:
        return [ex_id for ex_id, _ in self.chosen]


class Selector:
    """Holds the per-corpus indices and precomputations for repeated selects.

    When stage II uses polynomial distances, the training and query corpora
    must have been loaded with one shared label vocabulary before the
    Selector is built (term vectors need a common width).
    """

    def __init__(self, corpus: Corpus, config: SelectionConfig):
        config.validate()
        if len(corpus) == 0:
            raise InvalidConfig("cannot select from an empty corpus")
        self.corpus = corpus
        self.config = config
        self.d = corpus.vocab.d

        self.bm25: Optional[lexical.Bm25Index] = None
        self.dense: Optional[lexical.DenseIndex] = None
        if config.stage1 == "bm25":
            self.bm25 = lexical.build_bm25(corpus)
        elif config.stage1 == "dense":
            if any(ex.embedding is None for ex in corpus.examples):
                raise MissingPrecomputation("dense stage I needs an embedding for every example")
            self.dense = lexical.build_dense(corpus)

        self.polynomials: Optional[List[Optional[treepoly.Polynomial]]] = None
        self.poly_budget_ids: List[int] = []
        self.weights: Optional[treepoly.WeightProfile] = None
        if config.stage2 in ("poly", "weighted_poly"):
            self.polynomials = []
            for ex in corpus.examples:
                try:
                    self.polynomials.append(
                        treepoly.tree_to_polynomial(ex.tree, corpus.vocab, config.term_budget)
                    )
                except treepoly.TermBudgetExceeded:
                    self.polynomials.append(None)
                    self.poly_budget_ids.append(ex.id)
            if config.stage2 == "weighted_poly":
                self.weights = treepoly.WeightProfile.error_weighted(
                    corpus.vocab, config.error_weight
                )

    # -- stage I ------------------------------------------------------------

    def _stage1_pool(self, query: Example) -> List[Tuple[int, float]]:
        cfg = self.config
        if cfg.stage1 == "none":
            return [(ex.id, 0.0) for ex in self.corpus.examples]
        if cfg.stage1 == "bm25":
            assert self.bm25 is not None
            return lexical.bm25_topk(self.bm25, query.source, cfg.candidate_size)
        assert self.dense is not None
        if query.embedding is None:
            raise MissingPrecomputation(f"query {query.id} has no embedding for dense stage I")
        return lexical.dense_topk(self.dense, query.embedding, cfg.candidate_size)

    # -- stage II -----------------------------------------------------------

    def _rank_tree_kernel(self, query: Example, pool: List[int]) -> List[Tuple[int, float]]:
        scored = [
            (ex_id, treekernel.tree_kernel_similarity(query.tree, self.corpus[ex_id].tree))
            for ex_id in pool
        ]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored

    def _rank_poly(
        self, query: Example, pool: List[int], fallbacks: List[Dict[str, object]]
    ) -> List[Tuple[int, float]]:
        assert self.polynomials is not None
        for node in query.tree.iter_nodes():
            if node.label >= self.d:
                raise MissingPrecomputation(
                    "query tree has labels outside the shared vocabulary; "
                    "load both corpora with one LabelVocab"
                )
        try:
            query_poly = treepoly.tree_to_polynomial(
                query.tree, self.corpus.vocab, self.config.term_budget
            )
        except treepoly.TermBudgetExceeded:
            fallbacks.append({"kind": "query_poly_budget", "query_id": query.id})
            return self._rank_tree_kernel(query, pool)

        scored = []
        for ex_id in pool:
            poly = self.polynomials[ex_id]
            if poly is None:
                fallbacks.append({"kind": "candidate_poly_budget", "example_id": ex_id})
                scored.append((ex_id, math.inf))
                continue
            scored.append((ex_id, treepoly.poly_distance(query_poly, poly, self.weights)))
        scored.sort(key=lambda item: treepoly.distance_rank_key(item[1], item[0]))
        return scored

    # -- public API ----------------------------------------------------------

    def select(self, query: Example) -> SelectionResult:
        cfg = self.config
        fallbacks: List[Dict[str, object]] = []
        stage1 = self._stage1_pool(query)
        pool_ids = [ex_id for ex_id, _ in stage1]

        if cfg.stage2 == "none":
            chosen = stage1[: cfg.shots]
        elif cfg.stage2 == "tree_kernel":
            chosen = self._rank_tree_kernel(query, pool_ids)[: cfg.shots]
        elif cfg.stage2 in ("poly", "weighted_poly"):
            chosen = self._rank_poly(query, pool_ids, fallbacks)[: cfg.shots]
        else:  # random
            rng = random.Random(f"{cfg.random_seed}:{query.id}")
            sample = rng.sample(pool_ids, min(cfg.shots, len(pool_ids)))
            chosen = [(ex_id, 0.0) for ex_id in sample]

        return SelectionResult(
            query_id=query.id,
            chosen=chosen,
            stage1_pool_size=len(pool_ids),
            fallbacks=fallbacks,
        )

    def select_batch(self, queries: Sequence[Example], jobs: int = 1) -> List[SelectionResult]:
        """Element-wise equal to independent select() calls; order preserved."""

        def run(query: Example):
            try:
                return self.select(query), None
            except Exception as exc:  # noqa: BLE001 - aggregated below
                return None, (query.id, exc)

        if jobs <= 1:
            outcomes = [run(q) for q in queries]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(run, queries))
        failures = [fail for _, fail in outcomes if fail is not None]
        if failures:
            raise BatchSelectionError(failures)
        return [result for result, _ in outcomes]


def select(config: SelectionConfig, corpus: Corpus, query: Example) -> SelectionResult:
    """One-shot convenience wrapper; builds the indices on every call."""
    return Selector(corpus, config).select(query)


def select_batch(
    config: SelectionConfig, corpus: Corpus, queries: Sequence[Example], jobs: int = 1
) -> List[SelectionResult]:
    return Selector(corpus, config).select_batch(queries, jobs=jobs)


def random_baseline(corpus: Corpus, shots: int, seed: int) -> List[int]:
    """Uniform sample of example ids without replacement, reproducible from `seed`."""
    if shots > len(corpus):
        raise ValueError(f"shots {shots} > corpus size {len(corpus)}")
    return random.Random(seed).sample(range(len(corpus)), shots)


def assemble_examples(
    result: SelectionResult, train_corpus: Corpus, most_similar_last: bool = False
) -> List[Tuple[str, str]]:
    """(source, target) pairs of the chosen examples in prompt order.

    Default order is most similar first; `most_similar_last` reverses it.
    """
    pairs = [
        (train_corpus[ex_id].source, train_corpus[ex_id].target)
        for ex_id in result.chosen_ids()
    ]
    if most_similar_last:
        pairs.reverse()
    return pairs


def export_results(
    results: Sequence[SelectionResult], config: SelectionConfig, path: str
) -> None:
    """One JSON record per query: ids, scores, pool size, method tags, fallbacks."""
    with open(path, "w", encoding="utf-8") as f:
        for res in results:
            record = {
                "query_id": res.query_id,
                "chosen": [[ex_id, score] for ex_id, score in res.chosen],
                "stage1_pool_size": res.stage1_pool_size,
                "stage1": config.stage1,
                "stage2": config.stage2,
                "fallbacks": res.fallbacks,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_results(path: str) -> List[SelectionResult]:
    results = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            results.append(
                SelectionResult(
                    query_id=record["query_id"],
                    chosen=[(int(i), float(s)) for i, s in record["chosen"]],
                    stage1_pool_size=record["stage1_pool_size"],
                    fallbacks=record.get("fallbacks", []),
                )
            )
    return results
