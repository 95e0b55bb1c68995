"""Stage-I retrieval: Okapi BM25 over source sentences, cosine over embeddings.

BM25 uses the non-negative idf form ln(1 + (N - n + 0.5) / (n + 0.5)) with
k1=1.2, b=0.75 by default. Embeddings are an external input (any encoder
producing one vector per sentence); rows are L2-normalized at load so cosine
similarity reduces to a dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .treebank import Corpus


class EmptyCorpus(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


def tokenize(text: str) -> List[str]:
    """Lowercased whitespace tokens; no stemming, no punctuation handling."""
    return text.lower().split()


@dataclass
class Bm25Index:
    """Inverted index with the statistics needed for Okapi scoring."""

    n_docs: int
    doc_lengths: np.ndarray
    avg_doc_length: float
    k1: float
    b: float
    postings: Dict[str, Tuple[np.ndarray, np.ndarray]]  # term -> (doc ids, tfs)
    idf: Dict[str, float]
    tokenizer: Callable[[str], List[str]] = tokenize
    _k1_norm: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @classmethod
    def build(
        cls,
        docs_tokens: List[List[str]],
        k1: float = 1.2,
        b: float = 0.75,
        tokenizer: Callable[[str], List[str]] = tokenize,
    ) -> "Bm25Index":
        if not docs_tokens:
            raise EmptyCorpus("cannot index an empty corpus")
        n = len(docs_tokens)
        lengths = np.array([len(doc) for doc in docs_tokens], dtype=np.float64)
        avgdl = float(sum(len(doc) for doc in docs_tokens)) / n

        counts: Dict[str, Dict[int, int]] = {}
        for doc_id, doc in enumerate(docs_tokens):
            for token in doc:
                per = counts.setdefault(token, {})
                per[doc_id] = per.get(doc_id, 0) + 1

        postings: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        idf: Dict[str, float] = {}
        for token, per in counts.items():
            ids = np.fromiter(sorted(per), dtype=np.intp, count=len(per))
            tfs = np.array([per[i] for i in ids], dtype=np.float64)
            postings[token] = (ids, tfs)
            n_t = len(per)
            idf[token] = math.log(1.0 + (n - n_t + 0.5) / (n_t + 0.5))

        index = cls(
            n_docs=n,
            doc_lengths=lengths,
            avg_doc_length=avgdl,
            k1=k1,
            b=b,
            postings=postings,
            idf=idf,
            tokenizer=tokenizer,
        )
        if avgdl > 0:
            index._k1_norm = k1 * (1.0 - b + b * lengths / avgdl)
        else:
            # corpus of empty documents: every query scores 0 anyway
            index._k1_norm = np.full(n, k1 * (1.0 - b))
        return index


def build_bm25(
    corpus: Corpus,
    k1: float = 1.2,
    b: float = 0.75,
    tokenizer: Callable[[str], List[str]] = tokenize,
) -> Bm25Index:
    """Index the tokenized source sentences of `corpus`."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    return Bm25Index.build([tokenizer(ex.source) for ex in corpus.examples], k1, b, tokenizer)


def bm25_scores(index: Bm25Index, query: str) -> np.ndarray:
    """Okapi score of every document for `query` (dense vector, one per doc)."""
    scores = np.zeros(index.n_docs)
    k1 = index.k1
    for token in index.tokenizer(query):
        entry = index.postings.get(token)
        if entry is None:
            continue
        ids, tfs = entry
        scores[ids] += index.idf[token] * ((tfs * (k1 + 1.0)) / (tfs + index._k1_norm[ids]))
    return scores


def _topk_by_score(scores: np.ndarray, k: int) -> List[Tuple[int, float]]:
    # stable argsort on the negated scores: descending score, ties by lower id
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def bm25_topk(index: Bm25Index, query: str, k: int) -> List[Tuple[int, float]]:
    """Top-k documents by BM25 score, descending, ties broken by lower doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _topk_by_score(bm25_scores(index, query), k)


@dataclass
class DenseIndex:
    """Row matrix of unit-normalized sentence embeddings."""

    vectors: np.ndarray
    dim: int

    @classmethod
    def from_vectors(cls, vectors: np.ndarray) -> "DenseIndex":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise EmptyCorpus("need a non-empty 2-D embedding matrix")
        normalized = np.empty_like(vectors)
        for i, row in enumerate(vectors):
            norm = math.sqrt(float(np.dot(row, row)))
            if norm == 0.0:
                raise ZeroVector(f"embedding row {i} is all zeros")
            normalized[i] = row / norm
        return cls(vectors=normalized, dim=vectors.shape[1])


def build_dense(corpus: Corpus) -> DenseIndex:
    """Index the embeddings attached to `corpus` (every example must carry one)."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    missing = [ex.id for ex in corpus.examples if ex.embedding is None]
    if missing:
        raise ZeroVector(f"{len(missing)} examples have no embedding (first: id {missing[0]})")
    return DenseIndex.from_vectors(np.stack([ex.embedding for ex in corpus.examples]))


def dense_scores(index: DenseIndex, query_vector: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row to `query_vector`."""
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dim is {index.dim}")
    norm = math.sqrt(float(np.dot(q, q)))
    if norm == 0.0:
        raise ZeroVector("query vector is all zeros")
    nq = q / norm
    # row-wise dot keeps scores bitwise identical to single-row scoring
    return np.array([np.dot(row, nq) for row in index.vectors])


def dense_topk(index: DenseIndex, query_vector: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """Top-k rows by cosine similarity, descending, ties broken by lower id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _topk_by_score(dense_scores(index, query_vector), k)
