"""Dependency treebank ingestion: CoNLL-U parsing and parallel corpus loading.

Trees are read from parser output only; this package never runs a parser.
Node labels are the DEPREL strings (error-aware parsers encode error
information there, e.g. the "S"/"R"/"M" labels), interned into a shared
label vocabulary so that downstream similarity code works on small ints.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

ERROR_LABELS = ("S", "R", "M")


class TreebankError(ValueError):
    """Base class for treebank ingestion failures."""


class MalformedLine(TreebankError):
    pass


class CyclicTree(TreebankError):
    pass


class MultipleRoots(TreebankError):
    pass


class MissingToken(TreebankError):
    pass


class LengthMismatch(TreebankError):
    pass


class DimensionMismatch(TreebankError):
    pass


class LabelVocab:
    """Ordered set of dependency label strings with stable integer ids."""

    def __init__(self, labels: Sequence[str] = ()):
        self.labels: List[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        """Return the id of `label`, adding it to the vocab if unseen."""
        idx = self._index.get(label)
        if idx is None:
            idx = len(self.labels)
            self.labels.append(label)
            self._index[label] = idx
        return idx

    def index(self, label: str) -> int:
        return self._index[label]

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        """Number of distinct labels."""
        return len(self.labels)

    def error_label_ids(self) -> List[int]:
        """Ids of the error labels (S/R/M) present in this vocab."""
        return [self._index[lb] for lb in ERROR_LABELS if lb in self._index]

    def __repr__(self) -> str:
        return f"LabelVocab({len(self.labels)} labels)"


@dataclass
class DepNode:
    """One token of a dependency tree; children kept in token order."""

    token_index: int
    form: str
    label: int
    children: List["DepNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class DepTree:
    root: DepNode
    n_tokens: int
    sentence_id: int = -1

    def iter_nodes(self) -> Iterator[DepNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


@dataclass
class Example:
    """A parallel (erroneous, corrected) sentence pair with its source tree."""

    id: int
    source: str
    target: str
    source_tokens: List[str]
    tree: DepTree
    embedding: Optional[np.ndarray] = None


@dataclass
class Corpus:
    examples: List[Example]
    vocab: LabelVocab
    embedding_dim: Optional[int] = None

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, idx: int) -> Example:
        return self.examples[idx]


def _split_columns(line: str) -> List[str]:
    # CoNLL-U is tab separated; fall back to whitespace for hand-written
    # fixtures that use spaces.
    if "\t" in line:
        return line.split("\t")
    return line.split()


def _parse_block(lines: List[str], vocab: LabelVocab, sentence_id: int) -> DepTree:
    rows = []  # (token_index, form, head, label_id)
    for line in lines:
        cols = _split_columns(line)
        if len(cols) == 4:
            id_col, form, head_col, deprel = cols
        elif len(cols) >= 10:
            id_col, form, head_col, deprel = cols[0], cols[1], cols[6], cols[7]
        else:
            raise MalformedLine(
                f"sentence {sentence_id}: expected 4 or 10 columns, got {len(cols)}: {line!r}"
            )
        if "-" in id_col or "." in id_col:
            # multiword token / empty node lines carry no tree structure
            continue
        try:
            token_index = int(id_col)
            head = int(head_col)
        except ValueError as exc:
            raise MalformedLine(f"sentence {sentence_id}: non-integer ID/HEAD: {line!r}") from exc
        if token_index < 1:
            raise MalformedLine(f"sentence {sentence_id}: token index {token_index} < 1")
        rows.append((token_index, form, head, vocab.add(deprel)))

    if not rows:
        raise MalformedLine(f"sentence {sentence_id}: empty block")

    n = len(rows)
    seen = set()
    for token_index, _, _, _ in rows:
        if token_index in seen:
            raise MalformedLine(f"sentence {sentence_id}: duplicate token index {token_index}")
        seen.add(token_index)
    for i in range(1, n + 1):
        if i not in seen:
            raise MissingToken(f"sentence {sentence_id}: token index {i} missing (have 1..{max(seen)})")

    nodes = {}
    for token_index, form, _, label in rows:
        nodes[token_index] = DepNode(token_index=token_index, form=form, label=label)

    root = None
    for token_index, _, head, _ in rows:
        if head == 0:
            if root is not None:
                raise MultipleRoots(f"sentence {sentence_id}: more than one node with head 0")
            root = nodes[token_index]
        else:
            if head not in nodes:
                raise MalformedLine(
                    f"sentence {sentence_id}: head {head} of token {token_index} out of range"
                )
            nodes[head].children.append(nodes[token_index])
    if root is None:
        # every node has a parent among the tokens, so the graph contains a cycle
        raise CyclicTree(f"sentence {sentence_id}: no root node (head 0) found")

    for node in nodes.values():
        node.children.sort(key=lambda c: c.token_index)

    reached = 0
    stack = [root]
    while stack:
        node = stack.pop()
        reached += 1
        stack.extend(node.children)
    if reached != n:
        raise CyclicTree(f"sentence {sentence_id}: {n - reached} tokens unreachable from root")

    return DepTree(root=root, n_tokens=n, sentence_id=sentence_id)


def parse_conllu(text: str, vocab: LabelVocab) -> List[DepTree]:
    """Parse blank-line separated dependency blocks into trees.

    Accepts strict 10-column CoNLL-U (ID FORM ... HEAD DEPREL ...) or a
    minimal 4-column ID/FORM/HEAD/DEPREL layout. Comment lines start with
    '#'; multiword ("1-2") and empty-node ("1.1") ids are skipped. `vocab`
    is extended in place with unseen labels.
    """
    trees = []
    current: List[str] = []
    sentence_id = 0
    for raw in text.split("\n"):
        line = raw.rstrip("\r")
        if line.strip() == "":
            if current:
                trees.append(_parse_block(current, vocab, sentence_id))
                sentence_id += 1
                current = []
            continue
        if line.lstrip().startswith("#"):
            continue
        current.append(line)
    if current:
        trees.append(_parse_block(current, vocab, sentence_id))
    return trees


def tree_to_conllu(tree: DepTree, vocab: LabelVocab) -> str:
    """Serialize a tree to the minimal 4-column TSV form (one block, no trailing blank)."""
    heads = {}
    forms = {}
    labels = {}
    stack = [(tree.root, 0)]
    while stack:
        node, head = stack.pop()
        heads[node.token_index] = head
        forms[node.token_index] = node.form
        labels[node.token_index] = vocab.labels[node.label]
        for child in node.children:
            stack.append((child, node.token_index))
    lines = [
        f"{i}\t{forms[i]}\t{heads[i]}\t{labels[i]}"
        for i in range(1, tree.n_tokens + 1)
    ]
    return "\n".join(lines)


def subtree_stats(node: DepNode) -> tuple[int, int]:
    """Return (number of children, number of descendants) of `node`."""
    descendants = 0
    stack = list(node.children)
    while stack:
        n = stack.pop()
        descendants += 1
        stack.extend(n.children)
    return len(node.children), descendants


def _read_lines(path: str) -> List[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def _parse_embeddings(path: str) -> tuple[List[np.ndarray], int]:
    vectors = []
    dim = None
    for lineno, line in enumerate(_read_lines(path)):
        values = [float(v) for v in line.split()]
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DimensionMismatch(
                f"{path}: embedding on line {lineno + 1} has length {len(values)}, expected {dim}"
            )
        vectors.append(np.asarray(values, dtype=np.float64))
    if dim is None or dim == 0:
        raise DimensionMismatch(f"{path}: no embedding values found")
    return vectors, dim


def load_corpus(
    source_path: str,
    target_path: str,
    trees_path: str,
    embeddings_path: Optional[str] = None,
    vocab: Optional[LabelVocab] = None,
) -> Corpus:
    """Load a line-aligned parallel corpus plus one tree block per source line."""
    vocab = vocab if vocab is not None else LabelVocab()
    sources = _read_lines(source_path)
    targets = _read_lines(target_path)
    if len(sources) != len(targets):
        raise LengthMismatch(
            f"{source_path} has {len(sources)} lines but {target_path} has {len(targets)}"
        )
    for i, line in enumerate(sources):
        if line.strip() == "":
            raise LengthMismatch(f"{source_path}: line {i + 1} is empty")

    with open(trees_path, encoding="utf-8") as f:
        trees = parse_conllu(f.read(), vocab)
    if len(trees) != len(sources):
        raise LengthMismatch(
            f"{trees_path} has {len(trees)} tree blocks but {source_path} has {len(sources)} lines"
        )

    embeddings: Optional[List[np.ndarray]] = None
    dim: Optional[int] = None
    if embeddings_path is not None:
        embeddings, dim = _parse_embeddings(embeddings_path)
        if len(embeddings) != len(sources):
            raise LengthMismatch(
                f"{embeddings_path} has {len(embeddings)} vectors but "
                f"{source_path} has {len(sources)} lines"
            )

    examples = []
    for i, (source, target) in enumerate(zip(sources, targets)):
        tokens = source.split()
        tree = trees[i]
        if tree.n_tokens != len(tokens):
            raise LengthMismatch(
                f"sentence {i}: tree has {tree.n_tokens} tokens but source line has {len(tokens)}"
            )
        examples.append(
            Example(
                id=i,
                source=source,
                target=target,
                source_tokens=tokens,
                tree=tree,
                embedding=embeddings[i] if embeddings is not None else None,
            )
        )
    return Corpus(examples=examples, vocab=vocab, embedding_dim=dim)


# ---------------------------------------------------------------------------
# Corpus bundles: a validated on-disk form produced by `synicl ingest`.
# Labels are stored as strings so that bundles ingested separately can be
# loaded later under one shared vocabulary.
# ---------------------------------------------------------------------------

BUNDLE_EXAMPLES = "examples.jsonl"
BUNDLE_VOCAB = "vocab.json"


def _tree_rows(tree: DepTree, vocab: LabelVocab) -> List[List[object]]:
    rows = []
    stack = [(tree.root, 0)]
    while stack:
        node, head = stack.pop()
        rows.append([node.token_index, node.form, head, vocab.labels[node.label]])
        for child in node.children:
            stack.append((child, node.token_index))
    rows.sort(key=lambda r: r[0])
    return rows


def save_bundle(corpus: Corpus, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, BUNDLE_EXAMPLES), "w", encoding="utf-8") as f:
        for ex in corpus.examples:
            record = {
                "id": ex.id,
                "source": ex.source,
                "target": ex.target,
                "tree": _tree_rows(ex.tree, corpus.vocab),
            }
            if ex.embedding is not None:
                record["embedding"] = [float(v) for v in ex.embedding]
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, BUNDLE_VOCAB), "w", encoding="utf-8") as f:
        json.dump({"labels": corpus.vocab.labels}, f, ensure_ascii=False)


def load_bundle(bundle_dir: str, vocab: Optional[LabelVocab] = None) -> Corpus:
    """Load a bundle written by save_bundle, extending `vocab` (shared across bundles)."""
    vocab = vocab if vocab is not None else LabelVocab()
    examples = []
    dim: Optional[int] = None
    with open(os.path.join(bundle_dir, BUNDLE_EXAMPLES), encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            block = "\n".join(
                f"{idx}\t{form}\t{head}\t{label}" for idx, form, head, label in record["tree"]
            )
            tree = _parse_block(block.split("\n"), vocab, record["id"])
            embedding = None
            if "embedding" in record:
                embedding = np.asarray(record["embedding"], dtype=np.float64)
                if dim is None:
                    dim = embedding.shape[0]
                elif embedding.shape[0] != dim:
                    raise DimensionMismatch(
                        f"{bundle_dir}: embedding dim {embedding.shape[0]} != {dim}"
                    )
            examples.append(
                Example(
                    id=record["id"],
                    source=record["source"],
                    target=record["target"],
                    source_tokens=record["source"].split(),
                    tree=tree,
                    embedding=embedding,
                )
            )
    return Corpus(examples=examples, vocab=vocab, embedding_dim=dim)


def content_hash(paths: Sequence[str]) -> str:
    """SHA-256 over the concatenated bytes of `paths` (manifest/corpus identity)."""
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            while True:
                chunk = f.read(1 << 20)
                if not chunk:
                    break
                h.update(chunk)
    return h.hexdigest()
