"""Shared builders: hand-built trees, random trees, synthetic corpora, mock endpoint."""

import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from synicl.treebank import Corpus, DepNode, DepTree, Example, LabelVocab


# ---------------------------------------------------------------------------
# tree builders
# ---------------------------------------------------------------------------

def build_tree(spec, vocab, sentence_id=0):
    """Build a DepTree from nested (label, [children...]) tuples.

    Token indices are assigned in pre-order, so sibling order is preserved.
    """
    counter = [0]

    def build(node_spec):
        label, child_specs = node_spec
        counter[0] += 1
        node = DepNode(token_index=counter[0], form=f"w{counter[0]}", label=vocab.add(label))
        node.children = [build(c) for c in child_specs]
        return node

    root = build(spec)
    return DepTree(root=root, n_tokens=counter[0], sentence_id=sentence_id)


def leaf(label):
    return (label, [])


def node(label, *children):
    return (label, list(children))


def random_tree_spec(rng, n_nodes, labels):
    """Random attachment tree: node i hangs off a uniformly random earlier node."""
    children = [[] for _ in range(n_nodes)]
    for i in range(1, n_nodes):
        children[rng.randrange(i)].append(i)
    node_labels = [rng.choice(labels) for _ in range(n_nodes)]

    def build(i):
        return (node_labels[i], [build(c) for c in children[i]])

    return build(0)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

DEP_LABELS = [
    "Root", "punct", "case", "det", "nsubj", "advmod", "obj", "obl", "amod",
    "compound", "conj", "mark", "cc", "aux", "nmod", "cop", "xcomp", "ccomp",
    "advcl", "acl", "nummod", "expl", "appos", "fixed", "flat", "iobj",
    "csubj", "parataxis", "discourse", "vocative", "list", "orphan", "goeswith",
    "reparandum", "dep", "acl:relcl", "aux:pass", "nsubj:pass", "obl:tmod",
    "compound:prt", "det:predet", "nmod:poss", "S", "R", "M",
]

_WORDS = [f"word{i}" for i in range(6000)]
_WORD_CUM = None


def _word_cum_weights():
    global _WORD_CUM
    if _WORD_CUM is None:
        total = 0.0
        cum = []
        for rank in range(len(_WORDS)):
            total += 1.0 / (rank + 1.0)
            cum.append(total)
        _WORD_CUM = cum
    return _WORD_CUM


def make_synth_corpus(n_examples, seed=0, min_tokens=3, max_tokens=40, embedding_dim=None,
                      vocab=None, id_offset=0):
    """Fast in-memory corpus with random-attachment trees and Zipf-ish words."""
    rng = random.Random(seed)
    np_rng = np.random.default_rng(seed)
    vocab = vocab if vocab is not None else LabelVocab()
    root_label = vocab.add("Root")
    label_ids = [vocab.add(lb) for lb in DEP_LABELS]
    # skew toward frequent relations, keep error labels rarer
    label_weights = [1.0 / (r + 2.0) for r in range(len(label_ids))]

    examples = []
    for ex_id in range(id_offset, id_offset + n_examples):
        n = rng.randint(min_tokens, max_tokens)
        words = rng.choices(_WORDS, cum_weights=_word_cum_weights(), k=n)
        children = [[] for _ in range(n)]
        for i in range(1, n):
            children[rng.randrange(i)].append(i)
        labels = rng.choices(label_ids, weights=label_weights, k=n)
        nodes = [
            DepNode(token_index=i + 1, form=words[i],
                    label=(root_label if i == 0 else labels[i]))
            for i in range(n)
        ]
        for i, kids in enumerate(children):
            nodes[i].children = [nodes[c] for c in kids]
        tree = DepTree(root=nodes[0], n_tokens=n, sentence_id=ex_id)
        source = " ".join(words)
        # target: drop or duplicate one word now and then
        target_words = list(words)
        roll = rng.random()
        if roll < 0.3 and n > 3:
            del target_words[rng.randrange(n)]
        elif roll < 0.5:
            pos = rng.randrange(n)
            target_words.insert(pos, rng.choice(_WORDS[:200]))
        embedding = None
        if embedding_dim:
            embedding = np_rng.normal(size=embedding_dim)
        examples.append(
            Example(id=ex_id, source=source, target=" ".join(target_words),
                    source_tokens=words, tree=tree, embedding=embedding)
        )
    return Corpus(examples=examples, vocab=vocab, embedding_dim=embedding_dim)


@pytest.fixture(scope="session")
def corpus_35k():
    return make_synth_corpus(35_000, seed=7, min_tokens=3, max_tokens=40)


# ---------------------------------------------------------------------------
# mock chat-completions endpoint
# ---------------------------------------------------------------------------

class MockEndpoint:
    """Local HTTP endpoint speaking the chat-completions JSON shape.

    `reply_fn(body) -> str` produces the assistant text; `status_plan` is a
    list of HTTP statuses consumed one per request before replies start
    (e.g. [429, 429] to fail twice). All request bodies are captured.
    """

    def __init__(self, reply_fn=None, status_plan=None, raw_body=None):
        self.reply_fn = reply_fn or (lambda body: "ok")
        self.status_plan = list(status_plan or [])
        self.raw_body = raw_body
        self.requests = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 - http.server API
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with outer._lock:
                    outer.requests.append(body)
                    status = outer.status_plan.pop(0) if outer.status_plan else 200
                if status != 200:
                    self.send_response(status)
                    self.end_headers()
                    return
                if outer.raw_body is not None:
                    payload = outer.raw_body
                else:
                    reply = outer.reply_fn(body)
                    payload = json.dumps(
                        {"choices": [{"message": {"role": "assistant", "content": reply}}]}
                    ).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_endpoint():
    servers = []

    def make(**kwargs):
        server = MockEndpoint(**kwargs)
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.close()


def echo_target_reply(pairs):
    """reply_fn that answers each request with the target of the quoted source."""
    lookup = dict(pairs)

    def reply(body):
        last_user = [m for m in body["messages"] if m["role"] == "user"][-1]["content"]
        start = last_user.rfind("<erroneous sentence>") + len("<erroneous sentence>")
        end = last_user.rfind("</erroneous sentence>")
        source = last_user[start:end].strip()
        return f"<corrected sentence> {lookup[source]} </corrected sentence>"

    return reply
