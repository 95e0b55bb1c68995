"""Chat-completions HTTP client with retries, plus a resumable batch runner.

Every request is sent with temperature 0.0 and no sampling options; the
temperature is a module constant, not a parameter, so no call site can turn
sampling back on. Batch runs journal one JSON line per query as soon as it
finishes; a rerun skips queries whose (query id, prompt fingerprint) already
has a successful journal entry, so interrupted runs resume where they left
off and edited prompts are re-executed.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import requests

from .pipeline import SelectionResult, assemble_examples
from .prompt import ChatMessage, build_chat_prompt, build_completion_prompt, extract_correction_flagged
from .treebank import Corpus

TEMPERATURE = 0.0
RETRYABLE_STATUS = {429, 500, 502, 503, 504}

PromptLike = Union[str, Sequence[ChatMessage], Sequence[dict]]


class LlmClientError(RuntimeError):
    pass


class TransportError(LlmClientError):
    pass


class AuthFailure(LlmClientError):
    pass


class MalformedResponse(LlmClientError):
    pass


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 0.5
    jobs: int = 4  # in-flight request cap

    @property
    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) or None


@dataclass
class RunRecord:
    query_id: int
    fingerprint: str
    raw_output: str
    correction: str
    latency_ms: float
    retry_count: int
    error: Optional[str] = None
    flag: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "fingerprint": self.fingerprint,
            "raw_output": self.raw_output,
            "correction": self.correction,
            "latency_ms": self.latency_ms,
            "retry_count": self.retry_count,
            "error": self.error,
            "flag": self.flag,
        }


def _as_messages(prompt: PromptLike) -> List[dict]:
    if isinstance(prompt, str):
        # flat completion prompts travel as a single user message
        return [{"role": "user", "content": prompt}]
    out = []
    for msg in prompt:
        if isinstance(msg, ChatMessage):
            out.append(msg.as_dict())
        else:
            out.append({"role": msg["role"], "content": msg["content"]})
    return out


def fingerprint(prompt: PromptLike) -> str:
    """Stable hash of the wire-level message payload."""
    payload = json.dumps(_as_messages(prompt), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _complete_with_stats(config: EndpointConfig, prompt: PromptLike) -> Tuple[str, int]:
    url = config.base_url.rstrip("/") + "/chat/completions"
    body = {
        "model": config.model,
        "messages": _as_messages(prompt),
        "temperature": TEMPERATURE,
    }
    headers = {}
    key = config.api_key
    if key:
        headers["Authorization"] = f"Bearer {key}"

    last_error: Optional[str] = None
    retries = 0
    for attempt in range(config.max_retries + 1):
        if attempt > 0:
            time.sleep(config.retry_backoff * (2 ** (attempt - 1)))
            retries = attempt
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=config.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            continue
        if resp.status_code in (401, 403):
            raise AuthFailure(f"HTTP {resp.status_code} from {url}")
        if resp.status_code in RETRYABLE_STATUS:
            last_error = f"HTTP {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body from {url}: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponse(f"non-string content in response from {url}")
        return content, retries
    raise TransportError(
        f"request to {url} failed after {config.max_retries} retries (last: {last_error})"
    )


def complete(config: EndpointConfig, prompt: PromptLike) -> str:
    """Return the model text for `prompt`, retrying transient failures."""
    text, _ = _complete_with_stats(config, prompt)
    return text


def load_journal(path: str) -> Dict[Tuple[int, str], RunRecord]:
    """Read an existing journal; the last record per (query id, fingerprint) wins."""
    records: Dict[Tuple[int, str], RunRecord] = {}
    if not os.path.exists(path):
        return records
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            rec = RunRecord(
                query_id=data["query_id"],
                fingerprint=data["fingerprint"],
                raw_output=data.get("raw_output", ""),
                correction=data.get("correction", ""),
                latency_ms=data.get("latency_ms", 0.0),
                retry_count=data.get("retry_count", 0),
                error=data.get("error"),
                flag=data.get("flag"),
            )
            records[(rec.query_id, rec.fingerprint)] = rec
    return records


@dataclass
class _Task:
    query_id: int
    prompt: PromptLike
    fingerprint: str
    test_source: str
    cached: Optional[RunRecord] = None


def build_prompt_for_selection(
    result: SelectionResult,
    train_corpus: Corpus,
    test_source: str,
    style: str,
    most_similar_last: bool = False,
) -> PromptLike:
    pairs = assemble_examples(result, train_corpus, most_similar_last=most_similar_last)
    if style == "completion":
        return build_completion_prompt(pairs, test_source)
    if style == "chat":
        return build_chat_prompt(pairs, test_source)
    raise ValueError(f"unknown prompt style {style!r}")


def run_batch(
    config: EndpointConfig,
    selections: Sequence[SelectionResult],
    train_corpus: Corpus,
    queries: Corpus,
    style: str,
    journal_path: str,
    most_similar_last: bool = False,
    jobs: Optional[int] = None,
) -> List[RunRecord]:
    """Execute one request per selection, journaling incrementally.

    Results come back in input order regardless of completion order. Queries
    with a successful journaled record for the same prompt fingerprint are
    skipped; errored records are retried. Per-query failures are journaled
    (with the test source as the fallback correction) and the batch goes on.
    """
    by_id = {ex.id: ex for ex in queries.examples}
    existing = load_journal(journal_path)

    tasks: List[_Task] = []
    for result in selections:
        query = by_id.get(result.query_id)
        if query is None:
            raise KeyError(f"selection references unknown query id {result.query_id}")
        prompt = build_prompt_for_selection(
            result, train_corpus, query.source, style, most_similar_last
        )
        fp = fingerprint(prompt)
        cached = existing.get((result.query_id, fp))
        if cached is not None and cached.error is not None:
            cached = None  # retry failures
        tasks.append(_Task(result.query_id, prompt, fp, query.source, cached))

    journal_lock = threading.Lock()
    os.makedirs(os.path.dirname(os.path.abspath(journal_path)), exist_ok=True)
    journal = open(journal_path, "a", encoding="utf-8")

    def execute(task: _Task) -> RunRecord:
        if task.cached is not None:
            return task.cached
        start = time.monotonic()
        try:
            raw, retries = _complete_with_stats(config, task.prompt)
            correction, flag = extract_correction_flagged(raw, task.test_source)
            record = RunRecord(
                query_id=task.query_id,
                fingerprint=task.fingerprint,
                raw_output=raw,
                correction=correction,
                latency_ms=(time.monotonic() - start) * 1000.0,
                retry_count=retries,
                flag=flag,
            )
        except LlmClientError as exc:
            record = RunRecord(
                query_id=task.query_id,
                fingerprint=task.fingerprint,
                raw_output="",
                correction=task.test_source,
                latency_ms=(time.monotonic() - start) * 1000.0,
                retry_count=config.max_retries,
                error=f"{type(exc).__name__}: {exc}",
            )
        with journal_lock:
            journal.write(json.dumps(record.as_dict(), ensure_ascii=False) + "\n")
            journal.flush()
        return record

    try:
        workers = jobs if jobs is not None else config.jobs
        if workers <= 1:
            records = [execute(t) for t in tasks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(execute, tasks))
    finally:
        journal.close()
    return records
