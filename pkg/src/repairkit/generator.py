"""Candidate patch generation behind a minimal completion wire contract.

Request: ``{prompt, top_p, temperature, n, max_tokens, stop}``.
Response: ``{choices: [{text, sum_logprob}]}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .errors import BackendError, ProtocolError
from .promptgen import HINT_HEADER, PromptBundle, count_tokens

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "REPAIRKIT_ENDPOINT"
TOKEN_ENV = "REPAIRKIT_API_TOKEN"


@dataclass(frozen=True)
class SamplingParams:
    top_p: float = 1.0
    temperature: float = 0.7
    num_samples: int = 10
    max_generated_tokens: int = 1024
    stop: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")


@dataclass(frozen=True)
class CandidatePatch:
    text: str
    sum_logprob: float
    backend_id: str
    rank: int | None = None

    def to_json(self) -> dict:
        return {"text": self.text, "sum_logprob": self.sum_logprob, "backend_id": self.backend_id, "rank": self.rank}


class Backend(Protocol):
    backend_id: str

    def complete(self, request: dict) -> dict: ...


def build_request(prompt: str, params: SamplingParams) -> dict:
    return {
        "prompt": prompt,
        "top_p": params.top_p,
        "temperature": params.temperature,
        "n": params.num_samples,
        "max_tokens": params.max_generated_tokens,
        "stop": list(params.stop),
    }


def parse_choices(response: object) -> list[tuple[str, float]]:
    if not isinstance(response, dict) or not isinstance(response.get("choices"), list):
        raise ProtocolError("response must be an object with a 'choices' array")
    out = []
    for i, choice in enumerate(response["choices"]):
        if not isinstance(choice, dict) or not isinstance(choice.get("text"), str):
            raise ProtocolError(f"choice {i} has no string 'text'")
        lp = choice.get("sum_logprob")
        if isinstance(lp, bool) or not isinstance(lp, (int, float)) or not math.isfinite(lp) or lp > 0:
            raise ProtocolError(f"choice {i} has invalid 'sum_logprob': {lp!r}")
        out.append((choice["text"], float(lp)))
    return out


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def first_hint(prompt: str) -> str | None:
    """Text of the first retrieved hint in an assembled repair prompt."""
    head = HINT_HEADER + "\n"
    start = prompt.find(head)
    if start < 0:
        return None
    start += len(head)
    ends = [prompt.find(m, start) for m in (f"\n{HINT_HEADER}\n", "\n// Bug type: ")]
    ends = [e for e in ends if e >= 0]
    return prompt[start : min(ends)] if ends else prompt[start:]


def pseudo_logprob(text: str, position: int) -> float:
    """Deterministic stand-in for a sequence log-probability."""
    return -0.01 * count_tokens(text) - 0.5 * position


class MockBackend:
    """Deterministic backend for tests and offline runs.

    ``mode="echo_hint"`` answers with the first retrieved hint of the prompt;
    ``mode="fixtures"`` looks the prompt's SHA-256 up in a mapping of canned
    outputs (strings or ``{text, sum_logprob}`` objects); key ``"*"`` is a fallback.
    """

    def __init__(self, mode: str = "echo_hint", fixtures: dict | None = None, backend_id: str = "mock"):
        if mode not in ("echo_hint", "fixtures"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.fixtures = fixtures or {}
        self.backend_id = backend_id
        self.requests: list[dict] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike, mode: str = "fixtures") -> MockBackend:
        return cls(mode=mode, fixtures=json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, request: dict) -> dict:
        self.requests.append(request)
        prompt = request["prompt"]
        if self.mode == "echo_hint":
            hint = first_hint(prompt)
            outputs: list = [] if hint is None else [hint]
        else:
            outputs = self.fixtures.get(prompt_hash(prompt), self.fixtures.get("*", []))
        choices = []
        for i, out in enumerate(outputs[: request.get("n", len(outputs))]):
            if isinstance(out, dict):
                choices.append({"text": out["text"], "sum_logprob": out.get("sum_logprob", pseudo_logprob(out["text"], i))})
            else:
                choices.append({"text": out, "sum_logprob": pseudo_logprob(out, i)})
        return {"choices": choices}


class HttpBackend:
    """Completion endpoint speaking the wire contract over HTTP(S)."""

    def __init__(
        self,
        url: str | None = None,
        token: str | None = None,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
        backend_id: str | None = None,
    ):
        self.url = url or os.environ.get(ENDPOINT_ENV)
        if not self.url:
            raise BackendError(f"no endpoint configured (set {ENDPOINT_ENV})")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.retries = retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.backend_id = backend_id or self.url

    def complete(self, request: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=request, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as e:
                last = e
                logger.warning("backend attempt %d failed: %s", attempt + 1, e)
                continue
            if resp.status_code >= 500:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"backend rejected request: HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError:
                raise ProtocolError("backend response is not JSON") from None
        raise BackendError(f"backend unreachable after {self.retries} retries: {last}")


class Limited:
    """Caps concurrent calls into a backend."""

    def __init__(self, backend: Backend, limit: int = 4):
        self.backend = backend
        self.backend_id = backend.backend_id
        self._sem = threading.BoundedSemaphore(limit)

    def complete(self, request: dict) -> dict:
        with self._sem:
            return self.backend.complete(request)


def generate_candidates(
    backend: Backend, prompt: PromptBundle | str, params: SamplingParams | None = None
) -> list[CandidatePatch]:
    params = params or SamplingParams()
    text = prompt.assembled_text if isinstance(prompt, PromptBundle) else prompt
    request = build_request(text, params)
    logger.debug("request %s to %s", prompt_hash(text)[:12], backend.backend_id)
    response = backend.complete(request)
    choices = parse_choices(response)[: params.num_samples]
    logger.debug("response: %d choice(s)", len(choices))
    return [CandidatePatch(t, lp, backend.backend_id) for t, lp in choices]


def rank_candidates(candidates: Sequence[CandidatePatch]) -> list[CandidatePatch]:
    """Deduplicate exact texts (keeping the higher log-prob), sort descending, rank from 1."""
    best: dict[str, int] = {}
    for i, c in enumerate(candidates):
        j = best.get(c.text)
        if j is None or c.sum_logprob > candidates[j].sum_logprob:
            best[c.text] = i
    survivors = sorted(best.values())
    ordered = sorted(survivors, key=lambda i: -candidates[i].sum_logprob)
    return [replace(candidates[i], rank=r) for r, i in enumerate(ordered, start=1)]
