"""Constrained option-letter scoring and log-probability ensembling.

A backend maps ``(prompt, letters)`` to one log-score per requested letter;
nothing outside the requested letters is ever reported, which is how the
next-token distribution is restricted to the answer options. Confidence is the
softmax of those scores at the predicted letter.
"""

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field

import httpx

from ._validation import check_letters, check_weights
from .exceptions import ProtocolError, ScoringError

DEFAULT_FLOOR = -30.0


def prompt_key(prompt):
    """Key used by table backends: SHA-256 hex digest of the UTF-8 prompt."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def softmax_confidence(logprobs, letter):
    top = max(logprobs.values())
    z = math.fsum(math.exp(v - top) for v in logprobs.values())
    return math.exp(logprobs[letter] - top) / z


@dataclass(frozen=True)
class OptionScores:
    item_id: str
    logprobs: dict
    predicted: str
    confidence: float
    backend: str = ""

    @classmethod
    def from_logprobs(cls, item_id, logprobs, backend=""):
        logprobs = {str(k): float(v) for k, v in logprobs.items()}
        if not logprobs:
            raise ValueError("no option scores")
        if not all(math.isfinite(v) for v in logprobs.values()):
            raise ValueError(f"non-finite option scores: {logprobs}")
        top = max(logprobs.values())
        predicted = min(l for l, v in logprobs.items() if v == top)
        return cls(item_id, logprobs, predicted, softmax_confidence(logprobs, predicted), backend)

    def to_dict(self):
        return {
            "item_id": self.item_id,
            "logprobs": self.logprobs,
            "predicted": self.predicted,
            "confidence": self.confidence,
            "backend": self.backend,
        }


class TableBackend:
    """Scores looked up by prompt hash from ``{sha256(prompt): {letter: score}}``."""

    kind = "table"

    def __init__(self, table, label="table"):
        self.table = table
        self.label = label

    @classmethod
    def from_file(cls, path, label=None):
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        return cls(table, label or "table")

    @classmethod
    def from_prompts(cls, prompt_scores, label="table"):
        return cls({prompt_key(p): dict(s) for p, s in prompt_scores.items()}, label)

    def score(self, prompt, letters):
        entry = self.table.get(prompt_key(prompt))
        if entry is None:
            raise ScoringError("prompt not found in score table")
        missing = [l for l in letters if l not in entry]
        if missing:
            raise ScoringError(f"score table has no entry for letters {missing}")
        return {l: float(entry[l]) for l in letters}


class HashBackend:
    """Deterministic pseudo-scores in [-10, 0) from a 64-bit hash of prompt and letter.

    Carries no knowledge; it exists for throughput and integration tests.
    """

    kind = "hash"

    def __init__(self, label="hash"):
        self.label = label

    def score(self, prompt, letters):
        out = {}
        for l in letters:
            h = hashlib.blake2b(f"{prompt}\x00{l}".encode("utf-8"), digest_size=8).digest()
            out[l] = -10.0 * int.from_bytes(h, "little") / 2.0**64
        return out


@dataclass(frozen=True)
class RemoteConfig:
    url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    letter_tokens: dict = field(default_factory=dict)
    top_k: int = 20
    floor: float = DEFAULT_FLOOR
    max_inflight: int = 4
    timeout: float = 30.0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def tokens_for(self, letter):
        return self.letter_tokens.get(letter, [letter])


class RemoteBackend:
    """OpenAI-compatible ``/v1/completions`` scorer reading top-k next-token log-probabilities.

    Letters whose tokens are absent from the returned top-k get ``floor``.
    """

    kind = "remote"

    def __init__(self, config, label=None):
        self.config = config
        self.label = label or f"remote:{config.model}"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers)
        self._slots = threading.BoundedSemaphore(max(1, config.max_inflight))

    def _request(self, prompt):
        body = {
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.config.top_k,
            "temperature": 0,
        }
        with self._slots:
            try:
                resp = self._http.post(self.config.url, json=body)
            except httpx.HTTPError as exc:
                raise ScoringError(f"request to {self.config.url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise ScoringError(f"{self.config.url} answered HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError:
            raise ProtocolError("response body is not JSON") from None

    def score(self, prompt, letters):
        payload = self._request(prompt)
        try:
            top = payload["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError("response lacks choices[0].logprobs.top_logprobs[0]") from None
        if not isinstance(top, dict):
            raise ProtocolError("top_logprobs entry is not an object")
        out = {}
        for l in letters:
            found = [float(top[t]) for t in self.config.tokens_for(l) if t in top]
            out[l] = max(found) if found else self.config.floor
        return out

    def close(self):
        self._http.close()


class EnsembleBackend:
    """Weighted mean of member backends' log-scores, letter by letter."""

    kind = "ensemble"

    def __init__(self, backends, weights=None, label=None):
        self.backends = list(backends)
        self.weights = check_weights(weights, len(self.backends))
        self.label = label or "ensemble(" + ",".join(b.label for b in self.backends) + ")"

    def score(self, prompt, letters):
        parts = [b.score(prompt, letters) for b in self.backends]
        return {l: math.fsum(w * p[l] for w, p in zip(self.weights, parts)) for l in letters}


def remote_scorer(config):
    if isinstance(config, dict):
        config = RemoteConfig.from_dict(config)
    return RemoteBackend(config)


def score_options(backend, prompt, letters, item_id=""):
    """Score ``letters`` as the next token after ``prompt``."""
    letters = check_letters(letters)
    try:
        raw = backend.score(prompt, letters)
    except ScoringError as exc:
        exc.item_id = item_id
        raise
    if set(raw) != set(letters):
        raise ScoringError(f"backend returned letters {sorted(raw)} for request {letters}", item_id)
    return OptionScores.from_logprobs(item_id, {l: raw[l] for l in letters}, backend.label)


def ensemble_scores(scores, weights=None):
    """Combine per-letter log-scores by weighted arithmetic mean."""
    scores = list(scores)
    weights = check_weights(weights, len(scores))
    letters = list(scores[0].logprobs)
    for s in scores[1:]:
        if set(s.logprobs) != set(letters):
            raise ValueError(f"letter sets differ: {sorted(s.logprobs)} vs {sorted(letters)}")
        if s.item_id != scores[0].item_id:
            raise ValueError(f"item ids differ: {s.item_id!r} vs {scores[0].item_id!r}")
    combined = {l: math.fsum(w * s.logprobs[l] for w, s in zip(weights, scores)) for l in letters}
    label = scores[0].backend if len(scores) == 1 else "ensemble"
    return OptionScores.from_logprobs(scores[0].item_id, combined, label)


def backend_from_spec(spec):
    """Build a backend from ``table:<path>``, ``hash[:label]`` or ``remote:<config.json>``."""
    kind, _, arg = spec.partition(":")
    if kind == "table":
        if not arg:
            raise ValueError("table backend needs a path: table:<scores.json>")
        return TableBackend.from_file(arg)
    if kind == "hash":
        return HashBackend(arg or "hash")
    if kind == "remote":
        if not arg:
            raise ValueError("remote backend needs a config file: remote:<config.json>")
        with open(arg, encoding="utf-8") as fh:
            return remote_scorer(json.load(fh))
    raise ValueError(f"unknown backend {spec!r}")
