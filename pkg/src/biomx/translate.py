"""Dataset translation through an OpenAI-compatible chat-completion endpoint.

Each item is sent as one request: a fixed instruction line followed by a JSON
object holding the item's context, question and options. The endpoint must
answer with a JSON object of the same shape. Answers are cached on disk per
(item id, language), so a rerun over a cached dataset makes no network calls.
"""

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import httpx
from sklearn.base import BaseEstimator, TransformerMixin

from .bench_data import with_language
from .exceptions import TransportError

log = logging.getLogger(__name__)

LANGUAGES = {
    "es": "Spanish",
    "de": "German",
    "pt": "Portuguese",
    "ru": "Russian",
    "fr": "French",
    "ar": "Arabic",
    "zh": "Chinese",
}
INSTRUCTION = (
    "Translate the following medical exam question to {language}; "
    "preserve meaning, keep option structure"
)
_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.S)


class MalformedResponse(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ChatClient:
    """Minimal client for ``POST {model, messages}`` returning the first choice's content."""

    def __init__(self, config):
        self.config = config
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers)

    def complete(self, content):
        body = {"model": self.config.model, "messages": [{"role": "user", "content": content}]}
        try:
            resp = self._http.post(self.config.url, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.config.url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"{self.config.url} answered HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise MalformedResponse("response is not a chat completion") from None

    def close(self):
        self._http.close()


def translation_payload(item):
    payload = {"question": item.question, "options": dict(item.options)}
    if item.context is not None:
        payload["context"] = item.context
    return payload


def translation_request(item, target_lang):
    instruction = INSTRUCTION.format(language=LANGUAGES.get(target_lang, target_lang))
    body = json.dumps(translation_payload(item), ensure_ascii=False, sort_keys=True)
    return f"{instruction}\n\n{body}"


def parse_translation(content, item):
    """Validate an endpoint answer against the source item's structure."""
    text = content.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1)
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        raise MalformedResponse("answer is not JSON") from None
    if not isinstance(data, dict) or not isinstance(data.get("question"), str):
        raise MalformedResponse("answer lacks a string 'question'")
    options = data.get("options")
    if not isinstance(options, dict) or sorted(options) != list(item.letters):
        raise MalformedResponse(f"answer options do not match letters {item.letters}")
    if not all(isinstance(v, str) for v in options.values()):
        raise MalformedResponse("option texts must be strings")
    if item.context is not None and not isinstance(data.get("context"), str):
        raise MalformedResponse("answer lacks the translated context")
    out = {"question": data["question"], "options": {k: options[k] for k in item.letters}}
    if item.context is not None:
        out["context"] = data["context"]
    return out


class TranslationCache:
    """One JSON file per (item id, language); writes are atomic renames."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, item_id, lang):
        digest = hashlib.sha256(item_id.encode("utf-8")).hexdigest()[:32]
        return self.root / lang / f"{digest}.json"

    def get(self, item_id, lang):
        p = self.path(item_id, lang)
        if not p.exists():
            return None
        entry = json.loads(p.read_text(encoding="utf-8"))
        if entry.get("id") != item_id:
            return None
        return entry["translation"]

    def put(self, item_id, lang, request, translation):
        p = self.path(item_id, lang)
        p.parent.mkdir(parents=True, exist_ok=True)
        entry = {"id": item_id, "language": lang, "request": request, "translation": translation}
        fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, p)


def _apply(item, translation, lang):
    return with_language(
        item,
        lang,
        question=translation["question"],
        options=tuple((l, translation["options"][l]) for l in item.letters),
        context=translation.get("context", item.context),
    )


class DatasetTranslator(TransformerMixin, BaseEstimator):
    """Translate items' question, options and context; letters, gold, id and split are kept.

    Items that fail (transport error, or malformed answers beyond
    ``max_retries`` retries) are skipped and listed in ``failures_``.
    """

    def __init__(
        self,
        target_lang="fr",
        endpoint=None,
        cache_dir="translation_cache",
        allowed_langs=None,
        max_retries=2,
        concurrency=4,
    ):
        self.target_lang = target_lang
        self.endpoint = endpoint
        self.cache_dir = cache_dir
        self.allowed_langs = allowed_langs
        self.max_retries = max_retries
        self.concurrency = concurrency

    def fit(self, X=None, y=None):
        allowed = self.allowed_langs if self.allowed_langs is not None else tuple(LANGUAGES)
        if self.target_lang not in allowed:
            raise ValueError(f"language {self.target_lang!r} not in allow-list {sorted(allowed)}")
        return self

    def _translate_one(self, item, cache, client_factory):
        lang = self.target_lang
        hit = cache.get(item.id, lang)
        if hit is not None:
            return _apply(item, hit, lang), None
        request = translation_request(item, lang)
        client = client_factory()
        last = None
        for _ in range(self.max_retries + 1):
            try:
                translation = parse_translation(client.complete(request), item)
            except MalformedResponse as exc:
                last = f"malformed response: {exc}"
                continue
            except TransportError as exc:
                return None, f"endpoint failure: {exc}"
            cache.put(item.id, lang, request, translation)
            return _apply(item, translation, lang), None
        return None, last

    def transform(self, X):
        self.fit()
        items = list(X)
        cache = TranslationCache(self.cache_dir)
        clients = []
        lock = threading.Lock()

        def client_factory():
            with lock:
                if not clients:
                    if self.endpoint is None:
                        raise TransportError("translation needs an endpoint (cache miss)")
                    clients.append(ChatClient(self.endpoint))
                return clients[0]

        def run(item):
            try:
                return self._translate_one(item, cache, client_factory)
            except TransportError as exc:
                return None, f"endpoint failure: {exc}"

        try:
            if self.concurrency and self.concurrency > 1:
                with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
                    results = list(pool.map(run, items))
            else:
                results = [run(item) for item in items]
        finally:
            for c in clients:
                c.close()
        self.failures_ = []
        out = []
        for item, (translated, error) in zip(items, results):
            if error is not None:
                log.warning("translation of %s skipped: %s", item.id, error)
                self.failures_.append((item.id, error))
            else:
                out.append(translated)
        return out


def translate_dataset(items, target_lang, endpoint, cache_dir, **kwargs):
    """Functional form of :class:`DatasetTranslator`; failures are logged and skipped."""
    return DatasetTranslator(target_lang, endpoint, cache_dir, **kwargs).fit_transform(items)
