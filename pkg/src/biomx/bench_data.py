"""Multiple-choice QA datasets: JSONL ingestion, few-shot sampling and prompt rendering."""

import json
import os
import string
from dataclasses import dataclass, replace

from ._prng import SplitMix64
from ._validation import check_seed
from .exceptions import DatasetRecordError

SPLITS = ("train", "validation", "test")
LETTERS = string.ascii_uppercase[:5]
PUBMEDQA_OPTIONS = (("A", "yes"), ("B", "no"), ("C", "maybe"))


@dataclass(frozen=True)
class McqaItem:
    id: str
    question: str
    options: tuple  # ((letter, text), ...) in letter order
    gold: str
    context: str = None
    split: str = "test"
    language: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "options", tuple((str(l), str(t)) for l, t in self.options))
        letters = self.letters
        if not 3 <= len(letters) <= 5:
            raise ValueError(f"item {self.id!r}: expected 3 to 5 options, got {len(letters)}")
        if list(letters) != list(LETTERS[: len(letters)]):
            raise ValueError(f"item {self.id!r}: option letters must run from A, got {letters}")
        if self.gold not in letters:
            raise ValueError(f"item {self.id!r}: gold {self.gold!r} not among options {letters}")
        if self.split not in SPLITS:
            raise ValueError(f"item {self.id!r}: unknown split {self.split!r}")

    @property
    def letters(self):
        return tuple(letter for letter, _ in self.options)

    def to_record(self):
        rec = {
            "id": self.id,
            "question": self.question,
            "options": dict(self.options),
            "gold": self.gold,
            "split": self.split,
            "language": self.language,
        }
        if self.context is not None:
            rec["context"] = self.context
        return rec

    @classmethod
    def from_record(cls, rec):
        options = rec["options"]
        if not isinstance(options, dict):
            raise ValueError("options must be an object mapping letters to text")
        return cls(
            id=str(rec["id"]),
            question=str(rec["question"]),
            options=tuple(sorted(options.items())),
            gold=rec["gold"],
            context=rec.get("context"),
            split=rec.get("split", "test"),
            language=rec.get("language", "en"),
        )


def parse_dataset(lines):
    items = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetRecordError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetRecordError("record must be a JSON object", lineno)
        missing = [k for k in ("id", "question", "options", "gold") if k not in rec]
        if missing:
            raise DatasetRecordError(f"missing fields {missing}", lineno)
        try:
            items.append(McqaItem.from_record(rec))
        except (TypeError, ValueError) as exc:
            raise DatasetRecordError(str(exc), lineno) from None
    return items


def load_dataset(path):
    """Read newline-delimited JSON records into :class:`McqaItem` objects, in file order."""
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_dataset(fh)


def dump_dataset(items, path):
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def sample_few_shots(train, k, seed):
    """Draw ``k`` distinct exemplars with a partial Fisher-Yates shuffle."""
    train = list(train)
    if isinstance(k, bool) or not isinstance(k, int) or k < 0:
        raise ValueError(f"k must be a non-negative integer, got {k!r}")
    if k > len(train):
        raise ValueError(f"cannot draw {k} shots from {len(train)} training items")
    rng = SplitMix64(check_seed(seed))
    idx = list(range(len(train)))
    n = len(idx)
    for i in range(k):
        j = i + int(rng.random() * (n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return [train[i] for i in idx[:k]]


@dataclass(frozen=True)
class PromptTemplate:
    """Format strings for one prompt style.

    ``question_block`` receives ``context``, ``question`` and ``options``;
    ``shot_block`` receives ``block``, ``answer_cue`` and ``gold``.
    """

    name: str
    preamble: str
    question_block: str
    answer_cue: str
    option_line: str = "({letter}) {text}\n"
    context_line: str = "{context}\n"
    shot_block: str = "{block}{answer_cue}{gold}\n\n"

    def block(self, item):
        ctx = "" if item.context is None else self.context_line.format(context=item.context)
        opts = "".join(self.option_line.format(letter=l, text=t) for l, t in item.options)
        return self.question_block.format(context=ctx, question=item.question, options=opts)


_MEDICAL_PREAMBLE = "The following are multiple choice questions (with answers) about medical knowledge.\n\n"
_TRUTHFUL_PREAMBLE = (
    "Please truthfully answer the following multiple-choice question. Please ensure that your "
    "choice is socially unbiased and positive. If you don't know the answer to a question, "
    "please don't share false information.\n\n"
)

TEMPLATES = {
    "mcqa-default": PromptTemplate(
        "mcqa-default", _MEDICAL_PREAMBLE, "{context}**Question:** {question}\n{options}", "**Answer:**("
    ),
    "truthfulqa-1": PromptTemplate(
        "truthfulqa-1", _MEDICAL_PREAMBLE, "{context}**Question:** {question}\n{options}", "**Answer:**("
    ),
    "truthfulqa-2": PromptTemplate(
        "truthfulqa-2", _TRUTHFUL_PREAMBLE, "{context}{question}\n{options}", "The answer is: ("
    ),
}


def get_template(name):
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown template {name!r}; expected one of {sorted(TEMPLATES)}") from None


def render_prompt(template, item, shots=()):
    """Preamble, answered exemplars, then ``item`` ending at the open answer cue."""
    if isinstance(template, str):
        template = get_template(template)
    parts = [template.preamble]
    for shot in shots:
        parts.append(
            template.shot_block.format(
                block=template.block(shot), answer_cue=template.answer_cue, gold=shot.gold
            )
        )
    parts.append(template.block(item))
    parts.append(template.answer_cue)
    return "".join(parts)


def pubmedqa_item(id, context, question, answer, split="test"):
    """Map a yes/no/maybe PubMedQA record onto options A/B/C."""
    gold = {text: letter for letter, text in PUBMEDQA_OPTIONS}[answer.lower()]
    return McqaItem(id, question, PUBMEDQA_OPTIONS, gold, context=context, split=split)


def with_language(item, language, **changes):
    return replace(item, language=language, **changes)
