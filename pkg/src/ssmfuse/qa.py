"""Question-generation data pipeline.

Two prompting stages turn an action narration into an enriched description
and then into a verb question and a noun question. Answers leaking into the
opposite question are replaced by ``<MASK>`` when a corpus is loaded for
training. A deterministic stub stands in for the language model unless an
API key is configured.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import re
import string
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from .errors import SchemaError, SsmfuseError, ValidationError

logger = logging.getLogger(__name__)

MASK = "<MASK>"
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
API_KEY_ENV = "SSMFUSE_API_KEY"
API_URL_ENV = "SSMFUSE_API_URL"

ENRICH_TEMPLATE = (
    "You are given a short narration of an action recorded from a first-person camera in a kitchen.\n"
    "Narration: \"{narration}\"\n"
    "Rephrase the narration as one or two sentences that describe the action in detail: "
    "what the person is handling, how, and for what purpose. Reply with the description only."
)

QUESTION_TEMPLATE = (
    "The action described above has the verb \"{verb}\" and the noun \"{noun}\".\n"
    "Using the description, write two distinct questions about the action, one targeting the verb "
    "and the other the noun. The answer to the first question must be the verb and the answer to the "
    "second must be the noun.\n"
    "Reply in exactly two lines:\n"
    "VERB_QUESTION: <question>\n"
    "NOUN_QUESTION: <question>"
)

STUB_QUESTION_VERB = "What should you do to the {noun} here?"
STUB_QUESTION_NOUN = "What is being {verb}-ed in this scene?"
STUB_DESCRIPTION = "A person is about to {verb} the {noun}."


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class QaRecord:
    id: str
    narration: str
    verb: str
    noun: str
    description: str
    question_verb: str
    question_noun: str
    answer_verb: str
    answer_noun: str

    def validate(self, strict: bool = False) -> None:
        """Raise :class:`ValidationError` if an invariant is broken.

        ``strict`` additionally requires the questions to be leak-free, i.e.
        already masked for training.
        """
        for f in dataclasses.fields(self):
            if not isinstance(getattr(self, f.name), str):
                raise SchemaError(f"field {f.name!r} must be a string")
        if self.answer_verb != self.verb:
            raise ValidationError(f"answer_verb {self.answer_verb!r} != verb {self.verb!r}")
        if self.answer_noun != self.noun:
            raise ValidationError(f"answer_noun {self.answer_noun!r} != noun {self.noun!r}")
        if strict:
            if contains_term(self.question_noun, self.verb):
                raise ValidationError(f"question_noun contains the verb {self.verb!r} unmasked")
            if contains_term(self.question_verb, self.noun):
                raise ValidationError(f"question_verb contains the noun {self.noun!r} unmasked")

    def masked(self) -> QaRecord:
        """Training view: the verb hidden in the noun question and vice versa."""
        return dataclasses.replace(
            self,
            question_noun=mask_question(self.question_noun, self.verb),
            question_verb=mask_question(self.question_verb, self.noun),
        )


QA_FIELDS = tuple(f.name for f in dataclasses.fields(QaRecord))


# ---------------------------------------------------------------- prompts


def _placeholders(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


def render_template(template: str, **fields: str) -> str:
    """Fill every named placeholder; missing or blank values are rejected."""
    needed = _placeholders(template)
    missing = sorted(n for n in needed if n not in fields)
    if missing:
        raise ValidationError(f"template placeholders left unfilled: {missing}")
    for name in needed:
        value = fields[name]
        if not isinstance(value, str) or not value.strip():
            raise ValidationError(f"field {name!r} must be a non-empty string")
    return template.format(**{n: fields[n].strip() for n in needed})


def build_prompts(narration: str, verb: str, noun: str) -> tuple[str, str]:
    """Return (enrich_prompt, question_prompt) for one narration.

    The question prompt is sent in the same conversation as the enrichment
    reply, so it refers to "the description above" rather than embedding it.
    """
    for name, value in (("narration", narration), ("verb", verb), ("noun", noun)):
        if not isinstance(value, str) or not value.strip():
            raise ValidationError(f"{name} must be a non-empty string")
    return (render_template(ENRICH_TEMPLATE, narration=narration),
            render_template(QUESTION_TEMPLATE, verb=verb, noun=noun))


def stub_generate(prompt_kind: str, verb: str, noun: str) -> tuple[str, str, str]:
    """Deterministic offline stand-in for the language model.

    Returns (question_verb, question_noun, description); ``prompt_kind`` must
    name one of the two stages.
    """
    if prompt_kind not in ("enrich", "questions"):
        raise ValidationError(f"unknown prompt kind {prompt_kind!r}")
    return (STUB_QUESTION_VERB.format(noun=noun), STUB_QUESTION_NOUN.format(verb=verb),
            STUB_DESCRIPTION.format(verb=verb, noun=noun))


# ---------------------------------------------------------------- masking


def surface_forms(word: str) -> set[str]:
    """The word plus its s/es, ing and ed forms (with the usual spelling rules)."""
    w = word.lower()
    forms = {w, w + "s", w + "es", w + "ing", w + "ed"}
    if w.endswith("e"):
        forms |= {w[:-1] + "ing", w + "d"}
    if len(w) > 1 and w.endswith("y") and w[-2] not in "aeiou":
        forms |= {w[:-1] + "ies", w[:-1] + "ied"}
    if len(w) >= 3 and w[-1] not in "aeiouwxy" and w[-2] in "aeiou" and w[-3] not in "aeiou":
        forms |= {w + w[-1] + "ing", w + w[-1] + "ed"}
    return forms


@lru_cache(maxsize=4096)
def _term_pattern(term: str) -> re.Pattern:
    words = term.lower().split()
    if not words:
        raise ValidationError("mask term must be non-empty")
    head = [re.escape(w) for w in words[:-1]]
    tail = "(?:" + "|".join(re.escape(f) for f in sorted(surface_forms(words[-1]), key=len, reverse=True)) + ")"
    body = r"\s+".join(head + [tail])
    return re.compile(rf"(?<!\w){body}(?!\w)", re.IGNORECASE)


def mask_question(question: str, term: str) -> str:
    """Replace whole-word occurrences of ``term`` (and its inflections) by ``<MASK>``.

    Existing ``<MASK>`` tokens are left alone, which makes the operation
    idempotent.
    """
    if not term or not term.strip():
        raise ValidationError("mask term must be non-empty")
    pattern = _term_pattern(term.strip())
    parts = question.split(MASK)
    return MASK.join(pattern.sub(MASK, p) for p in parts)


def contains_term(text: str, term: str) -> bool:
    """True if any surface form of ``term`` occurs outside ``<MASK>`` tokens."""
    pattern = _term_pattern(term.strip())
    return any(pattern.search(p) for p in text.split(MASK))


# ---------------------------------------------------------------- tokens

_TOKEN_RE = re.compile(r"<mask>|[a-z0-9]+")


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation; ``<MASK>`` stays whole."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Token/id map with reserved ids 0 PAD, 1 UNK, 2 MASK."""

    RESERVED = ("<pad>", "<unk>", "<mask>")

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(self.RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> Vocab:
        tokens = sorted({t for text in texts for t in normalize(text)} - set(cls.RESERVED))
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token.lower(), UNK_ID)

    def token(self, idx: int) -> str:
        if idx == MASK_ID:
            return MASK
        return self.itos[idx]


def tokenize(text: str, vocab: Vocab, length: int) -> np.ndarray:
    """Ids of the normalized tokens, truncated or PAD-filled to exactly ``length``."""
    if length < 1:
        raise ValidationError("token length must be positive")
    ids = [vocab.id(t) for t in normalize(text)][:length]
    out = np.full(length, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.token(int(i)) for i in ids if int(i) != PAD_ID)


# ---------------------------------------------------------------- file io


def write_records(path: str | Path, records: Iterable[QaRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), ensure_ascii=False) + "\n")
            n += 1
    return n


def iter_records(path: str | Path, strict: bool = False) -> Iterator[QaRecord]:
    """Stream records from a JSONL file, validating each one."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            missing = [f for f in QA_FIELDS if f not in obj]
            if missing:
                raise SchemaError(f"{path}:{lineno}: missing field {missing[0]!r}")
            extra = sorted(set(obj) - set(QA_FIELDS))
            if extra:
                raise SchemaError(f"{path}:{lineno}: unknown field {extra[0]!r}")
            rec = QaRecord(**{f: obj[f] for f in QA_FIELDS})
            try:
                rec.validate(strict=strict)
            except ValidationError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
            yield rec


def read_records(path: str | Path, strict: bool = False) -> list[QaRecord]:
    return list(iter_records(path, strict=strict))


def load_training_corpus(path: str | Path) -> list[QaRecord]:
    """Read a corpus and apply leak masking, the form used for training."""
    return [rec.masked() for rec in iter_records(path)]


@dataclass(frozen=True)
class Narration:
    id: str
    narration: str
    verb: str
    noun: str


def read_narrations(path: str | Path) -> list[Narration]:
    """CSV with header ``id,narration,verb,noun``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = ("id", "narration", "verb", "noun")
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in cols):
            raise SchemaError(f"{path}: header must contain {', '.join(cols)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            for c in cols:
                if not (row.get(c) or "").strip():
                    raise SchemaError(f"{path}:{lineno}: empty field {c!r}")
            rows.append(Narration(*(row[c].strip() for c in cols)))
    return rows


# ---------------------------------------------------------------- clients


class GenerationClient(Protocol):
    """Anything that can answer a chat-style conversation with text."""

    def complete(self, messages: list[dict]) -> str: ...


class StubClient:
    """Answers both prompting stages from the fixed stub templates."""

    def __init__(self):
        self.calls = 0

    def complete(self, messages: list[dict]) -> str:
        self.calls += 1
        ctx = messages[-1].get("meta", {})
        qv, qn, desc = stub_generate(ctx.get("kind", "questions"), ctx["verb"], ctx["noun"])
        if ctx.get("kind") == "enrich":
            return desc
        return f"VERB_QUESTION: {qv}\nNOUN_QUESTION: {qn}"


class HttpGenerationClient:
    """Chat-completions client with retries, a timeout and an in-flight limit."""

    def __init__(self, api_key: str, url: str = "https://api.openai.com/v1/chat/completions",
                 model: str = "gpt-4o", timeout: float = 30.0, retries: int = 3, backoff: float = 2.0,
                 max_in_flight: int = 1):
        self.api_key = api_key
        self.url = url
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, messages: list[dict]) -> str:
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": 0.0,
        }).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST", headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {self.api_key}",
        })
        last: Exception | None = None
        with self._slots:
            for attempt in range(self.retries + 1):
                try:
                    with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                        payload = json.loads(resp.read().decode("utf-8"))
                    return payload["choices"][0]["message"]["content"].strip()
                except (urllib.error.URLError, TimeoutError, KeyError, json.JSONDecodeError) as exc:
                    last = exc
                    logger.warning("generation request failed (attempt %d): %s", attempt + 1, exc)
                    if attempt < self.retries:
                        time.sleep(self.backoff ** attempt)
        raise SsmfuseError(f"generation failed after {self.retries + 1} attempts: {last}")


def default_client() -> GenerationClient:
    key = os.environ.get(API_KEY_ENV)
    if key:
        return HttpGenerationClient(key, url=os.environ.get(API_URL_ENV, "https://api.openai.com/v1/chat/completions"))
    return StubClient()


_QUESTION_LINE = re.compile(r"^\s*(VERB|NOUN)_QUESTION\s*:\s*(.+?)\s*$", re.MULTILINE)


def parse_questions(reply: str) -> tuple[str, str]:
    found = {kind: text for kind, text in _QUESTION_LINE.findall(reply)}
    if "VERB" not in found or "NOUN" not in found:
        raise ValidationError(f"could not parse two questions from reply: {reply!r}")
    return found["VERB"], found["NOUN"]


def generate_record(item: Narration, client: GenerationClient) -> QaRecord:
    enrich, ask = build_prompts(item.narration, item.verb, item.noun)
    meta = {"verb": item.verb, "noun": item.noun}
    convo = [{"role": "user", "content": enrich, "meta": {**meta, "kind": "enrich"}}]
    description = client.complete(convo).strip()
    convo += [{"role": "assistant", "content": description},
              {"role": "user", "content": ask, "meta": {**meta, "kind": "questions"}}]
    q_verb, q_noun = parse_questions(client.complete(convo))
    return QaRecord(item.id, item.narration, item.verb, item.noun, description, q_verb, q_noun,
                    item.verb, item.noun)


def run_pipeline(items: Iterable[Narration], client: GenerationClient | None = None,
                 training: bool = False) -> list[QaRecord]:
    """Generate one record per narration; ``training`` applies leak masking."""
    client = client or default_client()
    records = [generate_record(it, client) for it in items]
    return [r.masked() for r in records] if training else records
