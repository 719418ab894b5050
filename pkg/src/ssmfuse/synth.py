"""Desk-scale two-modality datasets with controlled cross-modal structure.

A "video" is a sequence of ``frames`` noise vectors in which ``k_v`` frames
carry a prototype from a fixed random codebook. The "text" is the stub verb
question for a noun, tokenized and embedded through a frozen random table.

``factored``: the video encodes the verb label and the text the noun label.
``composed``: the video encodes a latent ``v`` and the verb label is
``(v + noun) mod n_verbs``, so neither modality alone predicts it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import binfmt
from .config import MODES, RunConfig
from .errors import ConfigError, SchemaError, ValidationError
from .qa import PAD_ID, Vocab, mask_question, stub_generate, tokenize

logger = logging.getLogger(__name__)

MAGIC = b"SSMF"
FORMAT_VERSION = 1

# fixed seeds: the codebook and embedding table are part of the task definition
_CODEBOOK_SEED = 0x5EED_C0DE
_EMBED_SEED = 0x5EED_E3B

VERB_WORDS = ("take", "put", "open", "close", "wash", "cut", "stir", "pour",
              "mix", "turn", "dry", "peel", "fill", "shake", "throw", "insert")
NOUN_WORDS = ("water", "pan", "knife", "plate", "cup", "bowl", "onion", "tap",
              "spoon", "lid", "board", "fridge", "bag", "bottle", "sponge", "towel")


def verb_names(n: int) -> list[str]:
    return [VERB_WORDS[i] if i < len(VERB_WORDS) else f"verb{i}" for i in range(n)]


def noun_names(n: int) -> list[str]:
    return [NOUN_WORDS[i] if i < len(NOUN_WORDS) else f"noun{i}" for i in range(n)]


@dataclass
class SynthSample:
    x_V: np.ndarray        # [F, Draw]
    tokens_T: np.ndarray   # [L] int ids
    verb_label: int
    noun_label: int
    v_latent: int          # class encoded in the video


@dataclass
class TaskAssets:
    """Everything shared by all samples of one configuration."""

    codebook: np.ndarray       # [n_verbs, raw_dim]
    vocab: Vocab
    embedding: np.ndarray      # [len(vocab), raw_dim], PAD row zero
    noun_tokens: np.ndarray    # [n_nouns, L]


def text_for_noun(noun: str, verb_hint: str) -> str:
    """The stub verb question about ``noun`` with any verb occurrence masked."""
    question_verb, _, _ = stub_generate("questions", verb_hint, noun)
    return mask_question(question_verb, verb_hint)


@lru_cache(maxsize=16)
def _assets(raw_dim: int, n_verbs: int, n_nouns: int, text_len: int) -> TaskAssets:
    rng = np.random.default_rng([_CODEBOOK_SEED, raw_dim, n_verbs])
    codebook = rng.normal(size=(n_verbs, raw_dim))
    verbs, nouns = verb_names(n_verbs), noun_names(n_nouns)
    # the question text never depends on the sampled verb; the first verb is
    # only a placeholder for the masking call
    texts = [text_for_noun(n, verbs[0]) for n in nouns]
    vocab = Vocab.from_texts(texts + verbs + nouns)
    erng = np.random.default_rng([_EMBED_SEED, raw_dim, len(vocab)])
    embedding = erng.normal(size=(len(vocab), raw_dim))
    embedding[PAD_ID] = 0.0
    noun_tokens = np.stack([tokenize(t, vocab, text_len) for t in texts])
    return TaskAssets(codebook, vocab, embedding, noun_tokens)


def task_assets(config: RunConfig) -> TaskAssets:
    return _assets(config.raw_dim, config.n_verbs, config.n_nouns, config.text_len)


def _sample_noun(rng: np.random.Generator, config: RunConfig) -> int:
    """Noun whose residue mod n_verbs is uniform (composed mode).

    Uniform residues keep the verb label independent of the text, which is
    what bounds unimodal accuracy at chance.
    """
    Vv, Vn = config.n_verbs, config.n_nouns
    r = int(rng.integers(min(Vv, Vn)))
    choices = np.arange(r, Vn, Vv)
    return int(choices[rng.integers(len(choices))])


def gen_sample(seed, config: RunConfig, assets: TaskAssets | None = None) -> SynthSample:
    """Deterministic sample for ``seed`` (an int or a SeedSequence)."""
    if config.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {config.mode!r}")
    assets = assets or task_assets(config)
    rng = np.random.default_rng(seed)
    v = int(rng.integers(config.n_verbs))
    if config.mode == "composed":
        if config.n_nouns < config.n_verbs:
            raise ConfigError("composed mode needs n_nouns >= n_verbs for uniform residues")
        n = _sample_noun(rng, config)
        verb_label = (v + n) % config.n_verbs
    else:
        n = int(rng.integers(config.n_nouns))
        verb_label = v
    x_V = config.noise * rng.normal(size=(config.frames, config.raw_dim))
    pos = rng.choice(config.frames, size=config.k_v, replace=False)
    x_V[pos] += assets.codebook[v]
    return SynthSample(x_V, assets.noun_tokens[n].copy(), verb_label, n, v)


@dataclass
class SynthDataset:
    x_V: np.ndarray      # [S, F, Draw]
    tokens: np.ndarray   # [S, L]
    verbs: np.ndarray    # [S]
    nouns: np.ndarray    # [S]
    ids: np.ndarray      # [S] sample index (seed component)
    is_val: np.ndarray   # [S] bool
    config_hash: str

    def __len__(self) -> int:
        return len(self.verbs)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val"):
            raise ValidationError(f"unknown split {name!r}")
        return np.flatnonzero(self.is_val if name == "val" else ~self.is_val)

    def text_features(self, idx: np.ndarray, config: RunConfig) -> np.ndarray:
        """[len(idx), L, Draw] frozen embeddings of the token ids."""
        return task_assets(config).embedding[self.tokens[idx]]

    def to_bytes(self) -> bytes:
        arrays = {"x_V": self.x_V, "tokens": self.tokens, "verbs": self.verbs, "nouns": self.nouns,
                  "ids": self.ids, "is_val": self.is_val.astype(np.int64)}
        return binfmt.pack(MAGIC, FORMAT_VERSION, self.config_hash, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> SynthDataset:
        version, h, arr = binfmt.unpack(blob, MAGIC)
        if version != FORMAT_VERSION:
            raise SchemaError(f"dataset format version {version} not supported (expected {FORMAT_VERSION})")
        return cls(arr["x_V"], arr["tokens"], arr["verbs"], arr["nouns"], arr["ids"],
                   arr["is_val"].astype(bool), h)

    def save(self, path: str | Path) -> None:
        binfmt.write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, config: RunConfig | None = None) -> SynthDataset:
        ds = cls.from_bytes(binfmt.read(path))
        if config is not None and ds.config_hash != config.data_hash():
            raise ValidationError(f"{path}: dataset was generated for a different configuration")
        return ds


def gen_split(seed: int, n: int, config: RunConfig) -> SynthDataset:
    """``n`` samples with per-sample seeds (seed, i); 10% held out for validation."""
    if n < 2:
        raise ValidationError("need at least 2 samples to split")
    assets = task_assets(config)
    samples = [gen_sample(np.random.SeedSequence([seed, i]), config, assets) for i in range(n)]
    n_val = max(1, int(round(0.1 * n)))
    order = np.random.default_rng(np.random.SeedSequence([seed, n, 0x5917])).permutation(n)
    is_val = np.zeros(n, dtype=bool)
    is_val[order[:n_val]] = True
    cfg_hash = config.replace(seed=seed, n_samples=n).data_hash()
    return SynthDataset(
        x_V=np.stack([s.x_V for s in samples]),
        tokens=np.stack([s.tokens_T for s in samples]),
        verbs=np.array([s.verb_label for s in samples], dtype=np.int64),
        nouns=np.array([s.noun_label for s in samples], dtype=np.int64),
        ids=np.arange(n, dtype=np.int64),
        is_val=is_val,
        config_hash=cfg_hash,
    )


def dataset_for(config: RunConfig) -> SynthDataset:
    """Load ``config.data`` if set, otherwise generate from the config."""
    if config.data:
        return SynthDataset.load(config.data, config)
    logger.info("generating %d %s samples (seed %d)", config.n_samples, config.mode, config.seed)
    return gen_split(config.seed, config.n_samples, config)
