"""Character-level corpus ingestion and packing, plus a synthetic desk corpus."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import Vocabulary

log = logging.getLogger(__name__)

SEPARATOR = "¶"  # end-of-document marker between packed documents
UNK = "¿"


class CorpusError(ValueError):
    pass


@dataclass
class Dataset:
    vocab: Vocabulary
    sequences: np.ndarray  # (N, L) int64
    unk_count: int = 0

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x00".join(self.vocab.symbols).encode("utf-8"))
        h.update(np.ascontiguousarray(self.sequences).tobytes())
        return h.hexdigest()

    def split(self, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        """Last ``val_fraction`` of the packed sequences is held out."""
        n = len(self.sequences)
        n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
        return self.sequences[: n - n_val], self.sequences[n - n_val:]


def split_documents(text: str) -> list[str]:
    """Blank lines separate documents; newlines inside a document become spaces."""
    docs = re.split(r"\n[ \t]*\n+", text.replace("\r\n", "\n"))
    out = []
    for d in docs:
        d = re.sub(r"\s*\n\s*", " ", d.strip("\n"))
        if d:
            out.append(d)
    return out


def build_vocab(stream: str, vocab_cap: int | None = None) -> tuple[Vocabulary, str, int]:
    counts = Counter(stream)
    counts.pop(UNK, None)
    chars = sorted(counts)
    unk = 0
    if vocab_cap is not None and len(chars) + 1 > vocab_cap:
        # MASK and UNK take two slots
        keep = {c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: vocab_cap - 2]}
        if SEPARATOR in counts:
            keep.add(SEPARATOR)
        dropped = set(chars) - keep
        unk = sum(counts[c] for c in dropped)
        stream = "".join(UNK if c in dropped else c for c in stream)
        chars = sorted(set(stream))
    elif UNK in stream:
        chars = sorted(set(stream))
    return Vocabulary(tuple(chars)), stream, unk


def ingest_text(text: str, length: int, vocab_cap: int | None = None) -> Dataset:
    if length < 1:
        raise CorpusError("sequence length must be positive")
    text = text.replace(SEPARATOR, UNK)
    docs = split_documents(text)
    if not docs:
        raise CorpusError("corpus is empty")
    stream = SEPARATOR.join(docs)
    vocab, stream, unk = build_vocab(stream, vocab_cap)
    if unk:
        log.warning("replaced %d out-of-vocabulary characters with UNK", unk)
    ids = vocab.encode(stream)
    n = len(ids) // length
    if n == 0:
        raise CorpusError(f"corpus has {len(ids)} characters, fewer than one sequence of {length}")
    return Dataset(vocab, ids[: n * length].reshape(n, length), unk)


def ingest_corpus(path, length: int, vocab_cap: int | None = None) -> Dataset:
    """Read a UTF-8 text file and pack it into fixed-length character sequences."""
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise CorpusError(f"{path} is empty")
    return ingest_text(raw.decode("utf-8"), length, vocab_cap)


# A small probabilistic grammar producing English-like prose. Used to build the
# bundled desk corpus so that nothing needs to be downloaded.
_WORDS = {
    "det": ["the", "a", "every", "this", "that", "one"],
    "adj": ["old", "small", "quiet", "bright", "cold", "green", "little", "strange",
            "tired", "gentle", "dark", "happy", "early", "narrow", "wild"],
    "noun": ["fox", "bird", "river", "house", "farmer", "child", "garden", "stone",
             "road", "window", "forest", "letter", "boat", "village", "teacher",
             "horse", "lamp", "friend", "market", "mountain"],
    "verb_t": ["saw", "found", "carried", "watched", "opened", "followed", "painted",
               "remembered", "crossed", "visited", "heard", "built"],
    "verb_i": ["slept", "waited", "laughed", "walked", "sang", "rested", "listened",
               "returned", "wandered", "smiled"],
    "prep": ["near", "behind", "under", "beside", "across", "inside", "over", "along"],
    "adv": ["slowly", "quietly", "again", "today", "often", "together", "soon"],
    "conj": ["and", "but", "so", "while"],
}


def _phrase(rng: np.random.Generator) -> str:
    w = _WORDS
    words = [rng.choice(w["det"])]
    if rng.random() < 0.6:
        words.append(rng.choice(w["adj"]))
    words.append(rng.choice(w["noun"]))
    return " ".join(words)


def _clause(rng: np.random.Generator) -> str:
    w = _WORDS
    parts = [_phrase(rng)]
    if rng.random() < 0.55:
        parts += [rng.choice(w["verb_t"]), _phrase(rng)]
    else:
        parts.append(rng.choice(w["verb_i"]))
    if rng.random() < 0.5:
        parts += [rng.choice(w["prep"]), _phrase(rng)]
    if rng.random() < 0.3:
        parts.append(rng.choice(w["adv"]))
    return " ".join(parts)


def synthetic_text(n_docs: int, seed: int = 0) -> str:
    """Deterministic English-like documents separated by blank lines."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        sentences = []
        for _ in range(int(rng.integers(2, 6))):
            s = _clause(rng)
            if rng.random() < 0.35:
                s = f"{s}, {rng.choice(_WORDS['conj'])} {_clause(rng)}"
            sentences.append(s[0].upper() + s[1:] + ".")
        docs.append(" ".join(sentences))
    return "\n\n".join(docs) + "\n"
