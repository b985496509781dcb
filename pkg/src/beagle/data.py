"""Byte-level tokenization, corpus chunking, batching and the target-state cache."""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

BOS = 256
EOS = 257
VOCAB_SIZE = 258
PAD = 0

STATE_CACHE_MAGIC = b"BGSC"
STATE_CACHE_VERSION = 1


class StaleCacheError(RuntimeError):
    """The cache was produced by a different target checkpoint."""


def encode(text: bytes | str, add_bos: bool = False) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = list(text)
    return [BOS] + ids if add_bos else ids


def decode(ids) -> bytes:
    return bytes(int(i) for i in ids if int(i) < 256)


@dataclass
class Chunk:
    doc_id: int
    tokens: np.ndarray  # BOS followed by up to context_len bytes


@dataclass
class SequenceBatch:
    token_ids: np.ndarray  # [batch, width] int64, padded with PAD
    lengths: np.ndarray    # valid length per row (BOS included)
    doc_ids: np.ndarray
    chunk_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def width(self) -> int:
        return self.token_ids.shape[1]

    def valid(self) -> np.ndarray:
        """Boolean [batch, width] marking non-padding positions."""
        return np.arange(self.width)[None, :] < self.lengths[:, None]

    def padded(self, extra: int) -> SequenceBatch:
        """Same batch with ``extra`` more padding columns."""
        pad = np.full((len(self.lengths), extra), PAD, dtype=self.token_ids.dtype)
        return SequenceBatch(np.concatenate([self.token_ids, pad], axis=1), self.lengths,
                             self.doc_ids, self.chunk_ids)


def split_documents(raw: bytes) -> list[bytes]:
    """Documents are separated by blank lines; empty documents are dropped."""
    return [d for d in raw.split(b"\n\n") if d]


def chunk_documents(docs: list[bytes], context_len: int) -> list[Chunk]:
    """Split every document into pieces of at most ``context_len`` bytes, each led by BOS."""
    if context_len < 1:
        raise ValueError("context_len must be >= 1")
    chunks = []
    for doc_id, doc in enumerate(docs):
        for start in range(0, len(doc), context_len):
            piece = encode(doc[start:start + context_len], add_bos=True)
            chunks.append(Chunk(doc_id, np.asarray(piece, dtype=np.int64)))
    return chunks


def read_corpus(path, context_len: int) -> list[Chunk]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    return chunk_documents(split_documents(raw), context_len)


def make_batch(chunks: list[Chunk], ids=None) -> SequenceBatch:
    width = max(len(c.tokens) for c in chunks)
    tokens = np.full((len(chunks), width), PAD, dtype=np.int64)
    for r, c in enumerate(chunks):
        tokens[r, :len(c.tokens)] = c.tokens
    return SequenceBatch(
        tokens,
        np.array([len(c.tokens) for c in chunks], dtype=np.int64),
        np.array([c.doc_id for c in chunks], dtype=np.int64),
        np.asarray(ids if ids is not None else np.arange(len(chunks)), dtype=np.int64),
    )


def iter_batches(chunks: list[Chunk], batch_size: int, seed: int | None = None) -> Iterator[SequenceBatch]:
    order = np.arange(len(chunks))
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    for s in range(0, len(order), batch_size):
        sel = order[s:s + batch_size]
        yield make_batch([chunks[i] for i in sel], sel)


def load_corpus(path, context_len: int, batch_size: int = 16, seed: int | None = 0) -> Iterator[SequenceBatch]:
    """Stream batches of BOS-led chunks from a byte corpus in seeded shuffled order."""
    chunks = read_corpus(path, context_len)
    return iter_batches(chunks, batch_size, seed)


# -- toy corpus ----------------------------------------------------------------

_SUBJECTS = ["the cat", "a dog", "the old man", "my sister", "the teacher", "a small bird",
             "the farmer", "our neighbour", "the young girl", "a tired horse"]
_VERBS = ["sees", "likes", "follows", "finds", "watches", "helps", "calls", "visits"]
_OBJECTS = ["the river", "a red ball", "the green garden", "the market", "a quiet house",
            "the tall tree", "the blue boat", "a warm fire", "the north road"]
_TAILS = ["every morning", "in the rain", "after dinner", "with great care", "before noon",
          "near the hill", "at night"]


def make_toy_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic template English with blank-line separated paragraphs."""
    rng = np.random.default_rng(seed)
    out = io.BytesIO()
    while out.tell() < n_bytes:
        n_sent = int(rng.integers(3, 8))
        sents = []
        for _ in range(n_sent):
            s = f"{_SUBJECTS[rng.integers(len(_SUBJECTS))]} {_VERBS[rng.integers(len(_VERBS))]} " \
                f"{_OBJECTS[rng.integers(len(_OBJECTS))]}"
            if rng.random() < 0.6:
                s += " " + _TAILS[rng.integers(len(_TAILS))]
            sents.append(s + ".")
        out.write((" ".join(sents) + "\n\n").encode())
    return out.getvalue()[:n_bytes]


# -- state cache -----------------------------------------------------------------

@dataclass
class StateCache:
    """Top-layer target states (and optionally logits) per chunk."""
    target_hash: bytes
    states: list[np.ndarray]
    logits: list[np.ndarray] | None = None
    doc_ids: list[int] = field(default_factory=list)

    @property
    def d_model(self) -> int:
        return self.states[0].shape[1] if self.states else 0

    def n_scalars(self) -> int:
        n = sum(s.size for s in self.states)
        if self.logits is not None:
            n += sum(l.size for l in self.logits)
        return n

    def save(self, path) -> None:
        has_logits = self.logits is not None
        vocab = self.logits[0].shape[1] if has_logits and self.logits else 0
        with open(path, "wb") as fh:
            fh.write(STATE_CACHE_MAGIC)
            fh.write(struct.pack("<I", STATE_CACHE_VERSION))
            fh.write(_check_hash(self.target_hash))
            fh.write(struct.pack("<IIIB", len(self.states), self.d_model, vocab, int(has_logits)))
            offset = 0
            index = []
            for i, s in enumerate(self.states):
                index.append(struct.pack("<IIQ", self.doc_ids[i] if self.doc_ids else i, len(s), offset))
                offset += s.size * 4 + (len(s) * vocab * 4 if has_logits else 0)
            fh.write(b"".join(index))
            for i, s in enumerate(self.states):
                fh.write(np.ascontiguousarray(s, dtype="<f4").tobytes())
                if has_logits:
                    fh.write(np.ascontiguousarray(self.logits[i], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, expected_hash: bytes | None = None) -> StateCache:
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != STATE_CACHE_MAGIC:
            raise ValueError("not a state cache file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != STATE_CACHE_VERSION:
            raise ValueError(f"unsupported state cache version {version}")
        target_hash = raw[8:40]
        if expected_hash is not None and target_hash != expected_hash:
            raise StaleCacheError("state cache was built from a different target checkpoint")
        n_docs, d, vocab, has_logits = struct.unpack_from("<IIIB", raw, 40)
        pos = 40 + struct.calcsize("<IIIB")
        entries = [struct.unpack_from("<IIQ", raw, pos + 16 * i) for i in range(n_docs)]
        base = pos + 16 * n_docs
        states, logits, doc_ids = [], [] if has_logits else None, []
        for doc_id, length, off in entries:
            start = base + off
            states.append(np.frombuffer(raw, dtype="<f4", count=length * d, offset=start).reshape(length, d).copy())
            if has_logits:
                lstart = start + length * d * 4
                logits.append(np.frombuffer(raw, dtype="<f4", count=length * vocab, offset=lstart)
                              .reshape(length, vocab).copy())
            doc_ids.append(doc_id)
        return cls(target_hash, states, logits, doc_ids)


def _check_hash(h: bytes) -> bytes:
    if len(h) != 32:
        raise ValueError("checkpoint hash must be 32 bytes")
    return h


def build_state_cache(target, chunks: list[Chunk], batch_size: int = 32, store_logits: bool = False) -> StateCache:
    """Run the frozen target over every chunk and keep its top-layer states."""
    states, logits = [], [] if store_logits else None
    for s in range(0, len(chunks), batch_size):
        part = chunks[s:s + batch_size]
        batch = make_batch(part)
        h, z = target.infer(batch.token_ids)
        for r, c in enumerate(part):
            n = len(c.tokens)
            states.append(np.asarray(h[r, :n], dtype=np.float32))
            if store_logits:
                logits.append(np.asarray(z[r, :n], dtype=np.float32))
    return StateCache(target.checkpoint_hash(), states, logits, [c.doc_id for c in chunks])


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
