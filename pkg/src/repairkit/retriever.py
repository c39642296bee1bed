"""Dense retrieval of historic fixes.

The encoder hashes sub-token unigrams and bigrams of an (obfuscated) snippet
into a sparse count vector, projects it with a trainable matrix and
L2-normalizes the result. It is trained with the InfoNCE objective over
in-batch negatives. The store is an exact-scan key/value index persisted in a
small binary format.
"""

from __future__ import annotations

import fcntl
import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, IndexVersionError, TrainingError
from .promptgen import tokenize

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
DEFAULT_FEATURES = 1 << 16

BUG_TYPE_CODES = {"NULL_DEREFERENCE": 0, "RESOURCE_LEAK": 1, "THREAD_SAFETY_VIOLATION": 2}
BUG_TYPE_NAMES = {v: k for k, v in BUG_TYPE_CODES.items()}

MAGIC = b"RKIX"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ32s")


# -- encoder -----------------------------------------------------------------


@dataclass
class EncoderParams:
    projection: np.ndarray  # (features, dim), float64
    seed: int = 0

    @property
    def features(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def initialize(cls, dim: int = DEFAULT_DIM, features: int = DEFAULT_FEATURES, seed: int = 0) -> EncoderParams:
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((features, dim)) / math.sqrt(dim)
        return cls(projection=projection, seed=seed)

    def copy(self) -> EncoderParams:
        return EncoderParams(self.projection.copy(), self.seed)

    def checksum(self) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<IIQ", self.dim, self.features, self.seed))
        h.update(np.ascontiguousarray(self.projection, dtype="<f8").tobytes())
        return h.digest()

    def save(self, path: str | os.PathLike) -> None:
        tmp = Path(f"{path}.tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, projection=self.projection, seed=np.array(self.seed, dtype=np.uint64))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> EncoderParams:
        with np.load(path) as data:
            return cls(projection=np.array(data["projection"], dtype=np.float64), seed=int(data["seed"]))


@lru_cache(maxsize=1 << 16)
def _bucket(token: str, seed: int, features: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % features


def featurize(snippet: str, features: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sparse hashed counts of sub-token unigrams and bigrams: (indices, counts)."""
    toks = tokenize(snippet)
    grams = toks + [f"{a}\x00{b}" for a, b in zip(toks, toks[1:])]
    if not grams:
        grams = ["\x00empty"]
    idx = np.fromiter((_bucket(g, seed, features) for g in grams), dtype=np.int64, count=len(grams))
    uniq, counts = np.unique(idx, return_counts=True)
    return uniq, counts.astype(np.float64)


def _project(params: EncoderParams, feats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    idx, counts = feats
    return counts @ params.projection[idx]


def _normalize(u: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(u)
    if norm == 0.0:
        raise TrainingError("snippet encodes to the zero vector")
    return u / norm


def encode(params: EncoderParams, snippet: str) -> np.ndarray:
    """Unit-norm embedding of an obfuscated snippet."""
    if not snippet:
        raise ValueError("cannot encode an empty snippet")
    return _normalize(_project(params, featurize(snippet, params.features, params.seed)))


def similarity(q: np.ndarray, c: np.ndarray) -> float:
    """Dot product; equal to cosine similarity for unit-norm inputs."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if q.shape != c.shape:
        raise DimensionError(f"dimension mismatch: {q.shape} vs {c.shape}")
    return float(q @ c)


# -- contrastive objective ---------------------------------------------------


def infonce(positive_sim: float, negative_sims: Sequence[float]) -> float:
    """Negative log-likelihood of the positive among one positive and its negatives."""
    logits = np.concatenate([[positive_sim], np.asarray(negative_sims, dtype=np.float64)])
    m = logits.max()
    return float(m + math.log(np.exp(logits - m).sum()) - positive_sim)


def _log_softmax_rows(sims: np.ndarray) -> np.ndarray:
    m = sims.max(axis=1, keepdims=True)
    return sims - (m + np.log(np.exp(sims - m).sum(axis=1, keepdims=True)))


def infonce_from_similarities(sims: np.ndarray) -> float:
    """Mean InfoNCE for a B x B query/positive similarity matrix (diagonal = positives)."""
    return float(-np.mean(np.diag(_log_softmax_rows(sims))))


@dataclass
class ContrastiveBatch:
    """Queries and their positives; each query's negatives are the other positives."""

    queries: list[str]
    positives: list[str]
    bug_types: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.queries) != len(self.positives):
            raise ValueError("queries and positives differ in length")
        if len(self.queries) < 2:
            raise ValueError("a contrastive batch needs at least 2 pairs")

    @property
    def size(self) -> int:
        return len(self.queries)


def _encode_batch(params: EncoderParams, snippets: Sequence[str]):
    feats = [featurize(s, params.features, params.seed) for s in snippets]
    raw = np.stack([_project(params, f) for f in feats])
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise TrainingError("snippet encodes to the zero vector")
    return feats, raw, norms, raw / norms


def infonce_loss(batch: ContrastiveBatch, params: EncoderParams) -> float:
    _, _, _, eq = _encode_batch(params, batch.queries)
    _, _, _, ep = _encode_batch(params, batch.positives)
    return infonce_from_similarities(eq @ ep.T)


def _loss_and_sparse_grad(batch: ContrastiveBatch, params: EncoderParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradient rows: returns (loss, row indices, gradient rows)."""
    fq, _, nq, eq = _encode_batch(params, batch.queries)
    fp, _, np_, ep = _encode_batch(params, batch.positives)
    b = batch.size
    logp = _log_softmax_rows(eq @ ep.T)
    loss = float(-np.mean(np.diag(logp)))
    g = (np.exp(logp) - np.eye(b)) / b  # dL/dsims
    g_eq = g @ ep
    g_ep = g.T @ eq
    # back through L2 normalization: de/du = (I - e e^T) / |u|
    g_uq = (g_eq - eq * np.sum(g_eq * eq, axis=1, keepdims=True)) / nq
    g_up = (g_ep - ep * np.sum(g_ep * ep, axis=1, keepdims=True)) / np_
    idx_parts, row_parts = [], []
    for feats, gu in ((fq, g_uq), (fp, g_up)):
        for (idx, counts), row in zip(feats, gu):
            idx_parts.append(idx)
            row_parts.append(np.outer(counts, row))
    return loss, np.concatenate(idx_parts), np.concatenate(row_parts)


def infonce_loss_and_grad(batch: ContrastiveBatch, params: EncoderParams) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to the projection matrix."""
    loss, idx, rows = _loss_and_sparse_grad(batch, params)
    grad = np.zeros_like(params.projection)
    np.add.at(grad, idx, rows)
    return loss, grad


@dataclass
class TrainConfig:
    epochs: int = 10
    step_size: float = 0.5
    batch_size: int = 8
    holdout_fraction: float = 0.25
    seed: int = 0


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    initial_heldout_loss: float | None = None
    best_epoch: int = 0


def _batches(pairs: Sequence[tuple[str, str, str]], size: int) -> Iterable[ContrastiveBatch]:
    for start in range(0, len(pairs), size):
        chunk = pairs[start : start + size]
        if len(chunk) >= 2:
            yield ContrastiveBatch([q for q, _, _ in chunk], [p for _, p, _ in chunk], [t for _, _, t in chunk])


def mean_loss(pairs: Sequence[tuple[str, str, str]], params: EncoderParams, batch_size: int) -> float:
    losses = [infonce_loss(b, params) for b in _batches(pairs, batch_size)]
    return float(np.mean(losses)) if losses else float("nan")


def train_encoder(
    pairs: Sequence[tuple[str, str, str]],
    config: TrainConfig | None = None,
    params: EncoderParams | None = None,
    log: TrainingLog | None = None,
) -> EncoderParams:
    """Minimize InfoNCE over in-batch negatives with plain gradient descent.

    ``pairs`` holds (query, positive, bug_type) triples of obfuscated snippets.
    A deterministic held-out split selects the returned parameters (best
    held-out loss, the initial parameters included).
    """
    config = config or TrainConfig()
    if len(pairs) < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} pairs, got {len(pairs)}")
    params = params.copy() if params is not None else EncoderParams.initialize(seed=config.seed)
    log = log if log is not None else TrainingLog()
    if config.epochs <= 0:
        return params

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_held = int(round(len(pairs) * config.holdout_fraction))
    if n_held == 1:
        n_held = 2
    held = [pairs[i] for i in order[:n_held]]
    train = [pairs[i] for i in order[n_held:]]
    if len(train) < 2:
        train, held = list(pairs), []

    def heldout(p: EncoderParams) -> float:
        return mean_loss(held, p, config.batch_size) if held else mean_loss(train, p, config.batch_size)

    best = params.copy()
    best_loss = heldout(params)
    log.initial_heldout_loss = best_loss
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train))
        shuffled = [train[i] for i in perm]
        losses = []
        for batch in _batches(shuffled, config.batch_size):
            loss, idx, rows = _loss_and_sparse_grad(batch, params)
            if not math.isfinite(loss) or not np.all(np.isfinite(rows)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}: loss={loss}, "
                    f"max |grad|={np.nanmax(np.abs(rows))}, batch size {batch.size}"
                )
            np.add.at(params.projection, idx, -config.step_size * rows)
            losses.append(loss)
        held_loss = heldout(params)
        log.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "heldout_loss": held_loss})
        logger.info("epoch %d train %.6f heldout %.6f", epoch, np.mean(losses), held_loss)
        if held_loss < best_loss:
            best_loss, best = held_loss, params.copy()
            log.best_epoch = epoch
    return best


# -- key/value store ---------------------------------------------------------


@dataclass(frozen=True)
class RetrievalEntry:
    key: np.ndarray
    value: str
    bug_type: str
    record_id: str = ""

    def __post_init__(self) -> None:
        if self.bug_type not in BUG_TYPE_CODES:
            raise ValueError(f"unknown bug type {self.bug_type!r}")
        if not self.value:
            raise ValueError("retrieval entry value must be non-empty")


class RetrievalStore:
    """Exact-scan store of (snippet embedding -> fix text) entries."""

    def __init__(self, params: EncoderParams):
        self.params = params
        self._checksum = params.checksum()
        self.entries: list[RetrievalEntry] = []
        self._keys: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def _check(self, params: EncoderParams | None) -> None:
        if params is not None and params is not self.params and params.checksum() != self._checksum:
            raise IndexVersionError("query encoder differs from the encoder that built the index")

    def add(self, entry: RetrievalEntry) -> None:
        if entry.key.shape != (self.params.dim,):
            raise DimensionError(f"key has shape {entry.key.shape}, index dimension is {self.params.dim}")
        self.entries.append(entry)
        self._keys = None

    def add_snippet(self, obfuscated_snippet: str, fix: str, bug_type: str, record_id: str = "") -> RetrievalEntry:
        entry = RetrievalEntry(encode(self.params, obfuscated_snippet), fix, bug_type, record_id)
        self.add(entry)
        return entry

    def search(self, q: np.ndarray, bug_type: str, k: int = 2, min_sim: float = 0.60) -> list[tuple[RetrievalEntry, float]]:
        if q.shape != (self.params.dim,):
            raise DimensionError(f"query has shape {q.shape}, index dimension is {self.params.dim}")
        if not self.entries:
            return []
        if self._keys is None:
            self._keys = np.stack([e.key for e in self.entries])
        sims = self._keys @ q
        hits = [
            (i, float(s))
            for i, s in enumerate(sims)
            if self.entries[i].bug_type == bug_type and s >= min_sim
        ]
        hits.sort(key=lambda h: (-h[1], h[0]))
        logger.debug("query: cosine threshold %.2f, %d candidate(s) pass", min_sim, len(hits))
        return [(self.entries[i], s) for i, s in hits[:k]]

    # -- persistence

    def _header(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.params.dim, self.params.features, self.params.seed, self._checksum)

    @staticmethod
    def _record(entry: RetrievalEntry) -> bytes:
        value = entry.value.encode("utf-8")
        rid = entry.record_id.encode("utf-8")
        return b"".join(
            [
                np.asarray(entry.key, dtype="<f4").tobytes(),
                struct.pack("<BI", BUG_TYPE_CODES[entry.bug_type], len(value)),
                value,
                struct.pack("<I", len(rid)),
                rid,
            ]
        )

    def save(self, path: str | os.PathLike) -> None:
        """Write the whole index atomically."""
        tmp = Path(f"{path}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(self._header())
            for e in self.entries:
                fh.write(self._record(e))
        os.replace(tmp, path)

    def append(self, path: str | os.PathLike, entry: RetrievalEntry) -> None:
        """Add ``entry`` and append it to the index file under an exclusive lock."""
        self.add(entry)
        path = Path(path)
        with open(path, "ab") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                if fh.tell() == 0:
                    fh.write(self._header())
                fh.write(self._record(entry))
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    @classmethod
    def load(cls, path: str | os.PathLike, params: EncoderParams) -> RetrievalStore:
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise IndexVersionError(f"{path}: truncated header")
        magic, version, dim, features, seed, checksum = _HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise IndexVersionError(f"{path}: not a version {VERSION} index")
        if (dim, features, seed) != (params.dim, params.features, params.seed) or checksum != params.checksum():
            raise IndexVersionError(f"{path}: built with different encoder parameters")
        store = cls(params)
        pos = _HEADER.size
        vec_bytes = 4 * dim
        while pos < len(data):
            key = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += vec_bytes
            code, n = struct.unpack_from("<BI", data, pos)
            pos += 5
            value = data[pos : pos + n].decode("utf-8")
            pos += n
            (m,) = struct.unpack_from("<I", data, pos)
            pos += 4
            rid = data[pos : pos + m].decode("utf-8")
            pos += m
            store.add(RetrievalEntry(key / np.linalg.norm(key), value, BUG_TYPE_NAMES[code], rid))
        return store


def index_add(store: RetrievalStore, entry: RetrievalEntry) -> bool:
    store.add(entry)
    return True


def query(
    store: RetrievalStore,
    q: str,
    bug_type: str,
    k: int = 2,
    min_sim: float = 0.60,
    params: EncoderParams | None = None,
) -> list[tuple[str, float]]:
    """Up to ``k`` fixes of the same bug type with cosine similarity >= ``min_sim``.

    ``q`` is an obfuscated snippet. Results are sorted by similarity, ties in
    insertion order. ``params``, when given, must match the index encoder.
    """
    store._check(params)
    vec = encode(store.params, q)
    return [(e.value, s) for e, s in store.search(vec, bug_type, k, min_sim)]
