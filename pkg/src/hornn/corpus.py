"""Corpus ingestion, vocabulary with an UNK cutoff, and lane batching."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

UNK = "<unk>"
EOS = "<eos>"


class CorpusError(ValueError):
    pass


def read_tokens(path, add_eos: bool = True) -> list[str]:
    """Whitespace-tokenise a UTF-8 file; each line ends with ``<eos>``.

    Blank lines contribute nothing. Set ``add_eos=False`` to treat the file
    as a single undelimited token stream.
    """
    tokens: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.split()
            if not words:
                continue
            tokens.extend(words)
            if add_eos:
                tokens.append(EOS)
    return tokens


def fingerprint(ids: np.ndarray) -> str:
    """Content hash of an id-encoded corpus."""
    return hashlib.sha256(np.ascontiguousarray(ids, dtype="<i8").tobytes()).hexdigest()


@dataclass
class Vocab:
    id_to_token: list[str]
    unk_id: int
    counts: list[int] = field(default_factory=list)
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("vocabulary tokens are not unique")
        if not 0 <= self.unk_id < len(self.id_to_token):
            raise CorpusError(f"unk_id {self.unk_id} outside vocabulary")
        if not self.counts:
            self.counts = [0] * len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def unk_token(self) -> str:
        return self.id_to_token[self.unk_id]

    def __len__(self) -> int:
        return self.size

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        get, unk = self.token_to_id.get, self.unk_id
        return np.fromiter((get(t, unk) for t in tokens), dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": self.id_to_token, "unk_id": self.unk_id, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), int(d["unk_id"]), list(d.get("counts", [])))

    def save(self, path) -> None:
        """Write ``token<TAB>id<TAB>count`` lines, sorted by id."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, n) in enumerate(zip(self.id_to_token, self.counts)):
                fh.write(f"{tok}\t{i}\t{n}\n")

    @classmethod
    def load(cls, path, unk_token: str = UNK) -> "Vocab":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                tok, idx, n = line.rstrip("\n").split("\t")
                if int(idx) != lineno:
                    raise CorpusError(f"{path}:{lineno + 1}: ids must be dense and sorted")
                tokens.append(tok)
                counts.append(int(n))
        return cls(tokens, tokens.index(unk_token), counts)


def build_vocab(tokens: Sequence[str], min_count: int = 0, unk_token: str = UNK) -> Vocab:
    """Keep tokens seen at least ``min_count`` times, in first-appearance order.

    The UNK token is always in the vocabulary: at its own first appearance if
    it survives the cutoff, otherwise appended last. Its count is the number
    of corpus tokens that map to it.
    """
    if len(tokens) == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if min_count < 0:
        raise CorpusError(f"min_count must be non-negative, got {min_count}")
    counts = Counter(tokens)
    kept = [t for t in dict.fromkeys(tokens) if counts[t] >= min_count]
    if unk_token not in kept:
        kept.append(unk_token)
    kept_set = set(kept)
    n_unk = sum(n for t, n in counts.items() if t not in kept_set)
    tally = [counts[t] for t in kept]
    unk_id = kept.index(unk_token)
    tally[unk_id] = counts.get(unk_token, 0) + n_unk
    return Vocab(kept, unk_id, tally)


def encode(vocab: Vocab, tokens: Iterable[str]) -> np.ndarray:
    return vocab.encode(tokens)


class BatchStream:
    """Contiguous lanes of a corpus, cut into windows of length ``window``.

    Lane ``b`` is the ``b``-th of ``lanes`` equal shards. Successive batches
    advance every lane by ``window`` tokens so hidden state can be carried
    from one batch to the next.
    """

    def __init__(self, ids: np.ndarray, lanes: int, window: int):
        ids = np.asarray(ids, dtype=np.int64)
        if lanes < 1 or window < 1:
            raise CorpusError(f"lanes and window must be positive, got {lanes}, {window}")
        need = lanes * (window + 1)
        if ids.size < need:
            raise CorpusError(
                f"corpus too short: {ids.size} tokens, need at least {need} "
                f"for {lanes} lanes of window {window}"
            )
        self.window = window
        shard = ids.size // lanes
        self.lanes = ids[: lanes * shard].reshape(lanes, shard)
        self.cursor = 0

    @property
    def num_lanes(self) -> int:
        return self.lanes.shape[0]

    @property
    def shard_len(self) -> int:
        return self.lanes.shape[1]

    @property
    def batches_per_epoch(self) -> int:
        return (self.shard_len - 1) // self.window

    def reset(self) -> None:
        self.cursor = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Return ``(inputs, targets)``, each ``lanes x window``, or None at epoch end."""
        c, T = self.cursor, self.window
        if c + T + 1 > self.shard_len:
            return None
        self.cursor = c + T
        return self.lanes[:, c : c + T], self.lanes[:, c + 1 : c + T + 1]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        self.reset()
        while (batch := self.next_batch()) is not None:
            yield batch


def make_stream(ids: np.ndarray, lanes: int, window: int) -> BatchStream:
    return BatchStream(ids, lanes, window)
