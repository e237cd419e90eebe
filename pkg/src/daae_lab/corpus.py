"""Vocabulary, corpus files, padded batches and the clustered binary generator."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
NUM_SPECIAL = len(SPECIAL_TOKENS)


@dataclass
class Vocab:
    """Bijective token/id map with the reserved ids 0..4 in front."""

    itos: List[str]
    stoi: Dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def content_ids(self) -> range:
        return range(NUM_SPECIAL, len(self.itos))

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def to_list(self) -> List[str]:
        return list(self.itos)


def build_vocab(lines: Iterable[str], min_count: int = 1) -> Vocab:
    """Build a vocabulary ordered by descending count, ties broken lexicographically."""
    counts: Counter = Counter()
    for line in lines:
        counts.update(line.split())
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIAL_TOKENS) + kept)


@dataclass(frozen=True)
class Corpus:
    """Immutable list of token-id sequences with optional line-aligned labels."""

    sequences: Tuple[Tuple[int, ...], ...]
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.sequences):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.sequences)} sequences"
            )

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i) -> Tuple[int, ...]:
        return self.sequences[i]

    def subset(self, idx: Sequence[int]) -> "Corpus":
        labels = None if self.labels is None else tuple(self.labels[i] for i in idx)
        return Corpus(tuple(self.sequences[i] for i in idx), labels)

    @classmethod
    def from_lists(cls, seqs: Iterable[Sequence[int]], labels=None) -> "Corpus":
        return cls(tuple(tuple(int(t) for t in s) for s in seqs),
                   None if labels is None else tuple(str(l) for l in labels))


def read_lines(path) -> List[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read corpus file {path}: {exc.strerror or exc}") from exc


def load_corpus(path, vocab: Vocab, max_length: int, label_path=None) -> Corpus:
    """Read one whitespace-tokenized sequence per line.

    Out-of-vocabulary tokens map to ``<unk>``, lines longer than ``max_length``
    are truncated and empty lines are dropped. A label sidecar, when given,
    must have the same number of lines as the corpus file; labels of dropped
    lines are dropped with them.
    """
    if max_length < 1:
        raise ValueError("max_length must be at least 1")
    lines = read_lines(path)
    labels = None
    if label_path is not None:
        labels = read_lines(label_path)
        if len(labels) != len(lines):
            raise ValueError(
                f"label file {label_path} has {len(labels)} lines, corpus {path} has {len(lines)}"
            )
    seqs, kept = [], []
    for k, line in enumerate(lines):
        toks = line.split()
        if not toks:
            continue
        seqs.append(tuple(vocab.encode(toks[:max_length])))
        kept.append(k)
    return Corpus(tuple(seqs), None if labels is None else tuple(labels[k].strip() for k in kept))


def write_lines(path, lines: Iterable[str]) -> None:
    """Atomically write ``lines`` (newline-terminated) to ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    tmp.replace(path)


@dataclass(frozen=True)
class ClusterSpec:
    num_clusters: int = 5
    per_cluster: int = 100
    length: int = 50
    flip_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.num_clusters, self.per_cluster, self.length) < 1:
            raise ValueError("cluster counts and length must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


def generate_clustered_dataset(spec: ClusterSpec) -> Tuple[List[str], List[int], np.ndarray]:
    """Sample binary cluster centers and noisy copies of each.

    Returns:
        ``(lines, labels, centers)`` where each line is a space-separated
        string of ``0``/``1`` symbols, ``labels`` holds the cluster index of
        each line and ``centers`` is the ``(num_clusters, length)`` 0/1 array.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.integers(0, 2, size=(spec.num_clusters, spec.length))
    lines, labels = [], []
    for c in range(spec.num_clusters):
        flips = rng.random((spec.per_cluster, spec.length)) < spec.flip_prob
        for row in np.where(flips, 1 - centers[c], centers[c]):
            lines.append(" ".join(str(int(b)) for b in row))
            labels.append(c)
    return lines, labels, centers


def binary_vocab() -> Vocab:
    """Fixed vocabulary for the synthetic benchmark: ``0`` -> 5, ``1`` -> 6."""
    return Vocab(list(SPECIAL_TOKENS) + ["0", "1"])


def clustered_corpus(spec: ClusterSpec, vocab: Optional[Vocab] = None) -> Tuple[Corpus, Vocab]:
    vocab = vocab or binary_vocab()
    lines, labels, _ = generate_clustered_dataset(spec)
    seqs = [vocab.encode(l.split()) for l in lines]
    return Corpus.from_lists(seqs, labels), vocab


@dataclass
class Batch:
    """Right-padded ``(B, T)`` id matrix with its real-token mask."""

    ids: np.ndarray
    mask: np.ndarray
    index: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def __len__(self) -> int:
        return self.ids.shape[0]

    def sequences(self) -> List[List[int]]:
        return [list(row[:n]) for row, n in zip(self.ids, self.lengths)]


def pad_batch(seqs: Sequence[Sequence[int]], index=None) -> Batch:
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    idx = np.arange(len(seqs)) if index is None else np.asarray(index)
    return Batch(ids, mask, idx)


def batches(corpus: Corpus, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[Batch]:
    """Yield padded batches; shuffled deterministically when a seed is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield pad_batch([corpus.sequences[i] for i in idx], idx)
