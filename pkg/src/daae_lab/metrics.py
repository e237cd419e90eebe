"""Latent-geometry and generation metrics, plus latent-space manipulation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Corpus
from .seqmodel import LanguageModel, ModelConfig, SeqAutoencoder

BLEU_EPSILON = 1e-9
NN_X = 10
RECALL_SUBSAMPLE = 2000


# edit distance

def levenshtein(a: Sequence, b: Sequence) -> int:
    """Token-level Levenshtein distance (plain dynamic programming)."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: Sequence, b: Sequence) -> float:
    """Levenshtein distance divided by ``max(len(a), len(b))``; two empty sequences give 0."""
    n = max(len(a), len(b))
    return levenshtein(a, b) / n if n else 0.0


def _padded(seqs: Sequence[Sequence[int]], fill: int) -> Tuple[np.ndarray, np.ndarray]:
    L = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), L), fill, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = s
    return out, np.array([len(s) for s in seqs], dtype=np.int64)


def edit_distance_matrix(rows: Sequence[Sequence[int]], cols: Sequence[Sequence[int]], block: int = 64) -> np.ndarray:
    """Pairwise Levenshtein distances between two lists of id sequences.

    Each DP row is vectorized over all pairs in a block; the insertion chain
    within a row is a running minimum, ``D[j] = j + cummin(C[j] - j)``.
    """
    A, la = _padded(rows, -1)
    B, lb = _padded(cols, -2)
    Lb = B.shape[1]
    out = np.zeros((len(rows), len(cols)), dtype=np.int64)
    jj = np.arange(Lb + 1)
    for s in range(0, len(rows), block):
        a, na = A[s : s + block], la[s : s + block]
        M = len(a)
        D = np.broadcast_to(jj, (M, len(cols), Lb + 1)).copy()
        res = out[s : s + block]
        res[na == 0] = lb[None, :]
        for i in range(a.shape[1]):
            sub = D[:, :, :-1] + (a[:, i, None, None] != B[None, :, :])
            C = np.empty_like(D)
            C[:, :, 0] = i + 1
            C[:, :, 1:] = np.minimum(sub, D[:, :, 1:] + 1)
            D = jj + np.minimum.accumulate(C - jj, axis=2)
            hit = na == i + 1
            if hit.any():
                res[hit] = np.take_along_axis(D[hit], np.broadcast_to(lb[None, :, None], (int(hit.sum()), len(cols), 1)), 2)[..., 0]
    return out


def normalized_distance_matrix(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    lev = edit_distance_matrix(seqs, seqs)
    lens = np.array([len(s) for s in seqs])
    denom = np.maximum(lens[:, None], lens[None, :])
    return np.divide(lev, denom, out=np.zeros(lev.shape), where=denom > 0)


# neighborhoods

def nearest_others(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other items per row; ties go to the lower index."""
    d = dist.astype(float).copy()
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def latent_distances(latents: np.ndarray) -> np.ndarray:
    z = np.asarray(latents, dtype=float)
    sq = (z * z).sum(1)
    return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0))


def recall_at_k(
    corpus: Sequence[Sequence[int]],
    latents: np.ndarray,
    k: int = 10,
    subsample: int = RECALL_SUBSAMPLE,
    seed: int = 0,
    nn_x: int = NN_X,
) -> float:
    """Mean of ``|NN_x ∩ NN_z| / nn_x`` over items.

    ``NN_x`` are the ``nn_x`` nearest other sequences by normalized edit
    distance, ``NN_z`` the ``k`` nearest by Euclidean latent distance. Corpora
    larger than ``subsample`` are reduced to a seeded random subset first.
    """
    seqs = [tuple(s) for s in corpus]
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    if len(seqs) != len(z):
        raise ValueError(f"{len(seqs)} sequences but {len(z)} latent codes")
    if len(seqs) <= nn_x + 1:
        raise ValueError(f"recall needs more than {nn_x + 1} items, got {len(seqs)}")
    if k < 1 or k >= len(seqs):
        raise ValueError(f"k must lie in [1, {len(seqs) - 1}], got {k}")
    if len(seqs) > subsample:
        idx = np.sort(np.random.default_rng(seed).choice(len(seqs), subsample, replace=False))
        seqs, z = [seqs[i] for i in idx], z[idx]
        k = min(k, len(seqs) - 1)
    nx = nearest_others(normalized_distance_matrix(seqs), nn_x)
    nz = nearest_others(latent_distances(z), k)
    hits = [len(set(a) & set(b)) for a, b in zip(nx.tolist(), nz.tolist())]
    return float(np.mean(hits) / nn_x)


def knn_label_purity(latents: np.ndarray, labels: Sequence, k: int = 10) -> float:
    """Mean fraction of each item's ``k`` nearest latent neighbours sharing its label."""
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    labels = np.asarray(labels)
    if len(z) != len(labels):
        raise ValueError(f"{len(z)} latent codes but {len(labels)} labels")
    if k < 1 or k >= len(z):
        raise ValueError(f"k must lie in [1, {len(z) - 1}], got {k}")
    nn = nearest_others(latent_distances(z), k)
    return float((labels[nn] == labels[:, None]).mean())


# BLEU

def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] against one reference per hypothesis.

    Modified n-gram precisions for n = 1..max_n are combined by geometric
    mean and multiplied by the brevity penalty. A precision with zero matches
    is smoothed to ``BLEU_EPSILON / total`` so the score stays defined.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    match = np.zeros(max_n)
    total = np.zeros(max_n)
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    prec = np.where(match > 0, match, BLEU_EPSILON) / np.maximum(total, 1)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return float(100.0 * bp * math.exp(np.log(prec).mean()))


# language-model perplexity

def perplexity(lm: LanguageModel, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> float:
    """``exp(total NLL / total tokens)``, counting each end token."""
    seqs = [list(s) for s in seqs]
    if not seqs:
        raise ValueError("perplexity of an empty corpus is undefined")
    nll = 0.0
    for i in range(0, len(seqs), batch_size):
        nll -= float(lm.log_likelihood(seqs[i : i + batch_size]).sum())
    tokens = sum(len(s) + 1 for s in seqs)
    return math.exp(nll / tokens)


@dataclass
class LMConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def train_lm(seqs: Sequence[Sequence[int]], vocab_size: int, max_length: int, cfg: LMConfig) -> LanguageModel:
    from .objectives import fit_language_model

    mcfg = ModelConfig(vocab_size=vocab_size, embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim,
                       latent_dim=1, max_length=max_length)
    lm = LanguageModel(mcfg, cfg.seed)
    fit_language_model(lm, Corpus.from_lists(seqs), cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed)
    return lm


def sample_prior(model: SeqAutoencoder, count: int, seed: int = 0) -> List[List[int]]:
    """Greedy decodes of ``count`` draws ``z ~ N(0, I)``."""
    if count < 1:
        raise ValueError("sample count must be at least 1")
    z = np.random.default_rng(seed).standard_normal((count, model.cfg.latent_dim))
    return model.decode_greedy_many(z)


def forward_reverse_ppl(
    model: SeqAutoencoder,
    real: Sequence[Sequence[int]],
    sample_count: int,
    lm_cfg: Optional[LMConfig] = None,
    seed: int = 0,
) -> Tuple[float, float, List[str]]:
    """``(forward PPL, reverse PPL, warnings)`` for prior samples of ``model``.

    Forward: an LM trained on ``real`` scores the generated corpus. Reverse:
    an LM trained on the generated corpus scores ``real``. When every
    generated sequence is empty the reverse value is ``inf`` and a warning is
    returned.
    """
    lm_cfg = lm_cfg or LMConfig(seed=seed)
    real = [list(s) for s in real]
    gen = sample_prior(model, sample_count, seed)
    V, T = model.cfg.vocab_size, model.cfg.max_length
    fwd = perplexity(train_lm(real, V, T, lm_cfg), gen)
    warnings: List[str] = []
    if all(len(s) == 0 for s in gen):
        warnings.append("degenerate generated corpus: every sample is empty")
        return fwd, math.inf, warnings
    rev = perplexity(train_lm(gen, V, T, lm_cfg), real)
    return fwd, rev, warnings


# latent manipulation

def interpolate(model: SeqAutoencoder, x1: Sequence[int], x2: Sequence[int], steps: int) -> List[List[int]]:
    """Greedy decodes of ``t z1 + (1 - t) z2`` for ``t`` ascending from 0 to 1."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    z = model.encode([list(x1), list(x2)])
    ts = np.linspace(0.0, 1.0, steps)[:, None]
    return model.decode_greedy(ts * z[0] + (1.0 - ts) * z[1])


def attribute_vector(model: SeqAutoencoder, positive: Sequence[Sequence[int]], negative: Sequence[Sequence[int]]) -> np.ndarray:
    """``mean(E(positive)) - mean(E(negative))``."""
    if not positive or not negative:
        raise ValueError("attribute vector needs non-empty positive and negative sets")
    return model.encode_many(positive).mean(axis=0) - model.encode_many(negative).mean(axis=0)


def apply_offset(model: SeqAutoencoder, x: Sequence[int], v: np.ndarray, scale: float) -> List[int]:
    if not math.isfinite(scale):
        raise ValueError(f"offset scale must be finite, got {scale}")
    z = model.encode([list(x)])[0] + scale * np.asarray(v, dtype=float)
    return model.decode_greedy(z[None])[0]


# reports

@dataclass
class EvalReport:
    model_id: str
    metrics: Dict[str, float] = field(default_factory=dict)
    params: Dict[str, object] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def add(self, name: str, value: float) -> None:
        """Record a metric; non-finite values are stored as ``None`` with a warning."""
        value = float(value)
        if not math.isfinite(value):
            self.warnings.append(f"{name} is {value}")
            self.metrics[name] = None
        else:
            self.metrics[name] = value

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "metrics": dict(self.metrics), "params": dict(self.params),
                "warnings": list(self.warnings)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)

    def append_to(self, path) -> None:
        with open(Path(path), "a", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model_id"], dict(d["metrics"]), dict(d["params"]), list(d.get("warnings", [])))


def read_reports(path) -> List[EvalReport]:
    return [EvalReport.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def evaluate_model(
    model: SeqAutoencoder,
    corpus: Corpus,
    model_id: str,
    ks: Sequence[int] = (10,),
    seed: int = 0,
    ppl_samples: int = 0,
    lm_cfg: Optional[LMConfig] = None,
) -> EvalReport:
    """Reconstruction BLEU, token accuracy, recall, label purity and optionally PPL."""
    from .seqmodel import token_accuracy

    seqs = [list(s) for s in corpus.sequences]
    report = EvalReport(model_id, params={"ks": list(ks), "seed": seed, "nn_x": NN_X, "n": len(seqs),
                                          "bleu_smoothing": f"add-epsilon {BLEU_EPSILON}"})
    z = model.encode_many(seqs)
    recon = model.decode_greedy_many(z)
    report.add("bleu", corpus_bleu(recon, seqs))
    report.add("token_accuracy", token_accuracy(model, seqs))
    for k in ks:
        if len(seqs) > NN_X + 1 and k < len(seqs):
            report.add(f"recall@{k}", recall_at_k(seqs, z, k, seed=seed))
    if corpus.labels is not None and len(seqs) > 10:
        report.add("purity@10", knn_label_purity(z, corpus.labels, 10))
    if ppl_samples:
        fwd, rev, warn = forward_reverse_ppl(model, seqs, ppl_samples, lm_cfg, seed)
        report.add("forward_ppl", fwd)
        report.add("reverse_ppl", rev)
        report.warnings.extend(warn)
        report.params["ppl_samples"] = ppl_samples
    return report
