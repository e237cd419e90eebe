"""Recurrent encoder, latent-conditioned decoder, discriminator and language model.

All modules operate on padded :class:`~daae_lab.corpus.Batch` objects and are
deterministic; sampling (prior draws, reparameterization noise, corruption)
happens in :mod:`daae_lab.objectives`.

Layout is time-major inside the recurrences: ``(T, B, features)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, MASK, NUM_SPECIAL, PAD, Batch, pad_batch

# ids removed from greedy output; <unk> is kept as a content placeholder
_STRIP = (PAD, BOS, EOS, MASK)


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden_dim: int = 256
    latent_dim: int = 32
    disc_hidden: int = 128
    max_length: int = 50
    cell: str = "gru"
    variational: bool = False  # mu/logvar heads for beta-VAE and LAAE
    init_scale: float = 1.0  # multiplier on the fan-in scaled init

    def __post_init__(self):
        dims = (self.embed_dim, self.hidden_dim, self.latent_dim, self.disc_hidden, self.max_length)
        if min(dims) < 1:
            raise ValueError(f"model dimensions must be positive, got {dims}")
        if self.vocab_size < NUM_SPECIAL:
            raise ValueError(f"vocab_size {self.vocab_size} is smaller than the {NUM_SPECIAL} reserved tokens")
        if self.cell not in ("gru", "lstm"):
            raise ValueError(f"unknown recurrent cell {self.cell!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _weight(shape, rng, scale: float) -> Tensor:
    """Uniform init with variance ``scale**2 / fan_in``."""
    return ad.parameter(shape, rng, scale * np.sqrt(3.0 / shape[0]))


def _embedding(vocab: int, dim: int, rng, scale: float) -> Tensor:
    """Uniform init with unit variance (times ``scale**2``)."""
    return ad.parameter((vocab, dim), rng, scale * np.sqrt(3.0))


class Recurrent:
    """Single-layer GRU or LSTM over pre-projected inputs."""

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int, cell: str, rng, scale: float):
        gates = 3 if cell == "gru" else 4
        self.cell = cell
        self.fused = True  # False unrolls the GRU from primitive ops
        self.hidden_dim = hidden_dim
        G = gates * hidden_dim
        self.params = {
            f"{prefix}.w_x": _weight((input_dim, G), rng, scale),
            f"{prefix}.w_h": _weight((hidden_dim, G), rng, scale),
            f"{prefix}.b_x": ad.zeros_parameter(G),
            f"{prefix}.b_h": ad.zeros_parameter(G),
        }
        self.w_x, self.w_h, self.b_x, self.b_h = self.params.values()

    def run(self, inputs: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Unroll over ``inputs`` of shape ``(T, B, input_dim)``.

        With a ``(T, B)`` mask, padded steps carry the previous state forward,
        so the returned final state is the state after each row's last real
        token. Returns ``(final_h, per-step h list)``.
        """
        T, B, E = inputs.shape
        H = self.hidden_dim
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        if T == 0:
            return h, Tensor(np.zeros((0, B, H)))
        xs = ad.reshape(ad.reshape(inputs, (T * B, E)) @ self.w_x + self.b_x, (T, B, -1))
        if self.cell == "gru" and self.fused:
            hs = ad.gru_scan(xs, self.w_h, self.b_h, mask)
            return hs[T - 1], hs
        outs = []
        for t in range(T):
            xt = xs[t]
            hh = h @ self.w_h + self.b_h
            if self.cell == "gru":
                ru = ad.sigmoid(xt[:, : 2 * H] + hh[:, : 2 * H])
                r, u = ru[:, :H], ru[:, H:]
                n = ad.tanh(xt[:, 2 * H :] + r * hh[:, 2 * H :])
                h_new, c_new = n + u * (h - n), c
            else:
                g = xt + hh
                ifo = ad.sigmoid(g[:, : 3 * H])
                i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
                c_new = f * c + i * ad.tanh(g[:, 3 * H :])
                h_new = o * ad.tanh(c_new)
            if mask is not None and not mask[t].all():
                m = mask[t].astype(float)[:, None]
                h_new = h + m * (h_new - h)
                if self.cell == "lstm":
                    c_new = c + m * (c_new - c)
            h, c = h_new, c_new
            outs.append(h)
        return h, ad.stack(outs, axis=0)


class Encoder:
    """Maps raw content tokens (no framing) to a latent code via the final hidden state."""

    def __init__(self, cfg: ModelConfig, rng, head_rng=None):
        s = cfg.init_scale
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {"enc.embed": _embedding(cfg.vocab_size, cfg.embed_dim, rng, s)}
        self.rnn = Recurrent("enc.rnn", cfg.embed_dim, cfg.hidden_dim, cfg.cell, rng, s)
        self.params.update(self.rnn.params)
        self.params["enc.w_mu"] = _weight((cfg.hidden_dim, cfg.latent_dim), rng, s)
        self.params["enc.b_mu"] = ad.zeros_parameter(cfg.latent_dim)
        if cfg.variational:
            # separate stream: shared weights match the non-variational model
            self.params["enc.w_logvar"] = _weight((cfg.hidden_dim, cfg.latent_dim), head_rng or rng, s)
            self.params["enc.b_logvar"] = ad.zeros_parameter(cfg.latent_dim)

    def hidden(self, batch: Batch) -> Tensor:
        ids = batch.ids.T  # (T, B)
        emb = ad.embedding(self.params["enc.embed"], ids)
        h, _ = self.rnn.run(emb, batch.mask.T)
        return h

    def __call__(self, batch: Batch) -> Tuple[Tensor, Optional[Tensor]]:
        """Return ``(mu, logvar)``; ``logvar`` is ``None`` for deterministic encoders."""
        h = self.hidden(batch)
        p = self.params
        mu = h @ p["enc.w_mu"] + p["enc.b_mu"]
        logvar = h @ p["enc.w_logvar"] + p["enc.b_logvar"] if self.cfg.variational else None
        return mu, logvar


def frame(batch: Batch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays ``(inputs, targets, weights)``, each ``(T+1, B)``.

    Inputs are ``<bos> x``, targets are ``x <eos>``; weights are 1 on real
    target positions (including the end token) and 0 on padding.
    """
    B, T = batch.ids.shape
    lengths = batch.lengths
    inputs = np.full((B, T + 1), PAD, dtype=np.int64)
    targets = np.full((B, T + 1), PAD, dtype=np.int64)
    inputs[:, 0] = BOS
    inputs[:, 1:] = batch.ids
    targets[:, :T] = batch.ids
    targets[np.arange(B), lengths] = EOS
    weights = (np.arange(T + 1)[None, :] <= lengths[:, None]).astype(float)
    return inputs.T, targets.T, weights.T


class Decoder:
    """Autoregressive generator; ``z`` is projected and added to every input embedding."""

    def __init__(self, cfg: ModelConfig, rng, prefix: str = "dec", latent: bool = True):
        s = cfg.init_scale
        self.cfg = cfg
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {
            f"{prefix}.embed": _embedding(cfg.vocab_size, cfg.embed_dim, rng, s)
        }
        if latent:
            self.params[f"{prefix}.w_z"] = _weight((cfg.latent_dim, cfg.embed_dim), rng, s)
        self.rnn = Recurrent(f"{prefix}.rnn", cfg.embed_dim, cfg.hidden_dim, cfg.cell, rng, s)
        self.params.update(self.rnn.params)
        self.params[f"{prefix}.w_out"] = _weight((cfg.hidden_dim, cfg.vocab_size), rng, s)
        self.params[f"{prefix}.b_out"] = ad.zeros_parameter(cfg.vocab_size)

    def _inputs(self, z: Optional[Tensor], ids: np.ndarray) -> Tensor:
        emb = ad.embedding(self.params[f"{self.prefix}.embed"], ids)
        if z is not None and f"{self.prefix}.w_z" in self.params:
            emb = emb + z @ self.params[f"{self.prefix}.w_z"]  # broadcast over time
        return emb

    def _project(self, hs: Tensor) -> Tensor:
        return hs @ self.params[f"{self.prefix}.w_out"] + self.params[f"{self.prefix}.b_out"]

    def logits(self, z: Optional[Tensor], batch: Batch) -> Tuple[Tensor, np.ndarray, np.ndarray]:
        """Teacher-forced logits ``((T+1)*B, V)`` with flattened targets and weights."""
        inputs, targets, weights = frame(batch)
        emb = self._inputs(z, inputs)
        _, hs = self.rnn.run(emb)
        Tp, B, H = hs.shape
        return self._project(ad.reshape(hs, (Tp * B, H))), targets.reshape(-1), weights.reshape(-1)

    def nll(self, z: Optional[Tensor], batch: Batch) -> Tensor:
        """Batch mean of ``-log p(x | z)`` summed over tokens and the end token."""
        logits, targets, weights = self.logits(z, batch)
        return ad.softmax_cross_entropy(logits, targets, weights / len(batch))

    def sequence_log_likelihood(self, z: Optional[Tensor], batch: Batch) -> np.ndarray:
        """Per-sequence ``log p(x | z)`` as a ``(B,)`` array (no graph)."""
        with ad.no_grad():
            logits, targets, weights = self.logits(z, batch)
        lp = ad.log_softmax(logits).data
        per_pos = lp[np.arange(len(targets)), targets] * weights
        T1 = per_pos.size // len(batch)
        return per_pos.reshape(T1, len(batch)).sum(axis=0)

    def greedy(self, z: Optional[np.ndarray], max_len: int, batch_size: Optional[int] = None) -> List[List[int]]:
        """Argmax decoding (ties -> lowest id) until ``<eos>`` or ``max_len`` tokens."""
        if max_len > self.cfg.max_length:
            raise ValueError(f"max_len {max_len} exceeds configured max_length {self.cfg.max_length}")
        B = z.shape[0] if z is not None else int(batch_size or 1)
        H = self.cfg.hidden_dim
        p = self.params
        embed = p[f"{self.prefix}.embed"].data
        zemb = 0.0
        if z is not None and f"{self.prefix}.w_z" in p:
            zemb = np.asarray(z, dtype=float) @ p[f"{self.prefix}.w_z"].data
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        tok = np.full(B, BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out: List[List[int]] = [[] for _ in range(B)]
        for _ in range(max_len + 1):
            h, c = self._step(embed[tok] + zemb, h, c)
            tok = self._project_np(h).argmax(axis=1)
            for b in np.nonzero(~done)[0]:
                if tok[b] == EOS or len(out[b]) >= max_len:
                    done[b] = True
                else:
                    out[b].append(int(tok[b]))
            if done.all():
                break
        return [[t for t in s if t not in _STRIP] for s in out]

    def _project_np(self, h: np.ndarray) -> np.ndarray:
        return h @ self.params[f"{self.prefix}.w_out"].data + self.params[f"{self.prefix}.b_out"].data

    def _step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        # mirrors Recurrent.run for a single step, without graph bookkeeping
        rnn = self.rnn
        H = rnn.hidden_dim
        xt = x @ rnn.w_x.data + rnn.b_x.data
        hh = h @ rnn.w_h.data + rnn.b_h.data
        if rnn.cell == "gru":
            ru = ad._stable_sigmoid(xt[:, : 2 * H] + hh[:, : 2 * H])
            r, u = ru[:, :H], ru[:, H:]
            n = np.tanh(xt[:, 2 * H :] + r * hh[:, 2 * H :])
            return n + u * (h - n), c
        g = xt + hh
        ifo = ad._stable_sigmoid(g[:, : 3 * H])
        i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
        cn = f * c + i * np.tanh(g[:, 3 * H :])
        return o * np.tanh(cn), cn


class Discriminator:
    """One-hidden-layer MLP scoring how prior-like a latent code is."""

    def __init__(self, cfg: ModelConfig, rng):
        s = cfg.init_scale
        self.params = {
            "disc.w1": _weight((cfg.latent_dim, cfg.disc_hidden), rng, s),
            "disc.b1": ad.zeros_parameter(cfg.disc_hidden),
            "disc.w2": _weight((cfg.disc_hidden, 1), rng, s),
            "disc.b2": ad.zeros_parameter(1),
        }

    def logit(self, z: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(z @ p["disc.w1"] + p["disc.b1"])
        return ad.reshape(h @ p["disc.w2"] + p["disc.b2"], (-1,))

    def __call__(self, z) -> np.ndarray:
        """Probability that each row of ``z`` was drawn from the prior."""
        with ad.no_grad():
            return ad.sigmoid(self.logit(ad.as_tensor(np.atleast_2d(z)))).data


class SeqAutoencoder:
    """Encoder E, generator G and discriminator D sharing one config."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.encoder = Encoder(cfg, rng, head_rng=np.random.default_rng([seed, 1]))
        self.decoder = Decoder(cfg, rng)
        self.discriminator = Discriminator(cfg, rng)

    @property
    def params(self) -> Dict[str, Tensor]:
        return {**self.encoder.params, **self.decoder.params, **self.discriminator.params}

    def group(self, *prefixes: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".")[0] in prefixes}

    def bind(self, tensors: Dict[str, Tensor]) -> None:
        """Swap in new parameter tensors by name (used for gradient checks)."""
        for module in (self.encoder, self.decoder, self.discriminator):
            for k in module.params:
                if k in tensors:
                    module.params[k] = tensors[k]
        for rnn in (self.encoder.rnn, self.decoder.rnn):
            for k in rnn.params:
                if k in tensors:
                    rnn.params[k] = tensors[k]
            rnn.w_x, rnn.w_h, rnn.b_x, rnn.b_h = rnn.params.values()

    def _check(self, seqs: Sequence[Sequence[int]]) -> None:
        V = self.cfg.vocab_size
        for s in seqs:
            if any(t < 0 or t >= V for t in s):
                raise ValueError(f"token id outside vocabulary of size {V}: {list(s)}")
            if len(s) > self.cfg.max_length:
                raise ValueError(f"sequence of length {len(s)} exceeds max_length {self.cfg.max_length}")

    def encode(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        """Deterministic latent codes (the mean head) as a ``(B, d)`` array."""
        seqs = list(seqs)
        self._check(seqs)
        if not seqs:
            return np.zeros((0, self.cfg.latent_dim))
        with ad.no_grad():
            mu, _ = self.encoder(pad_batch(seqs))
        return mu.data

    def encode_many(self, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        seqs = list(seqs)
        parts = [self.encode(seqs[i : i + batch_size]) for i in range(0, len(seqs), batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, self.cfg.latent_dim))

    def decode_log_likelihood(self, z, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        """``log p_G(x | z)`` per sequence, end token included."""
        seqs = list(seqs)
        self._check(seqs)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.decoder.sequence_log_likelihood(Tensor(z), pad_batch(seqs))

    def decode_greedy(self, z, max_len: Optional[int] = None) -> List[List[int]]:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.decoder.greedy(z, self.cfg.max_length if max_len is None else max_len)

    def decode_greedy_many(self, z, max_len=None, batch_size: int = 256) -> List[List[int]]:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out: List[List[int]] = []
        for i in range(0, len(z), batch_size):
            out.extend(self.decode_greedy(z[i : i + batch_size], max_len))
        return out

    def reconstruct(self, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> List[List[int]]:
        return self.decode_greedy_many(self.encode_many(seqs, batch_size), batch_size=batch_size)

    def discriminate(self, z) -> np.ndarray:
        return self.discriminator(z)


class LanguageModel:
    """The decoder architecture with the latent input removed (``z == 0``)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.decoder = Decoder(cfg, np.random.default_rng(seed), prefix="lm", latent=False)

    @property
    def params(self) -> Dict[str, Tensor]:
        return self.decoder.params

    def nll(self, batch: Batch) -> Tensor:
        return self.decoder.nll(None, batch)

    def log_likelihood(self, seqs: Sequence[Sequence[int]]) -> np.ndarray:
        return self.decoder.sequence_log_likelihood(None, pad_batch(list(seqs)))


def token_accuracy(model: SeqAutoencoder, seqs: Sequence[Sequence[int]]) -> float:
    """Fraction of reference positions reproduced by greedy reconstruction.

    Positions are compared index by index; missing or extra tokens count as
    errors against ``max(len(ref), len(hyp))``.
    """
    hyps = model.reconstruct(seqs)
    hit = total = 0
    for ref, hyp in zip(seqs, hyps):
        n = max(len(ref), len(hyp))
        total += n
        hit += sum(1 for a, b in zip(ref, hyp) if a == b)
    return hit / total if total else 1.0
