"""Input corruption, training losses and the alternating update schedule.

Objectives:

* ``ae``        reconstruction only (a DAE when a perturbation is configured)
* ``aae``       reconstruction + adversarial prior matching on ``E(x)``
* ``daae``      as ``aae`` but the encoder reads a corrupted ``x``
* ``beta-vae``  reconstruction from ``z = mu + sigma * eps`` + ``beta * KL``
* ``laae``      ``aae`` on ``z = mu + sigma * eps`` + ``lambda1 * |log sigma^2|_1``

Randomness is split into independent streams derived from ``(seed, epoch)``:
batch order, corruption, prior samples and reparameterization noise. A
``daae`` run with ``p = 0`` therefore replays an ``aae`` run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .corpus import BOS, EOS, MASK, NUM_SPECIAL, PAD, Batch, Corpus, batches, pad_batch
from .seqmodel import SeqAutoencoder

PERTURBATIONS = ("none", "bit-flip", "word-delete", "word-mask", "word-replace")
OBJECTIVES = ("ae", "aae", "daae", "beta-vae", "laae")
ADVERSARIAL = ("aae", "daae", "laae")
VARIATIONAL = ("beta-vae", "laae")
_FRAMING = (PAD, BOS, EOS)

# stream ids for per-epoch generators
SHUFFLE, CORRUPT, PRIOR, NOISE = range(4)


class TrainingError(RuntimeError):
    """A loss became non-finite; carries the offending batch and components."""

    def __init__(self, message: str, epoch: int, batch_index: int, components: Mapping[str, float]):
        super().__init__(f"{message} (epoch {epoch}, batch {batch_index}, losses {dict(components)})")
        self.epoch = epoch
        self.batch_index = batch_index
        self.components = dict(components)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "none"
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {PERTURBATIONS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"perturbation probability must lie in [0, 1], got {self.p}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.p > 0.0


def perturb(seq: Sequence[int], spec: PerturbationSpec, rng: np.random.Generator, vocab_size: int) -> List[int]:
    """Corrupt one token sequence.

    Each content token is independently flipped (``bit-flip``), dropped
    (``word-delete``), replaced by ``<mask>`` (``word-mask``) or replaced by a
    uniformly drawn content token (``word-replace``) with probability ``p``.
    Framing tokens are never touched.
    """
    seq = list(seq)
    n_content = vocab_size - NUM_SPECIAL
    if spec.kind == "bit-flip" and n_content != 2:
        raise ValueError(f"bit-flip needs a binary alphabet, vocabulary has {n_content} content tokens")
    if not spec.active or not seq:
        return seq
    hit = rng.random(len(seq)) < spec.p
    if spec.kind == "word-delete":
        return [t for t, h in zip(seq, hit) if not h or t in _FRAMING]
    out = list(seq)
    if spec.kind == "word-replace":
        draws = rng.integers(NUM_SPECIAL, vocab_size, size=len(seq))
    for k, (t, h) in enumerate(zip(seq, hit)):
        if not h or t in _FRAMING:
            continue
        if spec.kind == "bit-flip":
            if t >= NUM_SPECIAL:
                out[k] = 2 * NUM_SPECIAL + 1 - t  # 5 <-> 6
        elif spec.kind == "word-mask":
            out[k] = MASK
        else:
            out[k] = int(draws[k])
    return out


def perturb_batch(batch: Batch, spec: PerturbationSpec, rng, vocab_size: int) -> Batch:
    if not spec.active:
        return batch
    return pad_batch([perturb(s, spec, rng, vocab_size) for s in batch.sequences()], batch.index)


@dataclass
class TrainConfig:
    objective: str = "daae"
    lam: float = 10.0
    beta: float = 0.15
    lambda1: float = 0.05
    perturbation: PerturbationSpec = field(default_factory=lambda: PerturbationSpec("word-delete", 0.3))
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    disc_lr: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.perturbation, Mapping):
            self.perturbation = PerturbationSpec(**self.perturbation)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if min(self.lam, self.beta, self.lambda1) < 0:
            raise ValueError("lam, beta and lambda1 must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @property
    def corruption(self) -> PerturbationSpec:
        """The perturbation actually applied during training."""
        if self.objective in ("ae", "daae"):
            return self.perturbation
        return PerturbationSpec()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perturbation"] = asdict(self.perturbation)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))


# loss terms

def gaussian_kl(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions, averaged over rows."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"gaussian_kl: incompatible shapes {mu.shape} and {logvar.shape}")
    if not (np.isfinite(mu.data).all() and np.isfinite(logvar.data).all()):
        raise ad.NumericError("gaussian_kl: non-finite input")
    rows = mu.shape[0] if mu.ndim > 1 else 1
    terms = ad.exp(logvar) + mu * mu - 1.0 - logvar
    return ad.sum_(terms) * (0.5 / rows)


def laae_regularizer(logvar, lambda1: float) -> Tensor:
    """``lambda1 * sum_i |logvar_i|`` averaged over rows."""
    logvar = ad.as_tensor(logvar)
    rows = logvar.shape[0] if logvar.ndim > 1 else 1
    return ad.sum_(ad.abs_(logvar)) * (lambda1 / rows)


def discriminator_loss(disc, z: Tensor, prior_rng: np.random.Generator) -> Tensor:
    """``mean(-log D(z_prior)) + mean(-log(1 - D(z)))`` with ``z`` held constant.

    One prior sample is drawn per row of ``z``.
    """
    z_prior = Tensor(prior_rng.standard_normal(z.shape))
    z_const = Tensor(z.data)
    return -ad.mean(ad.log_sigmoid(disc.logit(z_prior))) - ad.mean(ad.log_sigmoid(-disc.logit(z_const)))


def encoder_adversarial_loss(disc, z: Tensor) -> Tensor:
    """Non-saturating encoder loss ``mean(-log D(z))``."""
    return -ad.mean(ad.log_sigmoid(disc.logit(z)))


def adversarial_losses(disc, z: Tensor, prior_rng: np.random.Generator):
    """``(discriminator loss, encoder adversarial loss)`` against the current discriminator."""
    return discriminator_loss(disc, z, prior_rng), encoder_adversarial_loss(disc, z)


def encode_latent(model: SeqAutoencoder, batch: Batch, objective: str, noise_rng=None):
    """Encode and, for variational objectives, sample ``z = mu + exp(logvar/2) * eps``.

    With ``noise_rng=None`` variational encoders return their mean.
    """
    mu, logvar = model.encoder(batch)
    if objective in VARIATIONAL:
        if logvar is None:
            raise ValueError(f"objective {objective!r} needs a model built with variational=True")
        if noise_rng is not None:
            eps = Tensor(noise_rng.standard_normal(mu.shape))
            return mu + ad.exp(logvar * 0.5) * eps, mu, logvar
    return mu, mu, logvar


def reconstruction_loss(model: SeqAutoencoder, batch: Batch, spec: PerturbationSpec, rng=None) -> Tensor:
    """Mean over the batch of ``-log p_G(x | E(C(x)))`` with fresh corruption."""
    enc_in = perturb_batch(batch, spec, rng, model.cfg.vocab_size) if spec.active else batch
    mu, _ = model.encoder(enc_in)
    return model.decoder.nll(mu, batch)


def batch_losses(
    model: SeqAutoencoder,
    batch: Batch,
    config: TrainConfig,
    rngs=None,
    on_disc_loss: Optional[Callable[[Tensor], None]] = None,
) -> Dict[str, Tensor]:
    """All loss terms for one batch, keyed ``rec``, ``disc``, ``adv``, ``kl``, ``l1``, ``total``.

    ``rngs`` maps stream ids to generators (training mode). ``None`` selects
    evaluation mode: no corruption, no reparameterization noise, and a fixed
    prior draw (seed 0) for the discriminator loss.

    ``on_disc_loss`` is called with the discriminator loss before the
    encoder's adversarial term is built, so a discriminator update made there
    is seen by that term.
    """
    obj = config.objective
    if rngs is None:
        enc_in, noise, prior = batch, None, np.random.default_rng(0)
    else:
        enc_in = perturb_batch(batch, config.corruption, rngs[CORRUPT], model.cfg.vocab_size)
        noise, prior = rngs[NOISE], rngs[PRIOR]
    z, mu, logvar = encode_latent(model, enc_in, obj, noise)
    out = {"rec": model.decoder.nll(z, batch)}
    total = out["rec"]
    if obj in ADVERSARIAL:
        out["disc"] = discriminator_loss(model.discriminator, z, prior)
        if on_disc_loss is not None:
            on_disc_loss(out["disc"])
        out["adv"] = encoder_adversarial_loss(model.discriminator, z)
        total = total + config.lam * out["adv"]
    if obj == "beta-vae":
        out["kl"] = gaussian_kl(mu, logvar)
        total = total + config.beta * out["kl"]
    if obj == "laae":
        out["l1"] = laae_regularizer(logvar, config.lambda1)
        total = total + out["l1"]
    out["total"] = total
    return out


class Optimizers:
    """Adam for encoder+decoder and, separately, for the discriminator."""

    def __init__(self, model: SeqAutoencoder, config: TrainConfig):
        b = (config.beta1, config.beta2)
        self.ae = Adam(model.group("enc", "dec"), config.lr, *b)
        self.disc = Adam(model.group("disc"), config.disc_lr or config.lr, *b)


def train_epoch(
    model: SeqAutoencoder,
    corpus: Corpus,
    config: TrainConfig,
    optim: Optimizers,
    epoch: int,
) -> Dict[str, float]:
    """One pass over shuffled batches; returns example-weighted mean losses.

    Per batch: one discriminator Adam step (adversarial objectives only), then
    one encoder+decoder Adam step on the total loss. Reported ``disc`` values
    are measured before the discriminator step.

    Raises:
        TrainingError: a loss term is NaN or infinite.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    rngs = {s: epoch_rng(config.seed, epoch, s) for s in (CORRUPT, PRIOR, NOISE)}
    sums: Dict[str, float] = {}
    for k, batch in enumerate(batches(corpus, config.batch_size, shuffle_seed=shuffle_seed(config.seed, epoch))):
        optim.ae.zero_grad()
        optim.disc.zero_grad()

        def step_disc(d_loss: Tensor) -> None:
            if not math.isfinite(d_loss.item()):
                raise TrainingError("non-finite discriminator loss", epoch, k, {"disc": d_loss.item()})
            d_loss.backward()
            optim.disc.step()
            optim.disc.zero_grad()

        losses = batch_losses(model, batch, config, rngs, on_disc_loss=step_disc)
        values = {name: t.item() for name, t in losses.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingError("non-finite loss", epoch, k, values)
        losses["total"].backward()
        optim.ae.step()
        for name, v in values.items():
            sums[name] = sums.get(name, 0.0) + v * len(batch)
    return {name: v / len(corpus) for name, v in sums.items()}


def shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, SHUFFLE]).generate_state(1)[0])


def evaluate_losses(model: SeqAutoencoder, corpus: Corpus, config: TrainConfig, batch_size: int = 256) -> Dict[str, float]:
    """Deterministic per-corpus losses (no corruption, no noise)."""
    sums: Dict[str, float] = {}
    with ad.no_grad():
        for batch in batches(corpus, batch_size):
            for name, t in batch_losses(model, batch, config, None).items():
                sums[name] = sums.get(name, 0.0) + t.item() * len(batch)
    return {name: v / len(corpus) for name, v in sums.items()}


def fit(
    model: SeqAutoencoder,
    corpus: Corpus,
    config: TrainConfig,
    optim: Optional[Optimizers] = None,
    start_epoch: int = 0,
    callback: Optional[Callable[[int, Dict[str, float]], None]] = None,
) -> List[Dict[str, float]]:
    """Train from ``start_epoch`` up to ``config.epochs``; returns per-epoch metrics."""
    optim = optim or Optimizers(model, config)
    history = []
    for epoch in range(start_epoch, config.epochs):
        metrics = train_epoch(model, corpus, config, optim, epoch)
        history.append(metrics)
        if callback is not None:
            callback(epoch, metrics)
    return history


def fit_language_model(lm, corpus: Corpus, epochs: int, batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Train a :class:`LanguageModel` by teacher forcing; returns per-epoch mean NLL."""
    if len(corpus) == 0:
        raise ValueError("cannot train a language model on an empty corpus")
    opt = Adam(lm.params, lr, 0.9, 0.999)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for batch in batches(corpus, batch_size, shuffle_seed=shuffle_seed(seed, epoch)):
            opt.zero_grad()
            loss = lm.nll(batch)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        history.append(total / len(corpus))
    return history
