"""Action-chunk VAE: diagonal Gaussian posterior over a compressed
latent, decoder back to chunks, ELBO training with the reparameterization
trick, uniform mixture posteriors, and batched candidate generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .nn_core import (
    DimensionMismatchError,
    TrainingDivergenceError,
    adam_step,
    apply_params,
    finite_difference_grads,
    gradient_relative_error,
    init_adam,
    init_mlp,
    interleave_grads,
    mlp_backward,
    mlp_forward,
    mlp_from_tensors,
    mlp_parameters,
    mlp_to_tensors,
)
from .traj_data import ActionChunk, all_forward_chunks

DEFAULT_LATENT_DIM = 6
DEFAULT_KL_WEIGHT = 1e-3
DEFAULT_HIDDEN = (64, 64)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the latent: mean and log-variance vectors."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape or self.mean.ndim != 1:
            raise DimensionMismatchError("mean and log_var must be equal-length vectors")

    @property
    def dim(self):
        return self.mean.size

    @property
    def variance(self):
        return np.exp(self.log_var)

    @property
    def std(self):
        return np.exp(0.5 * self.log_var)


@dataclass
class MixturePosterior:
    """Uniform-weight mixture of N diagonal Gaussians, stored stacked:
    means and log_vars have shape (N, d)."""

    means: np.ndarray
    log_vars: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.log_vars = np.asarray(self.log_vars, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.log_vars.shape:
            raise DimensionMismatchError("means/log_vars must both be (N, d)")
        if self.means.shape[0] < 1:
            raise ValueError("mixture needs at least one component")

    @property
    def num_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def components(self):
        return [GaussianPosterior(m, lv) for m, lv in zip(self.means, self.log_vars)]

    def mean(self):
        return self.means.mean(axis=0)

    def second_moment(self):
        """Per-dimension E[z^2] = (1/N) sum_i (var_i + mean_i^2)."""
        return (np.exp(self.log_vars) + self.means**2).mean(axis=0)


def mix_posterior(posteriors):
    """Uniform mixture of per-chunk posteriors. No fitting involved."""
    if not posteriors:
        raise ValueError("cannot mix an empty sequence of posteriors")
    dims = {p.dim for p in posteriors}
    if len(dims) != 1:
        raise DimensionMismatchError(f"components disagree on latent dim: {sorted(dims)}")
    return MixturePosterior(
        np.stack([p.mean for p in posteriors]),
        np.stack([p.log_var for p in posteriors]),
    )


def sample_latents(mix, m, rng):
    """Draw m latents: pick a component uniformly per sample, then draw
    from it. With a single component the index draw is skipped, so the
    stream matches direct Gaussian sampling exactly."""
    if m < 0:
        raise ValueError("sample count must be >= 0")
    rng = np.random.default_rng(rng)
    d = mix.dim
    if m == 0:
        return np.empty((0, d))
    if mix.num_components == 1:
        means = np.broadcast_to(mix.means[0], (m, d))
        stds = np.broadcast_to(np.exp(0.5 * mix.log_vars[0]), (m, d))
    else:
        idx = rng.integers(0, mix.num_components, size=m)
        means = mix.means[idx]
        stds = np.exp(0.5 * mix.log_vars[idx])
    eps = rng.standard_normal((m, d))
    return means + stds * eps


def kl_to_standard_normal(mean, log_var):
    """Closed-form KL(N(mean, diag(exp(log_var))) || N(0, I)):
    0.5 * sum(mean^2 + var - 1 - log var). Nonnegative, zero iff the
    posterior equals the prior."""
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    return 0.5 * float(np.sum(mean**2 + np.exp(log_var) - 1.0 - log_var))


@dataclass
class ActionVae:
    """Encoder maps a flat chunk (3H) to (mean, log-variance) over a
    d-dimensional latent; decoder maps a latent back to a flat chunk."""

    encoder: "Mlp"
    decoder: "Mlp"
    latent_dim: int
    kl_weight: float

    @property
    def chunk_dim(self):
        return self.encoder.layer_sizes[0]


def new_action_vae(chunk_dim=24, latent_dim=DEFAULT_LATENT_DIM,
                   kl_weight=DEFAULT_KL_WEIGHT, hidden=DEFAULT_HIDDEN, seed=0):
    rng = np.random.default_rng(seed)
    encoder = init_mlp((chunk_dim, *hidden, 2 * latent_dim), "tanh", rng)
    decoder = init_mlp((latent_dim, *hidden, chunk_dim), "tanh", rng)
    return ActionVae(encoder, decoder, latent_dim, kl_weight)


def _chunk_matrix(chunks, chunk_dim):
    if isinstance(chunks, ActionChunk):
        chunks = [chunks]
    if isinstance(chunks, np.ndarray):
        mat = np.atleast_2d(np.asarray(chunks, dtype=np.float64))
    else:
        mat = np.stack([c.flat for c in chunks])
    if mat.shape[1] != chunk_dim:
        raise DimensionMismatchError(
            f"chunk length {mat.shape[1]} does not match model chunk dim {chunk_dim}"
        )
    return mat


def encode_batch(vae, chunks):
    """(B, 3H) chunks -> means (B, d), log_vars (B, d)."""
    mat = _chunk_matrix(chunks, vae.chunk_dim)
    out, _ = mlp_forward(vae.encoder, mat)
    return out[:, : vae.latent_dim], out[:, vae.latent_dim :]


def encode(vae, chunk):
    """Deterministic posterior for one chunk."""
    means, log_vars = encode_batch(vae, chunk)
    return GaussianPosterior(means[0], log_vars[0])


def decode_batch(vae, latents):
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if latents.shape[1] != vae.latent_dim:
        raise DimensionMismatchError(
            f"latent dim {latents.shape[1]} does not match model dim {vae.latent_dim}"
        )
    out, _ = mlp_forward(vae.decoder, latents)
    return out


def decode(vae, z):
    """Deterministic chunk for one latent. Outputs are not clamped here;
    clamping to [0, 1] belongs to execution, not the loss."""
    return ActionChunk(decode_batch(vae, np.asarray(z, dtype=np.float64))[0])


def sample_candidates(vae, mix, m, rng):
    """Draw m latents from the mixture and decode them into chunks."""
    latents = sample_latents(mix, m, rng)
    if latents.shape[0] == 0:
        return []
    decoded = decode_batch(vae, latents)
    return [ActionChunk(row) for row in decoded]


def vae_parameters(vae):
    enc_params, enc_names = mlp_parameters(vae.encoder)
    dec_params, dec_names = mlp_parameters(vae.decoder)
    names = [f"encoder.{n}" for n in enc_names] + [f"decoder.{n}" for n in dec_names]
    return enc_params + dec_params, names


def _vae_loss_batch(vae, chunks, noise):
    """Mean ELBO-style loss over a batch with frozen reparameterization
    noise: per-coordinate MSE of decode(mean + std * noise) against the
    chunk plus kl_weight * KL(posterior || N(0, I)), averaged over the
    batch. Returns (loss, recon, kl, grads) with grads ordered like
    vae_parameters."""
    chunks = np.atleast_2d(chunks)
    noise = np.atleast_2d(noise)
    if noise.shape != (chunks.shape[0], vae.latent_dim):
        raise DimensionMismatchError(
            f"noise must be ({chunks.shape[0]}, {vae.latent_dim}), got {noise.shape}"
        )
    return _vae_loss_encoder_input(vae, chunks, chunks, noise)


def vae_loss(vae, chunk, noise):
    """Loss and gradients for a single chunk with frozen noise."""
    mat = _chunk_matrix(chunk, vae.chunk_dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(1, -1)
    loss, _, _, grads = _vae_loss_batch(vae, mat, noise)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite VAE loss {loss}")
    return loss, grads


@dataclass
class VaeTrainConfig:
    latent_dim: int = DEFAULT_LATENT_DIM
    kl_weight: float = DEFAULT_KL_WEIGHT
    steps: int = 15000
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: tuple = DEFAULT_HIDDEN
    chunk_horizon: int = 8
    holdout_fraction: float = 0.1
    input_noise: float = 0.02  # denoising augmentation on encoder inputs


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)  # (step, loss, recon, kl)
    holdout_rms: float = float("nan")
    holdout_count: int = 0


def _split_trajectories(dataset, holdout_fraction, rng):
    order = rng.permutation(len(dataset))
    n_hold = max(1, int(round(holdout_fraction * len(dataset)))) if len(dataset) > 1 else 0
    hold = [dataset[i] for i in order[:n_hold]]
    train = [dataset[i] for i in order[n_hold:]]
    if not train:
        train, hold = hold, []
    return train, hold


def reconstruction_rms(vae, chunks):
    """Per-coordinate RMS of decode(encoder mean) against the chunks."""
    mat = _chunk_matrix(chunks, vae.chunk_dim)
    means, _ = encode_batch(vae, mat)
    recon = decode_batch(vae, means)
    return float(np.sqrt(np.mean((recon - mat) ** 2)))


def train_vae(dataset, config=None):
    """Train an ActionVae on all forward chunks of the dataset.

    Deterministic given config.seed. Encoder inputs get Gaussian noise of
    scale config.input_noise while reconstruction targets the clean chunk,
    so posteriors stay calibrated for the slightly noisy chunks seen at
    inference time. Returns (vae, TrainLog); a non-finite loss aborts with
    the step number.
    """
    config = config or VaeTrainConfig()
    rng = np.random.default_rng(config.seed)
    train_trajs, hold_trajs = _split_trajectories(dataset, config.holdout_fraction, rng)
    train_chunks = all_forward_chunks(train_trajs, config.chunk_horizon)
    hold_chunks = (
        all_forward_chunks(hold_trajs, config.chunk_horizon) if hold_trajs else None
    )

    vae = new_action_vae(
        chunk_dim=3 * config.chunk_horizon,
        latent_dim=config.latent_dim,
        kl_weight=config.kl_weight,
        hidden=config.hidden,
        seed=rng,
    )
    params, names = vae_parameters(vae)
    state = init_adam(params, learning_rate=config.learning_rate)
    log = TrainLog()
    log_every = max(1, config.steps // 50)

    for step in range(config.steps):
        idx = rng.integers(0, train_chunks.shape[0], size=config.batch)
        target = train_chunks[idx]
        inputs = target
        if config.input_noise > 0:
            inputs = target + config.input_noise * rng.standard_normal(target.shape)
        noise = rng.standard_normal((config.batch, config.latent_dim))
        loss, recon, kl, grads = _vae_loss_encoder_input(vae, inputs, target, noise)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"VAE training diverged at step {step}")
        params, state = adam_step(params, grads, state, names)
        vae = ActionVae(
            apply_params(vae.encoder, params[: 2 * len(vae.encoder.weights)]),
            apply_params(vae.decoder, params[2 * len(vae.encoder.weights) :]),
            vae.latent_dim,
            vae.kl_weight,
        )
        if step % log_every == 0 or step == config.steps - 1:
            log.entries.append((step, loss, recon, kl))

    if hold_chunks is not None:
        log.holdout_rms = reconstruction_rms(vae, hold_chunks)
        log.holdout_count = hold_chunks.shape[0]
    return vae, log


def _vae_loss_encoder_input(vae, inputs, target, noise):
    """Like _vae_loss_batch but encoding ``inputs`` while reconstructing
    ``target`` (they coincide in the plain autoencoding case)."""
    batch = inputs.shape[0]
    d = vae.latent_dim
    enc_out, enc_tape = mlp_forward(vae.encoder, inputs)
    mean, log_var = enc_out[:, :d], enc_out[:, d:]
    std = np.exp(0.5 * log_var)
    z = mean + std * noise
    recon, dec_tape = mlp_forward(vae.decoder, z)

    err = recon - target
    recon_loss = float(np.mean(err**2))
    var = np.exp(log_var)
    kl_loss = float(np.mean(0.5 * np.sum(mean**2 + var - 1.0 - log_var, axis=1)))
    loss = recon_loss + vae.kl_weight * kl_loss

    d_recon = 2.0 * err / err.size
    dec_wg, dec_bg, dz = mlp_backward(vae.decoder, dec_tape, d_recon)
    d_mean = dz + vae.kl_weight * mean / batch
    d_log_var = dz * (0.5 * std * noise) + vae.kl_weight * 0.5 * (var - 1.0) / batch
    enc_wg, enc_bg, _ = mlp_backward(
        vae.encoder, enc_tape, np.concatenate([d_mean, d_log_var], axis=1)
    )
    grads = interleave_grads(enc_wg, enc_bg) + interleave_grads(dec_wg, dec_bg)
    return loss, recon_loss, kl_loss, grads


def save_vae(path, vae):
    tensors = {
        "vae.latent_dim": ckpt.save_scalar(vae.latent_dim),
        "vae.kl_weight": ckpt.save_scalar(vae.kl_weight),
    }
    tensors.update(mlp_to_tensors(vae.encoder, "vae.encoder"))
    tensors.update(mlp_to_tensors(vae.decoder, "vae.decoder"))
    ckpt.save_checkpoint(path, tensors)


def load_vae(path):
    tensors = ckpt.load_checkpoint(path)
    encoder = mlp_from_tensors(tensors, "vae.encoder")
    decoder = mlp_from_tensors(tensors, "vae.decoder")
    latent_dim = int(round(ckpt.load_scalar(tensors, "vae.latent_dim")))
    kl_weight = ckpt.load_scalar(tensors, "vae.kl_weight")
    return ActionVae(encoder, decoder, latent_dim, kl_weight)


def vae_grad_check(trials=20, h=1e-3, seed=0, chunk_dim=6, latent_dim=2, hidden=(5,)):
    """Finite-difference check of the full VAE loss (reconstruction + KL,
    reparameterized) with noise frozen per trial. Returns a list of
    per-trial relative errors."""
    rel_errs = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
        vae = new_action_vae(chunk_dim, latent_dim, kl_weight=0.5, hidden=hidden, seed=rng)
        chunk = rng.uniform(0.0, 1.0, size=chunk_dim)
        noise = rng.standard_normal(latent_dim)

        _, grads = vae_loss(vae, chunk.reshape(1, -1), noise)
        params, _ = vae_parameters(vae)

        def eval_loss():
            loss, _, _, _ = _vae_loss_batch(
                vae, chunk.reshape(1, -1), noise.reshape(1, -1)
            )
            return loss

        numeric = finite_difference_grads(eval_loss, params, h)
        rel_errs.append(gradient_relative_error(grads, numeric))
    return rel_errs
