"""Task-progress verifier: a state/instruction backbone run once per
decision step and a lightweight action head scored in a batch over all
candidate chunks, trained with L1 regression on progress increments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .nn_core import (
    DimensionMismatchError,
    TrainingDivergenceError,
    adam_step,
    apply_params,
    init_adam,
    init_mlp,
    interleave_grads,
    mlp_backward,
    mlp_forward,
    mlp_from_tensors,
    mlp_parameters,
    mlp_to_tensors,
)
from .sim_env import STATE_DIM, encode_state  # re-exported: the state layout lives with the simulator

__all__ = [
    "Verifier",
    "VerifierTrainConfig",
    "encode_state",
    "new_verifier",
    "score_batch",
    "train_verifier",
    "save_verifier",
    "load_verifier",
]

DEFAULT_FEATURE_DIM = 32


@dataclass
class Verifier:
    """backbone: state encoding -> feature vector, evaluated once per
    decision step; head: concat(features, chunk) -> predicted progress
    change, evaluated per candidate."""

    backbone: "Mlp"
    head: "Mlp"

    @property
    def feature_dim(self):
        return self.backbone.layer_sizes[-1]

    @property
    def chunk_dim(self):
        return self.head.layer_sizes[0] - self.feature_dim


def new_verifier(state_dim=STATE_DIM, feature_dim=DEFAULT_FEATURE_DIM, chunk_dim=24,
                 backbone_hidden=(64,), head_hidden=(64,), seed=0):
    rng = np.random.default_rng(seed)
    backbone = init_mlp((state_dim, *backbone_hidden, feature_dim), "tanh", rng)
    head = init_mlp((feature_dim + chunk_dim, *head_hidden, 1), "tanh", rng)
    return Verifier(backbone, head)


def _candidate_matrix(candidates, chunk_dim):
    if isinstance(candidates, np.ndarray):
        mat = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    else:
        mat = np.stack([c.flat for c in candidates])
    if mat.shape[1] != chunk_dim:
        raise DimensionMismatchError(
            f"candidate length {mat.shape[1]} does not match verifier chunk dim {chunk_dim}"
        )
    return mat


def score_batch(verifier, state_encoding, candidates):
    """Scores for every candidate chunk under one state.

    The backbone runs exactly once on the state; its features are
    replicated and the head scored over the whole candidate batch, so
    results are bit-identical to scoring candidates one at a time.
    """
    if len(candidates) == 0:
        raise ValueError("score_batch needs at least one candidate")
    state_encoding = np.asarray(state_encoding, dtype=np.float64)
    features, _ = mlp_forward(verifier.backbone, state_encoding)
    mat = _candidate_matrix(candidates, verifier.chunk_dim)
    head_in = np.concatenate(
        [np.tile(features, (mat.shape[0], 1)), mat], axis=1
    )
    out, _ = mlp_forward(verifier.head, head_in)
    return out[:, 0].copy()


def verifier_parameters(verifier):
    b_params, b_names = mlp_parameters(verifier.backbone)
    h_params, h_names = mlp_parameters(verifier.head)
    names = [f"backbone.{n}" for n in b_names] + [f"head.{n}" for n in h_names]
    return b_params + h_params, names


def _l1_loss_and_grads(verifier, states, chunks, labels):
    """Mean |prediction - label| over the batch with exact gradients for
    backbone and head (sign(0) taken as 0)."""
    feats, b_tape = mlp_forward(verifier.backbone, states)
    head_in = np.concatenate([feats, chunks], axis=1)
    preds, h_tape = mlp_forward(verifier.head, head_in)
    preds = preds[:, 0]
    resid = preds - labels
    loss = float(np.mean(np.abs(resid)))
    d_pred = (np.sign(resid) / resid.size)[:, None]
    h_wg, h_bg, d_head_in = mlp_backward(verifier.head, h_tape, d_pred)
    d_feats = d_head_in[:, : verifier.feature_dim]
    b_wg, b_bg, _ = mlp_backward(verifier.backbone, b_tape, d_feats)
    grads = interleave_grads(b_wg, b_bg) + interleave_grads(h_wg, h_bg)
    return loss, preds, grads


@dataclass
class VerifierTrainConfig:
    steps: int = 20000
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    feature_dim: int = DEFAULT_FEATURE_DIM
    backbone_hidden: tuple = (64,)
    head_hidden: tuple = (64,)
    holdout_fraction: float = 0.1


@dataclass
class VerifierTrainLog:
    entries: list = field(default_factory=list)  # (step, train_l1)
    holdout_mae: float = float("nan")
    holdout_count: int = 0


def _sample_arrays(samples):
    states = np.stack([s.state for s in samples])
    chunks = np.stack([s.chunk.flat for s in samples])
    labels = np.asarray([s.delta_p for s in samples])
    return states, chunks, labels


def train_verifier(samples, config=None):
    """Adam on mean |V(s, l, a) - dp| over the given ProgressSamples.

    Deterministic given config.seed; returns (verifier, log) with the final
    held-out mean absolute error. A non-finite loss aborts with the step
    number.
    """
    if not samples:
        raise ValueError("no training samples")
    config = config or VerifierTrainConfig()
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    n_hold = int(round(config.holdout_fraction * len(samples))) if len(samples) > 1 else 0
    hold = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]] or [samples[i] for i in order]
    states, chunks, labels = _sample_arrays(train)

    verifier = new_verifier(
        state_dim=states.shape[1],
        feature_dim=config.feature_dim,
        chunk_dim=chunks.shape[1],
        backbone_hidden=config.backbone_hidden,
        head_hidden=config.head_hidden,
        seed=rng,
    )
    params, names = verifier_parameters(verifier)
    state = init_adam(params, learning_rate=config.learning_rate)
    log = VerifierTrainLog()
    log_every = max(1, config.steps // 50)
    n_backbone = 2 * len(verifier.backbone.weights)

    for step in range(config.steps):
        idx = rng.integers(0, states.shape[0], size=config.batch)
        loss, _, grads = _l1_loss_and_grads(
            verifier, states[idx], chunks[idx], labels[idx]
        )
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"verifier training diverged at step {step}")
        params, state = adam_step(params, grads, state, names)
        verifier = Verifier(
            apply_params(verifier.backbone, params[:n_backbone]),
            apply_params(verifier.head, params[n_backbone:]),
        )
        if step % log_every == 0 or step == config.steps - 1:
            log.entries.append((step, loss))

    if hold:
        h_states, h_chunks, h_labels = _sample_arrays(hold)
        preds = predict_batch(verifier, h_states, h_chunks)
        log.holdout_mae = float(np.mean(np.abs(preds - h_labels)))
        log.holdout_count = len(hold)
    return verifier, log


def predict_batch(verifier, states, chunks):
    """Predictions for per-row (state, chunk) pairs; the backbone runs on
    the full state batch (training/eval convenience, not the shared-state
    inference path)."""
    feats, _ = mlp_forward(verifier.backbone, states)
    head_in = np.concatenate([feats, np.atleast_2d(chunks)], axis=1)
    out, _ = mlp_forward(verifier.head, head_in)
    return out[:, 0]


def save_verifier(path, verifier):
    tensors = mlp_to_tensors(verifier.backbone, "verifier.backbone")
    tensors.update(mlp_to_tensors(verifier.head, "verifier.head"))
    ckpt.save_checkpoint(path, tensors)


def load_verifier(path):
    tensors = ckpt.load_checkpoint(path)
    backbone = mlp_from_tensors(tensors, "verifier.backbone")
    head = mlp_from_tensors(tensors, "verifier.head")
    return Verifier(backbone, head)
