"""Decision-step policies used by rollouts: the raw base policy, the
scripted expert, verifier-guided rank selection, and the full
sample-expand-verify-select pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .action_vae import MixturePosterior, encode_batch, sample_candidates
from .selector import ScoredCandidates, select_action
from .sim_env import base_policy_sample, encode_state, expert_chunk
from .verifier import score_batch

POLICY_KINDS = ("base", "expert", "tapsample", "rank-best", "rank-worst")


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    num_policy_samples: int = 4   # N initial draws from the base policy
    num_candidates: int = 12      # M extra chunks decoded from the mixture
    threshold: float = 0.02
    rank_k: int = 8

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(
                f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}"
            )
        if self.num_policy_samples < 1:
            raise ValueError("num_policy_samples must be >= 1")
        if self.num_candidates < 0:
            raise ValueError("num_candidates must be >= 0")
        if self.rank_k < 1:
            raise ValueError("rank_k must be >= 1")

    def describe(self):
        if self.kind == "tapsample":
            return (
                f"tapsample(n={self.num_policy_samples}, m={self.num_candidates}, "
                f"threshold={self.threshold})"
            )
        if self.kind.startswith("rank"):
            return f"{self.kind}(k={self.rank_k})"
        return self.kind


def make_decider(spec, config, vae=None, verifier=None):
    """Build the ``decide(state, rng) -> (chunk, info)`` hook for a spec.

    Raises if the spec needs a model that was not supplied.
    """
    if spec.kind == "expert":
        return lambda state, rng: (expert_chunk(config, state), {})

    if spec.kind == "base":
        return lambda state, rng: (base_policy_sample(config, state, rng), {})

    if spec.kind in ("rank-best", "rank-worst"):
        if verifier is None:
            raise ValueError(f"policy {spec.kind!r} needs a verifier checkpoint")
        take_best = spec.kind == "rank-best"

        def decide_rank(state, rng):
            cands = [base_policy_sample(config, state, rng) for _ in range(spec.rank_k)]
            scores = score_batch(verifier, encode_state(state), cands)
            pick = int(np.argmax(scores) if take_best else np.argmin(scores))
            return cands[pick], {"score": float(scores[pick])}

        return decide_rank

    # tapsample
    if vae is None:
        raise ValueError("policy 'tapsample' needs a vae checkpoint")
    if verifier is None:
        raise ValueError("policy 'tapsample' needs a verifier checkpoint")

    def decide_tapsample(state, rng):
        policy_chunks = [
            base_policy_sample(config, state, rng)
            for _ in range(spec.num_policy_samples)
        ]
        extras = expand_candidates(vae, policy_chunks, spec.num_candidates, rng)
        pool = policy_chunks + extras
        scores = score_batch(verifier, encode_state(state), pool)
        chunk, report = select_action(
            ScoredCandidates(pool, scores, spec.threshold)
        )
        return chunk, {
            "retained": report.retained_count,
            "fallback": report.used_fallback,
        }

    return decide_tapsample


def expand_candidates(vae, policy_chunks, m, rng):
    """Encode the policy draws, mix their posteriors, and decode m extra
    candidates."""
    if m == 0:
        return []
    means, log_vars = encode_batch(vae, policy_chunks)
    mix = MixturePosterior(means, log_vars)
    return sample_candidates(vae, mix, m, rng)
