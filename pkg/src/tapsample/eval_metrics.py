"""Quantitative experiment protocols: MMD sampling-fidelity comparison,
policy evaluation, rank-ordering execution length, out-of-distribution
score histograms, retry upper bounds, and latency structure benchmarks.

Every report is a pure function of (models, config, seed) except the
wall-clock fields of the latency benchmark.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .action_vae import MixturePosterior, encode_batch, sample_latents, decode_batch
from .policies import PolicySpec, expand_candidates, make_decider
from .sim_env import (
    base_policy_sample,
    encode_state,
    expert_chunk,
    reset,
    rollout_episode,
    step_chunk,
)
from .traj_data import ActionChunk, Task, forward_chunk, reverse_chunk
from .verifier import score_batch

DEFAULT_GAMMAS = (2.0, 4.0, 6.0, 8.0, 10.0)

# stream ids keep seed derivations for unrelated protocols disjoint
_STREAM_EVAL_ENV = 1
_STREAM_EVAL_POLICY = 2
_STREAM_MMD = 3
_STREAM_OOD = 4
_STREAM_LATENCY = 5


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


# --- maximum mean discrepancy ---

def _sq_dists(x, y):
    x2 = np.sum(x * x, axis=1)[:, None]
    y2 = np.sum(y * y, axis=1)[None, :]
    d2 = x2 + y2 - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def mmd(x, y, gamma):
    """Square root of the biased (V-statistic) squared MMD with RBF kernel
    exp(-gamma * ||a - b||^2). The biased form makes mmd(X, X) exactly 0."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd needs at least one sample on each side")
    k_xx = float(np.mean(np.exp(-gamma * _sq_dists(x, x))))
    k_yy = float(np.mean(np.exp(-gamma * _sq_dists(y, y))))
    k_xy = float(np.mean(np.exp(-gamma * _sq_dists(x, y))))
    return float(np.sqrt(max(k_xx + k_yy - 2.0 * k_xy, 0.0)))


@dataclass
class MmdReport:
    gammas: tuple
    num_states: int
    samples_per_state: int
    num_fit: int
    per_state: dict = field(default_factory=dict)  # strategy -> (states, gammas)

    def medians(self, strategy):
        return np.median(self.per_state[strategy], axis=0)


def _evaluation_state(config, seed_keys):
    """A seeded held-out state: fresh reset advanced by 0-3 expert chunks
    so mid-task contexts (carrying, approaching) appear too."""
    rng = _rng(*seed_keys)
    state = reset(config, rng)
    for _ in range(int(rng.integers(0, 4))):
        nxt, done = step_chunk(config, state, expert_chunk(config, state))
        if done:
            break
        state = nxt
    return state, rng


def mmd_protocol(vae, config, num_states=100, samples_per_state=256, num_fit=4,
                 gammas=DEFAULT_GAMMAS, seed=0):
    """Sampling-fidelity comparison on flattened chunks.

    Per state: draw the reference policy samples; fit a diagonal Gaussian
    to the first ``num_fit`` of them and sample from it; build the mixture
    posterior from the same chunks and decode the same number of samples.
    All sample sets are clamped to [0, 1] (execution semantics) before the
    kernel statistic.
    """
    report = MmdReport(tuple(gammas), num_states, samples_per_state, num_fit)
    gauss = np.empty((num_states, len(gammas)))
    post = np.empty((num_states, len(gammas)))
    for s_i in range(num_states):
        state, rng = _evaluation_state(config, (seed, _STREAM_MMD, s_i))
        ref_chunks = [
            base_policy_sample(config, state, rng) for _ in range(samples_per_state)
        ]
        ref = np.stack([c.flat for c in ref_chunks])
        fit = ref[:num_fit]

        mu = fit.mean(axis=0)
        sigma = np.maximum(fit.std(axis=0), 1e-8)
        gauss_samples = np.clip(
            mu + sigma * rng.standard_normal((samples_per_state, ref.shape[1])), 0.0, 1.0
        )

        means, log_vars = encode_batch(vae, fit)
        mix = MixturePosterior(means, log_vars)
        latents = sample_latents(mix, samples_per_state, rng)
        post_samples = np.clip(decode_batch(vae, latents), 0.0, 1.0)

        for g_i, gamma in enumerate(gammas):
            gauss[s_i, g_i] = mmd(gauss_samples, ref, gamma)
            post[s_i, g_i] = mmd(post_samples, ref, gamma)
    report.per_state["gaussian"] = gauss
    report.per_state["posterior"] = post
    return report


# --- policy evaluation ---

@dataclass
class PolicyEvalReport:
    spec: PolicySpec
    episodes: list
    seed: int

    @property
    def num_episodes(self):
        return len(self.episodes)

    @property
    def success_rate(self):
        return float(np.mean([e.success for e in self.episodes]))

    @property
    def mean_substeps_success(self):
        used = [e.substeps_used for e in self.episodes if e.success]
        return float(np.mean(used)) if used else float("nan")

    @property
    def mean_substeps(self):
        return float(np.mean([e.substeps_used for e in self.episodes]))

    def per_task(self):
        out = {}
        for task in Task:
            eps = [e for e in self.episodes if e.task == task]
            if eps:
                used = [e.substeps_used for e in eps if e.success]
                out[task] = {
                    "count": len(eps),
                    "success_rate": float(np.mean([e.success for e in eps])),
                    "mean_substeps_success": float(np.mean(used)) if used else float("nan"),
                }
        return out


def evaluate_policy(config, spec, episodes, seed, vae=None, verifier=None):
    """Seeded aggregate over fresh episodes; reproducible bit for bit."""
    decide = make_decider(spec, config, vae=vae, verifier=verifier)
    records = []
    for i in range(episodes):
        records.append(
            rollout_episode(
                config,
                decide,
                env_seed=np.random.SeedSequence([seed, _STREAM_EVAL_ENV, i]),
                policy_seed=np.random.SeedSequence([seed, _STREAM_EVAL_POLICY, i]),
            )
        )
    return PolicyEvalReport(spec=spec, episodes=records, seed=seed)


def rank_order_eval(config, k, mode, episodes, seed, verifier):
    """Execute the highest- (best) or lowest- (worst) scoring of k policy
    candidates at every decision step."""
    if mode not in ("best", "worst"):
        raise ValueError(f"mode must be 'best' or 'worst', got {mode!r}")
    spec = PolicySpec(kind=f"rank-{mode}", rank_k=k)
    return evaluate_policy(config, spec, episodes, seed, verifier=verifier)


# --- retry upper bound ---

@dataclass
class RetryReport:
    max_retries: int
    episodes: int
    pass_at: list  # pass_at[n] = success within n+1 attempts


def retry_eval(config, spec, max_retries, episodes, seed, vae=None, verifier=None):
    """Up to ``max_retries`` full restarts of the same seeded initial
    state under fresh policy randomness; attempt 0 reproduces
    evaluate_policy exactly."""
    decide = make_decider(spec, config, vae=vae, verifier=verifier)
    first_success = np.full(episodes, -1, dtype=int)
    for i in range(episodes):
        for attempt in range(max_retries + 1):
            policy_keys = [seed, _STREAM_EVAL_POLICY, i]
            if attempt > 0:
                policy_keys.append(attempt)
            ep = rollout_episode(
                config,
                decide,
                env_seed=np.random.SeedSequence([seed, _STREAM_EVAL_ENV, i]),
                policy_seed=np.random.SeedSequence(policy_keys),
            )
            if ep.success:
                first_success[i] = attempt
                break
    pass_at = [
        float(np.mean((first_success >= 0) & (first_success <= n)))
        for n in range(max_retries + 1)
    ]
    return RetryReport(max_retries=max_retries, episodes=episodes, pass_at=pass_at)


# --- out-of-distribution score families ---

OOD_FAMILIES = ("forward", "backward", "half_speed", "random", "corrupted")


@dataclass
class OodHistogram:
    threshold: float
    bin_edges: np.ndarray
    counts: dict              # family -> per-bin counts
    scores: dict              # family -> raw scores
    mean_scores: dict
    filter_rate: float        # fraction of non-forward scores <= threshold

    def percentages(self, family):
        c = self.counts[family]
        return 100.0 * c / max(c.sum(), 1)


def _half_speed_chunk(traj, i, k):
    """Forward chunk resampled at half the per-substep pose advance: path
    points are the recorded action poses, targets interpolate at half
    parameter speed, grips come from the action covering each segment."""
    path = np.vstack([traj.states[i, 0:2], traj.actions[i : i + k, 0:2]])
    grips = traj.actions[i : i + k, 2]
    flat = np.empty(3 * k)
    for j in range(1, k + 1):
        tau = j / 2.0
        lo = int(np.floor(tau))
        hi = int(np.ceil(tau))
        frac = tau - lo
        pose = (1.0 - frac) * path[lo] + frac * path[hi]
        flat[3 * (j - 1) : 3 * (j - 1) + 2] = pose
        flat[3 * (j - 1) + 2] = grips[max(hi - 1, 0)]
    return ActionChunk(flat)


def ood_eval(verifier, dataset, threshold, k=8, seed=0, samples_per_traj=4, num_bins=10):
    """Score five chunk families on held-out trajectories.

    forward: expert windows; backward: time-reversed windows; half_speed:
    forward windows at half pose advance; random: forward windows taken
    from a different trajectory; corrupted: forward windows with the grip
    channel inverted. One backbone run scores all five families per state.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_OOD]))
    scores = {fam: [] for fam in OOD_FAMILIES}
    eligible = [t for t in dataset if t.length >= 2 * k]
    if not eligible:
        raise ValueError(f"no trajectory long enough for both directions (need t >= {2 * k})")
    for t_i, traj in enumerate(eligible):
        lo, hi = k, traj.length - k
        n_pick = min(samples_per_traj, hi - lo + 1)
        picks = rng.choice(np.arange(lo, hi + 1), size=n_pick, replace=False)
        for i in picks:
            i = int(i)
            if len(eligible) > 1:
                j = int(rng.integers(0, len(eligible) - 1))
                other = eligible[j + 1 if j >= t_i else j]
            else:
                other = traj
            oi = int(rng.integers(0, other.length - k + 1))
            fwd = forward_chunk(traj, i, k)
            fams = [
                fwd,
                reverse_chunk(traj, i, k),
                _half_speed_chunk(traj, i, k),
                forward_chunk(other, oi, k),
                ActionChunk(_invert_grip(fwd.flat)),
            ]
            out = score_batch(verifier, traj.states[i], fams)
            for fam, s in zip(OOD_FAMILIES, out):
                scores[fam].append(float(s))
    scores = {fam: np.asarray(v) for fam, v in scores.items()}
    pooled = np.concatenate(list(scores.values()))
    lo_edge, hi_edge = float(pooled.min()), float(pooled.max())
    if lo_edge == hi_edge:
        hi_edge = lo_edge + 1e-9
    edges = np.linspace(lo_edge, hi_edge, num_bins + 1)
    counts = {fam: np.histogram(v, bins=edges)[0] for fam, v in scores.items()}
    non_forward = np.concatenate([scores[f] for f in OOD_FAMILIES if f != "forward"])
    return OodHistogram(
        threshold=threshold,
        bin_edges=edges,
        counts=counts,
        scores=scores,
        mean_scores={fam: float(v.mean()) for fam, v in scores.items()},
        filter_rate=float(np.mean(non_forward <= threshold)),
    )


def _invert_grip(flat):
    out = flat.copy()
    out[2::3] = 1.0 - out[2::3]
    return out


# --- latency structure ---

@dataclass
class LatencyReport:
    trials: int
    median_policy_ms: dict        # draw count -> ms
    median_gaussian_extra_ms: float
    median_posterior_extra_ms: float
    median_verify_ms: dict        # ("single"|"batch16"|"sequential16") -> ms

    @property
    def policy_scaling_16_vs_4(self):
        return self.median_policy_ms[16] / self.median_policy_ms[4]

    @property
    def verify_batch_vs_single(self):
        return self.median_verify_ms["batch16"] / self.median_verify_ms["single"]


def _median_time_ms(fn, trials):
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def latency_bench(config, vae, verifier, trials=100, num_fit=4, num_extra=12, seed=0):
    """Wall-clock structure checks: posterior expansion vs direct policy
    draws, and batched vs sequential verification."""
    state, rng = _evaluation_state(config, (seed, _STREAM_LATENCY, 0))
    base_draws = [base_policy_sample(config, state, rng) for _ in range(num_fit)]
    fit = np.stack([c.flat for c in base_draws])
    state_enc = encode_state(state)
    cands16 = [base_policy_sample(config, state, rng) for _ in range(16)]

    policy_ms = {}
    for count in (num_fit, 16):
        policy_ms[count] = _median_time_ms(
            lambda c=count: [base_policy_sample(config, state, rng) for _ in range(c)],
            trials,
        )

    def gaussian_extra():
        mu = fit.mean(axis=0)
        sigma = np.maximum(fit.std(axis=0), 1e-8)
        np.clip(mu + sigma * rng.standard_normal((num_extra, fit.shape[1])), 0.0, 1.0)

    def posterior_extra():
        expand_candidates(vae, base_draws, num_extra, rng)

    verify_ms = {
        "single": _median_time_ms(
            lambda: score_batch(verifier, state_enc, cands16[:1]), trials
        ),
        "batch16": _median_time_ms(
            lambda: score_batch(verifier, state_enc, cands16), trials
        ),
        "sequential16": _median_time_ms(
            lambda: [score_batch(verifier, state_enc, [c]) for c in cands16], trials
        ),
    }
    return LatencyReport(
        trials=trials,
        median_policy_ms=policy_ms,
        median_gaussian_extra_ms=_median_time_ms(gaussian_extra, trials),
        median_posterior_extra_ms=_median_time_ms(posterior_extra, trials),
        median_verify_ms=verify_ms,
    )


# --- report text ---

def format_metric(name, value):
    """One machine-readable report line. Floats use repr so reruns with
    the same seed emit identical bytes."""
    if isinstance(value, (bool, np.bool_)):
        value = int(value)
    if isinstance(value, (int, np.integer)):
        return f"METRIC {name} {int(value)}"
    return f"METRIC {name} {repr(float(value))}"


def episode_lines(episodes):
    return [
        f"EPISODE {seed_label(e.env_seed)} {int(e.task)} {int(e.success)} {e.substeps_used}"
        for e in episodes
    ]


def seed_label(env_seed):
    """Stable text form of an episode seed (SeedSequence keys or int)."""
    if isinstance(env_seed, np.random.SeedSequence):
        ent = env_seed.entropy
        if isinstance(ent, (list, tuple)):
            return ".".join(str(v) for v in ent)
        return str(ent)
    return str(env_seed)


def policy_report_lines(report, prefix=""):
    lines = [
        format_metric(prefix + "episodes", report.num_episodes),
        format_metric(prefix + "success_rate", report.success_rate),
        format_metric(prefix + "mean_substeps_success", report.mean_substeps_success),
        format_metric(prefix + "mean_substeps", report.mean_substeps),
    ]
    for task, stats in sorted(report.per_task().items()):
        tag = task.name.lower()
        lines.append(format_metric(f"{prefix}success_rate_{tag}", stats["success_rate"]))
        lines.append(
            format_metric(
                f"{prefix}mean_substeps_success_{tag}", stats["mean_substeps_success"]
            )
        )
    return lines
