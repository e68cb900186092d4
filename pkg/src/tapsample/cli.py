"""Command-line entry point: data generation, training, evaluation,
benchmarks, and sweeps, all seeded and reproducible.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .action_vae import (
    VaeTrainConfig,
    load_vae,
    reconstruction_rms,
    save_vae,
    train_vae,
)
from .eval_metrics import (
    DEFAULT_GAMMAS,
    OOD_FAMILIES,
    episode_lines,
    evaluate_policy,
    format_metric,
    latency_bench,
    mmd_protocol,
    ood_eval,
    policy_report_lines,
    retry_eval,
)
from .policies import POLICY_KINDS, PolicySpec
from .sim_env import EnvConfig, generate_trajectories
from .traj_data import all_forward_chunks, build_training_pairs, read_dataset, write_dataset
from .verifier import VerifierTrainConfig, load_verifier, save_verifier, train_verifier


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this tool reserves 2 for runtime
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_env_flags(p):
    g = p.add_argument_group("environment")
    g.add_argument("--horizon", type=int, default=EnvConfig.horizon,
                   help="episode length in substeps (default %(default)s)")
    g.add_argument("--chunk-horizon", type=int, default=EnvConfig.chunk_horizon,
                   help="substeps per action chunk (default %(default)s)")
    g.add_argument("--noise", type=float, default=EnvConfig.policy_noise,
                   help="base-policy action noise (default %(default)s)")
    g.add_argument("--rho", type=float, default=EnvConfig.distractor_prob,
                   help="base-policy distractor probability (default %(default)s)")
    return p


def _env_config(args):
    return EnvConfig(
        horizon=args.horizon,
        chunk_horizon=args.chunk_horizon,
        policy_noise=args.noise,
        distractor_prob=args.rho,
    )


def _config_line(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return "# config " + json.dumps(resolved, sort_keys=True, default=str)


def _write_report(path, lines):
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    sys.stdout.write(text)


def _policy_spec(args):
    return PolicySpec(
        kind=args.policy,
        num_policy_samples=args.num_policy_samples,
        num_candidates=args.num_candidates,
        threshold=args.threshold,
        rank_k=args.rank_k,
    )


def _load_models(args):
    vae = load_vae(args.vae) if getattr(args, "vae", None) else None
    verifier = load_verifier(args.verifier) if getattr(args, "verifier", None) else None
    return vae, verifier


def cmd_gen_data(args):
    config = _env_config(args)
    dataset = generate_trajectories(config, args.episodes, args.seed)
    write_dataset(args.out, dataset)
    lengths = [t.length for t in dataset]
    print(f"wrote {len(dataset)} trajectories to {args.out} "
          f"(substeps: min {min(lengths)}, mean {np.mean(lengths):.1f}, max {max(lengths)})")
    return 0


def cmd_train_vae(args):
    dataset = read_dataset(args.data)
    config = VaeTrainConfig(
        latent_dim=args.latent_dim,
        kl_weight=args.kl_weight,
        steps=args.steps,
        batch=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        chunk_horizon=args.chunk_horizon,
        input_noise=args.input_noise,
    )
    vae, log = train_vae(dataset, config)
    save_vae(args.out, vae)
    lines = [
        _config_line(args),
        format_metric("vae_holdout_rms", log.holdout_rms),
        format_metric("vae_holdout_chunks", log.holdout_count),
    ]
    _write_report(args.report, lines)
    return 0


def cmd_train_verifier(args):
    dataset = read_dataset(args.data)
    samples = build_training_pairs(dataset, k=args.chunk_horizon, seed=args.seed,
                                   samples_per_traj=args.samples_per_traj)
    config = VerifierTrainConfig(
        steps=args.steps,
        batch=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
    )
    verifier, log = train_verifier(samples, config)
    save_verifier(args.out, verifier)
    lines = [
        _config_line(args),
        format_metric("verifier_samples", len(samples)),
        format_metric("verifier_holdout_mae", log.holdout_mae),
    ]
    _write_report(args.report, lines)
    return 0


def cmd_eval(args):
    config = _env_config(args)
    spec = _policy_spec(args)
    vae, verifier = _load_models(args)
    report = evaluate_policy(config, spec, args.episodes, args.seed,
                             vae=vae, verifier=verifier)
    lines = [_config_line(args)]
    lines += episode_lines(report.episodes)
    lines += policy_report_lines(report)
    _write_report(args.report, lines)
    return 0


def cmd_bench_mmd(args):
    config = _env_config(args)
    vae, _ = _load_models(args)
    gammas = tuple(float(g) for g in args.gammas.split(","))
    report = mmd_protocol(vae, config, num_states=args.states,
                          samples_per_state=args.samples_per_state,
                          num_fit=args.num_fit, gammas=gammas, seed=args.seed)
    lines = [_config_line(args)]
    for strategy in ("gaussian", "posterior"):
        for gamma, med in zip(report.gammas, report.medians(strategy)):
            lines.append(format_metric(f"mmd_median_{strategy}_gamma{gamma:g}", med))
    _write_report(args.report, lines)
    return 0


def cmd_bench_latency(args):
    config = _env_config(args)
    vae, verifier = _load_models(args)
    report = latency_bench(config, vae, verifier, trials=args.trials, seed=args.seed)
    lines = [_config_line(args)]
    for count, ms in sorted(report.median_policy_ms.items()):
        lines.append(format_metric(f"latency_policy_{count}_ms", ms))
    lines.append(format_metric("latency_gaussian_extra_ms", report.median_gaussian_extra_ms))
    lines.append(format_metric("latency_posterior_extra_ms", report.median_posterior_extra_ms))
    for name, ms in sorted(report.median_verify_ms.items()):
        lines.append(format_metric(f"latency_verify_{name}_ms", ms))
    lines.append(format_metric("latency_policy_scaling_16_vs_4", report.policy_scaling_16_vs_4))
    lines.append(format_metric("latency_verify_batch_vs_single", report.verify_batch_vs_single))
    _write_report(args.report, lines)
    return 0


def cmd_eval_ood(args):
    dataset = read_dataset(args.data)
    _, verifier = _load_models(args)
    hist = ood_eval(verifier, dataset, threshold=args.threshold,
                    k=args.chunk_horizon, seed=args.seed,
                    samples_per_traj=args.samples_per_traj)
    lines = [_config_line(args)]
    for fam in OOD_FAMILIES:
        lines.append(format_metric(f"ood_mean_{fam}", hist.mean_scores[fam]))
    lines.append(format_metric("ood_filter_rate", hist.filter_rate))
    for fam in OOD_FAMILIES:
        pct = " ".join(f"{p:.1f}" for p in hist.percentages(fam))
        lines.append(f"# histogram {fam}: {pct}")
    _write_report(args.report, lines)
    return 0


def cmd_eval_retry(args):
    config = _env_config(args)
    spec = _policy_spec(args)
    vae, verifier = _load_models(args)
    report = retry_eval(config, spec, max_retries=args.max_retries,
                        episodes=args.episodes, seed=args.seed,
                        vae=vae, verifier=verifier)
    lines = [_config_line(args)]
    for n, rate in enumerate(report.pass_at):
        lines.append(format_metric(f"pass_at_{n + 1}", rate))
    _write_report(args.report, lines)
    return 0


def cmd_eval_rank(args):
    config = _env_config(args)
    _, verifier = _load_models(args)
    from .eval_metrics import rank_order_eval

    report = rank_order_eval(config, args.rank_k, args.mode, args.episodes,
                             args.seed, verifier)
    lines = [_config_line(args)]
    lines += episode_lines(report.episodes)
    lines += policy_report_lines(report, prefix=f"rank_{args.mode}_")
    _write_report(args.report, lines)
    return 0


def cmd_sweep(args):
    config = _env_config(args)
    values = [int(v) for v in args.values.split(",")]
    lines = [_config_line(args)]
    if args.over == "num-candidates":
        vae, verifier = _load_models(args)
        if vae is None or verifier is None:
            raise ValueError("sweep over num-candidates needs --vae and --verifier")
        for m in values:
            spec = PolicySpec(kind="tapsample", num_policy_samples=args.num_policy_samples,
                              num_candidates=m, threshold=args.threshold)
            report = evaluate_policy(config, spec, args.episodes, args.seed,
                                     vae=vae, verifier=verifier)
            lines.append(format_metric(f"sweep_success_rate_m{m}", report.success_rate))
    else:  # latent-dim
        if args.data is None:
            raise ValueError("sweep over latent-dim needs --data")
        dataset = read_dataset(args.data)
        for d in values:
            cfg = VaeTrainConfig(latent_dim=d, steps=args.steps, seed=args.seed,
                                 chunk_horizon=args.chunk_horizon)
            vae, log = train_vae(dataset, cfg)
            lines.append(format_metric(f"sweep_holdout_rms_d{d}", log.holdout_rms))
    _write_report(args.report, lines)
    return 0


def build_parser():
    parser = _Parser(prog="tapsample",
                     description="Inference-time action sampling bench: generate "
                                 "data, train models, run the evaluation protocols.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate expert trajectories")
    _add_env_flags(p)
    p.add_argument("--episodes", type=int, default=500, help="trajectories to collect (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the action-chunk VAE")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--latent-dim", type=int, default=6, help="latent dimension (default %(default)s)")
    p.add_argument("--kl-weight", type=float, default=1e-3, help="KL term weight (default %(default)s)")
    p.add_argument("--steps", type=int, default=15000, help="Adam steps (default %(default)s)")
    p.add_argument("--batch", type=int, default=64, help="batch size (default %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default %(default)s)")
    p.add_argument("--input-noise", type=float, default=0.02,
                   help="denoising augmentation scale (default %(default)s)")
    p.add_argument("--chunk-horizon", type=int, default=8, help="substeps per chunk (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="optional report file")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-verifier", help="train the progress verifier")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--steps", type=int, default=20000, help="Adam steps (default %(default)s)")
    p.add_argument("--batch", type=int, default=64, help="batch size (default %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default %(default)s)")
    p.add_argument("--chunk-horizon", type=int, default=8, help="substeps per chunk (default %(default)s)")
    p.add_argument("--samples-per-traj", type=int, default=None,
                   help="training pairs per direction per trajectory (default: all)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="optional report file")
    p.set_defaults(func=cmd_train_verifier)

    def add_eval_common(p, default_policy="tapsample"):
        _add_env_flags(p)
        p.add_argument("--policy", default=default_policy, choices=POLICY_KINDS,
                       help="policy spec (default %(default)s)")
        p.add_argument("--vae", default=None, help="VAE checkpoint")
        p.add_argument("--verifier", default=None, help="verifier checkpoint")
        p.add_argument("--num-policy-samples", type=int, default=4,
                       help="initial policy draws N (default %(default)s)")
        p.add_argument("--num-candidates", type=int, default=12,
                       help="extra posterior candidates M (default %(default)s)")
        p.add_argument("--threshold", type=float, default=0.02,
                       help="selector retention threshold (default %(default)s)")
        p.add_argument("--rank-k", type=int, default=8,
                       help="candidates per decision for rank policies (default %(default)s)")
        p.add_argument("--episodes", type=int, default=500, help="episodes (default %(default)s)")
        p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
        p.add_argument("--report", default=None, help="report file")

    p = sub.add_parser("eval", help="evaluate a policy spec over seeded episodes")
    add_eval_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-mmd", help="sampling-fidelity MMD comparison")
    _add_env_flags(p)
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--states", type=int, default=100, help="evaluation states (default %(default)s)")
    p.add_argument("--samples-per-state", type=int, default=256,
                   help="samples per strategy per state (default %(default)s)")
    p.add_argument("--num-fit", type=int, default=4,
                   help="policy draws used to build each distribution (default %(default)s)")
    p.add_argument("--gammas", default=",".join(str(g) for g in DEFAULT_GAMMAS),
                   help="comma-separated RBF bandwidth parameters (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="report file")
    p.set_defaults(func=cmd_bench_mmd)

    p = sub.add_parser("bench-latency", help="sampling/verification latency structure")
    _add_env_flags(p)
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--verifier", required=True, help="verifier checkpoint")
    p.add_argument("--trials", type=int, default=100, help="timing trials (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="report file")
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("eval-ood", help="score out-of-distribution chunk families")
    p.add_argument("--verifier", required=True, help="verifier checkpoint")
    p.add_argument("--data", required=True, help="held-out dataset file")
    p.add_argument("--threshold", type=float, default=0.02,
                   help="filter threshold (default %(default)s)")
    p.add_argument("--chunk-horizon", type=int, default=8, help="substeps per chunk (default %(default)s)")
    p.add_argument("--samples-per-traj", type=int, default=4,
                   help="probe indices per trajectory (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="report file")
    p.set_defaults(func=cmd_eval_ood)

    p = sub.add_parser("eval-retry", help="pass@k with full-episode retries")
    add_eval_common(p, default_policy="base")
    p.add_argument("--max-retries", type=int, default=3,
                   help="restart attempts after a failure (default %(default)s)")
    p.set_defaults(func=cmd_eval_retry)

    p = sub.add_parser("eval-rank", help="execute best- or worst-scoring of k candidates")
    _add_env_flags(p)
    p.add_argument("--verifier", required=True, help="verifier checkpoint")
    p.add_argument("--mode", choices=("best", "worst"), default="best",
                   help="pick the highest or lowest score (default %(default)s)")
    p.add_argument("--rank-k", type=int, default=8, help="candidates per decision (default %(default)s)")
    p.add_argument("--episodes", type=int, default=200, help="episodes (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="report file")
    p.set_defaults(func=cmd_eval_rank)

    p = sub.add_parser("sweep", help="sweep candidate count or latent dimension")
    _add_env_flags(p)
    p.add_argument("--over", choices=("num-candidates", "latent-dim"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integer values")
    p.add_argument("--data", default=None, help="dataset file (latent-dim mode)")
    p.add_argument("--vae", default=None, help="VAE checkpoint (num-candidates mode)")
    p.add_argument("--verifier", default=None, help="verifier checkpoint (num-candidates mode)")
    p.add_argument("--num-policy-samples", type=int, default=4,
                   help="initial policy draws N (default %(default)s)")
    p.add_argument("--threshold", type=float, default=0.02,
                   help="selector threshold (default %(default)s)")
    p.add_argument("--episodes", type=int, default=200, help="episodes per value (default %(default)s)")
    p.add_argument("--steps", type=int, default=15000,
                   help="VAE training steps in latent-dim mode (default %(default)s)")
    p.add_argument("--chunk-horizon", type=int, default=8, help="substeps per chunk (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default %(default)s)")
    p.add_argument("--report", default=None, help="report file")
    p.set_defaults(func=cmd_sweep)

    return parser


def dispatch(argv):
    """Parse and run. Returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return int(args.func(args) or 0)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"tapsample: error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
