"""``sota`` command line: gen-data, train, eval, explain, cutoff, bench-diffusion.

Every command writes ``run.cfg`` (the resolved configuration) and
``run.json`` (command, config hash, build hash) into its output directory.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite
numerics.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, seed_stream
from .datapipe import (DataError, TrainingSet, archive_hash, dataset_read, dataset_write,
                       denormalize_actions, fit_stats)
from .numerics import CheckpointError, NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def build_hash() -> dict:
    """Digest of the installed package sources plus the git revision when available."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], cwd=root, capture_output=True,
                             text=True, timeout=5).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        rev = None
    return {"source_sha256": h.hexdigest()[:16], "git": rev}


def stamp(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run.cfg")
    meta = {"command": command, "config_hash": cfg.digest(), "build": build_hash()}
    meta.update(extra or {})
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_config(args, **overrides) -> RunConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "config", None):
        return RunConfig.load(args.config, **overrides)
    return RunConfig(overrides)


def _load_policy(path):
    from .policy import DiffusionPolicy
    return DiffusionPolicy.load(path)


def _policy_run_config(policy) -> RunConfig:
    meta = getattr(policy, "meta", {})
    text = meta.get("run_config")
    return RunConfig.loads(text) if text else RunConfig()


# -- commands ------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .sim import collect_demos
    cfg = load_config(args, n_demos=args.n, seed=args.seed, suite=args.perturb)
    out = Path(args.out)
    eps = collect_demos(cfg["n_demos"], seed_stream(cfg["seed"], "data"), cfg.sim_config(),
                        suite=cfg["suite"])
    ok = [e for e in eps if e.success]
    stats = fit_stats(ok or eps)
    manifest = dataset_write(eps, out, cfg.digest(), stats)
    digest = archive_hash(out)
    stamp(out, cfg, "gen-data", {"archive_sha256": digest})
    print(f"episodes {len(eps)} successful {len(ok)} steps {manifest['n_steps']} archive {digest[:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .policy import DiffusionPolicy, train
    cfg = load_config(args, epochs=args.epochs, max_steps=args.max_steps, seed=args.seed,
                      variant=args.variant, mask_force=args.mask_force, mask_pose=args.mask_pose)
    pcfg = cfg.policy_config()
    episodes, stats, manifest = dataset_read(args.data)
    episodes = [e for e in episodes if e.success]
    if not episodes:
        raise DataError("archive holds no successful demonstrations")
    stats = stats or fit_stats(episodes)
    data = TrainingSet(episodes, stats, pcfg.backbone.t_w, pcfg.t_h)
    out = Path(args.out)
    stamp(out, cfg, "train", {"data_config_hash": manifest.get("config_hash")})
    policy = DiffusionPolicy(pcfg, stats)
    log = (lambda m: print(m, flush=True)) if not args.quiet else None
    res = train(policy, data, resume=args.resume, checkpoint_every=args.checkpoint_every,
                out=str(out), log=log)
    policy_meta = json.loads((out / "policy.json").read_text())
    policy_meta["run_config"] = cfg.dumps()
    (out / "policy.json").write_text(json.dumps(policy_meta, indent=1, sort_keys=True))
    res.write_csv(out / "loss.csv")
    if res.losses:
        print(f"pairs {len(data)} steps {res.steps} loss {res.losses[0][2]:.4f} -> {res.losses[-1][2]:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .cutoff import bootstrap_ci
    from .policy import LearnedPolicy
    from .sim import evaluate_policy, export_outcomes_csv
    policy = _load_policy(args.checkpoint)
    base = _policy_run_config(policy)
    mask = {"force": dict(mask_force=True), "pose": dict(mask_pose=True),
            "none": dict(mask_force=False, mask_pose=False)}.get(args.mask, {})
    cfg = base.replace(**{k: v for k, v in dict(n_eval=args.n, suite=args.perturb, seed=args.seed,
                                                    n_infer=args.n_infer, **mask).items() if v is not None})
    policy.cfg = replace(policy.cfg, mask_force=cfg["mask_force"], mask_pose=cfg["mask_pose"])
    out = Path(args.out)
    stamp(out, cfg, "eval", {"checkpoint": policy.meta.get("params_sha256")})
    outcomes, summary = evaluate_policy(LearnedPolicy(policy, n_infer=cfg["n_infer"]), cfg["n_eval"],
                                        seed_stream(cfg["seed"], "eval"), cfg["suite"], cfg.sim_config())
    export_outcomes_csv(outcomes, out / "outcomes.csv")
    ok = np.array([o.success for o in outcomes], dtype=float)
    point, lo, hi = bootstrap_ci(ok, np.mean, 1000, seed_stream(cfg["seed"], "bootstrap"))
    d = summary.to_dict()
    d["success_ci95"] = [lo, hi]
    (out / "summary.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    print(f"success {summary.successes}/{summary.n} ({point:.3f}, 95% CI {lo:.3f}-{hi:.3f}) "
          f"causes {summary.causes}")
    return EXIT_OK


def _episode_for(args, cfg: RunConfig):
    if args.data:
        episodes, _, _ = dataset_read(args.data)
        if not 0 <= args.episode < len(episodes):
            raise DataError(f"episode {args.episode} not in archive of {len(episodes)}")
        return episodes[args.episode]
    from .sim import collect_demos
    return collect_demos(args.episode + 1, seed_stream(cfg["seed"], "explain"), cfg.sim_config(),
                         suite=cfg["suite"])[args.episode]


def cmd_explain(args) -> int:
    from .interpret import explain_episode, export_overlay, export_ratios_csv
    policy = _load_policy(args.checkpoint)
    cfg = _policy_run_config(policy).replace(**({"seed": args.seed} if args.seed is not None else {}))
    ep = _episode_for(args, cfg)
    out = Path(args.out)
    stamp(out, cfg, "explain", {"episode": args.episode})
    ex = explain_episode(policy, ep)
    export_ratios_csv(ex.ratios, out / "ratios.csv", ep.timestamps)
    for hm in ex.heatmaps:
        export_overlay(ep.images[hm.frame], hm, out / f"heatmap_{hm.frame:04d}.png")
    peak = int(np.argmax(ex.ratios[:, 2]))
    print(f"frames {len(ep)} visual share max {ex.ratios[peak, 2]:.3f} at t={ep.timestamps[peak]:.1f}s")
    return EXIT_OK


def cmd_cutoff(args) -> int:
    from .cutoff import (AttemptSamples, bootstrap_ci, select_cutoff, success_percentile,
                         write_policy_json)
    from .sim import read_outcomes_csv
    cfg = load_config(args, seed=args.seed, reset=args.reset, budget=args.budget)
    try:
        outcomes = read_outcomes_csv(args.outcomes)
        samples = AttemptSamples.from_outcomes(outcomes, cfg["budget"])
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    stamp(out, cfg, "cutoff")
    rng = np.random.default_rng(seed_stream(cfg["seed"], "cutoff"))
    pol, curve = select_cutoff(samples, args.percentile, args.min_success, None, args.n_sims, rng,
                               cfg["reset"], cfg["budget"])
    curve.write_csv(out / "curve.csv", args.percentile)
    rows = np.arange(len(samples))
    ci = {"success_rate": bootstrap_ci(rows, lambda i: samples.success[i].mean(), 1000, rng)}
    if samples.success.sum() >= 2:
        ci[f"p{args.percentile:g}_single_attempt"] = bootstrap_ci(
            rows, lambda i: success_percentile(samples.time[i][samples.success[i]], args.percentile), 1000, rng)
    no_cut = curve.percentile[-1] if curve.cutoff[-1] == cfg["budget"] else float("nan")
    write_policy_json(pol, out / "policy.json",
                      {"no_cutoff_percentile": float(no_cut), "bootstrap_ci95": ci})
    state = "feasible" if pol.feasible else "INFEASIBLE (no cutoff meets the constraint)"
    print(f"cutoff {pol.cutoff:.1f}s success {pol.success_prob:.4f} p{args.percentile:g} "
          f"{pol.total_time_percentile:.1f}s (no cutoff {no_cut:.1f}s) {state}")
    return EXIT_OK


def _parse_steps(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("..")
        try:
            a, b = int(lo), int(hi or lo)
        except ValueError as e:
            raise ConfigError(f"bad step list {text!r}") from e
        out.extend(range(a, b + 1))
    if not out or min(out) < 1:
        raise ConfigError(f"bad step list {text!r}")
    return out


def first_step_mae(policy, data: TrainingSet, idx, n_infer: int, seed: int, batch: int = 128):
    """Mean |first predicted increment - ground truth| per action channel.

    Returns (physical units [3], normalized [-1, 1] units [3]).
    """
    err, err_n = [], []
    for s in range(0, len(idx), batch):
        b = data.batch(idx[s:s + batch])
        rng = np.random.default_rng([seed, s])
        pred_n = policy.sample(b["images"], b["force"], b["pose"], rng, n_infer)[:, 0]
        truth_n = b["actions"][:, 0]
        err_n.append(np.abs(pred_n - truth_n))
        err.append(np.abs(denormalize_actions(pred_n, policy.stats) - denormalize_actions(truth_n, policy.stats)))
    return np.concatenate(err).mean(axis=0), np.concatenate(err_n).mean(axis=0)


def bench_diffusion(policy, data: TrainingSet, steps, n_windows: int, seed: int):
    """Rows of (n_infer, physical MAE [3], normalized MAE [3], seconds per window)."""
    idx = np.unique(np.linspace(0, len(data) - 1, min(n_windows, len(data))).astype(int))
    rows = []
    for k in steps:
        t0 = time.perf_counter()
        mae, mae_n = first_step_mae(policy, data, idx, k, seed)
        rows.append((k, mae, mae_n, (time.perf_counter() - t0) / len(idx)))
    return rows


def cmd_bench(args) -> int:
    policy = _load_policy(args.checkpoint)
    cfg = _policy_run_config(policy).replace(**({"seed": args.seed} if args.seed is not None else {}))
    steps = _parse_steps(args.steps)
    if max(steps) > policy.cfg.n_diff:
        raise ConfigError(f"steps exceed n_diff={policy.cfg.n_diff}")
    if args.data:
        episodes, _, _ = dataset_read(args.data)
    else:
        from .sim import collect_demos
        episodes = collect_demos(args.episodes, seed_stream(cfg["seed"], "heldout"), cfg.sim_config())
    episodes = [e for e in episodes if e.success]
    if not episodes:
        raise DataError("no held-out successful episodes")
    data = TrainingSet(episodes, policy.stats, policy.cfg.backbone.t_w, policy.cfg.t_h)
    out = Path(args.out)
    stamp(out, cfg, "bench-diffusion")
    rows = bench_diffusion(policy, data, steps, args.windows, seed_stream(cfg["seed"], "bench"))
    with (out / "bench.csv").open("w") as fh:
        fh.write("n_infer,mae_x_mm,mae_z_mm,mae_theta_deg,mae_normalized,seconds_per_window\n")
        for k, mae, mae_n, sec in rows:
            fh.write(f"{k},{mae[0] * 1e3:.6f},{mae[1] * 1e3:.6f},{np.degrees(mae[2]):.6f},"
                     f"{mae_n.mean():.6f},{sec:.6f}\n")
            print(f"n_infer {k:3d} MAE {mae_n.mean():.4f} (normalized)  {sec * 1e3:.1f} ms/window")
    return EXIT_OK


# -- entry point ------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sota", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="collect scripted demonstrations into an archive")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--perturb", choices=None, help="perturbation suite for the demos")
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a diffusion policy")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.add_argument("--mask-force", action="store_const", const=True)
    t.add_argument("--mask-pose", action="store_const", const=True)
    t.add_argument("--resume")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="closed-loop rollouts of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int)
    e.add_argument("--perturb")
    e.add_argument("--mask", choices=("none", "force", "pose"))
    e.add_argument("--n-infer", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("explain", help="modal ratios and heatmap overlays for one episode")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--episode", type=int, default=0)
    x.add_argument("--data", help="archive to take the episode from (default: fresh expert episode)")
    x.add_argument("--seed", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_explain)

    c = sub.add_parser("cutoff", help="choose a cutoff-and-reset time from rollout outcomes")
    c.add_argument("--outcomes", required=True)
    c.add_argument("--percentile", type=float, default=99.0)
    c.add_argument("--min-success", type=float, default=0.995)
    c.add_argument("--reset", type=float)
    c.add_argument("--budget", type=float)
    c.add_argument("--n-sims", type=int, default=1000)
    c.add_argument("--seed", type=int)
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_cutoff)

    b = sub.add_parser("bench-diffusion", help="first-step action error versus sampling steps")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--steps", default="1..10")
    b.add_argument("--data", help="held-out archive (default: fresh expert episodes)")
    b.add_argument("--episodes", type=int, default=10)
    b.add_argument("--windows", type=int, default=256)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
