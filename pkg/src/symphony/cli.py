"""Command-line harness: ``train``, ``eval``, ``verify`` and ``inspect``.

Exit codes: 0 success, 1 usage or configuration error, 2 invariant failure,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import math_core as mc
from .config import (VARIANT_IDS, VARIANTS, ConfigError, RunConfig, build_run_config,
                     load_config_file)
from .envs import CTRL_COST_PRESETS, ENVIRONMENTS, make_env
from .nets import ActorCriticNet
from .replay import FadingReplayBuffer
from .trainer import MetricsWriter, Trainer, evaluate

log = logging.getLogger("symphony")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3

METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.ini"
FINAL_CHECKPOINT = "checkpoint.symc"
REPLAY_FILE = "replay.frb"
SUMMARY_FILE = "summary.json"
EVAL_HEADER = ("checkpoint", "episodes", "seed", "mean", "std", "min", "max")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# Configuration from flags
# --------------------------------------------------------------------------

# flag dest -> variant field
VARIANT_FLAGS = {
    "lr": "lr", "noise_scale": "noise_scale", "noise_clip": "noise_clip", "n_exp": "n_exp",
    "repeats": "repeats", "h_dim": "h_dim", "n_out": "n_out", "batch_size": "batch_size",
    "grad_dropout_p": "grad_dropout_p", "resample_per_update": "resample_per_update",
    "sqrt_divisor": "sqrt_divisor", "net_dtype": "net_dtype",
}
RUN_FLAGS = ("env", "seed", "steps", "out_dir", "eval_every", "eval_episodes", "checkpoint_every")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def run_config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {"run": {}, "variant": {}, "env": {}}
    for k in RUN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            flags["run"][k] = v
    for dest, key in VARIANT_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            flags["variant"][key] = v
    if args.c_ctrl_preset is not None:
        flags["env"]["c_ctrl_preset"] = args.c_ctrl_preset
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in flags:
            raise ConfigError(f"unknown section {section!r} in --set")
        flags[section][name.strip()] = value.strip()
    variant = args.variant or file_values.get("run", {}).get("variant", "s3")
    file_values.get("run", {}).pop("variant", None)
    run = build_run_config(variant, file_values, flags)
    if run.env not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {run.env!r}; choose from {sorted(ENVIRONMENTS)}")
    try:
        make_env(run.env, **dict(run.env_params))
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    if run.steps < 0:
        raise ConfigError("steps must be non-negative")
    return run


def run_config_from_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    values = {s: dict(cp[s]) for s in cp.sections()}
    variant_name = values.get("variant", {}).get("name", "s3")
    return build_run_config(variant_name if variant_name in VARIANTS else "s3", values)


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def save_checkpoint(trainer: Trainer, run: RunConfig, path: Path) -> None:
    ck = ckpt.from_trainer(trainer, VARIANT_IDS.get(run.variant.name, 255), run.to_text())
    ckpt.save(path, ck)


def _eval_row(state, stats):
    nan = float("nan")
    return {"step": state.step, "episode": "eval", "return": stats.mean, "avg_sigma": nan,
            "avg_beta": nan, "actor_loss": nan, "critic_loss": nan, "swaddling": nan,
            "q_ema": nan if state.q_ema is None else state.q_ema,
            "nonfinite_skips": state.nonfinite_skips}


def train(run: RunConfig, resume: str | None = None, progress=None) -> dict:
    """Explore, train for ``run.steps`` steps, and write every artifact into ``run.out_dir``."""
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(run.to_text())
    env = make_env(run.env, **dict(run.env_params))
    eval_env = make_env(run.env, **dict(run.env_params))
    trainer = Trainer(env, run.variant, seed=run.seed)
    t0 = time.perf_counter()
    if resume:
        ck = ckpt.load(resume)
        ckpt.restore_trainer(trainer, ck)
        replay = Path(resume).with_name(REPLAY_FILE)
        if replay.exists():
            trainer.buffer = FadingReplayBuffer.load(replay, run.variant.buffer_schedule,
                                                     run.variant.done_decay)
            trainer._reset_env()
        else:
            log.warning("no replay snapshot next to %s; rebuilding it by exploration", resume)
            r_norm = trainer.state.r_norm
            trainer.explore()
            trainer.state.r_norm = r_norm
        writer = MetricsWriter(out / METRICS_FILE, append=(out / METRICS_FILE).exists())
        log.info("resumed at step %d", trainer.state.step)
    else:
        r_norm = trainer.explore()
        log.info("exploration done: %d transitions, reward normalizer %.6g", run.variant.n_exp, r_norm)
        writer = MetricsWriter(out / METRICS_FILE)
    evals = []
    try:
        while trainer.state.step < run.steps:
            summary = trainer.train_step()
            step = trainer.state.step
            if summary is not None:
                writer.row(summary)
                if progress:
                    progress(summary)
            if run.eval_every and step % run.eval_every == 0:
                stats = trainer.evaluate(eval_env, run.eval_episodes)
                evals.append((step, stats.mean))
                writer.row(_eval_row(trainer.state, stats))
                log.info("step %d: eval mean return %.2f", step, stats.mean)
            if run.checkpoint_every and step % run.checkpoint_every == 0:
                save_checkpoint(trainer, run, out / f"checkpoint_{step:08d}.symc")
    finally:
        writer.close()
    save_checkpoint(trainer, run, out / FINAL_CHECKPOINT)
    trainer.buffer.save(out / REPLAY_FILE)
    tail = trainer.sigma_history[-10:]
    summary = {
        "steps": trainer.state.step,
        "episodes": trainer.state.episode,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "mean_final_sigma": float(np.mean(tail)) if tail else None,
        "nonfinite_skips": trainer.state.nonfinite_skips,
        "evaluations": evals,
    }
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n")
    summary["trainer"] = trainer
    return summary


def cmd_train(args) -> int:
    run = run_config_from_args(args)
    summary = train(run, args.resume)
    print(f"trained {summary['steps']} steps, {summary['episodes']} episodes in "
          f"{summary['wall_time_s']:.1f} s; outputs in {run.out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / inspect
# --------------------------------------------------------------------------

def net_from_checkpoint(ck: ckpt.Checkpoint, run: RunConfig, a_max: float) -> ActorCriticNet:
    h = ck.header
    v = run.variant
    net = ActorCriticNet(h.obs_dim, h.action_dim, h.h_dim, h.n_out, a_max,
                         grad_dropout_p=v.grad_dropout_p, fixed_beta=v.fixed_beta, seed=0,
                         dtype=np.float64)
    ckpt.restore_net(net, ck)
    return net


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    run = run_config_from_text(ck.config_text)
    env = make_env(run.env, **dict(run.env_params))
    net = net_from_checkpoint(ck, run, env.a_max)
    stats = evaluate(env, net, args.episodes, args.seed, run.variant.eval_sigma_one)
    row = dict(zip(EVAL_HEADER, (args.checkpoint, len(stats.returns), args.seed, stats.mean,
                                 stats.std, stats.min, stats.max)))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerow([row[k] for k in EVAL_HEADER])
    print(f"mean {stats.mean:.3f} std {stats.std:.3f} min {stats.min:.3f} max {stats.max:.3f} "
          f"over {len(stats.returns)} episodes -> {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = ckpt.load(args.checkpoint)
    h = ck.header
    names = {v: k for k, v in VARIANT_IDS.items()}
    print(f"version {h.version}  variant {names.get(h.variant_id, h.variant_id)}  h_dim {h.h_dim}  "
          f"n_out {h.n_out}  obs_dim {h.obs_dim}  action_dim {h.action_dim}")
    for name, arr in ck.arrays.items():
        if not name.startswith("opt/"):
            print(f"{name:20s} {str(arr.shape):18s} norm {np.linalg.norm(arr):.6g}")
    for name, value in ck.scalars.items():
        print(f"{name:24s} {value:.10g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in r])


def beta_match(betas, n: int = 200_001):
    """For each fixed beta, the grid minimizer of the fixed-beta Swaddling over sigma."""
    grid = np.linspace(mc.CLIP_LO, mc.CLIP_HI, n)
    out = []
    for b in betas:
        vals = mc.omega_barrier(grid ** (1.0 / b)) + b * mc.omega_helper(grid)
        out.append(float(grid[np.argmin(vals)]))
    return np.array(out)


def verify(out: Path, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Write the function report into ``out`` and return ``(check, passed, detail)`` rows."""
    out.mkdir(parents=True, exist_ok=True)
    checks = []
    x = np.linspace(-6, 6, 601)
    _write_csv(out / "resine.csv", ("x", "s_-2", "s_0", "s_2"),
               zip(x, *(mc.resine(x, np.full_like(x, s)) for s in (-2.0, 0.0, 2.0))))
    _write_csv(out / "rehse_rehae.csv", ("x", "rehse", "rehae"),
               ((float(v), mc.rehse([v]), mc.rehae([v])) for v in x))
    xb = np.linspace(-0.999, 0.999, 999)
    _write_csv(out / "omega_barrier.csv", ("x", "value"), zip(xb, mc.omega_barrier(xb)))
    xh = np.linspace(1e-3, 1.0, 1000)
    _write_csv(out / "omega_helper.csv", ("x", "value"), zip(xh, mc.omega_helper(xh)))
    sig = np.linspace(0.01, 0.99, 99)
    _write_csv(out / "swaddling.csv", ("sigma", "beta_0.05", "beta_0.2", "beta_0.5"),
               ((float(s), *(mc.full_swaddling([s], [b]) for b in (0.05, 0.2, 0.5))) for s in sig))

    kinds = [k for k in mc.ScheduleKind if k is not mc.ScheduleKind.UNIFORM]
    sched = {k.value: mc.weight_schedule(384, k).weights for k in kinds}
    _write_csv(out / "schedules_384.csv", ("index", *sched),
               ((i, *(float(w[i]) for w in sched.values())) for i in range(384)))
    for L in (384, 10_000):
        for k in kinds:
            w = mc.weight_schedule(L, k).weights
            err = abs(w.sum() - 1.0)
            checks.append((f"schedule_sum/{k.value}/{L}", err <= 1e-9 and bool(np.all(w >= 0)),
                           f"|sum-1|={err:.3g}"))

    rng = np.random.default_rng(seed)
    fns = [mc.IDENTITY, mc.RESINE, mc.REHSE, mc.REHAE, mc.OMEGA_BARRIER, mc.OMEGA_HELPER,
           mc.control_cost_fn(0.1)]
    fd_rows = []
    for fn in fns:
        worst = 0.0
        for _ in range(20):
            if fn is mc.OMEGA_BARRIER:
                pt = rng.uniform(-0.95, 0.95, 5)
            elif fn is mc.OMEGA_HELPER:
                pt = rng.uniform(0.02, 1.0, 5)
            else:
                pt = rng.normal(0, 2, 10 if fn is mc.RESINE else 5)
            worst = max(worst, mc.finite_diff_check(fn, pt).max_rel_error)
        fd_rows.append((fn.name, worst))
    worst = 0.0
    for _ in range(20):
        sb = rng.uniform(0.01, 0.95, 10)
        worst = max(worst, mc.finite_diff_check(mc.full_swaddling_fn(sb[5:]), sb).max_rel_error)
    fd_rows.append(("full_swaddling", worst))
    _write_csv(out / "finite_differences.csv", ("function", "max_rel_error"), fd_rows)
    for name, err in fd_rows:
        checks.append((f"finite_difference/{name}", err <= 1e-4, f"max rel {err:.3g}"))

    y = np.linspace(-6, 6, 2001)
    inv = float(np.max(np.abs(mc.omega_barrier(np.tanh(y / 2)) - y)))
    checks.append(("omega_inverts_half_tanh", inv <= 1e-10, f"max abs {inv:.3g}"))
    grid = np.arange(1, 10**6) / 10**6
    arg = float(grid[np.argmin(mc.omega_helper(grid))])
    checks.append(("omega_helper_argmin", abs(arg - 1 / math.e) <= 1e-6, f"argmin {arg:.7f}"))

    betas = np.array([0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.2, 0.5])
    mins = beta_match(betas)
    _write_csv(out / "beta_match.csv", ("beta", "argmin_sigma", "distance_to_inv_e"),
               ((float(b), float(m), float(abs(m - 1 / math.e))) for b, m in zip(betas, mins)))
    small = betas <= 0.05
    dist = float(np.max(np.abs(mins[small] - 1 / math.e)))
    checks.append(("beta_match_small_beta", dist <= 0.02, f"max distance {dist:.4f}"))

    _write_csv(out / "checks.csv", ("check", "passed", "detail"), checks)
    return checks


def cmd_verify(args) -> int:
    checks = verify(Path(args.out), args.seed)
    failed = [c for c in checks if not c[1]]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed; report in {args.out}")
    return EXIT_INVARIANT if failed else EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="symphony", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="explore, train and write metrics and checkpoints")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--env", choices=sorted(ENVIRONMENTS))
    t.add_argument("--steps", type=int, help="training steps after exploration")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", dest="out_dir", help="output directory")
    t.add_argument("--config", help="key = value file with [run], [variant] and [env] sections")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--noise-scale", type=float)
    t.add_argument("--noise-clip", type=float)
    t.add_argument("--n-exp", type=int)
    t.add_argument("--repeats", type=int)
    t.add_argument("--h-dim", type=int)
    t.add_argument("--n-out", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grad-dropout-p", type=float)
    t.add_argument("--resample-per-update", type=_bool, metavar="BOOL")
    t.add_argument("--sqrt-divisor", type=_bool, metavar="BOOL",
                   help="optimizer divisor sqrt(v) (true, default) or v (false)")
    t.add_argument("--net-dtype", choices=("float32", "float64"))
    t.add_argument("--c-ctrl-preset", choices=sorted(CTRL_COST_PRESETS))
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="any other override, e.g. variant.gamma=0.98 or env.gravity=9.81")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="noise-free evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=25)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="statistics CSV (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="function oracle suite and report")
    v.add_argument("--out", default="verify_report")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("inspect", help="checkpoint header, parameter norms and scalars")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, configparser.Error) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except mc.DomainError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
