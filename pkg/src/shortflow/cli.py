"""Experiment runner: train, sample, eval, bench-estimators, reference.

Configs are flat ``key = value`` text files (strings quoted, ints, floats,
booleans). Every subcommand honors ``--seed``; all randomness descends
from the one master seed through counter-based stream splitting, so runs
with equal inputs produce byte-identical numeric outputs regardless of
scheduling. ``NFS2_OUT`` (or ``--out``) sets the output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import net, sampler, smc, train
from .mcmc import HMC_DEFAULTS, HmcConfig
from .targets import (
    BASE_VARIANCE,
    gauss_shift,
    make_path,
    make_target,
    reference_samples,
)

# paper-scale hidden widths per task; configs override for desk runs
TASK_HIDDEN = {
    "gmm40": 256,
    "mw32": 128,
    "dw4": 512,
    "lj13": 128,
    "gauss-shift": 64,
}

VALID_TASKS = tuple(sorted(TASK_HIDDEN))


class ConfigError(ValueError):
    pass


# key -> (python type, default or REQUIRED)
_REQUIRED = object()
CONFIG_SCHEMA = {
    "task": (str, _REQUIRED),
    "seed": (int, 0),
    "epochs": (int, 100),
    "k_particles": (int, 128),
    "m_steps": (int, 64),
    "steps_per_epoch": (int, 0),  # 0: one step per schedule time
    "lambda": (float, 1.0),
    "learning_rate": (float, 1.0e-4),
    "weight_decay": (float, 1.0e-6),
    "grad_clip": (float, 1.0),
    "hidden": (int, 0),  # 0: per-task default
    "n_layers": (int, 4),
    "perturbation_scale": (float, -1.0),  # <0: 0.1 * coordinate scale
    "rar_resample": (bool, False),
    "midpoint_split": (bool, False),
    "ess_min": (float, 0.5),
    "gamma": (float, 1.0),
    "hmc_steps": (int, -1),  # -1: per-task default
    "leapfrog": (int, -1),
    "hmc_step_size": (float, -1.0),
    "checkpoint_every": (int, 100),
    "early_stop_patience": (int, 0),  # 0: off
    "out_tag": (str, ""),
}


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        raw[key] = (value, lineno)
    cfg = {}
    for key, (value, lineno) in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        typ, _ = CONFIG_SCHEMA[key]
        try:
            cfg[key] = _parse_value(value, typ)
        except ValueError as exc:
            raise ConfigError(f"key '{key}': {exc}") from None
    for key, (typ, default) in CONFIG_SCHEMA.items():
        if key not in cfg:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key '{key}'")
            cfg[key] = default
    if cfg["task"] not in VALID_TASKS:
        raise ConfigError(
            f"key 'task': unknown task '{cfg['task']}'; "
            f"valid: {', '.join(VALID_TASKS)}"
        )
    return cfg


def _parse_value(value: str, typ):
    if typ is str:
        if len(value) >= 2 and value[0] == value[-1] == '"':
            return value[1:-1]
        raise ValueError(f"expected a quoted string, got {value!r}")
    if typ is bool:
        if value in ("true", "false"):
            return value == "true"
        raise ValueError(f"expected true/false, got {value!r}")
    if typ is int:
        if value.lstrip("+-").isdigit():
            return int(value)
        raise ValueError(f"expected an integer, got {value!r}")
    return float(value)


def dump_config_text(cfg: dict) -> str:
    lines = []
    for key in CONFIG_SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            lines.append(f"{key} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f'{key} = "{v}"')
        elif isinstance(v, int):
            lines.append(f"{key} = {v}")
        else:
            lines.append(f"{key} = {v!r}")
    return "\n".join(lines) + "\n"


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def build_run(cfg: dict):
    """Resolve a parsed config into the objects the training loop needs."""
    task = cfg["task"]
    hidden = cfg["hidden"] or TASK_HIDDEN[task]
    run_cfg = train.RunConfig(
        task=task,
        seed=cfg["seed"],
        epochs=cfg["epochs"],
        k_particles=cfg["k_particles"],
        m_steps=cfg["m_steps"],
        steps_per_epoch=cfg["steps_per_epoch"] or None,
        consistency_weight=cfg["lambda"],
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        grad_clip=cfg["grad_clip"],
        perturbation_scale=(
            None if cfg["perturbation_scale"] < 0 else cfg["perturbation_scale"]
        ),
        rar_resample=cfg["rar_resample"],
        midpoint_split=cfg["midpoint_split"],
        ess_min=cfg["ess_min"],
        gamma=cfg["gamma"],
        hidden=hidden,
        n_layers=cfg["n_layers"],
        checkpoint_every=cfg["checkpoint_every"],
        early_stop_patience=cfg["early_stop_patience"] or None,
    )
    path = make_path(task, training=True)
    dn, dl, ds = HMC_DEFAULTS[task]
    hmc_cfg = HmcConfig(
        n_hmc_steps=cfg["hmc_steps"] if cfg["hmc_steps"] >= 0 else dn,
        n_leapfrog=cfg["leapfrog"] if cfg["leapfrog"] > 0 else dl,
        step_size=cfg["hmc_step_size"] if cfg["hmc_step_size"] >= 0 else ds,
    )
    target = path.target
    arch = net.Architecture(
        dim=target.dim,
        hidden=hidden,
        n_layers=cfg["n_layers"],
        output_scale=target.coord_scale,
        pairwise=target.n_particles is not None,
        n_particles=target.n_particles,
        spatial_dim=target.spatial_dim,
    )
    return run_cfg, path, hmc_cfg, arch


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("NFS2_OUT")
    return Path(env) if env else Path("runs")


def _git_describe() -> str:
    try:
        return subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        ).stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(run_dir: Path, cfg: dict, seed, checkpoints, outputs, timings):
    manifest = {
        "config": cfg,
        "git_describe": _git_describe(),
        "seed": seed,
        "checkpoints": [str(p) for p in checkpoints],
        "outputs": [str(p) for p in outputs],
        "timings": timings,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    missing = [p for p in checkpoints + outputs if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"manifest lists missing outputs: {missing}")
    return path


def _write_samples_csv(path: Path, samples: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(float(v)) for v in row])


def _read_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    out = np.asarray(rows, dtype=np.float64)
    return out.reshape(-1, len(header))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    run_cfg, path, hmc_cfg, arch = build_run(cfg)
    tag = cfg["out_tag"] or f"{cfg['task']}-seed{cfg['seed']}"
    run_dir = _out_root(args) / tag
    run_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]))
    final_ckpt = run_dir / "checkpoint_final.nfs2"
    if args.resume and final_ckpt.exists():
        model, meta = net.load_checkpoint(final_ckpt)
        start_epoch = int(meta.get("epoch", 0))
        print(f"resuming from epoch {start_epoch}")
    else:
        model = net.init(arch, rng.spawn(1)[0])

    log_path = run_dir / "loss_log.jsonl"
    mode = "a" if start_epoch else "w"
    checkpoints = []
    t0 = time.time()
    with open(log_path, mode) as log:

        def on_epoch(epoch, stats):
            rec = {
                "epoch": epoch,
                "loss": stats["loss"],
                "residual": stats["residual"],
                "consistency": stats["consistency"],
                "c_t": stats["c_t"],
                "ess": stats["ess"],
                "resampled": stats["resampled"],
            }
            log.write(json.dumps(rec) + "\n")
            if (epoch + 1) % run_cfg.checkpoint_every == 0:
                p = run_dir / f"checkpoint_epoch{epoch + 1:05d}.nfs2"
                net.save_checkpoint(p, model, {"epoch": epoch + 1, **_meta(cfg)})
                checkpoints.append(p)

        train.train_loop(
            model, path, run_cfg, rng,
            hmc_cfg=hmc_cfg, on_epoch=on_epoch, start_epoch=start_epoch,
        )
    net.save_checkpoint(
        final_ckpt, model, {"epoch": run_cfg.epochs, **_meta(cfg)}
    )
    checkpoints.append(final_ckpt)
    _write_manifest(
        run_dir, cfg, cfg["seed"], checkpoints, [log_path],
        {"train_seconds": time.time() - t0, "epochs": run_cfg.epochs},
    )
    print(f"trained {cfg['task']}: {run_cfg.epochs} epochs -> {final_ckpt}")
    return 0


def _meta(cfg):
    return {"task": cfg["task"], "seed": cfg["seed"], "config": cfg}


def cmd_sample(args) -> int:
    try:
        model, meta = net.load_checkpoint(args.checkpoint)
    except (ValueError, OSError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    task = meta.get("task")
    if task not in VALID_TASKS:
        print(f"checkpoint carries unknown task '{task}'", file=sys.stderr)
        return 2
    path = make_path(task)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    out_dir = _out_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = sampler.sample(
        model, path.base.sample_exact, args.steps, args.n, rng
    )
    csv_path = out_dir / f"samples_{task}_M{args.steps}_seed{args.seed}.csv"
    if args.n == 0:
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow([f"x{i}" for i in range(model.arch.dim)])
    else:
        _write_samples_csv(csv_path, run.samples)
    meta_path = csv_path.with_suffix(".json")
    meta_path.write_text(
        json.dumps(
            {
                "task": task,
                "steps": args.steps,
                "n": args.n,
                "seed": args.seed,
                "checkpoint": str(args.checkpoint),
                "checkpoint_sha256": net.checkpoint_hash(args.checkpoint),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(f"wrote {csv_path}")
    return 0


def cmd_eval(args) -> int:
    samples = _read_samples_csv(args.samples)
    reference = _read_samples_csv(args.reference)
    if args.task not in VALID_TASKS:
        print(
            f"unknown task '{args.task}'; valid: {', '.join(VALID_TASKS)}",
            file=sys.stderr,
        )
        return 2
    energy = make_target(args.task)  # raw potential for evaluation
    if samples.shape[1] != energy.dim or reference.shape[1] != energy.dim:
        print(
            f"dimension mismatch: task {args.task} wants {energy.dim}, "
            f"got samples {samples.shape[1]} / reference {reference.shape[1]}",
            file=sys.stderr,
        )
        return 2
    rep = mt.compute_report(args.task, samples, reference, energy, n=args.n)
    out_dir = _out_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"metrics_{args.task}.json"
    json_path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / f"metrics_{args.task}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(mt.MetricsReport.csv_header())
        writer.writerow(rep.csv_row())
    print(f"wrote {json_path} and {csv_path}")
    return 0


def cmd_reference(args) -> int:
    if args.task not in VALID_TASKS:
        print(
            f"unknown task '{args.task}'; valid: {', '.join(VALID_TASKS)}",
            file=sys.stderr,
        )
        return 2
    target = make_target(args.task)
    if args.task == "gauss-shift":
        target = gauss_shift().path.target
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    samples, meta = reference_samples(target, args.n, rng)
    out_dir = _out_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"reference_{args.task}.csv"
    _write_samples_csv(csv_path, samples)
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(
        json.dumps({"task": args.task, "seed": args.seed, **meta},
                   indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {csv_path}")
    return 0


def _bench_velocity(args, fixture):
    if args.velocity == "zero":
        return fixture.zero_velocity()
    if args.velocity == "exact":
        return fixture.exact_velocity()
    if args.velocity.startswith("scaled:"):
        return fixture.scaled_velocity(float(args.velocity.split(":", 1)[1]))
    if Path(args.velocity).exists():
        model, _ = net.load_checkpoint(args.velocity)
        return model
    raise ValueError(f"unknown velocity source '{args.velocity}'")


def cmd_bench_estimators(args) -> int:
    if args.task != "gauss-shift":
        print("estimator benchmark currently targets the analytic fixture",
              file=sys.stderr)
        return 2
    fixture = gauss_shift()
    path = fixture.path
    model = _bench_velocity(args, fixture)
    k_list = [int(k) for k in args.k_particles.split(",")]
    step_list = [int(s) for s in args.mcmc_steps.split(",")]
    grid = [round(0.1 * i, 10) for i in range(1, 10)]
    schedule = _schedule_through(grid, args.m_steps)
    rows = []

    def run_one(K, n_mcmc, seed):
        rng = np.random.default_rng(
            np.random.SeedSequence((args.seed, K, n_mcmc, seed))
        )
        hmc_cfg = HmcConfig(
            n_hmc_steps=n_mcmc, n_leapfrog=args.leapfrog,
            step_size=args.hmc_step_size,
        )
        ensembles = smc.vd_smc(model, path, K, schedule, hmc_cfg, rng=rng)
        by_t = {round(e.t, 10): e for e in ensembles}
        out = []
        for t in grid:
            ens = by_t[t]
            oracle = fixture.dtlogz(t)
            for name, est in (
                ("naive", smc.dtlogz_naive(ens, path)),
                ("stein", smc.dtlogz_stein(ens, path, model)),
            ):
                out.append((name, t, K, n_mcmc, seed, est, oracle,
                            (est - oracle) ** 2, ens.ess))
        for r in smc.dtlogz_is(model, path, K, schedule, rng):
            t = round(r.t, 10)
            if t in by_t and t in grid:
                oracle = fixture.dtlogz(t)
                out.append(("is", t, K, n_mcmc, seed, r.estimate, oracle,
                            (r.estimate - oracle) ** 2, r.ess))
        return out

    jobs = [(K, n_mcmc, seed)
            for K in k_list for n_mcmc in step_list
            for seed in range(args.seeds)]
    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            for chunk in pool.map(lambda j: run_one(*j), jobs):
                rows.extend(chunk)
    else:
        for j in jobs:
            rows.extend(run_one(*j))
    rows.sort(key=lambda r: (r[0], r[2], r[3], r[4], r[1]))
    out_dir = _out_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench_estimators.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "t", "K", "mcmc_steps", "seed",
                         "estimate", "oracle", "sq_error", "ess"])
        for r in rows:
            writer.writerow(
                [r[0]] + [repr(float(v)) if isinstance(v, float) else v
                          for v in r[1:]]
            )
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def _schedule_through(grid, m_steps):
    """Uniform-ish schedule whose times include every grid point exactly."""
    anchors = [0.0] + list(grid) + [1.0]
    per = max(1, m_steps // (len(anchors) - 1))
    times = []
    for a, b in zip(anchors[:-1], anchors[1:]):
        times.extend(np.linspace(a, b, per + 1)[:-1])
    times.append(1.0)
    return smc.Schedule(times=np.asarray(times))


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="shortflow",
        description="velocity-field sampler: training, generation, evaluation",
    )
    parser.add_argument("--out", default=None, help="output root (default: NFS2_OUT or ./runs)")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallelism width for particle/batch work")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--steps", "-M", type=int, default=128)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score samples against a reference set")
    p.add_argument("samples")
    p.add_argument("reference")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reference", help="generate ground-truth sample sets")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("bench-estimators",
                       help="benchmark the log-partition-derivative estimators")
    p.add_argument("--task", default="gauss-shift")
    p.add_argument("--k-particles", default="128")
    p.add_argument("--mcmc-steps", default="0,1,3,10")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m-steps", type=int, default=90)
    p.add_argument("--velocity", default="scaled:0.4",
                   help="zero | exact | scaled:<f> | checkpoint path")
    p.add_argument("--leapfrog", type=int, default=10)
    p.add_argument("--hmc-step-size", type=float, default=0.4)
    p.set_defaults(func=cmd_bench_estimators)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
