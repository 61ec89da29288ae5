"""Command-line front door: simulate, dataset, train, eval, reproduce, phase-data.

Every command writes its artifacts plus a single manifest.json into the
output directory. Exit codes are a stable scripting contract: 0 success,
2 configuration/usage error, 3 numerical divergence, 4 training failure.
All randomness flows from one master seed through labelled child seeds, so
identical flags always reproduce identical artifact bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baseline, nn, pipeline
from .dataset import (
    TEST,
    TRAIN,
    ChunkDataset,
    ParameterSampler,
    TaskKind,
    build_dataset,
    iter_parameters,
    load_dataset,
    save_dataset,
)
from .errors import IntegrationDiverged, L96Error, NonFiniteLoss
from .pipeline import (
    TrainConfig,
    evaluate_loss,
    render_report_text,
    run_experiment_grid,
    train,
)
from .seeding import child_seed
from .sim import (
    IntegratorConfig,
    ModelParams,
    Trajectory,
    default_init,
    save_trajectory,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_TRAINING = 4

OUT_ROOT_ENV = "L96LAB_OUT"

DESK_SCALE = {"n_sims": 40, "n_steps": 4000, "epochs": {"fc": 30, "conv1d": 20, "conv2d": 14}}
FULL_SCALE = {"n_sims": 200, "n_steps": 50_000, "epochs": 20}
DEFAULT_MASTER_SEED = 42


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(raw: str) -> Path:
    path = Path(raw)
    if not path.is_absolute():
        root = os.environ.get(OUT_ROOT_ENV)
        if root:
            path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seeds: dict,
    inputs: dict[str, Path] | None = None,
    outputs: dict[str, Path] | None = None,
    notes: dict | None = None,
    started: float | None = None,
) -> Path:
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {k: _sha256_file(p) for k, p in (inputs or {}).items()},
        "outputs": {k: _sha256_file(p) for k, p in (outputs or {}).items()},
        "duration_seconds": None if started is None else time.monotonic() - started,
    }
    if notes:
        manifest["notes"] = notes
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _parse_ranges(raw: str) -> dict[str, tuple[float, float]]:
    """Parse 'b=7:13,c=7:13,h=0.5:1.5' into per-parameter (low, high)."""
    out = {}
    for part in raw.split(","):
        name, _, span = part.partition("=")
        lo, _, hi = span.partition(":")
        name = name.strip()
        if name not in ("b", "c", "h") or not lo or not hi:
            raise ValueError(f"bad range spec {part!r}; expected e.g. b=7:13")
        out[name] = (float(lo), float(hi))
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.out)
    params = ModelParams(b=args.b, c=args.c, h=args.h, F=args.f, K=args.k, J=args.j)
    config = IntegratorConfig(dt=args.dt, n_steps=args.steps, burn_in=args.burn_in)
    init = default_init(params)
    traj = simulate(params, init, config)
    traj_path = save_trajectory(traj, out / "trajectory.l96t", init=init, config=config)
    _write_manifest(
        out,
        "simulate",
        config={"params": params.to_dict(), "integrator": config.to_dict()},
        seeds={"seed": args.seed},
        outputs={"trajectory": traj_path},
        notes={"seed_unused": "integration is fully deterministic"},
        started=started,
    )
    print(f"wrote {traj_path} ({traj.n_steps} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def _simulate_packed(job):
    """Worker: simulate one parameter draw; returns (slot, trajectory|None)."""
    slot, params, config = job
    try:
        return slot, simulate(params, default_init(params), config)
    except IntegrationDiverged:
        return slot, None


def simulate_pool(
    sampler: ParameterSampler, config: IntegratorConfig, jobs: int = 1
) -> tuple[list[Trajectory], list[int]]:
    """First n_sims non-divergent draws of the sampler stream, in stream order.

    Divergent draws are replaced by subsequent stream entries; their stream
    positions are returned for the manifest. The result is independent of
    worker scheduling.
    """
    stream = iter_parameters(sampler)
    accepted: list[Trajectory] = []
    skipped: list[int] = []
    position = 0
    max_attempts = 20 * sampler.n_sims
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while len(accepted) < sampler.n_sims:
            if position >= max_attempts:
                raise IntegrationDiverged(
                    f"{len(skipped)} of {position} parameter draws diverged; "
                    "the configured ranges/dt are not integrable"
                )
            need = sampler.n_sims - len(accepted)
            jobs_batch = []
            for _ in range(need):
                jobs_batch.append((position, next(stream), config))
                position += 1
            if pool is None:
                results = [_simulate_packed(j) for j in jobs_batch]
            else:
                results = list(pool.map(_simulate_packed, jobs_batch))
            for slot, traj in results:  # stream order within the batch
                if traj is None:
                    skipped.append(slot)
                else:
                    accepted.append(traj)
    finally:
        if pool is not None:
            pool.shutdown()
    return accepted, skipped


def _cmd_dataset(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.out)
    ranges = _parse_ranges(args.ranges) if args.ranges else {}
    sampler = ParameterSampler(
        n_sims=args.n_sims,
        seed=child_seed(args.seed, "params"),
        b_range=ranges.get("b", (7.0, 13.0)),
        c_range=ranges.get("c", (7.0, 13.0)),
        h_range=ranges.get("h", (0.5, 1.5)),
        F=args.f,
        K=args.k,
        J=args.j,
    )
    config = IntegratorConfig(dt=args.dt, n_steps=args.steps, burn_in=args.burn_in)
    trajectories, skipped = simulate_pool(sampler, config, jobs=args.jobs)
    ds = build_dataset(
        trajectories,
        task=TaskKind(args.task),
        test_mode=args.test_mode == "true",
        split_seed=child_seed(args.seed, f"split/{args.task}/{args.test_mode}"),
        train_fraction=args.train_fraction,
        holdout_sim_fraction=args.holdout_fraction,
    )
    ds_path = save_dataset(ds, out / "dataset.l96d")
    _write_manifest(
        out,
        "dataset",
        config={
            "sampler": sampler.to_dict(),
            "integrator": config.to_dict(),
            "task": args.task,
            "test_mode": args.test_mode == "true",
            "train_fraction": args.train_fraction,
            "holdout_fraction": args.holdout_fraction,
            "chunk_width": ds.width,
            "chunk_height": ds.height,
        },
        seeds={"master": args.seed},
        outputs={"dataset": ds_path},
        notes={"resampled_divergent_draws": skipped},
        started=started,
    )
    print(f"wrote {ds_path} ({len(ds)} chunks, width {ds.width})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _cmd_train(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.out)
    ds_path = Path(args.dataset)
    if not ds_path.exists():
        raise ValueError(f"dataset not found: {ds_path}")
    ds = load_dataset(ds_path)
    cfg = TrainConfig(
        model=args.model,
        epochs=args.epochs,
        batch=args.batch,
        lr=args.lr,
        init_seed=child_seed(args.seed, f"init/{args.model}"),
        shuffle_seed=child_seed(args.seed, f"shuffle/{args.model}"),
    )
    result = train(ds, cfg)
    ckpt = out / "checkpoint.l96w"
    meta = {
        "model": args.model,
        "task": ds.task.value,
        "test_mode": ds.test_mode,
        "steps": result.steps,
        "final_train_loss": result.final_train_loss,
        "seeds": {"master": args.seed, "init": cfg.init_seed, "shuffle": cfg.shuffle_seed},
    }
    if args.model == "lr":
        baseline.save_linear(result.model, ckpt, meta=meta)
    else:
        nn.save_model(result.model, ckpt, meta=meta)
    hist_path = out / "loss_history.csv"
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_batch_loss"])
        for i, loss in enumerate(result.loss_history, start=1):
            writer.writerow([i, repr(loss)])
    notes = {"final_train_loss": result.final_train_loss}
    if args.model == "lr":
        notes["epochs_batch_ignored"] = "lr is a closed-form fit; epochs/batch/lr flags do not apply"
    _write_manifest(
        out,
        "train",
        config={
            "model": args.model,
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
            "dataset": str(ds_path),
        },
        seeds=meta["seeds"],
        inputs={"dataset": ds_path},
        outputs={"checkpoint": ckpt, "loss_history": hist_path},
        notes=notes,
        started=started,
    )
    print(f"wrote {ckpt} (final train loss {result.final_train_loss:.6f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def load_any_model(path: str | Path):
    """Load a checkpoint of any kind; returns (model, meta)."""
    header, _ = nn.read_container(path)
    if header.get("kind") == "LINEAR":
        return baseline.load_linear(path)
    return nn.load_model(path)


def _cmd_eval(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.report)
    ds_path = Path(args.dataset)
    ckpt_path = Path(args.checkpoint)
    for p in (ds_path, ckpt_path):
        if not p.exists():
            raise ValueError(f"input not found: {p}")
    ds = load_dataset(ds_path)
    model, meta = load_any_model(ckpt_path)
    if not isinstance(model, baseline.LinearModel) and model.input_shape != (ds.height, ds.width):
        raise ValueError(
            f"checkpoint input shape {model.input_shape} does not match dataset ({ds.height}, {ds.width})"
        )
    if isinstance(model, baseline.LinearModel) and model.input_dim != ds.height * ds.width:
        raise ValueError(
            f"checkpoint input dim {model.input_dim} does not match dataset {ds.height * ds.width}"
        )
    split = TRAIN if args.split == "train" else TEST
    loss = evaluate_loss(model, ds, split)
    per_sim = pipeline.predict_per_simulation(model, ds, split)
    sim_ids = sorted(per_sim)
    truths = np.array([ds.sim_target(s) for s in sim_ids])
    preds = np.array([per_sim[s] for s in sim_ids])
    per_param, mean_r2 = pipeline.r_squared(truths, preds)
    report = {
        "checkpoint": str(ckpt_path),
        "dataset": str(ds_path),
        "split": args.split,
        "loss": loss,
        "r2_per_param": {"b": per_param[0], "c": per_param[1], "h": per_param[2]},
        "r2_mean": mean_r2,
        "per_sim_predictions": {str(s): per_sim[s].tolist() for s in sim_ids},
    }
    report_json = out / "report.json"
    report_json.write_text(json.dumps(report, indent=2))
    lines = [
        f"{'split':<8} {'loss':>12} {'r2(b)':>10} {'r2(c)':>10} {'r2(h)':>10} {'r2 mean':>10}",
        f"{args.split:<8} {loss:>12.6f} {per_param[0]:>10.4f} {per_param[1]:>10.4f} "
        f"{per_param[2]:>10.4f} {mean_r2:>10.4f}",
    ]
    report_txt = out / "report.txt"
    report_txt.write_text("\n".join(lines) + "\n")
    _write_manifest(
        out,
        "eval",
        config={"checkpoint": str(ckpt_path), "dataset": str(ds_path), "split": args.split},
        seeds={},
        inputs={"checkpoint": ckpt_path, "dataset": ds_path},
        outputs={"report_json": report_json, "report_txt": report_txt},
        started=started,
    )
    print(report_txt.read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def _cmd_reproduce(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.out)
    scale = DESK_SCALE if args.scale == "desk" else FULL_SCALE
    epochs = args.epochs if args.epochs is not None else scale["epochs"]
    sampler = ParameterSampler(n_sims=scale["n_sims"], seed=child_seed(args.seed, "params"))
    config = IntegratorConfig(dt=0.005, n_steps=scale["n_steps"], burn_in=0)
    failure_point = None
    skipped = None
    try:
        failure_point = "simulate"
        trajectories, skipped = simulate_pool(sampler, config, jobs=args.jobs)

        failure_point = "datasets"
        ds_dir = out / "datasets"
        ds_dir.mkdir(exist_ok=True)
        datasets: dict[tuple[str, bool], ChunkDataset] = {}
        for task in ("xy", "y"):
            for mode in (False, True):
                ds = build_dataset(
                    trajectories,
                    task=TaskKind(task),
                    test_mode=mode,
                    split_seed=child_seed(args.seed, f"split/{task}/{str(mode).lower()}"),
                )
                path = save_dataset(ds, ds_dir / f"{task}_{str(mode).lower()}.l96d")
                # reload so training consumes exactly the persisted bytes
                datasets[(task, mode)] = load_dataset(path)
        del trajectories

        failure_point = "grid"
        trained: dict = {}
        report = run_experiment_grid(
            datasets,
            master_seed=args.seed,
            epochs=epochs,
            jobs=args.jobs,
            trained_sink=trained,
        )

        failure_point = "artifacts"
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for (mode, task, model_kind), result in sorted(
            trained.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])
        ):
            name = f"{model_kind}_{task}_{str(mode).lower()}.l96w"
            meta = {
                "model": model_kind,
                "task": task,
                "test_mode": mode,
                "steps": result.steps,
                "final_train_loss": result.final_train_loss,
            }
            if model_kind == "lr":
                baseline.save_linear(result.model, ckpt_dir / name, meta=meta)
            else:
                nn.save_model(result.model, ckpt_dir / name, meta=meta)

        report_dict = report.to_dict()
        report_json = out / "report.json"
        report_json.write_text(json.dumps(report_dict, indent=2))
        report_txt = out / "report.txt"
        report_txt.write_text(render_report_text(report_dict))
        failure_point = None
    finally:
        outputs = {}
        for p in sorted(out.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[str(p.relative_to(out))] = p
        _write_manifest(
            out,
            "reproduce",
            config={
                "scale": args.scale,
                "sampler": sampler.to_dict(),
                "integrator": config.to_dict(),
                "epochs": epochs,
                "jobs": args.jobs,
            },
            seeds={"master": args.seed},
            outputs=outputs,
            notes={"failure_point": failure_point, "resampled_divergent_draws": skipped},
            started=started,
        )
    print(report_txt.read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# phase-data
# ---------------------------------------------------------------------------

def _cmd_phase_data(args) -> int:
    started = time.monotonic()
    out = _out_dir(args.out)
    ds_path = Path(args.dataset)
    ckpt_path = Path(args.checkpoint)
    for p in (ds_path, ckpt_path):
        if not p.exists():
            raise ValueError(f"input not found: {p}")
    ds = load_dataset(ds_path)
    model, _ = load_any_model(ckpt_path)
    sim_id = args.sim_id
    if sim_id is None:
        sim_id = int(np.unique(ds.sim_ids)[0])
    rows = np.flatnonzero(ds.sim_ids == sim_id)
    if rows.size == 0:
        raise ValueError(f"sim_id {sim_id} not present in dataset")
    preds = pipeline.predict_chunks(model, ds, rows)
    inferred = preds.mean(axis=0)

    if args.true_params:
        b, c, h = (float(v) for v in args.true_params.split(","))
    else:
        b, c, h = (float(v) for v in ds.sim_target(sim_id))
    K = int(ds.meta.get("K", 4))
    J = int(ds.meta.get("J", 4))
    F = float(ds.meta.get("F", args.f))
    params_true = ModelParams(b=b, c=c, h=h, F=F, K=K, J=J)
    params_inf = ModelParams(
        b=float(inferred[0]), c=float(inferred[1]), h=float(inferred[2]),
        F=F, K=K, J=J,
    )
    config = IntegratorConfig(dt=args.dt, n_steps=args.steps, burn_in=0)
    data = pipeline.emit_phase_data(params_true, params_inf, default_init(params_true), config)

    K, J = params_true.K, params_true.J
    phase_path = out / "phase.csv"
    with open(phase_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        names = ["x1", "x2", "x3", "y1", "y2", "y3"]
        writer.writerow([f"{n}_true" for n in names] + [f"{n}_learned" for n in names])
        cols = [0, 1, 2, K, K + 1, K + 2]
        for t in range(data.true_traj.n_steps):
            row = [repr(float(v)) for v in data.true_traj.states[t, cols]]
            row += [repr(float(v)) for v in data.inferred_traj.states[t, cols]]
            writer.writerow(row)
    errors_path = out / "errors.csv"
    with open(errors_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k+1}" for k in range(K)] + [f"y{m+1}" for m in range(J * K)])
        for t in range(data.errors.shape[0]):
            writer.writerow([repr(float(v)) for v in data.errors[t]])
    _write_manifest(
        out,
        "phase-data",
        config={
            "checkpoint": str(ckpt_path),
            "dataset": str(ds_path),
            "sim_id": sim_id,
            "true_params": [b, c, h],
            "inferred_params": inferred.tolist(),
            "integrator": config.to_dict(),
        },
        seeds={},
        inputs={"checkpoint": ckpt_path, "dataset": ds_path},
        outputs={"phase": phase_path, "errors": errors_path},
        started=started,
    )
    print(f"wrote {phase_path} and {errors_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l96lab",
        description="Two-timescale Lorenz-96 laboratory: simulate, build image-chunk "
        "datasets, train parameter-recovery models, and evaluate them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate one trajectory and write it to disk")
    p.add_argument("--b", type=float, default=10.0)
    p.add_argument("--c", type=float, default=10.0)
    p.add_argument("--h", type=float, default=1.0)
    p.add_argument("--f", type=float, default=10.0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--j", type=int, default=4)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="recorded in the manifest; unused")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("dataset", help="sample parameters, simulate, and build a chunk dataset")
    p.add_argument("--n-sims", type=int, default=40)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--j", type=int, default=4)
    p.add_argument("--f", type=float, default=10.0)
    p.add_argument("--ranges", default="", help="e.g. b=7:13,c=7:13,h=0.5:1.5")
    p.add_argument("--task", choices=["xy", "y"], default="xy")
    p.add_argument("--test-mode", choices=["false", "true"], default="false")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=list(pipeline.MODEL_KINDS), required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--report", required=True, help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("reproduce", help="run the full grid end to end")
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED, help="master seed")
    p.add_argument("--epochs", type=int, default=None, help="override the scale's epoch count")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reproduce)

    p = sub.add_parser("phase-data", help="emit phase-diagram and error CSVs for one simulation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sim-id", type=int, default=None)
    p.add_argument("--true-params", default="", help="b,c,h override; defaults to the dataset target")
    p.add_argument("--f", type=float, default=10.0, help="forcing fallback if the dataset predates it")
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phase_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except IntegrationDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (L96Error, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
