"""Training orchestration and the evaluation protocol.

Models train on individual chunks; at evaluation time per-chunk predictions
are averaged over all chunks of one simulation before the coefficient of
determination is computed. Losses stay chunk-level (they mirror the
training objective); r-squared always uses the per-simulation averages.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baseline, nn
from .dataset import TEST, TRAIN, ChunkDataset
from .errors import EmptySplit, NonFiniteLoss, ZeroVariance
from .seeding import child_seed
from .sim import IntegratorConfig, ModelParams, SimState, Trajectory, simulate

MODEL_KINDS = ("lr", "fc", "conv1d", "conv2d")
DEEP_KINDS = ("fc", "conv1d", "conv2d")
EVAL_BATCH = 256


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    model: str
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int = 0
    shuffle_seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1; got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1; got {self.batch}")


@dataclass
class TrainResult:
    model: object  # ModelSpec or LinearModel
    kind: str
    loss_history: list[float]
    final_train_loss: float
    steps: int


def _features(ds: ChunkDataset, indices: np.ndarray) -> np.ndarray:
    return ds.pixels[indices].reshape(indices.size, -1)


def _batches(indices: np.ndarray, batch: int):
    for at in range(0, indices.size, batch):
        yield indices[at : at + batch]


def predict_chunks(model, ds: ChunkDataset, indices: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """Chunk-level predictions in the order of ``indices`` (fixed batching)."""
    if isinstance(model, baseline.LinearModel):
        return baseline.predict_linear(model, _features(ds, indices))
    out = np.empty((indices.size, 3))
    at = 0
    for sel in _batches(indices, batch):
        preds, _ = nn.forward(model, ds.pixels[sel])
        out[at : at + sel.size] = preds
        at += sel.size
    return out


def evaluate_loss(model, ds: ChunkDataset, split: int, batch: int = EVAL_BATCH) -> float:
    """Chunk-level weighted MSE over a split, accumulated in fixed order."""
    indices = ds.indices(split)
    if indices.size == 0:
        raise EmptySplit(f"split {split} is empty")
    sigmas = ds.stats.target_std
    total = 0.0
    for sel in _batches(indices, batch):
        preds = predict_chunks(model, ds, sel, batch=batch)
        resid = (preds - ds.targets[sel]) / sigmas
        total += float(np.sum(resid * resid))
    return total / (3.0 * indices.size)


def train(ds: ChunkDataset, cfg: TrainConfig) -> TrainResult:
    """Train one model on the TRAIN split of a dataset.

    Deep models run a seeded-shuffle epoch loop of forward / weighted-MSE /
    backward / Adam over chunk batches; "lr" solves the normal equations in
    closed form. The returned final_train_loss is the fixed-order evaluation
    of the final weights on the TRAIN split, which cmd_eval reproduces.
    """
    train_idx = ds.indices(TRAIN)
    if train_idx.size == 0:
        raise EmptySplit("dataset has no TRAIN chunks")
    sigmas = ds.stats.target_std

    if cfg.model == "lr":
        model = baseline.fit_linear(_features(ds, train_idx), ds.targets[train_idx])
        final = evaluate_loss(model, ds, TRAIN)
        return TrainResult(model=model, kind="lr", loss_history=[], final_train_loss=final, steps=0)

    model = nn.MODEL_BUILDERS[cfg.model]((ds.height, ds.width))
    nn.init_weights(model, cfg.init_seed)
    adam = nn.AdamState(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = np.random.Generator(np.random.PCG64(cfg.shuffle_seed))

    history: list[float] = []
    steps = 0
    best = np.inf
    stale = 0
    for _ in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_sum = 0.0
        for sel in _batches(order, cfg.batch):
            preds, caches = nn.forward(model, ds.pixels[sel])
            loss, lgrad = nn.weighted_mse(preds, ds.targets[sel], sigmas)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at step {steps + 1}")
            grads = nn.backward(model, caches, lgrad)
            nn.adam_update(adam, grads)
            epoch_sum += loss * sel.size
            steps += 1
        history.append(epoch_sum / train_idx.size)
        if cfg.patience is not None:
            if history[-1] < best - 1e-12:
                best = history[-1]
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    final = evaluate_loss(model, ds, TRAIN)
    if not np.isfinite(final):
        raise NonFiniteLoss("final training loss is non-finite")
    return TrainResult(model=model, kind=cfg.model, loss_history=history,
                       final_train_loss=final, steps=steps)


def predict_per_simulation(model, ds: ChunkDataset, split: int) -> dict[int, np.ndarray]:
    """Arithmetic mean of chunk-level predictions per sim_id over one split.

    Chunks are processed in (sim_id, chunk_index) order so the summation
    order, and hence the result, is independent of storage order.
    """
    indices = ds.indices(split)
    if indices.size == 0:
        raise EmptySplit(f"split {split} is empty")
    order = np.lexsort((ds.chunk_index[indices], ds.sim_ids[indices]))
    indices = indices[order]
    preds = predict_chunks(model, ds, indices)
    out: dict[int, np.ndarray] = {}
    sims = ds.sim_ids[indices]
    for sim_id in np.unique(sims):
        mask = sims == sim_id
        out[int(sim_id)] = preds[mask].mean(axis=0)
    return out


def r_squared(truths: np.ndarray, predictions: np.ndarray):
    """Per-parameter coefficient of determination and its unweighted mean.

    r2_p = 1 - sum((yhat - y)^2) / sum((y - ybar)^2), computed per column.
    """
    truths = np.asarray(truths, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if truths.shape != predictions.shape or truths.ndim != 2:
        raise ValueError(f"shape mismatch: {truths.shape} vs {predictions.shape}")
    if truths.shape[0] < 2:
        raise ZeroVariance("need >= 2 samples for r-squared")
    ss_tot = np.sum((truths - truths.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0.0):
        bad = int(np.flatnonzero(ss_tot == 0.0)[0])
        raise ZeroVariance(f"all truths equal for parameter column {bad}")
    ss_res = np.sum((predictions - truths) ** 2, axis=0)
    per_param = 1.0 - ss_res / ss_tot
    return per_param, float(per_param.mean())


def _split_r2(model, ds: ChunkDataset, split: int):
    per_sim = predict_per_simulation(model, ds, split)
    sim_ids = sorted(per_sim)
    truths = np.array([ds.sim_target(s) for s in sim_ids])
    preds = np.array([per_sim[s] for s in sim_ids])
    per_param, mean = r_squared(truths, preds)
    return per_param, mean, {s: per_sim[s].tolist() for s in sim_ids}


@dataclass
class CellResult:
    """One (test_mode, task, model) cell of the evaluation grid."""

    train_loss: float
    test_loss: float
    train_r2: float
    test_r2: float
    train_r2_per_param: list[float]
    test_r2_per_param: list[float]
    per_sim_train: dict[int, list[float]] = field(default_factory=dict)
    per_sim_test: dict[int, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "train_r2": self.train_r2,
            "test_r2": self.test_r2,
            "train_r2_per_param": self.train_r2_per_param,
            "test_r2_per_param": self.test_r2_per_param,
            "per_sim_train": {str(k): v for k, v in self.per_sim_train.items()},
            "per_sim_test": {str(k): v for k, v in self.per_sim_test.items()},
        }


@dataclass
class EvalReport:
    """All grid cells keyed by (test_mode, task, model), Table-style."""

    cells: dict[tuple[bool, str, str], CellResult] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {}
        for (mode, task, model), cell in sorted(
            self.cells.items(), key=lambda kv: (kv[0][0], kv[0][1] != "xy", MODEL_KINDS.index(kv[0][2]))
        ):
            out.setdefault(str(mode).lower(), {}).setdefault(task, {})[model] = cell.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        report = cls()
        for mode_key, tasks in d.items():
            mode = mode_key == "true"
            for task, models in tasks.items():
                for model, c in models.items():
                    report.cells[(mode, task, model)] = CellResult(
                        train_loss=c["train_loss"],
                        test_loss=c["test_loss"],
                        train_r2=c["train_r2"],
                        test_r2=c["test_r2"],
                        train_r2_per_param=c["train_r2_per_param"],
                        test_r2_per_param=c["test_r2_per_param"],
                        per_sim_train={int(k): v for k, v in c.get("per_sim_train", {}).items()},
                        per_sim_test={int(k): v for k, v in c.get("per_sim_test", {}).items()},
                    )
        return report


_MODEL_LABELS = {"lr": "LR", "fc": "FC", "conv1d": "Conv1D", "conv2d": "Conv2D"}
_TASK_LABELS = {"xy": "Learning from X and Y", "y": "Learning from Y only"}


def render_report_text(report_dict: dict) -> str:
    """Aligned-text table of the grid in the canonical row order:
    test_mode False block then True; XY task then Y-only; LR, FC, Conv1D,
    Conv2D. Values are shown with four decimals."""
    lines = []
    header = f"{'test mode':<10} {'model':<8} {'train loss':>11} {'test loss':>11} {'train r2':>10} {'test r2':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for mode_key in ("false", "true"):
        tasks = report_dict.get(mode_key, {})
        for task in ("xy", "y"):
            if task not in tasks:
                continue
            lines.append(f"{mode_key:<10} {_TASK_LABELS[task]}")
            for model in MODEL_KINDS:
                if model not in tasks[task]:
                    continue
                c = tasks[task][model]
                lines.append(
                    f"{'':<10} {_MODEL_LABELS[model]:<8} "
                    f"{c['train_loss']:>11.4f} {c['test_loss']:>11.4f} "
                    f"{c['train_r2']:>10.4f} {c['test_r2']:>10.4f}"
                )
    return "\n".join(lines) + "\n"


def evaluate_cell(model, ds: ChunkDataset) -> CellResult:
    """Losses plus per-simulation-averaged r-squared for both splits."""
    train_r2_pp, train_r2, per_sim_train = _split_r2(model, ds, TRAIN)
    test_r2_pp, test_r2, per_sim_test = _split_r2(model, ds, TEST)
    return CellResult(
        train_loss=evaluate_loss(model, ds, TRAIN),
        test_loss=evaluate_loss(model, ds, TEST),
        train_r2=train_r2,
        test_r2=test_r2,
        train_r2_per_param=train_r2_pp.tolist(),
        test_r2_per_param=test_r2_pp.tolist(),
        per_sim_train=per_sim_train,
        per_sim_test=per_sim_test,
    )


def _run_cell(args):
    """Worker for one grid cell; module-level so it pickles."""
    ds, model_kind, task, test_mode, master_seed, epochs, batch, lr = args
    label = f"{model_kind}/{task}/{str(test_mode).lower()}"
    cfg = TrainConfig(
        model=model_kind,
        epochs=epochs,
        batch=batch,
        lr=lr,
        init_seed=child_seed(master_seed, f"init/{label}"),
        shuffle_seed=child_seed(master_seed, f"shuffle/{label}"),
    )
    result = train(ds, cfg)
    cell = evaluate_cell(result.model, ds)
    return (test_mode, task, model_kind), cell, result


def run_experiment_grid(
    datasets: dict[tuple[str, bool], ChunkDataset],
    master_seed: int,
    models: tuple[str, ...] = MODEL_KINDS,
    tasks: tuple[str, ...] = ("xy", "y"),
    test_modes: tuple[bool, ...] = (False, True),
    epochs: int | dict[str, int] = 20,
    batch: int = 64,
    lr: float = 1e-3,
    jobs: int = 1,
    trained_sink: dict | None = None,
) -> EvalReport:
    """Fill every (mode x task x model) cell and assemble the report.

    ``epochs`` may be a single count or a per-model-kind mapping. Cells are
    independent jobs; with jobs > 1 they fan out over a process pool and
    are reassembled by key, so the report does not depend on scheduling.
    ``trained_sink``, when given, receives kind-keyed TrainResults for
    checkpointing.
    """
    work = []
    for mode in test_modes:
        for task in tasks:
            ds = datasets[(task, mode)]
            for model_kind in models:
                cell_epochs = epochs.get(model_kind, 20) if isinstance(epochs, dict) else epochs
                work.append((ds, model_kind, task, mode, master_seed, cell_epochs, batch, lr))
    report = EvalReport()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, cell, result in pool.map(_run_cell, work):
                report.cells[key] = cell
                if trained_sink is not None:
                    trained_sink[key] = result
    else:
        for args in work:
            key, cell, result = _run_cell(args)
            report.cells[key] = cell
            if trained_sink is not None:
                trained_sink[key] = result
    return report


@dataclass
class PhaseData:
    """Paired trajectories from identical initial conditions plus their
    elementwise difference, for phase-diagram and error-map plotting."""

    true_traj: Trajectory
    inferred_traj: Trajectory
    errors: np.ndarray  # true - inferred, (n_steps, K + J*K)


def emit_phase_data(
    params_true: ModelParams,
    params_inferred: ModelParams,
    init: SimState,
    config: IntegratorConfig,
) -> PhaseData:
    """Simulate both parameter sets from the same initial state."""
    true_traj = simulate(params_true, init, config)
    inferred_traj = simulate(params_inferred, init, config)
    return PhaseData(
        true_traj=true_traj,
        inferred_traj=inferred_traj,
        errors=true_traj.states - inferred_traj.states,
    )
