"""Training regimes over the interpolating joint loss.

The joint objective is (1-C) * d_X + C * d_D where d_X is the mean squared
reconstruction error and d_D the task loss, C in [0, 1]:

* sequential: reconstruction first, task second on frozen outputs;
* end-to-end: C = 1 (task loss only);
* joint: both parameter sets updated simultaneously at a fixed C.

All routines are deterministic functions of (config, seed, data source).
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import checkpoint
from .tensor import ParamSet, Tape, Tensor, add, mul, sub, tmean

__all__ = [
    "PretrainConfig", "RegimeConfig", "JointModel", "TrainResult",
    "TrainingDiverged", "Sgd", "Adam", "make_optimizer", "joint_loss",
    "joint_loss_parts", "train_reconstruction", "train_task",
    "train_sequential", "train_end_to_end", "train_joint", "sweep_C",
    "invariance_probe", "ProbeReport",
]


@dataclass(frozen=True)
class PretrainConfig:
    """Optional warm-start stages before joint training."""

    recon_steps: int = 0
    recon_batch_size: int = 64
    task_steps: int = 0
    task_batch_size: int = 64
    task_target_accuracy: float | None = None  # early stop on held-out split


@dataclass(frozen=True)
class RegimeConfig:
    regime: str = "joint"  # sequential | end_to_end | joint
    C: float = 0.5
    optimizer: str = "adam"  # adam | sgd
    learning_rate: float = 1e-3
    final_learning_rate: float = 1e-5
    batch_size: int = 32
    steps: int = 1000
    pretrain: PretrainConfig | None = None
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.regime not in ("sequential", "end_to_end", "joint"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if not 0.0 <= self.C <= 1.0:
            raise ValueError(f"C must be in [0, 1], got {self.C}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class JointModel:
    """The operator pair being trained.

    ``recon_forward(y_lin, theta)`` maps a batched linearized sinogram to
    images (N, H, W); ``task_forward(x, vartheta)`` maps images to task
    outputs; ``task_loss(d_hat, z)`` is a scalar-producing loss.
    ``task_metric(d_hat, z)`` is an optional evaluation score (higher is
    better), e.g. accuracy.
    """

    recon_forward: Callable[[Any, ParamSet], Tensor]
    task_forward: Callable[[Tensor, ParamSet], Tensor]
    task_loss: Callable[[Tensor, Any], Tensor]
    theta: ParamSet
    vartheta: ParamSet
    task_metric: Callable[[Tensor, Any], float] | None = None


@dataclass
class TrainResult:
    theta: ParamSet
    vartheta: ParamSet
    history: list = field(default_factory=list)  # (step, d_X, d_D, joint, lr)
    final_recon_loss: float = float("nan")
    final_task_loss: float = float("nan")


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; carries the last good parameters."""

    def __init__(self, step: int, theta: ParamSet, vartheta: ParamSet,
                 checkpoint_path: str | None = None):
        self.step = step
        self.theta = theta
        self.vartheta = vartheta
        self.checkpoint_path = checkpoint_path
        where = f"; last good checkpoint at {checkpoint_path}" \
            if checkpoint_path else ""
        super().__init__(f"non-finite loss at step {step}{where}")


# ---------------------------------------------------------------------------
# optimizers (cosine learning-rate decay)


def _cosine_lr(lr0: float, lr1: float, t: int, total: int) -> float:
    if total <= 1:
        return lr0
    frac = min(t / (total - 1), 1.0)
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + np.cos(np.pi * frac))


class Sgd:
    def __init__(self, params: ParamSet, lr: float, final_lr: float,
                 total_steps: int):
        self.params = params
        self.lr0, self.lr1, self.total = lr, final_lr, total_steps
        self.t = 0

    @property
    def lr(self) -> float:
        return _cosine_lr(self.lr0, self.lr1, self.t, self.total)

    def step(self, grads: dict) -> None:
        lr = self.lr
        for name, p in self.params.items():
            self.params.assign_(name, p.data - lr * grads[name].data)
        self.t += 1


class Adam:
    def __init__(self, params: ParamSet, lr: float, final_lr: float,
                 total_steps: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr0, self.lr1, self.total = lr, final_lr, total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    @property
    def lr(self) -> float:
        return _cosine_lr(self.lr0, self.lr1, self.t, self.total)

    def step(self, grads: dict) -> None:
        lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name].data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            self.params.assign_(name, p.data - lr * update)


def make_optimizer(kind: str, params: ParamSet, cfg: RegimeConfig,
                   total_steps: int):
    cls = Adam if kind == "adam" else Sgd
    return cls(params, cfg.learning_rate, cfg.final_learning_rate,
               total_steps)


# ---------------------------------------------------------------------------
# the joint loss


def _recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    d = sub(x_hat, x)
    return tmean(mul(d, d))


def joint_loss_parts(x, x_hat: Tensor, d_target, d_hat: Tensor, C: float,
                     task_loss: Callable) -> tuple[Tensor, Tensor, Tensor]:
    """(joint, reconstruction, task) loss terms; joint = (1-C)*rec + C*task."""
    if not 0.0 <= C <= 1.0:
        raise ValueError(f"C must be in [0, 1], got {C}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, x_hat.data.dtype))
    rec = _recon_loss(x, x_hat)
    task = task_loss(d_hat, d_target)
    joint = add(mul(rec, 1.0 - C), mul(task, C))
    return joint, rec, task


def joint_loss(x, x_hat: Tensor, d_target, d_hat: Tensor, C: float,
               task_loss: Callable) -> Tensor:
    """Interpolating loss (1-C) * ||x - x_hat||^2_mean + C * task_loss."""
    return joint_loss_parts(x, x_hat, d_target, d_hat, C, task_loss)[0]


# ---------------------------------------------------------------------------
# training loops


def _merged(theta: ParamSet, vartheta: ParamSet) -> ParamSet:
    out = ParamSet()
    for name, p in theta.items():
        out._params["recon." + name] = p
    for name, p in vartheta.items():
        out._params["task." + name] = p
    return out


def _split_seed(seed: int, label: str) -> int:
    # crc32 keeps the derivation stable across processes (hash() is not)
    ss = np.random.SeedSequence([seed, zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


class _MetricsWriter:
    """Append-only per-step CSV: step, d_X, d_D, joint, learning rate."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(
                    ["step", "d_x", "d_d", "joint", "learning_rate"])

    def write(self, step, d_x, d_d, joint, lr):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [step, f"{d_x:.6g}", f"{d_d:.6g}", f"{joint:.6g}",
                     f"{lr:.6g}"])


def _maybe_checkpoint(params_pair, out_dir, tag):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    theta, vartheta = params_pair
    path = out_dir / f"{tag}.trkp"
    checkpoint.save_params(_merged(theta, vartheta), path)
    return str(path)


def train_joint(data, model: JointModel, cfg: RegimeConfig,
                metrics_path=None, out_dir=None,
                checkpoint_every: int = 0) -> TrainResult:
    """Simultaneous stochastic minimization of the joint loss over (theta,
    vartheta).

    ``data`` is a triplet source exposing ``batches(batch_size, seed)``.
    Both loss components are logged every ``cfg.log_every`` steps.  A
    non-finite loss aborts with :class:`TrainingDiverged` carrying the last
    good parameters (also written to ``out_dir`` when given).
    """
    theta, vartheta = model.theta, model.vartheta
    merged = _merged(theta, vartheta)
    opt = make_optimizer(cfg.optimizer, merged, cfg, cfg.steps)
    stream = data.batches(cfg.batch_size, _split_seed(cfg.seed, "joint-data"))
    writer = _MetricsWriter(metrics_path)
    history = []
    last_good = (theta.copy(), vartheta.copy())
    last_rec = last_task = float("nan")

    for step in range(cfg.steps):
        batch = next(stream)
        lr_now = opt.lr
        with Tape() as tape:
            x_hat = model.recon_forward(batch.y_lin, theta)
            d_hat = model.task_forward(x_hat, vartheta)
            joint, rec, task = joint_loss_parts(
                batch.x, x_hat, batch.z, d_hat, cfg.C, model.task_loss)
        jv, rv, tv = joint.item(), rec.item(), task.item()
        if not np.isfinite(jv):
            path = _maybe_checkpoint(last_good, out_dir, "diverged-last-good")
            raise TrainingDiverged(step, *last_good, checkpoint_path=path)
        grads = tape.gradients(joint, merged)
        opt.step(grads)
        last_rec, last_task = rv, tv
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, rv, tv, jv, lr_now))
            writer.write(step, rv, tv, jv, lr_now)
            last_good = (theta.copy(), vartheta.copy())
        if checkpoint_every and step and step % checkpoint_every == 0:
            _maybe_checkpoint((theta, vartheta), out_dir, f"step{step:07d}")
    _maybe_checkpoint((theta, vartheta), out_dir, "final")
    return TrainResult(theta, vartheta, history, last_rec, last_task)


def train_reconstruction(data, model: JointModel, cfg: RegimeConfig,
                         steps: int, batch_size: int | None = None,
                         seed_label: str = "recon",
                         metrics_path=None) -> list:
    """Minimize the empirical reconstruction loss over theta alone."""
    theta = model.theta
    scoped = ParamSet()
    for name, p in theta.items():
        scoped._params["recon." + name] = p
    opt = make_optimizer(cfg.optimizer, scoped, cfg, steps)
    stream = data.batches(batch_size or cfg.batch_size,
                          _split_seed(cfg.seed, seed_label))
    writer = _MetricsWriter(metrics_path)
    history = []
    for step in range(steps):
        batch = next(stream)
        lr_now = opt.lr
        with Tape() as tape:
            x_hat = model.recon_forward(batch.y_lin, theta)
            rec = _recon_loss(Tensor(batch.x.data), x_hat)
        rv = rec.item()
        if not np.isfinite(rv):
            raise TrainingDiverged(step, theta.copy(), model.vartheta.copy())
        opt.step(tape.gradients(rec, scoped))
        if step % cfg.log_every == 0 or step == steps - 1:
            history.append((step, rv, float("nan"), rv, lr_now))
            writer.write(step, rv, float("nan"), rv, lr_now)
    return history


def train_task(data, model: JointModel, cfg: RegimeConfig, steps: int,
               batch_size: int | None = None, inputs: str = "recon",
               seed_label: str = "task", target_accuracy: float | None = None,
               eval_every: int = 200, metrics_path=None) -> list:
    """Minimize the empirical task loss over vartheta alone.

    ``inputs`` selects what the task operator sees: "recon" feeds frozen
    reconstructions R_theta(y) (theta is not touched), "clean" feeds the
    true images.  With ``target_accuracy`` the loop stops early once the
    held-out validation accuracy reaches the target.
    """
    if inputs not in ("recon", "clean"):
        raise ValueError(f"unknown task-stage inputs {inputs!r}")
    vartheta = model.vartheta
    scoped = ParamSet()
    for name, p in vartheta.items():
        scoped._params["task." + name] = p
    opt = make_optimizer(cfg.optimizer, scoped, cfg, steps)
    stream = data.batches(batch_size or cfg.batch_size,
                          _split_seed(cfg.seed, seed_label))
    writer = _MetricsWriter(metrics_path)
    history = []
    for step in range(steps):
        batch = next(stream)
        lr_now = opt.lr
        if inputs == "recon":
            x_in = model.recon_forward(batch.y_lin, model.theta).detach()
        else:
            x_in = Tensor(batch.x.data)
        with Tape() as tape:
            d_hat = model.task_forward(x_in, vartheta)
            task = model.task_loss(d_hat, batch.z)
        tv = task.item()
        if not np.isfinite(tv):
            raise TrainingDiverged(step, model.theta.copy(), vartheta.copy())
        opt.step(tape.gradients(task, scoped))
        if step % cfg.log_every == 0 or step == steps - 1:
            history.append((step, float("nan"), tv, tv, lr_now))
            writer.write(step, float("nan"), tv, tv, lr_now)
        if (target_accuracy is not None and model.task_metric is not None
                and step % eval_every == eval_every - 1):
            score = _validation_metric(data, model, inputs)
            if score >= target_accuracy:
                break
    return history


def _validation_metric(data, model: JointModel, inputs: str,
                       max_items: int = 2048, batch: int = 256) -> float:
    images, targets = data.arrays("validation")
    images = images[:max_items]
    targets = targets[:max_items]
    scores = []
    for lo in range(0, len(images), batch):
        chunk = Tensor(images[lo:lo + batch])
        if inputs == "recon":
            y = data.measure(images[lo:lo + batch])
            chunk = model.recon_forward(y, model.theta).detach()
        d_hat = model.task_forward(chunk, model.vartheta)
        scores.append(model.task_metric(d_hat, targets[lo:lo + batch])
                      * len(images[lo:lo + batch]))
    return float(np.sum(scores) / len(images))


def pretrain(data, model: JointModel, cfg: RegimeConfig,
             out_dir=None) -> None:
    """Warm-start theta on the reconstruction loss and vartheta on clean
    images, per the pretrain section of the config."""
    pre = cfg.pretrain
    if pre is None:
        return
    if pre.recon_steps:
        train_reconstruction(data, model, cfg, pre.recon_steps,
                             batch_size=pre.recon_batch_size,
                             seed_label="pretrain-recon")
    if pre.task_steps:
        train_task(data, model, cfg, pre.task_steps,
                   batch_size=pre.task_batch_size, inputs="clean",
                   seed_label="pretrain-task",
                   target_accuracy=pre.task_target_accuracy)
    if out_dir is not None:
        _maybe_checkpoint((model.theta, model.vartheta), out_dir, "pretrained")


def train_sequential(data, model: JointModel, cfg: RegimeConfig,
                     metrics_path=None, out_dir=None,
                     task_steps: int | None = None) -> TrainResult:
    """Reconstruction first, then the task on frozen reconstructions.

    Stage 1 minimizes the reconstruction loss over theta for
    ``cfg.pretrain.recon_steps`` (or ``cfg.steps`` when no pretrain section
    is given).  Stage 2 freezes theta and trains vartheta on R_theta(y)
    inputs for ``cfg.steps`` (``task_steps`` overrides; 0 skips the stage).
    """
    stage1 = cfg.pretrain.recon_steps if (cfg.pretrain and
                                          cfg.pretrain.recon_steps) \
        else cfg.steps
    hist1 = train_reconstruction(
        data, model, cfg, stage1,
        batch_size=cfg.pretrain.recon_batch_size if cfg.pretrain else None,
        seed_label="sequential-recon", metrics_path=metrics_path)
    if cfg.pretrain and cfg.pretrain.task_steps:
        train_task(data, model, cfg, cfg.pretrain.task_steps,
                   batch_size=cfg.pretrain.task_batch_size, inputs="clean",
                   seed_label="pretrain-task",
                   target_accuracy=cfg.pretrain.task_target_accuracy)
    stage2 = cfg.steps if task_steps is None else task_steps
    hist2 = []
    if stage2:
        hist2 = train_task(data, model, cfg, stage2, inputs="recon",
                           seed_label="sequential-task")
    _maybe_checkpoint((model.theta, model.vartheta), out_dir, "final")
    rec = hist1[-1][1] if hist1 else float("nan")
    task = hist2[-1][2] if hist2 else float("nan")
    return TrainResult(model.theta, model.vartheta, hist1 + hist2, rec, task)


def train_end_to_end(data, model: JointModel, cfg: RegimeConfig,
                     metrics_path=None, out_dir=None) -> TrainResult:
    """Task loss only: identical to the joint regime at C = 1."""
    return train_joint(data, model, replace(cfg, C=1.0), metrics_path,
                       out_dir)


def sweep_C(data, model_factory: Callable[[int], JointModel],
            cfg: RegimeConfig, C_list,
            eval_fn: Callable[[JointModel], float] | None = None,
            eval_parts_fn: Callable[[JointModel],
                                    tuple[float, float]] | None = None,
            out_dir=None) -> list[dict]:
    """Run train_joint once per C with fresh seed-derived state.

    Returns one row per C: {"C", "d_x", "d_d", "task_metric", "failed"}.
    ``eval_parts_fn`` evaluates (d_X, d_D) on held-out data after training;
    without it the final training-batch losses are reported.  Failures of
    individual runs are marked and do not stop the sweep.
    """
    C_list = list(C_list)
    if not C_list:
        raise ValueError("C_list must be non-empty")
    rows = []
    for idx, c in enumerate(C_list):
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"C must be in [0, 1], got {c}")
        run_seed = _split_seed(cfg.seed, f"sweep-{idx}")
        run_cfg = replace(cfg, C=c, seed=run_seed)
        model = model_factory(run_seed)
        row = {"C": c, "d_x": float("nan"), "d_d": float("nan"),
               "task_metric": float("nan"), "failed": False}
        try:
            pretrain(data, model, run_cfg)
            metrics = (Path(out_dir) / f"steps_C{c:g}.csv") if out_dir else None
            result = train_joint(data, model, run_cfg, metrics_path=metrics)
            if eval_parts_fn is not None:
                row["d_x"], row["d_d"] = map(float, eval_parts_fn(model))
            else:
                row["d_x"] = result.final_recon_loss
                row["d_d"] = result.final_task_loss
            if eval_fn is not None:
                row["task_metric"] = float(eval_fn(model))
        except (TrainingDiverged, FloatingPointError) as exc:
            row["failed"] = True
            row["error"] = str(exc)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# the non-uniqueness probe


@dataclass(frozen=True)
class ProbeReport:
    C: float
    loss_original: float
    loss_transformed: float
    recon_original: float
    recon_transformed: float
    task_original: float
    task_transformed: float

    @property
    def difference(self) -> float:
        return self.loss_transformed - self.loss_original


def invariance_probe(model: JointModel, batch, a: float, b: float = 0.0,
                     C: float = 1.0) -> ProbeReport:
    """Empirical joint loss of (R, T) versus (B^-1 o R, T o B) for the
    pointwise affine map B(x) = a*x + b.

    At C = 1 the two losses agree exactly (the composite T o B o B^-1 o R
    evaluates pointwise to T o R); at C < 1 the reconstruction component
    differs whenever B^-1 o R != R.
    """
    if a == 0:
        raise ValueError("B(x) = a*x + b must be invertible; a = 0 is not")
    x_hat = model.recon_forward(batch.y_lin, model.theta).detach()
    dtype = x_hat.dtype

    def parts(x_img: Tensor, task_input: Tensor):
        d_hat = model.task_forward(task_input, model.vartheta)
        joint, rec, task = joint_loss_parts(
            batch.x, x_img, batch.z, d_hat, C, model.task_loss)
        return joint.item(), rec.item(), task.item()

    j0, r0, t0 = parts(x_hat, x_hat)
    # transformed pair: reconstruction is B^-1(R(y)), task sees B applied back
    a_ = np.asarray(a, dtype)
    b_ = np.asarray(b, dtype)
    x_binv = mul(sub(x_hat, b_), Tensor(1.0 / a_))
    x_back = add(mul(x_binv, Tensor(a_)), b_)
    j1, r1, t1 = parts(x_binv, x_back)
    return ProbeReport(C, j0, j1, r0, r1, t0, t1)
