"""Optimization, masked losses, evaluation metrics, and the epoch loop.

Training backpropagates through the solver steps of whatever forward pass
the task needs, clips the global gradient norm, and applies Adamax with a
per-epoch exponential learning-rate decay. Heldout cells never influence
any loss: they enter every computation multiplied by an exact zero mask.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Batch, DatasetSplit, IrregularSeries, batch as make_batch, denormalize
from .errors import (
    EmptyHeldoutError,
    EmptyMaskError,
    EmptySeriesError,
    InvalidSpecError,
    NonFiniteGradError,
    ShapeMismatchError,
    SingleClassError,
)
from .models import LatentOdeModel, classify, decode, encode, sample_z0
from .seeding import derive_seed
from .solver import SolverConfig
from .tensor import Parameter, Tape, Tensor, log, mul, stack, sub

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# optimizer


class AdamaxState:
    """First moment + infinity norm per parameter, with a step counter."""

    def __init__(self, params: list[Parameter], lr: float, decay: float,
                 beta1: float = 0.9, beta2: float = 0.999):
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.step_count = 0
        self.m = {p.name: np.zeros(p.value.shape) for p in params}
        self.u = {p.name: np.zeros(p.value.shape) for p in params}

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** epoch


def adamax_step(state: AdamaxState, params: list[Parameter],
                grads: list[np.ndarray], epoch: int) -> None:
    """One Adamax update with lr(epoch) = base * decay^epoch."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError("gradient contains NaN or Inf")
    state.step_count += 1
    lr = state.lr_at(epoch)
    bias = 1.0 - state.beta1 ** state.step_count
    for p, g in zip(params, grads):
        m = state.m[p.name]
        u = state.u[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.assign(p.value.data - lr * m / (bias * (u + 1e-8)))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return [g * factor for g in grads]


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossSpec:
    kind: str = "elbo"  # masked_mse | gaussian_nll | elbo | bce | cross_entropy
    obs_noise_std: float = 0.01
    kl_weight: float = 1.0
    kl_warmup_epochs: int = 10

    def __post_init__(self):
        if self.obs_noise_std <= 0:
            raise InvalidSpecError("obs_noise_std must be positive")

    def kl_weight_at(self, epoch: int) -> float:
        if self.kl_warmup_epochs <= 0:
            return self.kl_weight
        return self.kl_weight * min(1.0, epoch / self.kl_warmup_epochs)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Sum(mask * (pred - target)^2) / sum(mask); differentiable in pred."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.data.shape != target.shape or target.shape != mask.shape:
        raise ShapeMismatchError("masked_mse shapes disagree")
    count = mask.sum()
    if count == 0:
        raise EmptyMaskError("mask selects no cells")
    diff = sub(pred, Tensor(target))
    return mul(mul(diff, diff), Tensor(mask)).sum() * (1.0 / count)


def masked_gaussian_nll(pred: Tensor, target, mask, obs_noise_std: float) -> Tensor:
    """Masked Gaussian log-likelihood loss, summed over cells, mean over batch.

    pred has shape (T, B, D); the constant per-cell normalizer uses the
    mask total, so unmasked cells contribute exactly zero.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.data.shape != target.shape or target.shape != mask.shape:
        raise ShapeMismatchError("nll shapes disagree")
    count = mask.sum()
    if count == 0:
        raise EmptyMaskError("mask selects no cells")
    n_batch = target.shape[1] if target.ndim == 3 else 1
    var = obs_noise_std ** 2
    diff = sub(pred, Tensor(target))
    quad = mul(mul(diff, diff), Tensor(mask)).sum() * (1.0 / (2.0 * var))
    const = count * (math.log(obs_noise_std) + 0.5 * LOG_2PI)
    return (quad + const) * (1.0 / n_batch)


def kl_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over dims, mean over batch."""
    n_batch = mu.data.shape[0] if mu.data.ndim == 2 else 1
    total = (mul(sigma, sigma) + mul(mu, mu) - 1.0 - mul(log(sigma), 2.0)).sum()
    return total * (0.5 / n_batch)


def elbo(pred: Tensor, mu: Tensor, sigma: Tensor, target, mask,
         obs_noise_std: float, kl_weight: float) -> Tensor:
    """Negative evidence lower bound: masked NLL + kl_weight * KL."""
    nll = masked_gaussian_nll(pred, target, mask, obs_noise_std)
    if kl_weight == 0.0:
        return nll
    return nll + kl_standard_normal(mu, sigma) * kl_weight


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy over rows; labels are integer class ids."""
    labels = np.asarray(labels, dtype=int)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeMismatchError("labels must be one id per row")
    # log-sum-exp via the exp/log tape ops with a constant max shift
    shift = logits.data.max(axis=1, keepdims=True)
    from .tensor import exp as texp

    z = sub(logits, Tensor(np.repeat(shift, c, axis=1)))
    lse = log(texp(z).sum(axis=1))
    pick = np.zeros((n, c))
    pick[np.arange(n), labels] = 1.0
    picked = mul(z, Tensor(pick)).sum(axis=1)
    return (lse - picked).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise SingleClassError("need both classes for AUC")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + (counts + 1) / 2.0  # 1-based, ties averaged
    ranks = np.empty(scores.size)
    ranks[order] = avg_rank[inv]
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    return float((predicted == labels).mean())


# ---------------------------------------------------------------------------
# forward passes


def reconstruction_forward(model: LatentOdeModel, bt: Batch,
                           solver: SolverConfig, noise: np.ndarray,
                           encode_before: Optional[float] = None,
                           ) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Encode the batch's observed cells, decode at its observed times.

    Returns (pred (T_obs, B, D), mu, sigma, observed time positions).
    `encode_before` restricts the encoder to observations at or before a
    cut time (extrapolation training).
    """
    enc_mask = bt.mask
    if encode_before is not None:
        keep = bt.times <= encode_before
        enc_mask = bt.mask * keep[None, :, None]
    if not enc_mask.any():
        raise EmptySeriesError("batch has no observable points for encoding")
    t0 = float(bt.times[0])
    mu, sigma = encode(model, bt.times, bt.values * enc_mask, enc_mask,
                       solver, t0=t0)
    z0 = sample_z0(mu, sigma, noise)
    obs_pos = np.where(bt.mask.any(axis=(0, 2)))[0]
    dec_times = bt.times[obs_pos]
    if dec_times[0] > t0:
        times = np.concatenate([[t0], dec_times])
        preds = decode(model, z0, times, solver)[1:]
    else:
        preds = decode(model, z0, dec_times, solver)
    return stack(preds), mu, sigma, obs_pos


def batch_training_loss(model: LatentOdeModel, bt: Batch, spec: LossSpec,
                        solver: SolverConfig, noise: np.ndarray,
                        epoch: int, task: str = "reconstruction",
                        encode_before: Optional[float] = None) -> Tensor:
    """Scalar loss for one batch under the configured task."""
    if task in ("reconstruction", "extrapolation"):
        pred, mu, sigma, obs_pos = reconstruction_forward(
            model, bt, solver, noise, encode_before=encode_before)
        target = np.transpose(bt.values[:, obs_pos, :], (1, 0, 2))
        mask = np.transpose(bt.mask[:, obs_pos, :], (1, 0, 2))
        if spec.kind == "masked_mse":
            return masked_mse(pred, target, mask)
        if spec.kind == "gaussian_nll":
            return masked_gaussian_nll(pred, target, mask, spec.obs_noise_std)
        return elbo(pred, mu, sigma, target, mask, spec.obs_noise_std,
                    spec.kl_weight_at(epoch))
    if task == "classification":
        if bt.labels is None:
            raise InvalidSpecError("classification needs labels")
        mu, sigma = encode(model, bt.times, bt.values * bt.mask, bt.mask,
                           solver, t0=float(bt.times[0]))
        z0 = sample_z0(mu, sigma, noise)
        logits = classify(model, z0)
        loss = softmax_cross_entropy(logits, bt.labels.astype(int))
        kl_w = spec.kl_weight_at(epoch)
        if kl_w > 0.0:
            loss = loss + kl_standard_normal(mu, sigma) * kl_w
        return loss
    raise InvalidSpecError(f"unsupported training task '{task}'")


# ---------------------------------------------------------------------------
# evaluation


def _decode_numpy(model: LatentOdeModel, bt: Batch, solver: SolverConfig,
                  encode_before: Optional[float] = None) -> np.ndarray:
    """(B, T, D) mean-trajectory predictions with gradients off."""
    enc_mask = bt.mask
    if encode_before is not None:
        keep = bt.times <= encode_before
        enc_mask = bt.mask * keep[None, :, None]
    if not enc_mask.any():
        raise EmptySeriesError("no observable points before the cut")
    mu, _ = encode(model, bt.times, bt.values * enc_mask, enc_mask, solver,
                   t0=float(bt.times[0]))
    preds = decode(model, mu, bt.times, solver)
    return np.stack([p.data for p in preds], axis=1)


def _latent_for_classifier(model: LatentOdeModel, bt: Batch,
                           solver: SolverConfig, which: str) -> Tensor:
    mu, _ = encode(model, bt.times, bt.values * bt.mask, bt.mask, solver,
                   t0=float(bt.times[0]))
    if which == "z0":
        return mu
    times = bt.times
    states = decode_latents(model, mu, times, solver)
    if which == "final":
        return states[-1]
    data = np.mean([s.data for s in states], axis=0)
    return Tensor(data)


def decode_latents(model: LatentOdeModel, z0: Tensor, times,
                   solver: SolverConfig) -> list[Tensor]:
    from .solver import OdeProblem, odesolve_at

    times = [float(t) for t in times]
    problem = OdeProblem(model.decoder_dynamics.rhs, z0, (times[0], times[-1]))
    return odesolve_at(problem, times, solver)


def evaluate(model: LatentOdeModel, series: list[IrregularSeries], task: str,
             solver: SolverConfig, norm_mean=None, norm_std=None,
             classifier_input: str = "z0", extrapolation_cut: Optional[float] = None,
             eval_batch: int = 32, per_sample: bool = False) -> dict:
    """Task metrics over a list of series, gradients off.

    Reconstruction and extrapolation report masked MSE over heldout cells
    in denormalized units; classification reports AUC (binary) and
    accuracy.
    """
    if not series:
        raise EmptySeriesError("nothing to evaluate")
    metrics: dict = {}
    if task in ("reconstruction", "extrapolation"):
        sq_sum = 0.0
        count = 0.0
        per: dict[str, float] = {}
        for lo in range(0, len(series), eval_batch):
            members = list(range(lo, min(lo + eval_batch, len(series))))
            bt = make_batch(series, members)
            cut = None
            if task == "extrapolation":
                if extrapolation_cut is None:
                    raise InvalidSpecError("extrapolation needs a cut time")
                cut = extrapolation_cut
            pred = _decode_numpy(model, bt, solver, encode_before=cut)
            target = bt.values
            hmask = bt.heldout_mask
            if task == "extrapolation":
                hmask = hmask * (bt.times > cut)[None, :, None]
            if norm_mean is not None:
                pred = denormalize(pred, norm_mean, norm_std)
                target = denormalize(target, norm_mean, norm_std)
            err = (pred - target) ** 2 * hmask
            sq_sum += float(err.sum())
            count += float(hmask.sum())
            if per_sample:
                for bi, sid in enumerate(bt.sample_ids):
                    c = float(hmask[bi].sum())
                    per[sid] = float(err[bi].sum() / c) if c else float("nan")
        if count == 0:
            raise EmptyHeldoutError("no heldout cells to score")
        metrics["mse"] = sq_sum / count
        metrics["n_heldout"] = count
        if per_sample:
            metrics["per_sample"] = per
        return metrics

    if task in ("classification", "per_time_classification"):
        if task == "per_time_classification":
            correct = 0
            total = 0
            for s in series:
                if s.label is None or np.asarray(s.label).ndim == 0:
                    raise InvalidSpecError("per-time task needs per-time labels")
                bt = make_batch([s], [0])
                mu, _ = encode(model, bt.times, bt.values * bt.mask, bt.mask,
                               solver, t0=float(bt.times[0]))
                states = decode_latents(model, mu, bt.times, solver)
                logits = np.stack([classify(model, st).data[0] for st in states])
                pred = logits.argmax(axis=1)
                lab = np.asarray(s.label)
                valid = np.isfinite(lab)
                correct += int((pred[valid] == lab[valid].astype(int)).sum())
                total += int(valid.sum())
            metrics["acc"] = correct / total if total else float("nan")
            return metrics

        scores = []
        labels = []
        preds = []
        for lo in range(0, len(series), eval_batch):
            members = list(range(lo, min(lo + eval_batch, len(series))))
            bt = make_batch(series, members)
            if bt.labels is None:
                raise InvalidSpecError("classification needs labels")
            z = _latent_for_classifier(model, bt, solver, classifier_input)
            logits = classify(model, z).data
            shift = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shift) / np.exp(shift).sum(axis=1, keepdims=True)
            preds.extend(logits.argmax(axis=1).tolist())
            if logits.shape[1] == 2:
                scores.extend(probs[:, 1].tolist())
            labels.extend(bt.labels.astype(int).tolist())
        labels_arr = np.asarray(labels)
        metrics["acc"] = accuracy(np.asarray(preds), labels_arr)
        if len(set(labels)) == 2 and scores:
            metrics["auc"] = auc(np.asarray(scores), labels_arr)
        return metrics

    raise InvalidSpecError(f"unknown task '{task}'")


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_metrics: dict
    seconds: float
    lr: float


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 20
    seed: int = 0
    patience: int = 20
    clip_norm: float = 10.0
    task: str = "reconstruction"
    classifier_input: str = "z0"
    extrapolation_cut: Optional[float] = None


class Trainer:
    """Owns one model + optimizer + split for a single training run."""

    def __init__(self, model: LatentOdeModel, split: DatasetSplit,
                 loss_spec: LossSpec, opt: AdamaxState,
                 settings: TrainSettings, solver_train: SolverConfig,
                 solver_eval: SolverConfig):
        self.model = model
        self.split = split
        self.loss_spec = loss_spec
        self.opt = opt
        self.settings = settings
        self.solver_train = solver_train
        self.solver_eval = solver_eval
        self.params = model.parameters()

    def _batches(self, epoch: int) -> list[list[int]]:
        n = len(self.split.train)
        rng = np.random.default_rng(
            derive_seed(self.settings.seed, f"shuffle:{epoch}"))
        order = rng.permutation(n)
        bs = max(1, self.settings.batch_size)
        return [order[i:i + bs].tolist() for i in range(0, n, bs)]

    def _noise(self, epoch: int, batch_idx: int, shape) -> np.ndarray:
        rng = np.random.default_rng(
            derive_seed(self.settings.seed, f"noise:{epoch}:{batch_idx}"))
        return rng.standard_normal(shape)

    def train_epoch(self, epoch: int) -> MetricsRecord:
        """One shuffled pass over the train split plus a validation pass."""
        start = time.perf_counter()
        losses = []
        cut = None
        if self.settings.task == "extrapolation":
            cut = self.settings.extrapolation_cut
        for bi, members in enumerate(self._batches(epoch)):
            bt = make_batch(self.split.train, members)
            noise = self._noise(epoch, bi, (len(members), self.model.latent_width))
            tape = Tape()
            with tape.recording():
                loss = batch_training_loss(
                    self.model, bt, self.loss_spec, self.solver_train, noise,
                    epoch, task=self.settings.task, encode_before=cut)
            losses.append(loss.item())
            if self.opt.lr_at(epoch) == 0.0:
                continue  # nothing to apply; keep parameters bitwise intact
            tape.backward(loss, self.params)
            grads = [p.grad.data for p in self.params]
            grads = clip_gradients(grads, self.settings.clip_norm)
            adamax_step(self.opt, self.params, grads, epoch)
        val = self.validate()
        seconds = time.perf_counter() - start
        return MetricsRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_metrics=val,
            seconds=seconds,
            lr=self.opt.lr_at(epoch),
        )

    def validate(self) -> dict:
        target = self.split.validation or self.split.test
        if not target:
            return {}
        cut = None
        if self.settings.task == "extrapolation":
            cut = self.settings.extrapolation_cut
        return evaluate(
            self.model, target, self.settings.task, self.solver_eval,
            norm_mean=self.split.norm_mean, norm_std=self.split.norm_std,
            classifier_input=self.settings.classifier_input,
            extrapolation_cut=cut,
        )


def train_epoch(model: LatentOdeModel, split: DatasetSplit, loss_spec: LossSpec,
                opt: AdamaxState, epoch: int = 0,
                settings: Optional[TrainSettings] = None,
                solver_train: Optional[SolverConfig] = None,
                solver_eval: Optional[SolverConfig] = None) -> MetricsRecord:
    """One epoch through a throwaway Trainer (convenience entry point)."""
    settings = settings or TrainSettings()
    if solver_train is None or solver_eval is None:
        lo = min(float(s.times[0]) for s in split.all_series())
        hi = max(float(s.times[-1]) for s in split.all_series())
        default = SolverConfig(method="rk4", fixed_step=max(hi - lo, 1.0) / 20.0)
        solver_train = solver_train or default
        solver_eval = solver_eval or default
    trainer = Trainer(model, split, loss_spec, opt, settings,
                      solver_train, solver_eval)
    return trainer.train_epoch(epoch)


def primary_metric(task: str, metrics: dict) -> tuple[str, float, bool]:
    """(name, value, higher_is_better) of the task's headline metric."""
    if task in ("reconstruction", "extrapolation"):
        return "mse", metrics.get("mse", float("inf")), False
    if "auc" in metrics:
        return "auc", metrics["auc"], True
    return "acc", metrics.get("acc", 0.0), True


def snapshot_params(model: LatentOdeModel) -> dict[str, np.ndarray]:
    return {p.name: p.value.data.copy() for p in model.parameters()}


def restore_params(model: LatentOdeModel, snap: dict[str, np.ndarray]) -> None:
    for p in model.parameters():
        p.assign(snap[p.name])


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_metric_name: str
    best_metric: float
    best_params: dict


def fit(trainer: Trainer, total_epochs: int, patience: int,
        start_epoch: int = 0, on_record: Optional[Callable] = None) -> FitResult:
    """Run epochs [start_epoch, total_epochs) with patience-based early stop.

    Tracks the best validation value of the task's primary metric and
    snapshots the parameters that achieved it; with no validation data the
    latest parameters count as best.
    """
    history = []
    task = trainer.settings.task
    best_epoch = start_epoch - 1
    best_value: Optional[float] = None
    best_name = primary_metric(task, {})[0]
    best_params = snapshot_params(trainer.model)
    for epoch in range(start_epoch, total_epochs):
        record = trainer.train_epoch(epoch)
        history.append(record)
        if on_record is not None:
            on_record(record)
        name, value, higher = primary_metric(task, record.val_metrics)
        best_name = name
        improved = (
            best_value is None
            or (higher and value > best_value)
            or (not higher and value < best_value)
        )
        if record.val_metrics and improved:
            best_value = value
            best_epoch = epoch
            best_params = snapshot_params(trainer.model)
        elif not record.val_metrics:
            best_epoch = epoch
            best_params = snapshot_params(trainer.model)
        if record.val_metrics and epoch - best_epoch >= patience:
            break
    if best_value is None:
        best_value = float("nan")
    return FitResult(history=history, best_epoch=best_epoch,
                     best_metric_name=best_name, best_metric=best_value,
                     best_params=best_params)
