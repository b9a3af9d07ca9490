"""Losses, the lambda ramp, Adam, and the training loop for every mode.

Modes
-----
vanilla         raw xyz input, cross-entropy only
at              raw xyz input, clean/PGD-l2 cross-entropy mix
mapr            xyz + intrinsic features, cross-entropy + lambda * consistency
intrinsic_only  xyz + intrinsic features, cross-entropy only
lip_only        raw xyz input, cross-entropy + lambda * consistency
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .geometry import AUGMENTED_WIDTH, intrinsic_map_batch
from .model import ModelParams, forward, init_params
from .perturb import PerturbConfig, perturb_batch

logger = logging.getLogger(__name__)

MODES = ("vanilla", "at", "mapr", "intrinsic_only", "lip_only")
LAMBDA_GRID = (0.1, 0.25, 0.5, 1.0, 1.5, 2.0)
PROB_FLOOR = 1e-12


class TrainingDivergence(FloatingPointError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class LossConfig:
    lambda_max: float = 1.0
    ramp_epochs: int = 15
    epsilon: float = 1e-6
    at_alpha: float = 0.5

    def __post_init__(self):
        if self.lambda_max < 0 or self.ramp_epochs < 1 or self.epsilon <= 0:
            raise ValueError("invalid LossConfig")
        if not 0.0 <= self.at_alpha <= 1.0:
            raise ValueError("at_alpha must lie in [0, 1]")


@dataclass(frozen=True)
class ATConfig:
    """Inner PGD-l2 attack used by adversarial training."""

    epsilon: float = 0.05
    steps: int = 20
    step_size: float = 0.005


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 12
    lr: float = 0.002
    lr_decay: float = 0.7
    decay_every: int = 20
    seed: int = 0
    mode: str = "mapr"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.decay_every < 1:
            raise ValueError("epochs, batch_size, lr and decay_every must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


def mode_in_channels(mode: str) -> int:
    return AUGMENTED_WIDTH if mode in ("mapr", "intrinsic_only") else 3


def mode_uses_consistency(mode: str) -> bool:
    return mode in ("mapr", "lip_only")


# -- losses --------------------------------------------------------------------

def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise T.ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits, axis=-1)
    return -T.mean(T.pick(logp, labels))


def symmetric_kl(p, q) -> T.Tensor:
    """Row-wise ``0.5 * (KL(p||q) + KL(q||p))`` after flooring at 1e-12.

    Inputs are probability vectors (last axis), as Tensors or arrays.
    """
    p = T._wrap(p)
    q = T._wrap(q)
    if p.shape != q.shape:
        raise T.ShapeError(f"symmetric_kl: shapes {p.shape} and {q.shape} differ")
    lp = T.log(T.clip_min(p, PROB_FLOOR))
    lq = T.log(T.clip_min(q, PROB_FLOOR))
    return 0.5 * T.tsum((p - q) * (lp - lq), axis=-1)


def intrinsic_gap(phi: np.ndarray, phi_prime: np.ndarray) -> np.ndarray:
    """Squared Frobenius distance between intrinsic feature maps, per sample."""
    d = np.asarray(phi) - np.asarray(phi_prime)
    return np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1)


def consistency_loss(p, q, phi, phi_prime, epsilon: float = 1e-6) -> T.Tensor:
    """Batch mean of ``D_SKL(p_i, q_i) / (||phi_i - phi'_i||_F^2 + epsilon)``.

    The denominator is a constant: no gradient flows into the features.
    """
    phi = np.asarray(phi)
    phi_prime = np.asarray(phi_prime)
    if phi.shape != phi_prime.shape:
        raise T.ShapeError(f"feature shapes {phi.shape} and {phi_prime.shape} differ")
    p, q = T._wrap(p), T._wrap(q)
    if p.shape[0] != phi.shape[0]:
        raise T.ShapeError(f"batch of {p.shape[0]} distributions but {phi.shape[0]} feature maps")
    weights = 1.0 / (intrinsic_gap(phi, phi_prime) + epsilon)
    return T.mean(symmetric_kl(p, q) * weights)


def at_loss(clean_logits: T.Tensor, adv_logits: T.Tensor, labels, alpha: float) -> T.Tensor:
    return alpha * cross_entropy(clean_logits, labels) + (1.0 - alpha) * cross_entropy(adv_logits, labels)


def lambda_schedule(epoch: int, cfg: LossConfig) -> float:
    """Linear ramp from 0 reaching ``lambda_max`` at ``ramp_epochs``, then flat."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return cfg.lambda_max * min(epoch / cfg.ramp_epochs, 1.0)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.decay_every)


# -- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, params: list[T.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training loop -------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    shuffle_rng: np.random.Generator
    perturb_rng: np.random.Generator
    attack_rng: np.random.Generator
    epoch: int = 0


def make_state(train_cfg: TrainConfig, num_classes: int, *, k: int = 20,
               point_widths=None, head_widths=None) -> TrainState:
    """Initial parameters and independent RNG streams derived from the seed.

    Shuffling, perturbation and the AT attack each get their own stream, so
    modes that skip a step still see the same batch order.
    """
    ss = np.random.SeedSequence(train_cfg.seed)
    init_ss, shuf_ss, pert_ss, atk_ss = ss.spawn(4)
    kwargs = {}
    if point_widths is not None:
        kwargs["point_widths"] = tuple(point_widths)
    if head_widths is not None:
        kwargs["head_widths"] = tuple(head_widths)
    params = init_params(mode_in_channels(train_cfg.mode), num_classes,
                         seed=int(init_ss.generate_state(1)[0]), k=k, **kwargs)
    return TrainState(
        params=params,
        optimizer=Adam(params.tensors(), lr=train_cfg.lr),
        shuffle_rng=np.random.default_rng(shuf_ss),
        perturb_rng=np.random.default_rng(pert_ss),
        attack_rng=np.random.default_rng(atk_ss),
    )


def _model_input(points: np.ndarray, phi: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.uses_intrinsic:
        return np.concatenate([points, phi], axis=-1)
    return points


def train_epoch(state: TrainState, points: np.ndarray, labels: np.ndarray, train_cfg: TrainConfig,
                loss_cfg: LossConfig, perturb_cfg: PerturbConfig, at_cfg: ATConfig = ATConfig(),
                phi: np.ndarray | None = None) -> dict:
    """Run one epoch in place on ``state`` and return its metrics.

    ``phi`` may hold precomputed intrinsic features of ``points``; they are
    computed here otherwise (only when the mode needs them).
    """
    from .attacks import pgd  # adversarial training only

    if len(points) == 0:
        raise ValueError("empty training set")
    mode = train_cfg.mode
    params = state.params
    if params.in_channels != mode_in_channels(mode):
        raise T.ShapeError(f"mode {mode} needs input width {mode_in_channels(mode)}, model has {params.in_channels}")
    state.epoch += 1
    epoch = state.epoch
    lam = lambda_schedule(epoch, loss_cfg) if mode_uses_consistency(mode) else 0.0
    state.optimizer.lr = learning_rate(epoch, train_cfg)
    needs_phi = params.uses_intrinsic or mode_uses_consistency(mode)
    if needs_phi and phi is None:
        phi = intrinsic_map_batch(points, params.k)

    t0 = time.perf_counter()
    order = state.shuffle_rng.permutation(len(points))
    sum_cls = sum_cons = 0.0
    correct = 0
    for start in range(0, len(order), train_cfg.batch_size):
        idx = order[start:start + train_cfg.batch_size]
        x, y = points[idx], labels[idx]
        fx = phi[idx] if needs_phi else None
        state.optimizer.zero_grad()
        logits = None
        cls_value = cons_value = float("nan")
        try:
            logits = forward(params, _model_input(x, fx, params))
            if mode == "at":
                adv = pgd(params, x, y, norm="l2", epsilon=at_cfg.epsilon, steps=at_cfg.steps,
                          step_size=at_cfg.step_size, rng=state.attack_rng).adv_points
                adv_logits = forward(params, adv)
                cls_value = float(cross_entropy(logits, y).data)
                loss = at_loss(logits, adv_logits, y, loss_cfg.at_alpha)
                cons_value = 0.0
            elif mode_uses_consistency(mode):
                xp = perturb_batch(x, perturb_cfg, state.perturb_rng)
                fxp = intrinsic_map_batch(xp, params.k)
                logits_p = forward(params, _model_input(xp, fxp, params))
                cls = cross_entropy(logits, y)
                cls_value = float(cls.data)
                cons = consistency_loss(T.softmax(logits), T.softmax(logits_p), fx, fxp, loss_cfg.epsilon)
                cons_value = float(cons.data)
                loss = cls + lam * cons
            else:
                loss = cross_entropy(logits, y)
                cls_value, cons_value = float(loss.data), 0.0
            finite = bool(np.isfinite(loss.data))
        except T.NonFiniteError:
            finite = False
        if not finite:
            max_logit = float(np.nanmax(np.abs(logits.data))) if logits is not None and \
                not np.isnan(logits.data).all() else float("nan")
            raise TrainingDivergence(
                f"non-finite loss at epoch {epoch}, batch starting {start}",
                {"epoch": epoch, "batch": idx.tolist(), "loss_cls": cls_value, "loss_cons": cons_value,
                 "max_abs_logit": max_logit},
            )
        loss.backward()
        state.optimizer.step()
        sum_cls += cls_value * len(idx)
        sum_cons += cons_value * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == y))
    n = len(points)
    return {
        "epoch": epoch,
        "loss_cls": sum_cls / n,
        "loss_cons": sum_cons / n,
        "lambda": lam,
        "train_acc": correct / n,
        "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
    }


def train(points: np.ndarray, labels: np.ndarray, num_classes: int, train_cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig(), perturb_cfg: PerturbConfig = PerturbConfig(),
          at_cfg: ATConfig = ATConfig(), *, k: int = 20, metrics_path=None,
          point_widths=None, head_widths=None) -> tuple[ModelParams, list[dict]]:
    """Train a fresh model for ``train_cfg.epochs`` epochs.

    Epoch metrics are appended to ``metrics_path`` as newline-delimited JSON
    when given.
    """
    state = make_state(train_cfg, num_classes, k=k, point_widths=point_widths, head_widths=head_widths)
    phi = None
    if state.params.uses_intrinsic or mode_uses_consistency(train_cfg.mode):
        phi = intrinsic_map_batch(points, k)
    history = []
    for _ in range(train_cfg.epochs):
        metrics = train_epoch(state, points, labels, train_cfg, loss_cfg, perturb_cfg, at_cfg, phi=phi)
        history.append(metrics)
        logger.info("%s epoch %d: cls=%.4f cons=%.4g acc=%.3f", train_cfg.mode, metrics["epoch"],
                    metrics["loss_cls"], metrics["loss_cons"], metrics["train_acc"])
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(metrics) + "\n")
    return state.params, history


def config_snapshot(train_cfg: TrainConfig, loss_cfg: LossConfig, at_cfg: ATConfig,
                    perturb_cfg: PerturbConfig) -> dict:
    return {"train": asdict(train_cfg), "loss": asdict(loss_cfg), "at": asdict(at_cfg),
            "perturb": asdict(perturb_cfg), "lambda_grid": list(LAMBDA_GRID)}
