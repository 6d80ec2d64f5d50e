"""End-to-end training: backbone -> unrolled evolution -> loss -> full backward -> Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import backprop_evolution
from .evolution import ParameterMaps, evolve
from .fields import EvolutionConfig, check_mask, signed_distance_from_mask
from .losses import total_loss
from .metrics import aggregate, evaluate_masks, write_metrics_csv
from .predictor import Architecture, PredictorParams, init_params, predictor_backward, predictor_forward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    alpha0: float = 1e-3
    epochs: int = 200
    batch_size: int = 2
    seed: int = 0
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    scale: int = 4
    const_lambda: bool = False
    batch_norm: bool = True
    flip: bool = True
    eval_every: int = 1
    patience: int | None = None
    adjoint_clip: float | None = 10.0

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adjoint_clip is not None and not self.adjoint_clip > 0:
            raise ValueError("adjoint_clip must be > 0 or None")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def arch(self):
        return Architecture(scale=self.scale, batch_norm=self.batch_norm, const_lambda=self.const_lambda)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    mask: np.ndarray  # H x W in {0, 1}
    sample_id: str = ""


class TrainingError(RuntimeError):
    pass


def lr_schedule(alpha0, e, n_epochs):
    """Polynomial decay ``alpha0 * (1 - e/N)^0.9``."""
    if not 0 <= e <= n_epochs:
        raise ValueError(f"epoch {e} outside [0, {n_epochs}]")
    return alpha0 * (1.0 - e / n_epochs) ** 0.9


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, tensors):
        return cls({k: np.zeros_like(v) for k, v in tensors.items()}, {k: np.zeros_like(v) for k, v in tensors.items()})


def adam_update(params: PredictorParams, grads, state: OptimizerState, lr):
    """Bias-corrected Adam step, applied in place; returns ``(params, state)``.

    Raises
    ------
    TrainingError
        If any gradient is non-finite; no parameter is modified in that case.
    """
    for name, g in grads.items():
        if name not in params.tensors or g.shape != params.tensors[name].shape:
            raise TrainingError(f"gradient {name!r} does not match any parameter")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def clip_adjoints(bundle, upstream, factor):
    """Bound each evolution adjoint entry by ``factor * max|upstream|``.

    A handful of pixels where ``phi`` is nearly flat can amplify the
    upstream gradient by orders of magnitude over the unrolled steps; a
    single such spike inflates Adam's second moments and stalls training.
    """
    t = factor * float(np.abs(upstream).max())
    return type(bundle)(*(np.clip(a, -t, t) for a in (bundle.d_lambda1, bundle.d_lambda2, bundle.d_phi0)))


def sample_gradients(out, cache, images, masks, evo_cfg: EvolutionConfig, adjoint_clip=None):
    """Loss and parameter gradients for one batch (mean over samples)."""
    b = len(masks)
    d_l1 = np.zeros_like(out.phi0)
    d_l2 = np.zeros_like(out.phi0)
    d_phi = np.zeros_like(out.phi0)
    d_p = np.zeros_like(out.phi0)
    lam1, lam2 = out.lambda1, out.lambda2
    losses = []
    for i in range(b):
        maps = ParameterMaps(lam1[i], lam2[i])
        trace = evolve(out.phi0[i], images[i], maps, evo_cfg)
        loss, g_phiL, g_p = total_loss(trace.phi_final, out.P[i], masks[i], evo_cfg.epsilon)
        bundle = backprop_evolution(trace, g_phiL)
        if adjoint_clip is not None:
            bundle = clip_adjoints(bundle, g_phiL, adjoint_clip)
        d_l1[i] = bundle.d_lambda1 / b
        d_l2[i] = bundle.d_lambda2 / b
        d_phi[i] = bundle.d_phi0 / b
        d_p[i] = g_p / b
        losses.append(loss)
    grads = predictor_backward(cache, d_l1, d_l2, d_phi, d_p)
    return float(np.mean(losses)), grads


def _flip(rng, image, mask):
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def train(samples, cfg: TrainConfig, val_samples=None, params=None):
    """Train the backbone end to end.

    Returns
    -------
    params : PredictorParams
    history : list of dict
        One row per epoch: ``epoch, lr, train_loss, val_miou, val_boundf``
        (validation columns are NaN on epochs without evaluation).
    """
    samples = list(samples)
    if not samples:
        raise TrainingError("training set is empty")
    for s in samples:
        h, w = s.mask.shape
        if h % 8 or w % 8:
            raise TrainingError(f"sample {s.sample_id!r}: size {h}x{w} not divisible by 8")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(cfg.arch, seed=cfg.seed)
    state = OptimizerState.zeros_like(params.tensors)
    history = []
    best, since_best = -math.inf, 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.alpha0, epoch, cfg.epochs)
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            imgs, masks = [], []
            for i in idx:
                img, m = samples[i].image, samples[i].mask
                if cfg.flip:
                    img, m = _flip(rng, img, m)
                imgs.append(img)
                masks.append(m.astype(np.float64))
            images = np.stack(imgs)
            out, cache = predictor_forward(images, params, mode="train")
            try:
                loss, grads = sample_gradients(out, cache, images, masks, cfg.evolution, cfg.adjoint_clip)
            except Exception as exc:
                ids = [samples[i].sample_id for i in idx]
                raise TrainingError(f"epoch {epoch}, samples {ids}: {exc}") from exc
            adam_update(params, grads, state, lr)
            losses.append(loss)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_miou": math.nan, "val_boundf": math.nan}
        last = epoch == cfg.epochs - 1
        if val_samples and ((epoch + 1) % cfg.eval_every == 0 or last):
            agg, _ = evaluate(val_samples, params, cfg.evolution)
            row["val_miou"], row["val_boundf"] = agg.miou, agg.boundf
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_miou %.4f", epoch, lr, row["train_loss"], row["val_miou"])
        if cfg.patience is not None and not math.isnan(row["val_miou"]):
            if row["val_miou"] > best:
                best, since_best = row["val_miou"], 0
            else:
                since_best += cfg.eval_every
                if since_best >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    return params, history


def predict(image, params: PredictorParams):
    """Eval-mode backbone outputs for one image: ``(phi0, lambda1, lambda2, P)``."""
    out, _ = predictor_forward(image, params, mode="eval")
    return out.phi0[0], out.lambda1[0], out.lambda2[0], out.P[0]


def segment(image, params, evo_cfg: EvolutionConfig, predict_fn=None):
    """Predict the initial level set and parameter maps, evolve, and threshold ``phi_L > 0``.

    ``predict_fn(image) -> (phi0, lambda1, lambda2)`` replaces the backbone when given.
    Returns ``(mask, trace)``.
    """
    if predict_fn is None:
        phi0, l1, l2, _ = predict(image, params)
    else:
        phi0, l1, l2 = predict_fn(image)
    trace = evolve(phi0, image, ParameterMaps(l1, l2), evo_cfg, keep_cache=False)
    return (trace.phi_final > 0).astype(np.uint8), trace


def evaluate(samples, params, evo_cfg: EvolutionConfig, predict_fn=None):
    """Per-image metrics of thresholded final level sets and their mean.

    Returns ``(aggregate_report, per_image_reports)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation set is empty")
    reports = []
    for s in samples:
        mask, _ = segment(s.image, params, evo_cfg, predict_fn)
        reports.append(evaluate_masks(mask, check_mask(s.mask)))
    return aggregate(reports), reports


def oracle_predictor(samples, lam=0.05):
    """Stub backbone returning the ground-truth signed distance and small constant maps."""
    lookup = {id(s.image): s.mask for s in samples}

    def fn(image):
        mask = lookup[id(image)]
        return signed_distance_from_mask(mask), np.full(mask.shape, lam), np.full(mask.shape, lam)

    return fn


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_miou", "val_boundf"])
        for row in history:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]),
                        repr(row["val_miou"]), repr(row["val_boundf"])])


def write_evaluation_csv(path, samples, reports):
    write_metrics_csv(path, [s.sample_id for s in samples], reports)

