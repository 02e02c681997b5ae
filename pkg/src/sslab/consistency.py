"""Semi-supervised objective: cross entropy, masked KL, consistency wirings and their gradients.

Dense inputs are (N, H, W, 3) images perturbed by ``T = T_geometric o T_photometric``;
point inputs are (N, D) arrays perturbed by additive jitter.  In every wiring
the divergence is ``KL(target || trainable)`` averaged over valid pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .models import Mode, Params, as_leaves
from .photometric import PhotometricParams, apply_photometric, sample_photometric
from .tps import (
    BilinearTaps,
    GeometricParams,
    apply_taps,
    backward_taps,
    backward_warp_tensor,
    SPLAT_MIN_WEIGHT,
    forward_splat,
    sample_geometric,
)

FLOOR = ad.PROB_FLOOR


class Variant(str, Enum):
    CLEAN_TEACHER = "1w-ct"
    CLEAN_STUDENT = "1w-cs"
    TWO_WAY = "2w-c1"
    BOTH_PERTURBED = "1w-p2"


class ConfigError(ValueError):
    """Inconsistent experiment or loss configuration."""


@dataclass(frozen=True)
class TeacherMode:
    kind: str = "simple"  # "simple" or "mean-teacher"
    ema: float = 0.99

    def __post_init__(self):
        if self.kind not in ("simple", "mean-teacher"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")
        if self.kind == "mean-teacher" and not 0.0 < self.ema < 1.0:
            raise ConfigError(f"EMA momentum must lie in (0, 1), got {self.ema}")

    @property
    def is_mean_teacher(self) -> bool:
        return self.kind == "mean-teacher"


def check_compatible(variant: Variant, teacher: TeacherMode) -> None:
    if Variant(variant) == Variant.TWO_WAY and teacher.is_mean_teacher:
        raise ConfigError("two-way consistency is not possible with Mean Teacher")


@dataclass(frozen=True)
class PerturbationParams:
    geometric: GeometricParams
    photometric: PhotometricParams = field(default_factory=PhotometricParams)

    def to_dict(self) -> dict:
        return {"geometric": self.geometric.to_dict(), "photometric": self.photometric.to_dict()}


def sample_perturbation(
    rng: np.random.Generator,
    height: int,
    width: int,
    r: float | None = None,
    photometric: bool = True,
    geometric: bool = True,
) -> PerturbationParams:
    gamma = sample_geometric(rng, height, width, r) if geometric else GeometricParams.identity(height, width)
    phi = sample_photometric(rng) if photometric else PhotometricParams()
    return PerturbationParams(gamma, phi)


@dataclass
class PerturbedBatch:
    images: np.ndarray  # (N, H, W, 3)
    taps: list[BilinearTaps]
    masks: np.ndarray  # (N, H, W)


def perturb_images(x: np.ndarray, taus: Sequence[PerturbationParams]) -> PerturbedBatch:
    """Apply ``T_tau`` to each image and collect warp taps and validity masks."""
    if len(taus) != x.shape[0]:
        raise ValueError(f"{len(taus)} perturbations for a batch of {x.shape[0]}")
    h, w = x.shape[1:3]
    out, taps, masks = [], [], []
    for img, tau in zip(x, taus):
        t = backward_taps(tau.geometric.warp(), h, w)
        out.append(apply_taps(apply_photometric(img, tau.photometric), t))
        taps.append(t)
        masks.append(t.valid.reshape(h, w))
    return PerturbedBatch(np.stack(out), taps, np.stack(masks).astype(np.float64))


# ---------------------------------------------------------------------------
# losses


def kl_divergence(p_t, p_s, include_entropy: bool = True) -> ad.Tensor:
    """Per-pixel ``sum_c p_t ln(p_t / p_s)``; zero-probability targets contribute 0."""
    p_t, p_s = ad.tensor(p_t), ad.tensor(p_s)
    if p_t.shape != p_s.shape:
        raise ad.ShapeError("kl_divergence", p_t.shape, p_s.shape)
    cross = p_t * ad.log(ad.maximum(p_s, FLOOR))
    if include_entropy:
        terms = p_t * ad.log(ad.maximum(p_t, FLOOR)) - cross
    else:
        terms = -cross
    return ad.sum(terms, axis=-1)


class EmptyMaskWarning(UserWarning):
    pass


def masked_kl(p_t, p_s, mask, include_entropy: bool = True) -> ad.Tensor:
    """Mean KL over pixels where ``mask`` is 1.

    An all-zero mask yields 0 and an :class:`EmptyMaskWarning`.
    """
    v = np.asarray(mask, dtype=np.float64)
    per_pixel = kl_divergence(p_t, p_s, include_entropy)
    if per_pixel.shape != v.shape:
        raise ad.ShapeError("masked_kl", per_pixel.shape, v.shape)
    total = float(v.sum())
    if total == 0:
        warnings.warn("validity mask is empty; consistency loss set to 0", EmptyMaskWarning, stacklevel=2)
        return ad.sum(per_pixel * 0.0)
    return ad.sum(per_pixel * v) / total


def cross_entropy(labels, probs, ignore_mask=None) -> ad.Tensor:
    """Mean ``-ln p[y]`` over non-ignored pixels; labels are 1..C with 0 meaning ignore."""
    p = ad.tensor(probs)
    y = np.asarray(labels)
    num_classes = p.shape[-1]
    if y.shape != p.shape[:-1]:
        raise ad.ShapeError("cross_entropy", y.shape, p.shape)
    if np.any((y < 0) | (y > num_classes)):
        raise ValueError(f"labels must lie in 1..{num_classes} (0 = ignore)")
    valid = y > 0
    if ignore_mask is not None:
        valid &= ~np.asarray(ignore_mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return ad.sum(ad.sum(p, axis=-1) * 0.0)
    onehot = np.zeros(p.shape)
    idx = np.nonzero(valid)
    onehot[idx + (y[idx] - 1,)] = 1.0
    picked = ad.sum(p * onehot, axis=-1)
    nll = ad.log(ad.maximum(picked, FLOOR)) * valid.astype(np.float64)
    return -ad.sum(nll) / count


# ---------------------------------------------------------------------------
# consistency wirings


@dataclass
class ConsistencyTerms:
    loss: ad.Tensor
    target: ad.Tensor
    trainable: ad.Tensor
    mask: np.ndarray
    perturbed_prediction: np.ndarray  # prediction on the perturbed input, for collapse checks


def _check_params(params: Mapping) -> dict[str, ad.Tensor]:
    if params and not isinstance(next(iter(params.values())), ad.Tensor):
        return as_leaves(params, requires_grad=False)
    return dict(params)


def consistency_loss(
    variant: Variant,
    teacher_params,
    student_params,
    model,
    x,
    tau,
    teacher_buffers: Params | None = None,
    student_buffers: Params | None = None,
) -> ConsistencyTerms:
    """Consistency term with the gradient routing of ``variant``.

    ``teacher_params`` feeds the target branch.  For ``2w-c1`` it must hold
    gradient-tracking leaves of the same values as ``student_params``; for
    the one-way variants it is evaluated without recording.

    For dense inputs ``tau`` is a list of :class:`PerturbationParams` (pairs
    of them for ``1w-p2``); for point inputs it is an (N, D) jitter array
    (a pair of arrays for ``1w-p2``).
    """
    variant = Variant(variant)
    tp, sp = _check_params(teacher_params), _check_params(student_params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return _dense(variant, tp, sp, model, x, tau, teacher_buffers, student_buffers)
    if x.ndim == 2:
        return _points(variant, tp, sp, model, x, tau, teacher_buffers, student_buffers)
    raise ad.ShapeError("consistency_loss", x.shape, detail="expected (N, D) points or (N, H, W, C) images")


def _points(variant, tp, sp, model, x, tau, tbuf, sbuf) -> ConsistencyTerms:
    frozen = Mode.TRAIN_FROZEN
    if variant == Variant.BOTH_PERTURBED:
        eps1, eps2 = (np.asarray(e, dtype=np.float64) for e in tau)
        with ad.no_grad():
            target = model.forward(tp, x + eps1, Mode.EVAL, tbuf)
        trainable = model.forward(sp, x + eps2, frozen, sbuf)
        perturbed = trainable.data
    else:
        eps = np.asarray(tau, dtype=np.float64)
        if eps.shape != x.shape:
            raise ad.ShapeError("consistency_loss", x.shape, eps.shape)
        xp = x + eps
        if variant == Variant.CLEAN_TEACHER:
            with ad.no_grad():
                target = model.forward(tp, x, Mode.EVAL, tbuf)
            trainable = model.forward(sp, xp, frozen, sbuf)
            perturbed = trainable.data
        elif variant == Variant.CLEAN_STUDENT:
            with ad.no_grad():
                target = model.forward(tp, xp, Mode.EVAL, tbuf)
            trainable = model.forward(sp, x, frozen, sbuf)
            perturbed = target.data
        else:
            target = model.forward(tp, x, frozen, sbuf)
            trainable = model.forward(sp, xp, frozen, sbuf)
            perturbed = trainable.data
    if variant != Variant.TWO_WAY:
        target = ad.stop_gradient(target)
    mask = np.ones(x.shape[0])
    return ConsistencyTerms(masked_kl(target, trainable, mask), target, trainable, mask, perturbed)


def _dense(variant, tp, sp, model, x, tau, tbuf, sbuf) -> ConsistencyTerms:
    frozen = Mode.TRAIN_FROZEN
    if variant == Variant.BOTH_PERTURBED:
        return _dense_both_perturbed(tp, sp, model, x, tau, tbuf, sbuf)
    pb = perturb_images(x, tau)
    if variant == Variant.CLEAN_TEACHER:
        with ad.no_grad():
            target = backward_warp_tensor(model.forward(tp, x, Mode.EVAL, tbuf), pb.taps)
        trainable = model.forward(sp, pb.images, frozen, sbuf)
        perturbed = trainable.data
    elif variant == Variant.CLEAN_STUDENT:
        with ad.no_grad():
            target = model.forward(tp, pb.images, Mode.EVAL, tbuf)
        trainable = backward_warp_tensor(model.forward(sp, x, frozen, sbuf), pb.taps)
        perturbed = target.data
    else:
        target = backward_warp_tensor(model.forward(tp, x, frozen, sbuf), pb.taps)
        trainable = model.forward(sp, pb.images, frozen, sbuf)
        perturbed = trainable.data
    if variant != Variant.TWO_WAY:
        target = ad.stop_gradient(target)
    return ConsistencyTerms(masked_kl(target, trainable, pb.masks), target, trainable, pb.masks, perturbed)


def _dense_both_perturbed(tp, sp, model, x, tau, tbuf, sbuf) -> ConsistencyTerms:
    taus1, taus2 = zip(*tau)
    pb1 = perturb_images(x, taus1)
    pb2 = perturb_images(x, taus2)
    h, w = x.shape[1:3]
    with ad.no_grad():
        pred1 = model.forward(tp, pb1.images, Mode.EVAL, tbuf).data
    aligned, masks = [], []
    for p1, tau1, taps2, m1, m2 in zip(pred1, taus1, pb2.taps, pb1.masks, pb2.masks):
        # undo warp 1 by splatting with its own reverse map, then apply warp 2
        warp1 = tau1.geometric.warp()
        clean, weight = forward_splat(p1, warp1)
        valid_share, _ = forward_splat(m1, warp1)
        ok = (weight > SPLAT_MIN_WEIGHT) & (valid_share >= 1.0 - 1e-9)
        clean = np.where(ok[..., None], clean, 0.0)
        aligned.append(apply_taps(clean, taps2))
        covered = np.floor(apply_taps(ok.astype(np.float64), taps2) + 1e-9)
        masks.append(m2 * (covered >= 1))
    target = ad.Tensor(np.stack(aligned))
    mask = np.stack(masks).astype(np.float64)
    trainable = model.forward(sp, pb2.images, Mode.TRAIN_FROZEN, sbuf)
    return ConsistencyTerms(masked_kl(target, trainable, mask), target, trainable, mask, trainable.data)


# ---------------------------------------------------------------------------
# gradient of the full objective


@dataclass
class StepResult:
    grads: Params
    supervised_loss: float
    consistency_loss: float
    student_grad_nonzero: bool = False
    teacher_grad_nonzero: bool = False
    perturbed_prediction: np.ndarray | None = None


def _any_nonzero(grads: Mapping[int, np.ndarray], leaves: Mapping[str, ad.Tensor]) -> bool:
    return any(np.any(grads.get(t.node_id, 0.0) != 0) for t in leaves.values())


def semisup_loss_gradient(
    model,
    params: Params,
    x_l,
    y_l,
    x_u,
    tau,
    alpha: float,
    variant: Variant = Variant.CLEAN_TEACHER,
    teacher_params: Params | None = None,
    buffers: Params | None = None,
    teacher_buffers: Params | None = None,
) -> StepResult:
    """Gradient of ``CE(y_l, h(x_l)) + alpha * L_c(x_u, tau)`` with respect to ``params``.

    The supervised gradient is taken first and its tape dropped; the teacher
    branch of a one-way consistency is then evaluated without recording.
    ``teacher_params`` defaults to a frozen copy of ``params``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    x_l = np.asarray(x_l, dtype=np.float64)
    y_l = np.asarray(y_l)
    if x_l.shape[0] != y_l.shape[0] or x_l.shape[0] < 1:
        raise ad.ShapeError("semisup_loss_gradient", x_l.shape, y_l.shape, detail="labeled batch mismatch")
    buffers = {} if buffers is None else buffers

    with ad.Tape() as tape:
        leaves = as_leaves(params)
        sup = cross_entropy(y_l, model.forward(leaves, x_l, Mode.TRAIN_CLEAN, buffers))
        g = tape.backward(sup)
    grads = {k: g[t.node_id] for k, t in leaves.items()}
    del tape, g
    result = StepResult(grads, float(sup.data), 0.0)
    if alpha == 0:
        return result

    variant = Variant(variant)
    x_u = np.asarray(x_u, dtype=np.float64)
    if x_u.shape[0] < 1:
        raise ad.ShapeError("semisup_loss_gradient", x_u.shape, detail="empty unlabeled batch")
    if variant == Variant.TWO_WAY and teacher_params is not None and teacher_params is not params:
        raise ConfigError("two-way consistency uses a single parameter set")
    with ad.Tape() as tape:
        student = as_leaves(params)
        teacher = as_leaves(params if teacher_params is None else teacher_params)
        tbuf = buffers if teacher_buffers is None else teacher_buffers
        terms = consistency_loss(variant, teacher, student, model, x_u, tau, tbuf, buffers)
        lc = terms.loss * alpha
        g = tape.backward(lc)
    for k in grads:
        grads[k] = grads[k] + g.get(student[k].node_id, 0.0)
        if variant == Variant.TWO_WAY:
            grads[k] = grads[k] + g.get(teacher[k].node_id, 0.0)
    result.consistency_loss = float(terms.loss.data)
    result.student_grad_nonzero = _any_nonzero(g, student)
    result.teacher_grad_nonzero = _any_nonzero(g, teacher)
    result.perturbed_prediction = terms.perturbed_prediction
    return result


def ema_update(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray], beta: float) -> Params:
    """``teacher <- beta * teacher + (1 - beta) * student``, elementwise."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if np.shape(t) != np.shape(s):
            raise ad.ShapeError("ema_update", np.shape(t), np.shape(s), detail=k)
        out[k] = beta * t + (1 - beta) * s
    return out


def collapse_fraction(pred: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Share of (valid) pixels whose argmax equals the most frequent argmax class."""
    labels = np.argmax(pred, axis=-1)
    if mask is not None:
        labels = labels[np.asarray(mask) > 0]
    labels = labels.ravel()
    if labels.size == 0:
        return 0.0
    return float(np.bincount(labels).max() / labels.size)
