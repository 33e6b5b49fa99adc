"""Per-keyframe registration of event images against rendered log-intensity
differences, and the keyframe loop that chains results into a trajectory.

A keyframe is processed in two stages.  The coarse stage runs over the image
pyramid from coarsest to finest, comparing absolute values (polarity-free)
and updating the pose only.  The fine stage runs at full resolution on signed
images and updates pose and velocity together.  Both use first-order steps
with per-block learning rates, step rejection with halving, and a loss-slope
stopping rule.
"""

from dataclasses import dataclass, field, replace
import logging

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .events import EventCursor, next_keyframe
from .jacobians import camera_derivatives, full_gradient
from .motion import (MotionState, PoseIncrement, apply_increment, extended_factors,
                     predict_next)
from .rasterizer import backward, render
from .trajectory import Trajectory

log = logging.getLogger(__name__)

DEGENERATE_LOSS = 2.0


@dataclass(frozen=True)
class TrackerConfig:
    pyramid_levels: int = 3
    blur_sigma: float = 1.5          # pixels at every pyramid level
    mask_dilation: int = 4           # pixels, full resolution
    mask_threshold: float = 1.0      # event counts
    lr_translation: float = 2e-3     # m per iteration
    lr_rotation: float = 1e-3        # rad per iteration
    lr_velocity: float = 1e-3        # boundary displacement (m) per iteration
    lr_angular: float = 5e-4         # boundary rotation (rad) per iteration
    lr_growth: float = 1.0
    beta1: float = 0.9               # first-moment decay
    beta2: float = 0.999             # second-moment decay
    reject_tolerance: float = 0.0
    max_iters: int = 40              # fine stage total
    coarse_max_iters: int = None     # per pyramid level; defaults to max_iters
    slope_window: int = 5
    slope_epsilon: float = 1e-4      # fraction of the stage's initial loss per iteration
    coarse: bool = True
    fine: bool = True
    optimize_velocity: bool = True

    def __post_init__(self):
        if not 1 <= self.pyramid_levels <= 5:
            raise ValueError("pyramid_levels must be in 1..5")
        for name in ("blur_sigma", "lr_translation", "lr_rotation", "lr_velocity",
                     "lr_angular", "slope_epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.coarse_max_iters is not None and self.coarse_max_iters < 1:
            raise ValueError("coarse_max_iters must be positive")
        if self.max_iters < 1 or self.slope_window < 1:
            raise ValueError("max_iters and slope_window must be positive")
        if self.mask_dilation < 0:
            raise ValueError("mask_dilation must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must be in [0, 1)")


@dataclass(frozen=True)
class IntensityChangeImage:
    values: np.ndarray
    tau: float
    delta_tau: float
    kind: str  # "event" or "rendered"


# -- image operations -----------------------------------------------------------

def gaussian_blur(image, sigma):
    """Zero-padded Gaussian blur; self-adjoint, so it also maps gradients back."""
    if sigma <= 0:
        return np.array(image, dtype=np.float64)
    return gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="constant",
                           truncate=4.0)


def average_pool(image, factor):
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape
    h2, w2 = h // factor, w // factor
    img = np.asarray(image, dtype=np.float64)[:h2 * factor, :w2 * factor]
    return img.reshape(h2, factor, w2, factor).mean(axis=(1, 3))


def max_pool(mask, factor):
    if factor == 1:
        return np.asarray(mask, dtype=bool)
    h, w = mask.shape
    h2, w2 = h // factor, w // factor
    m = np.asarray(mask, dtype=bool)[:h2 * factor, :w2 * factor]
    return m.reshape(h2, factor, w2, factor).any(axis=(1, 3))


def preprocess(image, level, cfg):
    """Blur with ``blur_sigma * 2**level`` px, then average-pool by ``2**level``."""
    if level >= cfg.pyramid_levels:
        raise ValueError(f"level {level} outside a {cfg.pyramid_levels}-level pyramid")
    s = 2 ** level
    return average_pool(gaussian_blur(image, cfg.blur_sigma * s), s)


def event_mask(delta_Ie, cfg):
    """Pixels with enough events, dilated by a square of half-width ``mask_dilation``."""
    seed = np.abs(np.asarray(delta_Ie)) >= cfg.mask_threshold
    if cfg.mask_dilation == 0 or not seed.any():
        return seed
    size = 2 * cfg.mask_dilation + 1
    return binary_dilation(seed, structure=np.ones((size, size), dtype=bool))


def normalized_loss(delta_Ir, delta_Ie, mask=None):
    """Squared difference of the two images after scaling each to unit norm.

    Returns ``(loss, dL/d delta_Ir)``; outside the mask the gradient is zero.
    When either masked norm vanishes the loss is 2 with zero gradient.
    """
    r = np.asarray(delta_Ir, dtype=np.float64)
    e = np.asarray(delta_Ie, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {e.shape}")
    if mask is None:
        mask = np.ones(r.shape, dtype=bool)
    elif mask.shape != r.shape:
        raise ValueError(f"mask shape {mask.shape} differs from image shape {r.shape}")
    rm = np.where(mask, r, 0.0)
    em = np.where(mask, e, 0.0)
    nr = np.sqrt(np.sum(rm * rm))
    ne = np.sqrt(np.sum(em * em))
    grad = np.zeros_like(r)
    if nr < 1e-12 or ne < 1e-12:
        return DEGENERATE_LOSS, grad
    ru = rm / nr
    eu = em / ne
    diff = ru - eu
    loss = float(np.sum(diff * diff))
    # d/dr of |r/|r| - e_hat|^2 = 2/|r| (diff - (ru . diff) ru)
    grad = 2.0 / nr * (diff - np.sum(ru * diff) * ru)
    return loss, np.where(mask, grad, 0.0)


# -- rendering the intensity change ------------------------------------------------

@dataclass
class DeltaRender:
    image: IntensityChangeImage
    first: object
    last: object
    factors: tuple  # ((T1, T2, T3) first, (T1, T2, T3) last)


def render_delta_Ir(gmap, state, inc, delta_tau, intr, tau=0.0):
    """Log-intensity difference between the last and first boundary renders."""
    f_first = extended_factors(state, inc, delta_tau, -1)
    f_last = extended_factors(state, inc, delta_tau, +1)
    first = render(gmap, f_first[0] @ f_first[1] @ f_first[2], intr)
    last = render(gmap, f_last[0] @ f_last[1] @ f_last[2], intr)
    img = IntensityChangeImage(last.log_intensity - first.log_intensity, tau, delta_tau,
                               "rendered")
    return DeltaRender(img, first, last, (f_first, f_last))


# -- optimization ---------------------------------------------------------------------

@dataclass
class KeyframeTarget:
    """Event-side images prepared once per keyframe for every pyramid level."""

    signed: list
    absolute: list
    masks: list
    tau: float
    delta_tau: float

    @property
    def empty(self):
        return not self.masks[0].any()


def prepare_target(kf, cfg):
    mask = event_mask(kf.delta_Ie, cfg)
    signed, absolute, masks = [], [], []
    for level in range(cfg.pyramid_levels):
        signed.append(preprocess(kf.delta_Ie, level, cfg))
        absolute.append(preprocess(np.abs(kf.delta_Ie), level, cfg))
        masks.append(max_pool(mask, 2 ** level))
    return KeyframeTarget(signed, absolute, masks, kf.tau, kf.delta_tau)


class Objective:
    """Loss and 12-dim gradient of one keyframe at one pyramid level."""

    def __init__(self, gmap, intr, target, level, polarity_free, cfg):
        self.gmap = gmap
        self.intr = intr.downscaled(level)
        self.target = (target.absolute if polarity_free else target.signed)[level]
        self.mask = target.masks[level]
        self.delta_tau = target.delta_tau
        self.polarity_free = polarity_free
        self.cfg = cfg
        h, w = self.target.shape
        if (self.intr.height, self.intr.width) != (h, w):
            raise ValueError("pyramid level size mismatch between render and event image")

    def evaluate(self, state, with_grad=True):
        dr = render_delta_Ir(self.gmap, state, None, self.delta_tau, self.intr)
        raw = dr.image.values
        # same order as the event side: |.| before the blur
        r = gaussian_blur(np.abs(raw) if self.polarity_free else raw, self.cfg.blur_sigma)
        loss, g = normalized_loss(r, self.target, self.mask)
        if not with_grad:
            return loss, None
        g = gaussian_blur(g, self.cfg.blur_sigma)
        if self.polarity_free:
            g = g * np.sign(raw)
        grads, derivs = [], []
        for sign, rend, (T1, T2, T3) in ((-1, dr.first, dr.factors[0]),
                                         (+1, dr.last, dr.factors[1])):
            grads.append(backward(rend, sign * g))
            derivs.append(camera_derivatives(T1, T2, T3, self.gmap.means, self.delta_tau, sign))
        return loss, full_gradient(grads, derivs)


class _Moments:
    """Running first and second gradient moments with bias correction."""

    def __init__(self, cfg):
        self.b1, self.b2 = cfg.beta1, cfg.beta2
        self.m = np.zeros(12)
        self.v = np.zeros(12)
        self.k = 0

    def direction(self, grad):
        k = self.k + 1
        m = self.b1 * self.m + (1 - self.b1) * grad
        v = self.b2 * self.v + (1 - self.b2) * grad * grad
        d = (m / (1 - self.b1 ** k)) / (np.sqrt(v / (1 - self.b2 ** k)) + 1e-12)
        return d, (m, v, k)

    def commit(self, pending):
        self.m, self.v, self.k = pending

    def reset(self):
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.k = 0


def _step(state, direction, scale, cfg, delta_tau, with_velocity):
    lr = np.concatenate([np.full(3, cfg.lr_translation), np.full(3, cfg.lr_rotation)])
    delta = -scale * lr * direction[:6]
    rot = np.linalg.norm(delta[3:])
    if rot >= 0.5:
        delta *= 0.5 / rot
    new = apply_increment(state, PoseIncrement.from_vector(delta))
    if with_velocity and delta_tau > 0:
        half = 0.5 * delta_tau
        # velocity rates act on the boundary displacement v * delta_tau / 2
        dv = -scale * cfg.lr_velocity * direction[6:9] / half
        dw = -scale * cfg.lr_angular * direction[9:12] / half
        new = new.with_velocity(state.v + dv, state.omega + dw)
    return new


@dataclass
class StageResult:
    state: MotionState
    losses: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    skipped: bool = False


def _slope_converged(history, cfg, reference):
    w = cfg.slope_window
    if len(history) <= w:
        return False
    slope = (history[-w - 1] - history[-1]) / w
    return slope < cfg.slope_epsilon * max(reference, 1e-12)


def _optimize(objective, state, cfg, max_iters, with_velocity, result):
    loss, grad = objective.evaluate(state)
    history = [loss]
    reference = loss
    scale = 1.0
    moments = _Moments(cfg)
    if not with_velocity:
        grad = np.concatenate([grad[:6], np.zeros(6)])
    for _ in range(max_iters):
        result.iterations += 1
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            break
        direction, pending = moments.direction(grad)
        candidate = _step(state, direction, scale, cfg, objective.delta_tau, with_velocity)
        new_loss, new_grad = objective.evaluate(candidate)
        if new_loss > loss + cfg.reject_tolerance:
            # momentum may point uphill; restart from the plain gradient sign
            scale *= 0.5
            moments.reset()
        else:
            moments.commit(pending)
            state, loss, grad = candidate, new_loss, new_grad
            if not with_velocity:
                grad = np.concatenate([grad[:6], np.zeros(6)])
            scale *= cfg.lr_growth
        history.append(loss)
        if _slope_converged(history, cfg, reference):
            result.converged = True
            break
    result.losses.extend(history)
    return state


def coarse_stage(gmap, state, kf, intr, cfg, target=None):
    """Polarity-free, pose-only optimization from the coarsest pyramid level."""
    target = target if target is not None else prepare_target(kf, cfg)
    result = StageResult(state)
    if target.empty:
        result.skipped = True
        return result
    for level in reversed(range(cfg.pyramid_levels)):
        obj = Objective(gmap, intr, target, level, True, cfg)
        limit = cfg.coarse_max_iters if cfg.coarse_max_iters is not None else cfg.max_iters
        state = _optimize(obj, state, cfg, limit, False, result)
    result.state = state
    return result


def fine_stage(gmap, state, kf, intr, cfg, target=None):
    """Signed comparison at full resolution, optimizing pose and velocity."""
    target = target if target is not None else prepare_target(kf, cfg)
    result = StageResult(state)
    if target.empty:
        result.skipped = True
        return result
    obj = Objective(gmap, intr, target, 0, False, cfg)
    result.state = _optimize(obj, state, cfg, cfg.max_iters, cfg.optimize_velocity, result)
    return result


# -- sequence loop --------------------------------------------------------------------------

@dataclass
class KeyframeRecord:
    index: int
    tau: float
    delta_tau: float
    initial_loss: float
    coarse_iterations: int
    coarse_final_loss: float
    fine_iterations: int
    final_loss: float
    skipped: bool
    divergent: bool
    coarse_losses: list = field(default_factory=list)
    fine_losses: list = field(default_factory=list)

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class TrackResult:
    trajectory: Trajectory
    states: list
    diagnostics: list

    @property
    def divergent(self):
        return any(d.divergent for d in self.diagnostics)


def track_keyframe(gmap, predicted, kf, intr, cfg, index=0):
    target = prepare_target(kf, cfg)
    if target.empty:
        return predicted, KeyframeRecord(index, kf.tau, kf.delta_tau, float("nan"), 0,
                                         float("nan"), 0, float("nan"), True, False)
    fine_obj = Objective(gmap, intr, target, 0, False, cfg)
    initial_loss, _ = fine_obj.evaluate(predicted, with_grad=False)
    state = predicted
    coarse_iters, coarse_loss, coarse_curve, fine_curve = 0, float("nan"), [], []
    if cfg.coarse:
        c = coarse_stage(gmap, state, kf, intr, cfg, target)
        state, coarse_iters, coarse_curve = c.state, c.iterations, c.losses
        coarse_loss = c.losses[-1] if c.losses else float("nan")
    fine_iters = 0
    if cfg.fine:
        f = fine_stage(gmap, state, kf, intr, cfg, target)
        state, fine_iters, fine_curve = f.state, f.iterations, f.losses
    final_loss, _ = fine_obj.evaluate(state, with_grad=False)
    divergent = final_loss > initial_loss
    if divergent:
        log.warning("keyframe %d diverged (loss %.4f > %.4f); keeping prediction",
                    index, final_loss, initial_loss)
        state = predicted
    return state, KeyframeRecord(index, kf.tau, kf.delta_tau, initial_loss, coarse_iters,
                                 coarse_loss, fine_iters, final_loss, False, divergent,
                                 [float(x) for x in coarse_curve], [float(x) for x in fine_curve])


def track_sequence(gmap, initial_state, events, frontend_cfg, intr, cfg,
                   initial_time=None, max_keyframes=None, callback=None):
    """Track every full keyframe of ``events``.

    ``initial_state`` is the state at ``initial_time`` (default: the first
    keyframe's timestamp).  Returns a :class:`TrackResult`.
    """
    cursor = EventCursor(events)
    state = initial_state
    t_prev = initial_time
    times, poses, states, diags = [], [], [], []
    index = 0
    while max_keyframes is None or index < max_keyframes:
        kf = next_keyframe(cursor, frontend_cfg)
        if kf is None:
            break
        if t_prev is None:
            t_prev = kf.tau
        predicted = predict_next(state, max(kf.tau - t_prev, 0.0))
        state, record = track_keyframe(gmap, predicted, kf, intr, cfg, index)
        t_prev = kf.tau
        if times and kf.tau <= times[-1]:
            # duplicate timestamps cannot be stored; keep the first estimate
            log.warning("keyframe %d repeats timestamp %.9f; dropped", index, kf.tau)
        else:
            times.append(kf.tau)
            poses.append(state.T_cw)
            states.append(state)
        diags.append(record)
        if callback is not None:
            callback(record, state)
        index += 1
    traj = Trajectory(np.array(times), np.array(poses).reshape(-1, 4, 4))
    return TrackResult(traj, states, diags)


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)
