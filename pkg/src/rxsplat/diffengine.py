"""Adam, learning-rate schedules and the finite-difference gradient check.

Parameters travel as ``{name: array}`` dicts whose arrays are updated in
place, so views handed out by the scene and the conditioning state stay
live across optimizer steps.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from rxsplat.errors import NumericError
from rxsplat.radiance import component_degrees

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

PARAMETER_GROUPS = (
    "position",
    "feature_dc",
    "feature_rest",
    "transmittance",
    "scaling",
    "rotation",
    "conditioning",
)

# Scene array -> parameter group; fle_coeffs splits into feature_dc/feature_rest
SCENE_PARAMETER_GROUPS = {
    "positions": "position",
    "log_scales": "scaling",
    "quaternions": "rotation",
    "tau_logits": "transmittance",
}
CONDITIONING_PREFIX = "cond."


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    def moments_for(self, name: str, like: np.ndarray):
        m = self.first_moment.get(name)
        if m is None or m.shape != like.shape:
            m = self.first_moment[name] = np.zeros_like(like, dtype=np.float64)
            self.second_moment[name] = np.zeros_like(like, dtype=np.float64)
        return m, self.second_moment[name]

    def remap(self, names, index_map: np.ndarray) -> None:
        """Realign per-Gaussian moments after densification.

        Row i of the new moments is row ``index_map[i]`` of the old ones,
        or zero where ``index_map[i]`` is -1.
        """
        index_map = np.asarray(index_map, dtype=np.int64)
        fresh = index_map < 0
        src = np.where(fresh, 0, index_map)
        for name in names:
            for moments in (self.first_moment, self.second_moment):
                old = moments.get(name)
                if old is None:
                    continue
                if len(old) == 0:
                    moments[name] = np.zeros((len(index_map),) + old.shape[1:])
                    continue
                new = old[src].copy()
                new[fresh] = 0.0
                moments[name] = new


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: Union[float, dict]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place.

    Args:
        params: Parameter arrays by name
        grads: Gradients by name; names missing here are skipped
        state: Moments and step counter, advanced by one
        lr: Learning rate, or a dict of rates by name (scalars or arrays
            broadcastable to the parameter)

    Returns:
        The same ``params`` dict

    Raises:
        NumericError: If a gradient holds NaN or inf (names the parameter)
        ValueError: If a gradient shape does not match its parameter
    """
    for name, grad in grads.items():
        if name not in params:
            raise ValueError(f"Gradient for unknown parameter: {name}")
        if np.shape(grad) != params[name].shape:
            raise ValueError(f"Gradient shape {np.shape(grad)} does not match {name} {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient in parameter group {name}")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        param = params[name]
        m, v = state.moments_for(name, param)
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        rate = lr[name] if isinstance(lr, dict) else lr
        param -= rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params


@dataclass(frozen=True)
class LrSchedule:
    lr_init: float
    lr_final: float
    total_steps: int
    delay_mult: float = 1.0
    delay_steps: int = 0


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Exponential decay from lr_init to lr_final with a sine-eased warm-up.

    The warm-up multiplier rises from ``delay_mult`` at t = 0 to 1 at
    ``delay_steps``; with no delay steps it is 1 throughout.
    """
    s = schedule
    frac = 1.0 if s.total_steps <= 0 else min(max(t / s.total_steps, 0.0), 1.0)
    base = math.exp((1.0 - frac) * math.log(s.lr_init) + frac * math.log(s.lr_final))
    if s.delay_steps > 0:
        ramp = s.delay_mult + (1.0 - s.delay_mult) * math.sin(0.5 * math.pi * min(max(t / s.delay_steps, 0.0), 1.0))
    else:
        ramp = 1.0
    return base * ramp


def active_degree(t: int, t_ramp: int, l_max: int) -> int:
    return min(l_max, t // t_ramp)


def degree_mask(l_max: int, t: int, t_ramp: int) -> np.ndarray:
    """Per-component flags: True where degree l is already trainable at step t."""
    return component_degrees(l_max) <= active_degree(t, t_ramp, l_max)


class GroupedAdam:
    """Adam over the seven named parameter groups.

    Positions follow an LrSchedule; every other group uses a constant rate.
    Feature coefficients of degree l >= 1 train at ``rest_lr_ratio`` times the
    degree-0 rate. ``last_lr`` records the rate each group received on the
    most recent step.
    """

    def __init__(self, rates: dict[str, float], position_schedule: Optional[LrSchedule] = None,
                 rest_lr_ratio: float = 1.0, l_max: int = 0):
        unknown = set(rates) - set(PARAMETER_GROUPS)
        if unknown:
            raise ValueError(f"Unknown parameter groups: {', '.join(sorted(unknown))}")
        self.rates = dict(rates)
        self.position_schedule = position_schedule
        self.rest_lr_ratio = rest_lr_ratio
        self.l_max = l_max
        self.state = AdamState()
        self.last_lr: dict[str, float] = {}

    @classmethod
    def from_config(cls, config, total_steps: int, l_max: int) -> "GroupedAdam":
        schedule = LrSchedule(
            config.lr_position_init, config.lr_position_final, total_steps,
            config.lr_position_delay_mult, config.lr_position_delay_steps,
        )
        rates = {
            "position": config.lr_position_init,
            "feature_dc": config.lr_feature,
            "feature_rest": config.lr_feature * config.rest_lr_ratio,
            "transmittance": config.lr_transmittance,
            "scaling": config.lr_scaling,
            "rotation": config.lr_rotation,
            "conditioning": config.lr_conditioning,
        }
        return cls(rates, schedule, config.rest_lr_ratio, l_max)

    def group_rates(self, t: int) -> dict[str, float]:
        rates = dict(self.rates)
        if self.position_schedule is not None:
            rates["position"] = lr_at(self.position_schedule, t)
        rates["feature_rest"] = rates["feature_dc"] * self.rest_lr_ratio
        return rates

    def group_of(self, name: str) -> str:
        if name in SCENE_PARAMETER_GROUPS:
            return SCENE_PARAMETER_GROUPS[name]
        if name.startswith(CONDITIONING_PREFIX):
            return "conditioning"
        if name == "fle_coeffs":
            return "feature_dc"
        raise ValueError(f"No parameter group for {name}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], t: int) -> None:
        rates = self.group_rates(t)
        per_param = {}
        used = set()
        for name in grads:
            if name == "fle_coeffs":
                dc = component_degrees(self.l_max) == 0
                per_param[name] = np.where(dc, rates["feature_dc"], rates["feature_rest"])[None, :, None, None]
                used.update(("feature_dc", "feature_rest") if self.l_max > 0 else ("feature_dc",))
            else:
                group = self.group_of(name)
                per_param[name] = rates[group]
                used.add(group)
        self.last_lr = {group: rates[group] for group in PARAMETER_GROUPS if group in used}
        adam_step(params, grads, self.state, per_param)


def flatten(arrays: dict[str, np.ndarray]):
    """Concatenate arrays into one f64 vector; returns (vector, layout)."""
    layout = [(name, np.shape(arr)) for name, arr in arrays.items()]
    if not layout:
        return np.zeros(0), layout
    vector = np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for arr in arrays.values()])
    return vector, layout


def unflatten(vector: np.ndarray, layout) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.asarray(vector[offset:offset + size]).reshape(shape)
        offset += size
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    checked: np.ndarray
    failures: list[int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f: Callable, x0, step: float = 1e-6, tolerance: float = 1e-3,
               indices=None) -> GradCheckReport:
    """Compare an analytic gradient with central differences.

    Args:
        f: Maps a parameter vector to ``(value, gradient)``
        x0: Point to check at
        step: Central-difference step
        tolerance: Relative error above which a coordinate is reported
        indices: Coordinates to check (all by default)

    Returns:
        Report with per-coordinate errors |g_a - g_fd| / max(1, |g_a|, |g_fd|);
        coordinates over tolerance are listed in ``failures``
    """
    x0 = np.array(x0, dtype=np.float64).ravel()
    _, analytic = f(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    checked = np.arange(len(x0)) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.zeros(len(checked))
    for n, i in enumerate(checked):
        x = x0.copy()
        x[i] = x0[i] + step
        f_plus = f(x)[0]
        x[i] = x0[i] - step
        f_minus = f(x)[0]
        numeric[n] = (f_plus - f_minus) / (2.0 * step)
    a = analytic[checked]
    rel = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    worst = int(np.argmax(rel)) if len(rel) else 0
    failures = [int(checked[n]) for n in np.flatnonzero(rel > tolerance)]
    if failures:
        logger.warning("Gradient check: %d of %d coordinates above %.1e", len(failures), len(checked), tolerance)
    return GradCheckReport(
        max_rel_error=float(rel[worst]) if len(rel) else 0.0,
        worst_index=int(checked[worst]) if len(rel) else -1,
        analytic=a,
        numeric=numeric,
        checked=checked,
        failures=failures,
        tolerance=tolerance,
    )
