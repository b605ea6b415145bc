"""
Adam optimizer state and update, plus the training settings shared by
population training and test-time training.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from config import REGISTRATION
from core.errors import InvalidArgumentError, NonFiniteGradientError, ShapeMismatchError
from core.grid import default_window
from core.regnet import NetParams

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment accumulators per parameter tensor and the step counter"""
    lr: float = REGISTRATION['LEARNING_RATE']
    beta1: float = REGISTRATION['BETA1']
    beta2: float = REGISTRATION['BETA2']
    eps: float = REGISTRATION['ADAM_EPS']
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: NetParams, lr: float = REGISTRATION['LEARNING_RATE'], **kwargs) -> 'AdamState':
        """Fresh state with zero moments shaped like params"""
        return cls(
            lr=lr,
            m={k: np.zeros_like(v) for k, v in params.tensors.items()},
            v={k: np.zeros_like(v) for k, v in params.tensors.items()},
            **kwargs
        )


def adam_step(
    params: NetParams,
    grads: Dict[str, np.ndarray],
    state: AdamState
) -> Tuple[NetParams, AdamState]:
    """
    One bias-corrected Adam update.

    Args:
        params: Current parameters (not modified)
        grads: Gradients keyed like params.tensors
        state: Current optimizer state (not modified)

    Returns:
        Tuple of (updated params, updated state)
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            raise NonFiniteGradientError(
                f"Non-finite gradient for parameter '{name}'",
                step=state.t + 1,
                diagnostics={'parameter': name, 'non_finite_entries': bad, 'shape': list(grad.shape)}
            )

    for name, value in params.tensors.items():
        if grads[name].shape != value.shape:
            raise ShapeMismatchError(f"Gradient for '{name}' has shape {grads[name].shape}, expected {value.shape}")

    t = state.t + 1
    if not any(np.any(grad) for grad in grads.values()):
        # all-zero gradients leave parameters and moments untouched
        return params.with_tensors({k: v.copy() for k, v in params.tensors.items()}), replace(state, t=t)

    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    tensors, first, second = {}, {}, {}
    for name, value in params.tensors.items():
        grad = grads[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * (grad * grad)
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        tensors[name] = (value - update).astype(value.dtype)
        first[name] = m
        second[name] = v
    new_state = replace(state, t=t, m=first, v=second)
    return params.with_tensors(tensors), new_state


@dataclass(frozen=True)
class TrainSpec:
    """Objective and iteration settings for one optimization run"""
    lam: float = REGISTRATION['LAMBDA']
    steps: int = REGISTRATION['STEPS']
    window: Optional[Union[int, Tuple[int, ...]]] = None
    seed: int = REGISTRATION['SEED']
    lr: float = REGISTRATION['LEARNING_RATE']
    smoothness_reduction: str = REGISTRATION['SMOOTHNESS_REDUCTION']
    nlcc_eps: float = REGISTRATION['NLCC_EPS']
    sampling: str = 'round_robin'
    log_every: int = REGISTRATION['LOG_EVERY']

    def __post_init__(self):
        if isinstance(self.window, (list, np.ndarray)):
            object.__setattr__(self, 'window', tuple(int(w) for w in self.window))
        self.validate()

    def validate(self) -> None:
        if int(self.steps) < 1:
            raise InvalidArgumentError(f"Step count must be >= 1, got {self.steps}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidArgumentError(f"Smoothness weight must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise InvalidArgumentError(f"Learning rate must be positive, got {self.lr}")
        if self.smoothness_reduction not in ('sum', 'mean'):
            raise InvalidArgumentError(f"Unknown smoothness reduction '{self.smoothness_reduction}'")
        if self.sampling not in ('round_robin', 'random'):
            raise InvalidArgumentError(f"Unknown pair sampling '{self.sampling}'")

    def window_for(self, dims: Sequence[int], scale: float = 1.0) -> Tuple[int, ...]:
        """
        Per-axis NLCC window for a grid at the given scale: the configured
        window shrinks with resolution down to a floor, and never exceeds the grid.
        """
        ndim = len(dims)
        base = self.window
        if base is None:
            base = default_window(ndim, REGISTRATION['WINDOW_2D'], REGISTRATION['WINDOW_3D'])
        extents = (int(base),) * ndim if np.isscalar(base) else tuple(int(w) for w in base)
        floor = REGISTRATION['MIN_WINDOW']
        if scale < 1:
            extents = tuple(max(floor, int(round(w * scale))) for w in extents)
        return tuple(max(1, min(w, d)) for w, d in zip(extents, dims))

    def with_steps(self, steps: int) -> 'TrainSpec':
        return replace(self, steps=int(steps))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if isinstance(self.window, tuple):
            data['window'] = list(self.window)
        return data
