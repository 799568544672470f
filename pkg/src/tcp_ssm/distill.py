"""Feature-level distillation between student and teacher layer outputs.

The loss is the mean over layers of the per-layer mean absolute difference::

    L_distill = (1 / L_blk) * sum_l mean(|o_l - sg(t_l)|)

``sg`` stops the gradient: only the student receives one.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, ShapeMismatch

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

DEFAULT_LAMBDA_DISTILL = 6e-2


def _pairs(
    student: Sequence[ArrayLike], teacher: Sequence[ArrayLike]
) -> list[tuple[FloatArray, FloatArray]]:
    if len(student) != len(teacher):
        raise ShapeMismatch(
            f"Student has {len(student)} layers, teacher has {len(teacher)}"
        )
    if not student:
        raise ShapeMismatch("Distillation needs at least one layer")
    pairs = []
    for i, (s, t) in enumerate(zip(student, teacher, strict=True)):
        s_arr = np.asarray(s, dtype=np.float64)
        t_arr = np.asarray(t, dtype=np.float64)
        if s_arr.shape != t_arr.shape:
            raise ShapeMismatch(f"Layer {i}: student {s_arr.shape} vs teacher {t_arr.shape}")
        pairs.append((s_arr, t_arr))
    return pairs


def distill_loss(student: Sequence[ArrayLike], teacher: Sequence[ArrayLike]) -> float:
    """Mean over layers of the mean absolute student/teacher difference."""
    pairs = _pairs(student, teacher)
    per_layer = [float(np.mean(np.abs(s - t))) if s.size else 0.0 for s, t in pairs]
    return math.fsum(per_layer) / len(per_layer)


def distill_loss_and_grad(
    student: Sequence[ArrayLike], teacher: Sequence[ArrayLike]
) -> tuple[float, list[FloatArray], list[FloatArray]]:
    """Loss with gradients for the student and (stopped) teacher outputs.

    Student gradients are ``sign(o - t) / (L_blk * size)`` per layer, using
    zero at ties; teacher gradients are exactly zero.
    """
    pairs = _pairs(student, teacher)
    n_layers = len(pairs)
    student_grads = [
        np.sign(s - t) / (n_layers * max(s.size, 1)) for s, t in pairs
    ]
    teacher_grads = [np.zeros_like(t) for _, t in pairs]
    return distill_loss(student, teacher), student_grads, teacher_grads


def combined_objective(
    task_loss: float, distill: float, lambda_distill: float = DEFAULT_LAMBDA_DISTILL
) -> float:
    """``task_loss + lambda_distill * distill``.

    Raises:
        ConfigError: If any input is not finite
    """
    if not all(math.isfinite(v) for v in (task_loss, distill, lambda_distill)):
        raise ConfigError("Objective terms must be finite")
    return task_loss + lambda_distill * distill
