# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import math
from typing import Dict, Sequence, Tuple

import numpy as np

from .layers import Parameter
from .model import ScheduleConfig


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    betas: Sequence[float],
    eps: float,
    weight_decay: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update of a single tensor.

    :param step: 1-based index of this update, for bias correction.

    :returns: The new parameter, first moment and second moment.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param
    dtype = param.dtype
    return (
        (param - lr * update).astype(dtype),
        m.astype(dtype),
        v.astype(dtype),
    )


class AdamW(object):
    """AdamW over a fixed set of trainable parameters.

    Parameters that do not require gradients must not be handed over;
    they never get optimiser state. A parameter without a gradient at
    some step is left untouched at that step, and its bias correction
    counts only the updates it actually received.
    """

    def __init__(
        self,
        params: Dict[str, Parameter],
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        for name, p in params.items():
            if not p.requires_grad:
                raise ValueError(f"Parameter {name} is frozen and cannot be optimised")
        self.params = dict(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        # updates received by each parameter
        self.t = {n: 0 for n in self.params}
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.t[name] += 1
            p.data, self.m[name], self.v[name] = adamw_step(
                p.data,
                p.grad,
                self.m[name],
                self.v[name],
                self.t[name],
                lr,
                self.betas,
                self.eps,
                self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def learning_rate(step: int, cfg: ScheduleConfig, video: bool = False) -> float:
    """Learning rate at a 0-based step.

    A linear warmup reaches ``cfg.lr`` after ``cfg.warmup_steps`` steps,
    then the rate decays to ``cfg.final_lr`` at the last step, following
    a half cosine or a polynomial. With ``lr_policy="auto"``, images use
    the cosine and videos the polynomial.
    """
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    policy = cfg.lr_policy
    if policy == "auto":
        policy = "poly" if video else "cosine"
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, max(0.0, (step - cfg.warmup_steps) / span))
    if policy == "poly":
        factor = (1.0 - progress) ** cfg.poly_power
    else:
        factor = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.final_lr + (cfg.lr - cfg.final_lr) * factor
