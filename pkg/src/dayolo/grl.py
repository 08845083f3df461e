"""Gradient reversal: identity forward, ``-lambda * grad`` backward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.autograd import Function


class _GradReverse(Function):
    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_grl, None


def grl_apply(x: torch.Tensor, lambda_grl: float = 1.0) -> torch.Tensor:
    if lambda_grl < 0:
        raise ValueError(f"lambda_grl must be >= 0, got {lambda_grl}")
    return _GradReverse.apply(x, float(lambda_grl))


class GradientReversal(torch.nn.Module):
    def __init__(self, lambda_grl: float = 1.0):
        super().__init__()
        if lambda_grl < 0:
            raise ValueError(f"lambda_grl must be >= 0, got {lambda_grl}")
        self.lambda_grl = lambda_grl

    def forward(self, x):
        return grl_apply(x, self.lambda_grl)

    def extra_repr(self) -> str:
        return f"lambda_grl={self.lambda_grl}"


@dataclass
class GrlConfig:
    lambda_grl: float = 1.0
    schedule: str = "constant"  # or "ramp"
    gamma: float = 10.0
    total_steps: int = 1

    def __post_init__(self):
        if self.lambda_grl < 0:
            raise ValueError(f"lambda_grl must be >= 0, got {self.lambda_grl}")
        if self.schedule not in ("constant", "ramp"):
            raise ValueError(f"unknown GRL schedule {self.schedule!r}")

    def value(self, step: int) -> float:
        """Coefficient at ``step``; the ramp is ``2 / (1 + exp(-gamma p)) - 1``."""
        if self.schedule == "constant":
            return self.lambda_grl
        p = min(max(step / max(self.total_steps, 1), 0.0), 1.0)
        return self.lambda_grl * (2.0 / (1.0 + math.exp(-self.gamma * p)) - 1.0)
