"""Loss terms for distillation training.

All operations are pure functions of their tensor inputs and preserve
the input dtype, so unit tests can run them in float64. Batch reduction
is always the mean, which keeps the weight coefficients independent of
batch size. Teacher tensors are detached by the caller; nothing here
blocks gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linprog
from torch import Tensor, nn

from gompertz_kd.errors import (
    ConfigurationError,
    InputError,
    NumericError,
    OracleSizeError,
    ShapeError,
)

COSINE_NORM_EPS = 1e-12
DEFAULT_NUM_QUANTILES = 256
OT_ORACLE_MAX_POINTS = 64


def _flatten_per_sample(x: Tensor, name: str) -> Tensor:
    """Validate a batched activation/gradient tensor and flatten to (B, n)."""
    if not isinstance(x, Tensor):
        raise InputError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() < 2:
        raise ShapeError(f"{name} must have a batch dimension plus values, got shape {tuple(x.shape)}")
    if x.shape[0] < 1 or x[0].numel() < 1:
        raise InputError(f"{name} is empty (shape {tuple(x.shape)})")
    if not torch.isfinite(x).all():
        raise InputError(f"{name} contains non-finite entries")
    return x.reshape(x.shape[0], -1)


def _require_same_shape(g_t: Tensor, g_s: Tensor) -> None:
    if g_t.shape != g_s.shape:
        raise ShapeError(
            f"gradient tensors must have identical shapes, got {tuple(g_t.shape)} vs {tuple(g_s.shape)}"
        )


def wasserstein_feature_loss(
    f_t: Tensor, f_s: Tensor, num_quantiles: int = DEFAULT_NUM_QUANTILES
) -> Tensor:
    """Batch-mean Wasserstein-1 distance between activation distributions.

    Each sample's activations are flattened into a 1D empirical
    distribution. For equal element counts the distance is exact:
    sort both multisets and average the absolute differences of matched
    order statistics. For unequal counts the distributions are compared
    at `num_quantiles` midpoint quantiles, which approximates the exact
    distance (and converges to it as the quantile count grows).

    Differentiable almost everywhere with respect to both arguments;
    the sort permutation and quantile indices are locally constant.
    """
    xt = _flatten_per_sample(f_t, "teacher features")
    xs = _flatten_per_sample(f_s, "student features")
    if xt.shape[0] != xs.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {xt.shape[0]} vs {xs.shape[0]}"
        )
    xt_sorted = torch.sort(xt, dim=1).values
    xs_sorted = torch.sort(xs, dim=1).values
    if xt.shape[1] != xs.shape[1]:
        if num_quantiles < 1:
            raise ConfigurationError("num_quantiles must be >= 1")
        xt_sorted = _midpoint_quantiles(xt_sorted, num_quantiles)
        xs_sorted = _midpoint_quantiles(xs_sorted, num_quantiles)
    return (xt_sorted - xs_sorted).abs().mean(dim=1).mean()


def _midpoint_quantiles(sorted_values: Tensor, m: int) -> Tensor:
    """Left-continuous empirical quantiles at u_k = (k - 1/2)/m, k = 1..m."""
    n = sorted_values.shape[1]
    u = (torch.arange(m, dtype=torch.float64) + 0.5) / m
    idx = torch.clamp(torch.ceil(u * n).long() - 1, 0, n - 1)
    return sorted_values[:, idx.to(sorted_values.device)]


def ot_lp_oracle(x: Sequence[float], y: Sequence[float]) -> float:
    """Exact W1 between two small 1D point clouds via the transport LP.

    Solves min <C, P> over couplings P with uniform marginals, where
    C[i, j] = |x_i - y_j|. Intended as an independent test oracle for
    `wasserstein_feature_loss`; refuses instances above
    `OT_ORACLE_MAX_POINTS` per side.
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    n, m = xv.size, yv.size
    if n < 1 or m < 1:
        raise InputError("oracle inputs must be non-empty")
    if n > OT_ORACLE_MAX_POINTS or m > OT_ORACLE_MAX_POINTS:
        raise OracleSizeError(
            f"oracle limited to {OT_ORACLE_MAX_POINTS} points per side, got {n}x{m}"
        )
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise InputError("oracle inputs must be finite")
    cost = np.abs(xv[:, None] - yv[None, :]).ravel()
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


class ChannelAdapter(nn.Module):
    """Learned 1x1 channel remap applied at every spatial position.

    Maps a (B, C_in, H, W) gradient tensor to (B, C_out, H, W) with a
    single weight matrix plus bias, trained jointly with the student and
    discarded at inference.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("adapter channel counts must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        bound = 1.0 / math.sqrt(in_channels)
        nn.init.uniform_(self.weight, -bound, bound)

    @classmethod
    def identity(cls, channels: int) -> "ChannelAdapter":
        adapter = cls(channels, channels)
        with torch.no_grad():
            adapter.weight.copy_(torch.eye(channels))
            adapter.bias.zero_()
        return adapter

    def forward(self, g: Tensor) -> Tensor:
        if g.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W), got shape {tuple(g.shape)}")
        if g.shape[1] != self.in_channels:
            raise ShapeError(
                f"adapter expects {self.in_channels} input channels, got {g.shape[1]}"
            )
        weight = self.weight.to(g.dtype).view(self.out_channels, self.in_channels, 1, 1)
        return F.conv2d(g, weight, self.bias.to(g.dtype))


def adapt_channels(adapter: ChannelAdapter, g: Tensor) -> Tensor:
    """Remap gradient channels through the adapter (see `ChannelAdapter`)."""
    return adapter(g)


def euclidean_gradient_distance(g_t: Tensor, g_s: Tensor) -> Tensor:
    """L2 norm of the flattened gradient difference, averaged over batch."""
    _require_same_shape(g_t, g_s)
    a = _flatten_per_sample(g_t, "teacher gradient")
    b = _flatten_per_sample(g_s, "student gradient")
    return torch.linalg.vector_norm(a - b, dim=1).mean()


def cosine_gradient_similarity(g_t: Tensor, g_s: Tensor) -> Tensor:
    """Batch-mean cosine of the angle between flattened gradients.

    Norms are stabilized with a tiny epsilon; a sample where both
    gradients are exactly zero counts as similarity 1 (perfect agreement
    on "no gradient").
    """
    _require_same_shape(g_t, g_s)
    a = _flatten_per_sample(g_t, "teacher gradient")
    b = _flatten_per_sample(g_s, "student gradient")
    na = torch.linalg.vector_norm(a, dim=1)
    nb = torch.linalg.vector_norm(b, dim=1)
    sim = (a * b).sum(dim=1) / ((na + COSINE_NORM_EPS) * (nb + COSINE_NORM_EPS))
    both_zero = (na == 0) & (nb == 0)
    sim = torch.where(both_zero, torch.ones_like(sim), sim)
    return sim.mean()


def gradient_matching_loss(g_t: Tensor, g_s: Tensor, r: float) -> Tensor:
    """Blend of gradient magnitude and direction mismatch.

    r * euclidean_distance + (1 - r) * (1 - cosine_similarity); zero
    exactly when the gradients agree elementwise (for r in (0, 1]).
    """
    if not isinstance(r, (int, float)) or not math.isfinite(r) or not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"r must lie in [0, 1], got {r!r}")
    d = euclidean_gradient_distance(g_t, g_s)
    s = cosine_gradient_similarity(g_t, g_s)
    return r * d + (1.0 - r) * (1.0 - s)


def distillation_loss(
    logits_t: Tensor, logits_s: Tensor, tau: float, tau_squared: bool = False
) -> Tensor:
    """Temperature-softened KL divergence from teacher to student.

    KL(softmax(logits_t / tau) || softmax(logits_s / tau)), batch mean.
    `tau_squared` applies the classical tau^2 compensation factor; off
    by default.
    """
    if not isinstance(tau, (int, float)) or not math.isfinite(tau) or tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau!r}")
    for name, logits in (("teacher logits", logits_t), ("student logits", logits_s)):
        if not isinstance(logits, Tensor) or logits.dim() != 2:
            raise ShapeError(f"{name} must be a (batch, classes) tensor")
        if not torch.isfinite(logits).all():
            raise InputError(f"{name} contain non-finite entries")
    if logits_t.shape[1] != logits_s.shape[1]:
        raise ShapeError(
            f"class counts differ: {logits_t.shape[1]} vs {logits_s.shape[1]}"
        )
    if logits_t.shape[0] != logits_s.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {logits_t.shape[0]} vs {logits_s.shape[0]}"
        )
    log_pt = F.log_softmax(logits_t / tau, dim=1)
    log_ps = F.log_softmax(logits_s / tau, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1).mean()
    if tau_squared:
        kl = kl * (tau * tau)
    return kl


def classification_loss(logits_s: Tensor, labels: Tensor) -> Tensor:
    """Batch-mean cross-entropy of student logits against hard labels."""
    if not isinstance(logits_s, Tensor) or logits_s.dim() != 2:
        raise ShapeError("student logits must be a (batch, classes) tensor")
    if not torch.isfinite(logits_s).all():
        raise InputError("student logits contain non-finite entries")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits_s.device)
    if labels.dim() != 1 or labels.shape[0] != logits_s.shape[0]:
        raise ShapeError(
            f"labels must be a ({logits_s.shape[0]},) index vector, got {tuple(labels.shape)}"
        )
    num_classes = logits_s.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits_s, labels)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch scalar loss components and their weighted total."""

    classification: float
    wasserstein: float
    grad_match: float
    distill: float
    beta: float
    total: float


def total_loss(
    classification: float | Tensor,
    wasserstein: float | Tensor,
    grad_match: float | Tensor,
    distill: float | Tensor,
    beta: float,
) -> LossBreakdown:
    """Assemble the full training objective

        total = classification + beta * (wasserstein + grad_match + distill)

    from already-reduced scalar terms, checking each for finiteness.
    """
    parts = {
        "classification": classification,
        "wasserstein": wasserstein,
        "grad_match": grad_match,
        "distill": distill,
        "beta": beta,
    }
    values = {}
    for term, value in parts.items():
        v = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(term)
        values[term] = v
    total = values["classification"] + values["beta"] * (
        values["wasserstein"] + values["grad_match"] + values["distill"]
    )
    if not math.isfinite(total):
        raise NumericError("total")
    return LossBreakdown(
        classification=values["classification"],
        wasserstein=values["wasserstein"],
        grad_match=values["grad_match"],
        distill=values["distill"],
        beta=values["beta"],
        total=total,
    )
