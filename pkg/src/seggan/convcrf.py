"""Windowed mean-field CRF refinement.

A label distribution field Q is refined for a fixed number of mean-field
iterations. Pairwise terms are truncated to a k x k window around each
pixel, which turns message passing into a locally connected filtering step:

    M_i(c) = sum_m w_m * sum_{j in window(i), j != i} k_m(i, j) * Q_j(c)
    Q'_i   = softmax(U_i - mu^T M_i)

with two Gaussian kernels per pixel pair: an appearance kernel over spatial
and color distance, and a smoothness kernel over spatial distance only. The
center weight k_m(i, i) is zero and kernels are not normalized. The unary
U = log(Q_in) is held fixed across iterations (input-clamped mean field).

The compatibility matrix mu and the kernel mixture weights w are the
learnable pieces; theta bandwidths are fixed by configuration.

Because k_m(i, j) = k_m(j, i) holds exactly in floating point (both sides
evaluate exp of the same expression), the message-passing operator is
numerically self-adjoint: the backward pass reuses the forward filtering
with the mixed kernel instead of a scatter.

``brute_force_oracle`` recomputes the whole refinement with explicit
per-pixel-pair Python loops and shares no code with the fast path; tests
compare the two.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigurationError
from .ops import (
    Parameter,
    clipped_log,
    clipped_log_grad,
    softmax_channels_backward,
    softmax_channels_forward,
)

LOG_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class ConvCrfConfig:
    """Static CRF settings; only mu and the kernel weights are learned."""

    filter_size: int = 3
    iterations: int = 3
    theta_alpha: float = None  # appearance spatial bandwidth, defaults to filter_size
    theta_beta: float = 0.15  # appearance color bandwidth
    theta_gamma: float = None  # smoothness spatial bandwidth, defaults to filter_size / 2
    learn_compatibility: bool = True
    learn_kernel_weights: bool = True

    def __post_init__(self):
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigurationError(
                f"filter_size must be odd and positive, got {self.filter_size}"
            )
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.theta_alpha is None:
            object.__setattr__(self, "theta_alpha", float(self.filter_size))
        if self.theta_gamma is None:
            object.__setattr__(self, "theta_gamma", self.filter_size / 2.0)
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclasses.dataclass
class CrfParams:
    """Learnable view: compatibility matrix (C, C) and kernel mixture (2,)."""

    mu: np.ndarray
    kernel_weights: np.ndarray


def potts_compatibility(num_classes, dtype=np.float64):
    """mu[c, d] = 1 - delta(c, d): penalize disagreement, no self-penalty."""
    return (1.0 - np.eye(num_classes)).astype(dtype)


@dataclasses.dataclass
class GaussianKernelStack:
    """Per-image pairwise kernels, flattened over window offsets.

    Both fields are (N, k*k, H, W); entry [n, m, y, x] weighs the pair
    (pixel (y, x), pixel (y, x) + offset_m). The center offset and pairs
    reaching outside the image carry weight zero.
    """

    appearance: np.ndarray
    smoothness: np.ndarray
    filter_size: int


def window_offsets(filter_size):
    r = filter_size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def build_gaussian_kernels(image, config: ConvCrfConfig):
    """Appearance and smoothness kernel stacks for a batch of RGB images."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ConfigurationError(f"expected (N, 3, H, W) image, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise ConfigurationError(f"image values must lie in [0, 1], got [{lo}, {hi}]")
    n, _, h, w = image.shape
    k = config.filter_size
    if k > 2 * max(h, w) - 1:
        raise ConfigurationError(
            f"filter_size {k} exceeds the largest useful window for a {h}x{w} image"
        )
    dtype = image.dtype
    app = np.zeros((n, k * k, h, w), dtype=dtype)
    smooth = np.zeros((n, k * k, h, w), dtype=dtype)
    inv2a = 1.0 / (2.0 * config.theta_alpha**2)
    inv2b = 1.0 / (2.0 * config.theta_beta**2)
    inv2g = 1.0 / (2.0 * config.theta_gamma**2)
    for m, (dy, dx) in enumerate(window_offsets(k)):
        if dy == 0 and dx == 0:
            continue  # center weight stays zero
        y0, y1 = max(0, -dy), h - max(0, dy)
        x0, x1 = max(0, -dx), w - max(0, dx)
        if y0 >= y1 or x0 >= x1:
            continue  # offset never lands inside the image
        sq = float(dy * dy + dx * dx)
        cdiff = image[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx] - image[:, :, y0:y1, x0:x1]
        cdist = np.square(cdiff).sum(axis=1)
        app[:, m, y0:y1, x0:x1] = np.exp(-sq * inv2a - cdist * inv2b)
        smooth[:, m, y0:y1, x0:x1] = math.exp(-sq * inv2g)
    return GaussianKernelStack(app, smooth, k)


def apply_kernel(q, kern, filter_size):
    """Locally connected filtering: out_i(c) = sum_m kern[m, i] * q[i + off_m](c).

    kern is one (N, k*k, H, W) stack. Invalid offsets carry zero weight, so
    the zero padding of q never contributes. Kernel symmetry makes this
    operator its own adjoint, which the CRF backward pass relies on.
    """
    n, c, h, w = q.shape
    r = filter_size // 2
    qpad = np.pad(q, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros_like(q)
    for m, (dy, dx) in enumerate(window_offsets(filter_size)):
        if dy == 0 and dx == 0:
            continue
        out += kern[:, m:m + 1] * qpad[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def message_pass(q, kernels: GaussianKernelStack, params: CrfParams):
    """Weighted message sum M = w_app * A_app(Q) + w_smooth * A_smooth(Q)."""
    m_app = apply_kernel(q, kernels.appearance, kernels.filter_size)
    m_smooth = apply_kernel(q, kernels.smoothness, kernels.filter_size)
    return params.kernel_weights[0] * m_app + params.kernel_weights[1] * m_smooth


def mean_field_step(unary, q, kernels: GaussianKernelStack, params: CrfParams):
    """One update Q' = softmax(unary - mu^T M)."""
    m = message_pass(q, kernels, params)
    penalty = np.einsum("cd,nchw->ndhw", params.mu, m)
    q_next, _ = softmax_channels_forward(unary - penalty)
    return q_next


def validate_distribution_field(name, q, tol=1e-5):
    """Reject fields that are not per-pixel distributions over channels."""
    if q.ndim != 4:
        raise ConfigurationError(f"{name} must be (N, C, H, W), got shape {q.shape}")
    if float(q.min()) < -tol:
        raise ConfigurationError(f"{name} has negative entries")
    sums = q.sum(axis=1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > tol:
        raise ConfigurationError(
            f"{name} channel sums deviate from 1 by {worst:.3e} (tolerance {tol:.0e})"
        )


@dataclasses.dataclass
class _CrfStepCache:
    m_app: np.ndarray
    m_smooth: np.ndarray
    q_out: np.ndarray


@dataclasses.dataclass
class CrfCache:
    prob: np.ndarray
    kernels: GaussianKernelStack
    config: ConvCrfConfig
    params: CrfParams
    steps: list


def crf_infer_forward(kernels, prob_map, config: ConvCrfConfig, params: CrfParams):
    """Full refinement from prebuilt kernels; returns (q, cache)."""
    w = params.kernel_weights
    unary = clipped_log(prob_map, LOG_EPS)
    q = prob_map
    steps = []
    for _ in range(config.iterations):
        m_app = apply_kernel(q, kernels.appearance, config.filter_size)
        m_smooth = apply_kernel(q, kernels.smoothness, config.filter_size)
        m = w[0] * m_app + w[1] * m_smooth
        penalty = np.einsum("cd,nchw->ndhw", params.mu, m)
        q, _ = softmax_channels_forward(unary - penalty)
        steps.append(_CrfStepCache(m_app, m_smooth, q))
    return q, CrfCache(prob_map, kernels, config, params, steps)


def crf_infer_backward(grad_out, cache: CrfCache):
    """Unrolled backward; returns (grad_prob, grad_mu, grad_kernel_weights).

    The gradient flows along two routes into the input distribution: through
    the iterated message passing, and through the clamped-log unary that
    every iteration reads.
    """
    params = cache.params
    w = params.kernel_weights
    k = cache.config.filter_size
    mixed = w[0] * cache.kernels.appearance + w[1] * cache.kernels.smoothness
    dq = grad_out
    dunary = np.zeros_like(grad_out)
    dmu = np.zeros_like(params.mu)
    dw = np.zeros_like(w)
    for step in reversed(cache.steps):
        dlogits = softmax_channels_backward(dq, step.q_out)
        dunary += dlogits
        dpenalty = -dlogits
        m = w[0] * step.m_app + w[1] * step.m_smooth
        dmu += np.einsum("nchw,ndhw->cd", m, dpenalty)
        dm = np.einsum("cd,ndhw->nchw", params.mu, dpenalty)
        dw[0] += np.vdot(step.m_app, dm)
        dw[1] += np.vdot(step.m_smooth, dm)
        # self-adjointness: transpose of message passing is message passing
        dq = apply_kernel(dm, mixed, k)
    grad_prob = dq + dunary * clipped_log_grad(cache.prob, LOG_EPS)
    return grad_prob, dmu, dw


def convcrf_forward(image, prob_map, config: ConvCrfConfig, params: CrfParams):
    """Refine prob_map against its image; builds kernels internally."""
    validate_distribution_field("prob_map", prob_map)
    kernels = build_gaussian_kernels(image, config)
    q, _ = crf_infer_forward(kernels, prob_map, config, params)
    return q


class ConvCrfModule:
    """One refinement stage with its own learnable mu and kernel weights.

    Several modules can share a single kernel stack built once per image
    batch; the stack depends only on the image and the (shared) config.
    """

    def __init__(self, name, num_classes, config: ConvCrfConfig, dtype=np.float64):
        self.name = name
        self.config = config
        self.mu = Parameter(f"{name}.mu", potts_compatibility(num_classes, dtype),
                            decay_exempt=True)
        self.kernel_weights = Parameter(f"{name}.kernel_weights",
                                        np.ones(2, dtype=dtype), decay_exempt=True)

    def _params_view(self):
        return CrfParams(mu=self.mu.data, kernel_weights=self.kernel_weights.data)

    def forward(self, kernels, q):
        return crf_infer_forward(kernels, q, self.config, self._params_view())

    def backward(self, grad_out, cache, accumulate=True):
        grad_q, dmu, dw = crf_infer_backward(grad_out, cache)
        if accumulate:
            self.mu.grad += dmu
            self.kernel_weights.grad += dw
        return grad_q

    def parameters(self):
        out = []
        if self.config.learn_compatibility:
            out.append(self.mu)
        if self.config.learn_kernel_weights:
            out.append(self.kernel_weights)
        return out

    def all_parameters(self):
        # checkpointing stores both regardless of learnability
        return [self.mu, self.kernel_weights]


def brute_force_oracle(image, prob_map, config: ConvCrfConfig, params: CrfParams):
    """Reference mean-field refinement via explicit pixel-pair loops.

    Deliberately shares nothing with the fast path: kernels are evaluated
    inline with math.exp, messages accumulate scalar by scalar. Only usable
    for tiny inputs.
    """
    n, c, h, w = prob_map.shape
    k = config.filter_size
    r = k // 2
    ta2 = 2.0 * config.theta_alpha**2
    tb2 = 2.0 * config.theta_beta**2
    tg2 = 2.0 * config.theta_gamma**2
    w_app = float(params.kernel_weights[0])
    w_smooth = float(params.kernel_weights[1])
    mu = params.mu
    out = np.empty_like(np.asarray(prob_map, dtype=np.float64))
    for b in range(n):
        unary = [[[math.log(min(max(float(prob_map[b, ch, y, x]), LOG_EPS), 1.0))
                   for x in range(w)] for y in range(h)] for ch in range(c)]
        q = [[[float(prob_map[b, ch, y, x]) for x in range(w)] for y in range(h)]
             for ch in range(c)]
        for _ in range(config.iterations):
            q_next = [[[0.0] * w for _ in range(h)] for _ in range(c)]
            for y in range(h):
                for x in range(w):
                    msg = [0.0] * c
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            if dy == 0 and dx == 0:
                                continue
                            yy, xx = y + dy, x + dx
                            if not (0 <= yy < h and 0 <= xx < w):
                                continue
                            sq = float(dy * dy + dx * dx)
                            cdist = 0.0
                            for ch in range(3):
                                d = float(image[b, ch, y, x]) - float(image[b, ch, yy, xx])
                                cdist += d * d
                            k_pair = (w_app * math.exp(-sq / ta2 - cdist / tb2)
                                      + w_smooth * math.exp(-sq / tg2))
                            for ch in range(c):
                                msg[ch] += k_pair * q[ch][yy][xx]
                    logits = [unary[ch][y][x]
                              - sum(float(mu[cp, ch]) * msg[cp] for cp in range(c))
                              for ch in range(c)]
                    peak = max(logits)
                    exps = [math.exp(v - peak) for v in logits]
                    total = sum(exps)
                    for ch in range(c):
                        q_next[ch][y][x] = exps[ch] / total
            q = q_next
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    out[b, ch, y, x] = q[ch][y][x]
    return out
