"""Differentiable layer kernels.

Every op works on float64 ``numpy`` arrays with a leading batch axis; the
unbatched forms named in the docs (``T x C`` signals, ``F`` vectors) are
accepted too and come back unbatched. Each forward has a matching
``*_backward`` that returns gradients for all of its inputs.

Convolutions are cross-correlations without padding. Weight layouts:

* conv1d:  ``[K, C_in, C_out]``
* tconv1d: ``[K, C_out, C_in]``
* dense:   ``[F_in, F_out]``
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.errors import DataError, NumericalError, ShapeError

CE_CLAMP = 1e-12


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values produced by {what}")
    return array


def _promote(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[np.newaxis], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d or batched {ndim}-d input, got shape {x.shape}")
    return x, False


def _squeeze(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


def conv_output_length(t_in: int, kernel_size: int, stride: int) -> int:
    if stride < 1 or kernel_size < 1:
        raise ShapeError(f"kernel_size and stride must be >= 1 (K={kernel_size}, S={stride})")
    if t_in < kernel_size:
        raise ShapeError(f"input length {t_in} is shorter than kernel size {kernel_size}")
    return (t_in - kernel_size) // stride + 1


def tconv_output_length(t_in: int, kernel_size: int, stride: int) -> int:
    if stride < 1 or kernel_size < 1 or t_in < 1:
        raise ShapeError(f"invalid transposed conv (T_in={t_in}, K={kernel_size}, S={stride})")
    return (t_in - 1) * stride + kernel_size


def _windows(x: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    # (B, T, C) -> (B, T_out, K, C)
    view = sliding_window_view(x, kernel_size, axis=1)[:, ::stride]
    return view.transpose(0, 1, 3, 2)


def _scatter_add(cols: np.ndarray, length: int, stride: int) -> np.ndarray:
    # cols: (B, T_in, K, C) -> (B, length, C), position t*S + k receives cols[:, t, k]
    batch, t_in, kernel_size, channels = cols.shape
    out = np.zeros((batch, length, channels))
    span = stride * (t_in - 1) + 1
    for k in range(kernel_size):
        out[:, k : k + span : stride, :] += cols[:, :, k, :]
    return out


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    x, squeeze = _promote(x, 3)
    kernel_size, c_in, c_out = weight.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {x.shape[2]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    conv_output_length(x.shape[1], kernel_size, stride)
    out = np.tensordot(_windows(x, kernel_size, stride), weight, axes=([2, 3], [0, 1])) + bias
    return _squeeze(out, squeeze)


def conv1d_backward(
    grad: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, squeeze = _promote(x, 3)
    grad, _ = _promote(grad, 3)
    kernel_size = weight.shape[0]
    windows = _windows(x, kernel_size, stride)
    d_weight = np.tensordot(windows, grad, axes=([0, 1], [0, 1]))
    d_bias = grad.sum(axis=(0, 1))
    d_cols = np.tensordot(grad, weight, axes=([2], [2]))
    d_x = _scatter_add(d_cols, x.shape[1], stride)
    return _squeeze(d_x, squeeze), d_weight, d_bias


def tconv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    x, squeeze = _promote(x, 3)
    kernel_size, c_out, c_in = weight.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"tconv1d expects {c_in} input channels, got {x.shape[2]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"tconv1d bias must have shape ({c_out},), got {bias.shape}")
    length = tconv_output_length(x.shape[1], kernel_size, stride)
    cols = np.tensordot(x, weight, axes=([2], [2]))
    out = _scatter_add(cols, length, stride) + bias
    return _squeeze(out, squeeze)


def tconv1d_backward(
    grad: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, squeeze = _promote(x, 3)
    grad, _ = _promote(grad, 3)
    kernel_size = weight.shape[0]
    # the input gradient of a transposed conv is the plain conv of the upstream gradient
    windows = _windows(grad, kernel_size, stride)
    d_x = np.tensordot(windows, weight, axes=([2, 3], [0, 1]))
    d_weight = np.tensordot(windows, x, axes=([0, 1], [0, 1]))
    d_bias = grad.sum(axis=(0, 1))
    return _squeeze(d_x, squeeze), d_weight, d_bias


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x, squeeze = _promote(x, 2)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense expects {weight.shape[0]} input features, got {x.shape[1]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    return _squeeze(x @ weight + bias, squeeze)


def dense_backward(
    grad: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, squeeze = _promote(x, 2)
    grad, _ = _promote(grad, 2)
    return _squeeze(grad @ weight.T, squeeze), x.T @ grad, grad.sum(axis=0)


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize each time step over its feature axis (biased variance)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm parameters of size {gamma.shape} do not match features {x.shape[-1]}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def layer_norm_backward(
    grad: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    width = x.shape[-1]
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    x_hat = (x - x.mean(axis=-1, keepdims=True)) * inv_std
    reduce_axes = tuple(range(x.ndim - 1))
    d_gamma = (grad * x_hat).sum(axis=reduce_axes)
    d_beta = grad.sum(axis=reduce_axes)
    d_hat = grad * gamma
    d_x = (inv_std / width) * (
        width * d_hat
        - d_hat.sum(axis=-1, keepdims=True)
        - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, alpha * x)


def leaky_relu_backward(grad: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    # subgradient at exactly 0 is alpha
    return grad * np.where(np.asarray(x) > 0, 1.0, alpha)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax_backward(grad: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def attention_pool(
    features: np.ndarray, score_weight: np.ndarray, score_bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Single-query additive attention over time.

    Returns the context vector ``[D]`` (or ``[B, D]``) and the attention
    weights ``[T']`` (or ``[B, T']``).
    """
    features, squeeze = _promote(features, 3)
    if features.shape[1] < 1:
        raise ShapeError("attention_pool needs at least one time step")
    if features.shape[2] != score_weight.shape[0]:
        raise ShapeError(f"score weight of size {score_weight.shape[0]} does not match features {features.shape[2]}")
    scores = features @ score_weight + np.reshape(score_bias, ())
    weights = softmax(scores, axis=-1)
    context = np.einsum("bt,btd->bd", weights, features)
    return _squeeze(context, squeeze), _squeeze(weights, squeeze)


def attention_pool_backward(
    grad: np.ndarray, features: np.ndarray, score_weight: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    features, squeeze = _promote(features, 3)
    grad, _ = _promote(grad, 2)
    weights, _ = _promote(weights, 2)
    d_weights = np.einsum("btd,bd->bt", features, grad)
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
    d_features = weights[:, :, np.newaxis] * grad[:, np.newaxis, :] + d_scores[:, :, np.newaxis] * score_weight
    d_score_weight = np.einsum("bt,btd->d", d_scores, features)
    d_score_bias = np.array([d_scores.sum()])
    return _squeeze(d_features, squeeze), d_score_weight, d_score_bias


def global_average_pool(features: np.ndarray) -> np.ndarray:
    features, squeeze = _promote(features, 3)
    return _squeeze(features.mean(axis=1), squeeze)


def global_average_pool_backward(grad: np.ndarray, steps: int) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    return np.repeat(grad[..., np.newaxis, :], steps, axis=-2) / steps


def cross_entropy(probs: np.ndarray, one_hot: np.ndarray) -> float:
    """Categorical cross-entropy; batched inputs give the mean over samples."""
    probs, _ = _promote(probs, 2)
    one_hot, _ = _promote(one_hot, 2)
    if probs.shape != one_hot.shape:
        raise ShapeError(f"probabilities {probs.shape} and targets {one_hot.shape} differ")
    clipped = np.clip(probs, CE_CLAMP, 1.0)
    return float(-(one_hot * np.log(clipped)).sum(axis=1).mean())


def softmax_cross_entropy_grad(logits: np.ndarray, one_hot: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. logits: (p - y) / N."""
    logits, squeeze = _promote(logits, 2)
    one_hot, _ = _promote(one_hot, 2)
    return _squeeze((softmax(logits) - one_hot) / logits.shape[0], squeeze)


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over elements; with equal-sized samples this equals the batch mean of per-sample MSE."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse_loss shapes differ: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def mse_loss_grad(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Gradient of ``mse_loss`` w.r.t. ``x_hat``."""
    return 2.0 * (np.asarray(x_hat) - np.asarray(x)) / np.size(x)


def l1_activity(z: np.ndarray, lam: float) -> float:
    if lam < 0:
        raise ValueError(f"L1 coefficient must be >= 0, got {lam}")
    return float(lam * np.abs(z).sum())


def l1_activity_grad(z: np.ndarray, lam: float) -> np.ndarray:
    # np.sign(0) == 0 gives the zero subgradient
    return lam * np.sign(z)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    encoded = np.zeros((labels.shape[0], num_classes))
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded
