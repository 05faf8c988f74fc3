"""Fisher-vector encoding over mixture posteriors.

Descriptors and their posteriors are reduced to three running statistics
(per-component responsibility mass, first and second weighted moments)
plus the descriptor count.  Accumulators add fieldwise, so the encoding
of a long sequence equals the merge of per-window accumulators, and a
spatial region of a descriptor tensor can be encoded on its own by
restricting accumulation to that region.

The emitted vector concatenates, per component, the weight, mean, and
variance gradient blocks in that order, giving K * (2 n_c + 1) entries.
It is normalized by an elementwise signed square root followed by L2
normalization.  The backward pass is exact everywhere except the signed
square root, whose derivative is smoothed near zero (the forward stays
exact).
"""

from dataclasses import dataclass

import numpy as np

from .gmm import mixture_weights, posteriors, posteriors_backward

L2_EPS = 1e-12
POWER_GRAD_EPS = 1e-8


@dataclass
class FvAccumulator:
    """Running statistics: s0 (K,), s1 (K, n_c), s2 (K, n_c), count T."""
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    count: int

    @staticmethod
    def empty(k, n_dims):
        return FvAccumulator(np.zeros(k), np.zeros((k, n_dims)),
                             np.zeros((k, n_dims)), 0)


@dataclass
class FisherVector:
    values: np.ndarray
    normalized: bool = False


def fisher_vector_dim(k, n_dims):
    return k * (2 * n_dims + 1)


def _region_fibers(x, gamma, region):
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if x.shape[:-1] != gamma.shape[:-1]:
        raise ValueError(
            f"descriptors {x.shape} and posteriors {gamma.shape} are not "
            "spatially aligned")
    if region is not None:
        if x.ndim != 3:
            raise ValueError("region cropping needs (F_h', F_w', n_c) input")
        r0, c0, rh, rw = region
        if (r0 < 0 or c0 < 0 or rh < 0 or rw < 0
                or r0 + rh > x.shape[0] or c0 + rw > x.shape[1]):
            raise ValueError(
                f"region {region} outside descriptor grid {x.shape[:2]}")
        x = x[r0:r0 + rh, c0:c0 + rw]
        gamma = gamma[r0:r0 + rh, c0:c0 + rw]
    return x.reshape(-1, x.shape[-1]), gamma.reshape(-1, gamma.shape[-1])


def accumulate(acc, x, gamma, region=None):
    """Add descriptors (optionally restricted to a spatial region).

    ``x`` is (..., n_c) with posteriors ``gamma`` of matching leading
    shape; returns a new accumulator, leaving ``acc`` untouched.
    """
    fx, fg = _region_fibers(x, gamma, region)
    if fg.shape[1] != acc.s0.shape[0]:
        raise ValueError(
            f"posterior components {fg.shape[1]} != accumulator K "
            f"{acc.s0.shape[0]}")
    if fx.shape[1] != acc.s1.shape[1]:
        raise ValueError(
            f"descriptor dim {fx.shape[1]} != accumulator n_c {acc.s1.shape[1]}")
    return FvAccumulator(
        acc.s0 + fg.sum(axis=0),
        acc.s1 + fg.T @ fx,
        acc.s2 + fg.T @ (fx * fx),
        acc.count + fx.shape[0])


def merge(a, b):
    """Fieldwise sum of two accumulators over the same mixture."""
    if a.s1.shape != b.s1.shape:
        raise ValueError(
            f"accumulator shapes differ: {a.s1.shape} vs {b.s1.shape}")
    return FvAccumulator(a.s0 + b.s0, a.s1 + b.s1, a.s2 + b.s2,
                         a.count + b.count)


def fv_from_stats(acc, params):
    """Unnormalized Fisher vector from accumulated statistics."""
    w = mixture_weights(params.alpha)
    sigma = np.exp(0.5 * params.log_vars)
    var = np.exp(params.log_vars)
    sqw = np.sqrt(w)
    t = acc.count

    g_w = (acc.s0 - t * w) / sqw
    g_mu = (acc.s1 - params.means * acc.s0[:, None]) / (sqw[:, None] * sigma)
    g_sigma = (acc.s2 - 2.0 * params.means * acc.s1
               + (params.means ** 2 - var) * acc.s0[:, None])
    g_sigma /= np.sqrt(2.0 * w)[:, None] * var
    return FisherVector(
        np.concatenate([g_w, g_mu.ravel(), g_sigma.ravel()]), normalized=False)


def power_normalize(v):
    """Elementwise signed square root."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.sqrt(np.abs(v))


def power_normalize_backward(upstream, v):
    # smoothed: the true derivative 1/(2 sqrt|v|) diverges at 0
    v = np.asarray(v, dtype=np.float64)
    return upstream / (2.0 * np.sqrt(np.abs(v) + POWER_GRAD_EPS))


def l2_normalize(v, eps=L2_EPS):
    """v / max(||v||, eps); the zero vector stays zero."""
    v = np.asarray(v, dtype=np.float64)
    return v / max(np.linalg.norm(v), eps)


def l2_normalize_backward(upstream, v, eps=L2_EPS):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= eps:
        return upstream / eps
    unit = v / norm
    return (upstream - unit * (unit @ upstream)) / norm


def normalize_fv(fv):
    """Power then L2 normalization; an all-zero vector keeps its raw flag."""
    values = l2_normalize(power_normalize(fv.values))
    return FisherVector(values, normalized=bool(np.linalg.norm(values) > 0.0))


def _split_blocks(values, k, n_dims):
    a = values[:k]
    b = values[k:k + k * n_dims].reshape(k, n_dims)
    c = values[k + k * n_dims:].reshape(k, n_dims)
    return a, b, c


def fv_stats_backward(upstream, acc, params):
    """Adjoints of :func:`fv_from_stats`.

    Returns gradients for the statistics (s0, s1, s2) and the direct
    parameter gradients (logits, means, log-variances) with the statistics
    held fixed; the dependence of the statistics on the parameters through
    the posteriors is handled separately by :func:`fv_backward`.
    """
    k, n_dims = params.means.shape
    a, b, c = _split_blocks(np.asarray(upstream, dtype=np.float64), k, n_dims)

    w = mixture_weights(params.alpha)
    sigma = np.exp(0.5 * params.log_vars)
    var = np.exp(params.log_vars)
    sqw = np.sqrt(w)
    s2w = np.sqrt(2.0 * w)
    mu = params.means
    t = acc.count

    g_mu_vec = (acc.s1 - mu * acc.s0[:, None]) / (sqw[:, None] * sigma)
    g_sigma_vec = (acc.s2 - 2.0 * mu * acc.s1
                   + (mu ** 2 - var) * acc.s0[:, None]) / (s2w[:, None] * var)

    grad_s0 = (a / sqw
               - (b * mu / sigma).sum(axis=1) / sqw
               + (c * (mu ** 2 - var) / var).sum(axis=1) / s2w)
    grad_s1 = b / (sqw[:, None] * sigma) - 2.0 * c * mu / (s2w[:, None] * var)
    grad_s2 = c / (s2w[:, None] * var)

    dw = (a * (-0.5 * acc.s0 / w ** 1.5 - 0.5 * t / sqw)
          + (b * (-0.5 * g_mu_vec / w[:, None])).sum(axis=1)
          + (c * (-0.5 * g_sigma_vec / w[:, None])).sum(axis=1))
    grad_alpha = w * (dw - (dw * w).sum())

    grad_means = (b * (-acc.s0[:, None] / (sqw[:, None] * sigma))
                  + c * (-2.0 * acc.s1 + 2.0 * mu * acc.s0[:, None])
                  / (s2w[:, None] * var))

    dsigma = (b * (-g_mu_vec / sigma)
              + c * (-2.0 * acc.s0[:, None] / (s2w[:, None] * sigma))
              - 2.0 * c * g_sigma_vec / sigma)
    grad_log_vars = 0.5 * sigma * dsigma
    return grad_s0, grad_s1, grad_s2, grad_alpha, grad_means, grad_log_vars


def stats_descriptor_backward(grad_s0, grad_s1, grad_s2, fibers, gamma):
    """Adjoints of the statistic sums for one batch of descriptors.

    Returns the gradient with respect to the posteriors and the direct
    gradient with respect to the descriptors (through s1 and s2).
    """
    grad_gamma = (grad_s0[None, :] + fibers @ grad_s1.T
                  + (fibers * fibers) @ grad_s2.T)
    grad_x = gamma @ grad_s1 + 2.0 * fibers * (gamma @ grad_s2)
    return grad_gamma, grad_x


@dataclass
class FvChainCache:
    fiber_batches: list
    gammas: list
    acc: FvAccumulator
    unnormalized: np.ndarray
    powered: np.ndarray
    power: bool = True


def fv_forward(fiber_batches, params, power=True):
    """Normalized Fisher vector of a sequence of (T_i, n_c) fiber batches.

    Returns the vector plus the cache needed by :func:`fv_backward`.
    ``power=False`` skips the signed square root (gradient-check hook for
    isolating the smoothed derivative); the default is the full chain.
    """
    acc = FvAccumulator.empty(params.k, params.n_dims)
    gammas = []
    batches = []
    for fibers in fiber_batches:
        fibers = np.asarray(fibers, dtype=np.float64).reshape(-1, params.n_dims)
        gamma = posteriors(fibers, params)
        acc = accumulate(acc, fibers, gamma)
        batches.append(fibers)
        gammas.append(gamma)
    unnormalized = fv_from_stats(acc, params).values
    powered = power_normalize(unnormalized) if power else unnormalized
    values = l2_normalize(powered)
    fv = FisherVector(values, normalized=bool(np.linalg.norm(values) > 0.0))
    return fv, FvChainCache(batches, gammas, acc, unnormalized, powered, power)


def fv_backward(upstream, cache, params):
    """Gradient of a scalar loss through the normalized Fisher vector.

    ``upstream`` is the loss gradient at the normalized vector.  Returns
    per-batch descriptor gradients and the total parameter gradients,
    combining the direct terms with the paths through the posteriors.
    """
    g_powered = l2_normalize_backward(upstream, cache.powered)
    if cache.power:
        g_unnorm = power_normalize_backward(g_powered, cache.unnormalized)
    else:
        g_unnorm = g_powered
    grad_s0, grad_s1, grad_s2, grad_alpha, grad_means, grad_log_vars = \
        fv_stats_backward(g_unnorm, cache.acc, params)

    grads_x = []
    for fibers, gamma in zip(cache.fiber_batches, cache.gammas):
        grad_gamma, grad_x_direct = stats_descriptor_backward(
            grad_s0, grad_s1, grad_s2, fibers, gamma)
        grad_x_post, d_alpha, d_means, d_log_vars = posteriors_backward(
            grad_gamma, fibers, params, gamma=gamma)
        grads_x.append(grad_x_direct + grad_x_post)
        grad_alpha = grad_alpha + d_alpha
        grad_means = grad_means + d_means
        grad_log_vars = grad_log_vars + d_log_vars
    return grads_x, grad_alpha, grad_means, grad_log_vars
