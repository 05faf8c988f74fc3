"""Diagonal-covariance Gaussian mixture layer.

Component weights are parameterized through internal logits (softmax keeps
them positive and normalized) and variances through log-variances, so
gradient updates can never leave the valid parameter region.  The forward
pass of the layer maps each channel fiber to its vector of component
posteriors, computed entirely in the log domain.  EM fitting is used only
for unsupervised initialization.
"""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
EMPTY_COMPONENT_EPS = 1e-10
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmParams:
    """Weight logits (K,), means (K, n_c), log-variances (K, n_c)."""
    alpha: np.ndarray
    means: np.ndarray
    log_vars: np.ndarray

    @property
    def k(self):
        return self.alpha.shape[0]

    @property
    def n_dims(self):
        return self.means.shape[1]


def mixture_weights(alpha):
    """Softmax of the internal logits, stabilized by max subtraction."""
    alpha = np.asarray(alpha, dtype=np.float64)
    shifted = alpha - alpha.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_component_density(x, k, params):
    """Log density of component ``k`` at x ((n_c,) vector or (T, n_c) batch)."""
    x = np.asarray(x, dtype=np.float64)
    mu = params.means[k]
    lv = params.log_vars[k]
    diff = x - mu
    quad = (diff * diff * np.exp(-lv)).sum(axis=-1)
    return -0.5 * (params.n_dims * LOG_2PI + lv.sum() + quad)


def _log_densities(x, params):
    # x (T, n_c) -> (T, K)
    diff = x[:, None, :] - params.means[None, :, :]
    quad = (diff * diff * np.exp(-params.log_vars)[None, :, :]).sum(axis=2)
    const = -0.5 * (params.n_dims * LOG_2PI + params.log_vars.sum(axis=1))
    return const[None, :] - 0.5 * quad


def _fiber_view(x, n_dims, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n_dims:
        raise ValueError(f"{name}: last axis {x.shape[-1]} != n_c {n_dims}")
    return x.reshape(-1, n_dims), x.shape[:-1]


def posteriors(x, params):
    """Component responsibilities per fiber, via log-sum-exp.

    Accepts an (n_c,) vector, a (T, n_c) batch, or an (F_h', F_w', n_c)
    tensor; the K axis replaces the n_c axis in the result.  Every output
    fiber is nonnegative and sums to 1.
    """
    fibers, lead = _fiber_view(x, params.n_dims, "posteriors")
    logits = params.alpha[None, :] + _log_densities(fibers, params)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    gamma = e / e.sum(axis=1, keepdims=True)
    return gamma.reshape(lead + (params.k,))


def average_log_likelihood(x, params):
    """Mean per-sample log-likelihood of (T, n_c) data under the mixture."""
    fibers, _ = _fiber_view(x, params.n_dims, "log_likelihood")
    log_w = params.alpha - _logsumexp(params.alpha)
    logits = log_w[None, :] + _log_densities(fibers, params)
    return float(np.mean(_logsumexp(logits, axis=1)))


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out.squeeze(axis) if axis is not None else out.item()


def _kmeanspp_centers(x, k, rng):
    n = x.shape[0]
    sub = x[rng.choice(n, size=min(n, 2048), replace=False)]
    centers = np.empty((k, x.shape[1]))
    centers[0] = sub[rng.integers(len(sub))]
    d2 = ((sub - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(len(sub))
        else:
            idx = rng.choice(len(sub), p=d2 / total)
        centers[j] = sub[idx]
        d2 = np.minimum(d2, ((sub - centers[j]) ** 2).sum(axis=1))
    return centers


def _alpha_from_weights(w):
    # gauge: max logit pinned at 0
    logw = np.log(w)
    return logw - logw.max()


def em_fit(samples, k, iters=100, tol=1e-6, seed=0, ll_out=None):
    """Fit a K-component diagonal mixture by expectation-maximization.

    Initialization is k-means++ seeding on a subsample followed by one
    hard-assignment pass.  Stops after ``iters`` iterations or when the
    mean log-likelihood gain drops below ``tol``.  Components that lose
    all responsibility are re-seeded at a random sample plus jitter.
    If ``ll_out`` is a list, the per-iteration mean log-likelihood is
    appended to it.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (N, n_c) samples, got {x.shape}")
    n, n_dims = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least {k} samples, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))

    centers = _kmeanspp_centers(x, k, rng)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    means = np.empty((k, n_dims))
    variances = np.empty((k, n_dims))
    counts = np.empty(k)
    for j in range(k):
        members = x[assign == j]
        if len(members) == 0:
            means[j] = x[rng.integers(n)] + 1e-3 * rng.normal(size=n_dims)
            variances[j] = global_var
            counts[j] = 1.0
        else:
            means[j] = members.mean(axis=0)
            variances[j] = np.maximum(members.var(axis=0), VAR_FLOOR)
            counts[j] = len(members)
    weights = counts / counts.sum()
    params = GmmParams(_alpha_from_weights(weights), means,
                       np.log(np.maximum(variances, VAR_FLOOR)))

    prev_ll = -np.inf
    for _ in range(iters):
        log_w = params.alpha - _logsumexp(params.alpha)
        logits = log_w[None, :] + _log_densities(x, params)
        ll = float(np.mean(_logsumexp(logits, axis=1)))
        if ll_out is not None:
            ll_out.append(ll)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        gamma = e / e.sum(axis=1, keepdims=True)

        nk = gamma.sum(axis=0)
        empty = nk < EMPTY_COMPONENT_EPS
        if empty.any():
            for j in np.flatnonzero(empty):
                log.warning("reinitializing empty mixture component %d", j)
                params.means[j] = x[rng.integers(n)] + 1e-3 * rng.normal(size=n_dims)
                params.log_vars[j] = np.log(global_var)
            weights = np.maximum(nk, 1.0) / np.maximum(nk, 1.0).sum()
            params.alpha = _alpha_from_weights(weights)
            prev_ll = -np.inf
            continue

        weights = nk / n
        means = gamma.T @ x / nk[:, None]
        second = gamma.T @ (x * x) / nk[:, None]
        variances = np.maximum(second - means * means, VAR_FLOOR)
        params = GmmParams(_alpha_from_weights(weights), means, np.log(variances))

        if ll - prev_ll < tol:
            break
        prev_ll = ll
    return params


def posteriors_backward(upstream, x, params, gamma=None):
    """Adjoints of :func:`posteriors`.

    ``upstream`` has the posterior tensor's shape; returns gradients for
    the input fibers, the weight logits, the means, and the log-variances.
    ``gamma`` may pass the cached forward output to avoid recomputing it.
    """
    fibers, lead = _fiber_view(x, params.n_dims, "posteriors_backward")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != lead + (params.k,):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match posteriors "
            f"{lead + (params.k,)}")
    g = upstream.reshape(-1, params.k)
    if gamma is None:
        gamma = posteriors(fibers, params)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1, params.k)

    # softmax adjoint over the logits z_k = alpha_k + log u_k(x)
    s = gamma * (g - (g * gamma).sum(axis=1, keepdims=True))

    prec = np.exp(-params.log_vars)                      # (K, n_c)
    sk = s.sum(axis=0)                                   # (K,)
    sx = s.T @ fibers                                    # (K, n_c)
    sx2 = s.T @ (fibers * fibers)                        # (K, n_c)

    # d z_k / d x_i = -(x_i - mu_ki) / var_ki
    grad_x = -(fibers * (s @ prec) - s @ (prec * params.means))
    grad_x = grad_x.reshape(lead + (params.n_dims,))

    grad_alpha = sk
    grad_means = prec * (sx - params.means * sk[:, None])
    centered_sq = sx2 - 2.0 * params.means * sx + params.means ** 2 * sk[:, None]
    grad_log_vars = 0.5 * (prec * centered_sq - sk[:, None])
    return grad_x, grad_alpha, grad_means, grad_log_vars
