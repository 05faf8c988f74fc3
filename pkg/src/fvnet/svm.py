"""One-vs-all linear classifiers trained with a squared hinge loss.

The per-sample cost is reg_lambda/2 * ||W||^2 plus the sum over classes of
max(0, 1 - y_j s_j)^2, with labels coded as a +-1 vector holding exactly
one +1.  reg_lambda follows the 2/(N*C) convention with N the training
set size; the bias is not regularized.  The squared hinge is smooth at
the kink, so the gradient is well defined everywhere.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_C = 100.0


@dataclass
class SvmParams:
    weights: np.ndarray   # (m, d_fv)
    bias: np.ndarray      # (m,)
    c: float = DEFAULT_C
    reg_lambda: float = 0.0

    @property
    def num_classes(self):
        return self.weights.shape[0]


def reg_lambda_for(n_samples, c):
    return 2.0 / (n_samples * c)


def encode_label(label, num_classes):
    """+-1 vector with a single +1 at ``label``."""
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    y = -np.ones(num_classes)
    y[label] = 1.0
    return y


def _check_label_vector(y, num_classes):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (num_classes,):
        raise ValueError(f"label vector shape {y.shape} != ({num_classes},)")
    if not (np.all(np.abs(y) == 1.0) and np.sum(y == 1.0) == 1):
        raise ValueError("label vector must be +-1 coded with exactly one +1")
    return y


def scores(x, params):
    """Affine class scores x @ W.T + b for a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights.shape[1]:
        raise ValueError(
            f"input dim {x.shape[-1]} != weight columns {params.weights.shape[1]}")
    return x @ params.weights.T + params.bias


def loss(x, y, params):
    """Squared hinge cost of one sample."""
    y = _check_label_vector(y, params.num_classes)
    s = scores(x, params)
    hinge = np.maximum(0.0, 1.0 - y * s)
    reg = 0.5 * params.reg_lambda * float(np.sum(params.weights ** 2))
    return reg + float(np.sum(hinge * hinge))


def loss_backward(x, y, params):
    """Gradients of :func:`loss` for the input, weights, and bias."""
    x = np.asarray(x, dtype=np.float64)
    y = _check_label_vector(y, params.num_classes)
    s = scores(x, params)
    g_s = -2.0 * np.maximum(0.0, 1.0 - y * s) * y
    grad_x = g_s @ params.weights
    grad_w = np.outer(g_s, x) + params.reg_lambda * params.weights
    grad_b = g_s
    return grad_x, grad_w, grad_b


def predict(score_vectors):
    """Class index of the averaged scores; ties go to the lowest index."""
    if len(score_vectors) == 0:
        raise ValueError("predict needs at least one score vector")
    mean = np.mean(np.asarray(score_vectors, dtype=np.float64), axis=0)
    return int(np.argmax(mean))


def train_svm(features, labels, num_classes, c=DEFAULT_C, epochs=200,
              lr=0.05, momentum=0.9, plateau_tol=1e-9):
    """Initialization-phase training: full-batch gradient descent.

    Minimizes the mean per-sample cost over precomputed feature vectors
    for ``epochs`` epochs, stopping early when the objective plateaus.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = x.shape
    reg = reg_lambda_for(n, c)
    params = SvmParams(np.zeros((num_classes, d)), np.zeros(num_classes),
                       c=c, reg_lambda=reg)
    y = np.stack([encode_label(int(l), num_classes) for l in labels])

    vel_w = np.zeros_like(params.weights)
    vel_b = np.zeros_like(params.bias)
    prev = np.inf
    for _ in range(epochs):
        s = x @ params.weights.T + params.bias            # (N, m)
        hinge = np.maximum(0.0, 1.0 - y * s)
        objective = (0.5 * reg * np.sum(params.weights ** 2)
                     + np.sum(hinge * hinge) / n)
        g_s = -2.0 * hinge * y / n
        grad_w = g_s.T @ x + reg * params.weights
        grad_b = g_s.sum(axis=0)
        vel_w = momentum * vel_w - lr * grad_w
        vel_b = momentum * vel_b - lr * grad_b
        params.weights = params.weights + vel_w
        params.bias = params.bias + vel_b
        if abs(prev - objective) < plateau_tol * max(abs(prev), 1.0):
            break
        prev = objective
    return params
