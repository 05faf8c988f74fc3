"""Two-phase training: unsupervised layer-wise init, then end-to-end SGD.

Initialization samples pooled descriptors from random aligned subvolumes,
fits the projection by PCA and the mixture by EM, encodes every training
video as a normalized Fisher vector, and trains the classifier on those.
Finetuning then backpropagates the squared hinge loss through every layer,
taking one optimizer step per video (SGD with momentum or AdaGrad), with
inverted dropout on the extractor output and a per-epoch learning-rate
decay.

The module also houses the central-finite-difference gradient checker
used to validate every backward operation.
"""

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import fisher, gmm, pooling, svm
from .data import load_video
from .features import (ExtractorConfig, extract, extract_backward,
                       extract_with_cache, init_extractor, lcn_video)
from .gmm import GmmParams, em_fit
from .pipeline import ModelBundle, classify_video, save_bundle, window_starts
from .pooling import PoolConfig
from .projection import ProjectionParams, pca_fit, project, project_backward
from .svm import SvmParams, encode_label, train_svm

LOG_VAR_FLOOR = float(np.log(gmm.VAR_FLOOR))


class NonFiniteError(RuntimeError):
    """A layer produced NaN/Inf during training."""

    def __init__(self, layer):
        super().__init__(f"non-finite values in layer output: {layer}")
        self.layer = layer


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)
    return arr


@dataclass
class InitConfig:
    subvolumes_per_video: int
    pca_samples_per_video: int
    n_components: int          # projected descriptor dimensionality
    mixture_components: int    # mixture size
    svm_c: float
    seed: int
    em_iters: int = 100
    em_tol: float = 1e-8
    svm_epochs: int = 200
    svm_lr: float = 0.05

    def __post_init__(self):
        if self.subvolumes_per_video < 1 or self.pca_samples_per_video < 1:
            raise ValueError("per-video sample counts must be positive")
        if self.pca_samples_per_video > self.subvolumes_per_video:
            raise ValueError("PCA subset cannot exceed sampled subvolumes")


@dataclass
class FinetuneConfig:
    optimizer: str             # "sgd_momentum" or "adagrad"
    learning_rate: float
    momentum: float
    lr_decay: float
    dropout_p: float
    epochs: int
    spatial_stride: int        # pooling-grid stride during training passes
    temporal_stride: int
    seed: int

    def __post_init__(self):
        if self.optimizer not in ("sgd_momentum", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.spatial_stride < 1 or self.temporal_stride < 1:
            raise ValueError("strides must be >= 1")


def sgd_momentum_step(param, grad, velocity, lr, momentum):
    """v' = momentum*v - lr*grad; param' = param + v'."""
    velocity = momentum * velocity - lr * grad
    return param + velocity, velocity


def adagrad_step(param, grad, accum, lr, eps=1e-8):
    """accum' = accum + grad^2; param' = param - lr*grad/(sqrt(accum') + eps)."""
    accum = accum + grad * grad
    return param - lr * grad / (np.sqrt(accum) + eps), accum


def dropout_forward(x, p, rng, training=True):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    ``rng`` is a numpy Generator (or an int seed).  At inference the input
    passes through unchanged and the mask is all ones.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    if not training or p == 0.0:
        return x, np.ones_like(x)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(rng))
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


# ---------------------------------------------------------------------------
# per-video forward/backward through the whole network

@dataclass
class VideoCache:
    maps: np.ndarray
    extract_cache: object
    dropout_mask: np.ndarray
    pool_cfg: PoolConfig
    starts: list
    pooled: list
    fv_cache: object
    fv_values: np.ndarray
    label_vector: np.ndarray


def video_forward(bundle, video, label, temporal_stride, pool_cfg=None,
                  dropout_p=0.0, rng=None, training=False, power=True):
    """Loss and scores of one video, caching everything backward needs."""
    video = np.asarray(video, dtype=np.float64)
    pool_cfg = pool_cfg or bundle.pool
    if bundle.extractor is not None:
        frames = lcn_video(video)
        raw_maps, ext_cache = extract_with_cache(frames, bundle.extractor)
        _check_finite("feature extraction", raw_maps)
    else:
        raw_maps, ext_cache = video, None
    maps, mask = dropout_forward(raw_maps, dropout_p, rng, training=training)

    starts = list(window_starts(maps.shape[0], pool_cfg.window_frames,
                                temporal_stride))
    pooled = []
    fibers = []
    n_c = bundle.gmm.n_dims
    for start in starts:
        block = pooling.pool(maps[start:start + pool_cfg.window_frames],
                             pool_cfg)
        _check_finite("spatio-temporal pooling", block)
        projected = project(block, bundle.projection)
        _check_finite("dimensionality reduction", projected)
        pooled.append(block)
        fibers.append(projected.reshape(-1, n_c))

    fv, fv_cache = fisher.fv_forward(fibers, bundle.gmm, power=power)
    _check_finite("fisher vector", fv.values)
    y = encode_label(label, bundle.svm.num_classes)
    score_vec = svm.scores(fv.values, bundle.svm)
    _check_finite("classifier scores", score_vec)
    loss = svm.loss(fv.values, y, bundle.svm)
    _check_finite("loss", np.asarray(loss))
    cache = VideoCache(maps, ext_cache, mask, pool_cfg, starts, pooled,
                       fv_cache, fv.values, y)
    return loss, score_vec, cache


def video_backward(bundle, cache):
    """Gradients of the cached video loss for every trainable tensor."""
    grad_fv, grad_w, grad_b = svm.loss_backward(cache.fv_values,
                                                cache.label_vector, bundle.svm)
    grads_fibers, grad_alpha, grad_means, grad_log_vars = fisher.fv_backward(
        grad_fv, cache.fv_cache, bundle.gmm)

    pool_cfg = cache.pool_cfg
    grid_h, grid_w = pooling.output_dims(cache.maps.shape[1],
                                         cache.maps.shape[2], pool_cfg)
    n_c = bundle.gmm.n_dims
    grad_maps = np.zeros_like(cache.maps)
    grad_mean = np.zeros_like(bundle.projection.mean)
    grad_axes = np.zeros_like(bundle.projection.axes)
    for start, block, g_fib in zip(cache.starts, cache.pooled, grads_fibers):
        g_proj = g_fib.reshape(grid_h, grid_w, n_c)
        g_block, g_mu, g_ax = project_backward(g_proj, block,
                                               bundle.projection)
        grad_mean += g_mu
        grad_axes += g_ax
        grad_maps[start:start + pool_cfg.window_frames] += pooling.pool_backward(
            g_block, pool_cfg, (pool_cfg.window_frames,) + cache.maps.shape[1:])

    grads = {
        "projection.mean": grad_mean,
        "projection.axes": grad_axes,
        "gmm.alpha": grad_alpha,
        "gmm.means": grad_means,
        "gmm.log_vars": grad_log_vars,
        "svm.weights": grad_w,
        "svm.bias": grad_b,
    }
    grad_maps *= cache.dropout_mask
    if bundle.extractor is not None:
        _, grad_filters, grad_biases = extract_backward(
            grad_maps, cache.extract_cache, bundle.extractor)
        grads["extractor.filters"] = grad_filters
        grads["extractor.biases"] = grad_biases
    return grads


# ---------------------------------------------------------------------------
# phase 1: unsupervised initialization

def sample_descriptors(maps, pool_cfg, count, rng):
    """Pooled descriptors at random aligned (window, grid position) picks."""
    n_frames = maps.shape[0]
    grid_h, grid_w = pooling.output_dims(maps.shape[1], maps.shape[2],
                                         pool_cfg)
    max_start = n_frames - pool_cfg.window_frames
    if max_start < 0:
        raise ValueError("video shorter than the pooling window")
    pooled_at = {}
    out = np.empty((count, pool_cfg.descriptor_dim(maps.shape[3])))
    for i in range(count):
        start = int(rng.integers(0, max_start + 1))
        if start not in pooled_at:
            pooled_at[start] = pooling.pool(
                maps[start:start + pool_cfg.window_frames], pool_cfg)
        gi = int(rng.integers(0, grid_h))
        gj = int(rng.integers(0, grid_w))
        out[i] = pooled_at[start][gi, gj]
    return out


def init_pipeline(manifest, data_dir, cfg, pool_cfg, extractor_cfg=None,
                  temporal_stride=None):
    """Unsupervised initialization of every layer, ending with the SVM fit.

    ``extractor_cfg=None`` builds a bundle for precomputed feature maps.
    Deterministic for a fixed config: the same seed yields a bit-identical
    bundle.
    """
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    temporal_stride = temporal_stride or pool_cfg.window_frames
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    extractor = (init_extractor(extractor_cfg, cfg.seed)
                 if extractor_cfg is not None else None)

    all_descriptors = []
    pca_descriptors = []
    labels = []
    map_cache = []
    for entry in manifest.entries:
        sample = load_video(data_dir, entry)
        if extractor is not None:
            maps = extract_with_cache(lcn_video(sample.video), extractor)[0]
        else:
            maps = sample.video
        map_cache.append(maps)
        labels.append(sample.label)
        descs = sample_descriptors(maps, pool_cfg, cfg.subvolumes_per_video,
                                   rng)
        all_descriptors.append(descs)
        subset = rng.choice(len(descs), size=cfg.pca_samples_per_video,
                            replace=False)
        pca_descriptors.append(descs[subset])

    projection = pca_fit(np.concatenate(pca_descriptors), cfg.n_components)
    projected = project(np.concatenate(all_descriptors), projection)
    mixture = em_fit(projected, cfg.mixture_components, iters=cfg.em_iters,
                     tol=cfg.em_tol, seed=cfg.seed)

    placeholder = SvmParams(
        np.zeros((manifest.num_classes,
                  fisher.fisher_vector_dim(cfg.mixture_components,
                                           cfg.n_components))),
        np.zeros(manifest.num_classes), c=cfg.svm_c)
    bundle = ModelBundle(extractor, pool_cfg, projection, mixture,
                         placeholder).validate()

    # encode each training video from its cached maps (full-frame FV)
    encoded = np.empty((len(map_cache), placeholder.weights.shape[1]))
    for i, maps in enumerate(map_cache):
        fibers = []
        for start in window_starts(maps.shape[0], pool_cfg.window_frames,
                                   temporal_stride):
            block = pooling.pool(maps[start:start + pool_cfg.window_frames],
                                 pool_cfg)
            fibers.append(project(block, projection).reshape(
                -1, cfg.n_components))
        fv, _ = fisher.fv_forward(fibers, mixture)
        encoded[i] = fv.values

    bundle.svm = train_svm(encoded, np.asarray(labels), manifest.num_classes,
                           c=cfg.svm_c, epochs=cfg.svm_epochs, lr=cfg.svm_lr)
    return bundle.validate()


# ---------------------------------------------------------------------------
# phase 2: end-to-end finetuning

def _apply_updates(bundle, grads, cfg, state, lr):
    params = bundle.trainable_parameters()
    for name, param in params.items():
        grad = grads[name]
        slot = state.setdefault(name, np.zeros_like(param))
        if cfg.optimizer == "sgd_momentum":
            new, slot_new = sgd_momentum_step(param, grad, slot, lr,
                                              cfg.momentum)
        else:
            new, slot_new = adagrad_step(param, grad, slot, lr)
        state[name] = slot_new
        _assign_parameter(bundle, name, new)
    bundle.gmm.log_vars = np.maximum(bundle.gmm.log_vars, LOG_VAR_FLOOR)


def _assign_parameter(bundle, name, value):
    owner, attr = name.split(".")
    target = {"extractor": bundle.extractor, "projection": bundle.projection,
              "gmm": bundle.gmm, "svm": bundle.svm}[owner]
    setattr(target, attr, value)


def evaluate(bundle, manifest, data_dir, temporal_stride):
    """Mean loss and accuracy of the bundle over a manifest."""
    total_loss = 0.0
    correct = 0
    for entry in manifest.entries:
        sample = load_video(data_dir, entry)
        result = classify_video(sample.video, bundle, temporal_stride)
        y = encode_label(sample.label, bundle.svm.num_classes)
        total_loss += svm.loss(result.crop_fvs[0].values, y, bundle.svm)
        correct += int(result.label == sample.label)
    n = len(manifest)
    return total_loss / n, correct / n


def finetune(bundle, manifest, data_dir, cfg, eval_manifest=None,
             eval_data_dir=None, checkpoint_dir=None):
    """End-to-end training; returns the updated bundle and per-epoch metrics.

    Metric rows are (epoch, split, loss, accuracy); a ``test`` row is added
    per epoch when an evaluation manifest is given.  The learning rate is
    multiplied by ``cfg.lr_decay`` after each epoch.  A zero learning rate
    runs the same code path as a null update and still emits metrics.
    ``checkpoint_dir`` saves a bundle snapshot after every epoch.
    """
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = bundle.optimizer_state
    pool_cfg = dataclasses.replace(bundle.pool,
                                   spatial_stride=cfg.spatial_stride)
    metrics = []
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(manifest.entries))
        epoch_loss = 0.0
        correct = 0
        for idx in order:
            sample = load_video(data_dir, manifest.entries[idx])
            loss, score_vec, cache = video_forward(
                bundle, sample.video, sample.label, cfg.temporal_stride,
                pool_cfg=pool_cfg, dropout_p=cfg.dropout_p, rng=rng,
                training=True)
            grads = video_backward(bundle, cache)
            _apply_updates(bundle, grads, cfg, state, lr)
            epoch_loss += loss
            correct += int(np.argmax(score_vec) == sample.label)
        metrics.append((epoch, "train", epoch_loss / len(manifest),
                        correct / len(manifest)))
        if eval_manifest is not None:
            test_loss, test_acc = evaluate(
                bundle, eval_manifest, eval_data_dir or data_dir,
                cfg.temporal_stride)
            metrics.append((epoch, "test", test_loss, test_acc))
        if checkpoint_dir is not None:
            save_bundle(os.path.join(checkpoint_dir, f"epoch_{epoch:03d}"),
                        bundle)
        lr *= cfg.lr_decay
    return bundle, metrics


# ---------------------------------------------------------------------------
# gradient verification

GRAD_CHECK_TOLERANCES = {
    "extract": 1e-4,
    "pool": 1e-6,
    "project": 1e-9,
    "posteriors": 1e-4,
    "fv": 1e-3,
    "svm": 1e-6,
    "full_no_power": 1e-4,
    "full": 1e-3,
}


@dataclass
class GradCheckResult:
    layer: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _central_diff_check(objective, tensors, analytic, step):
    """Max relative error of analytic grads vs central differences.

    ``tensors`` maps names to the live arrays the objective reads;
    ``analytic`` maps the same names to their gradient arrays.
    """
    worst = 0.0
    for name, arr in tensors.items():
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = objective()
            flat[i] = orig - step
            f_minus = objective()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(gflat[i], numeric))
    return worst


def _rng_for(seed, salt):
    return np.random.Generator(np.random.PCG64([seed, salt]))


def _probe_extract(seed, step):
    from .features import ConvExtractorParams
    for attempt in range(64):
        rng = _rng_for(seed, 100 + attempt)
        frames = rng.normal(size=(1, 8, 8, 1))
        params = ConvExtractorParams(rng.normal(0.0, 0.5, size=(2, 3, 3, 1)),
                                     rng.normal(0.0, 0.1, size=2), 2, 2)
        out, cache = extract_with_cache(frames, params)
        if np.min(np.abs(cache.pre_activation)) > 1e-3:
            break
    weights = rng.normal(size=out.shape)

    def objective():
        return float(np.sum(weights * extract(frames, params)))

    _, cache = extract_with_cache(frames, params)
    g_frames, g_filters, g_biases = extract_backward(weights, cache, params)
    tensors = {"frames": frames, "filters": params.filters,
               "biases": params.biases}
    analytic = {"frames": g_frames, "filters": g_filters, "biases": g_biases}
    return _central_diff_check(objective, tensors, analytic, step)


def _probe_pool(seed, step):
    rng = _rng_for(seed, 200)
    cfg = PoolConfig(n_sigma=2, n_tau=2, cell_h=2, cell_w=2, window_frames=4,
                     spatial_stride=3)
    maps = rng.normal(size=(4, 9, 9, 2))
    weights = rng.normal(size=pooling.pool(maps, cfg).shape)

    def objective():
        return float(np.sum(weights * pooling.pool(maps, cfg)))

    analytic = pooling.pool_backward(weights, cfg, maps.shape)
    return _central_diff_check(objective, {"maps": maps},
                               {"maps": analytic}, step)


def _probe_project(seed, step):
    rng = _rng_for(seed, 300)
    params = ProjectionParams(rng.normal(size=8), rng.normal(size=(3, 8)))
    x = rng.normal(size=(5, 8))
    weights = rng.normal(size=(5, 3))

    def objective():
        return float(np.sum(weights * project(x, params)))

    g_x, g_mean, g_axes = project_backward(weights, x, params)
    tensors = {"x": x, "mean": params.mean, "axes": params.axes}
    analytic = {"x": g_x, "mean": g_mean, "axes": g_axes}
    # exactly affine: differences carry no truncation error, so a larger
    # step only suppresses float cancellation
    return _central_diff_check(objective, tensors, analytic, max(step, 3e-4))


def _random_gmm(rng, k, n_dims):
    return GmmParams(rng.normal(size=k),
                     rng.normal(size=(k, n_dims)),
                     rng.normal(0.0, 0.3, size=(k, n_dims)))


def _probe_posteriors(seed, step):
    rng = _rng_for(seed, 400)
    params = _random_gmm(rng, 3, 4)
    x = rng.normal(size=(5, 4))
    weights = rng.normal(size=(5, 3))

    def objective():
        return float(np.sum(weights * gmm.posteriors(x, params)))

    g_x, g_alpha, g_means, g_log_vars = gmm.posteriors_backward(
        weights, x, params)
    tensors = {"x": x, "alpha": params.alpha, "means": params.means,
               "log_vars": params.log_vars}
    analytic = {"x": g_x, "alpha": g_alpha, "means": g_means,
                "log_vars": g_log_vars}
    return _central_diff_check(objective, tensors, analytic, step)


def _probe_fv(seed, step):
    for attempt in range(64):
        rng = _rng_for(seed, 500 + attempt)
        params = _random_gmm(rng, 2, 3)
        batches = [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))]
        fv, cache = fisher.fv_forward(batches, params)
        if np.min(np.abs(cache.unnormalized)) > 2e-3:
            break
    weights = rng.normal(size=fv.values.shape)

    def objective():
        out, _ = fisher.fv_forward(batches, params)
        return float(np.sum(weights * out.values))

    grads_x, g_alpha, g_means, g_log_vars = fisher.fv_backward(
        weights, cache, params)
    tensors = {"batch0": batches[0], "batch1": batches[1],
               "alpha": params.alpha, "means": params.means,
               "log_vars": params.log_vars}
    analytic = {"batch0": grads_x[0], "batch1": grads_x[1],
                "alpha": g_alpha, "means": g_means, "log_vars": g_log_vars}
    return _central_diff_check(objective, tensors, analytic, step)


def _probe_svm(seed, step):
    y = encode_label(2, 4)
    for attempt in range(64):
        rng = _rng_for(seed, 600 + attempt)
        params = SvmParams(rng.normal(size=(4, 10)), rng.normal(size=4),
                           reg_lambda=0.1)
        x = rng.normal(size=10)
        margins = 1.0 - y * svm.scores(x, params)
        # keep margins away from the hinge kink and regularizer-only
        # gradients away from zero; between kinks the loss is exactly
        # quadratic, so the slightly larger step below carries no
        # truncation error and only cuts float cancellation
        if (np.min(np.abs(margins)) > 1e-2
                and np.min(np.abs(params.weights)) > 1e-2):
            break

    def objective():
        return svm.loss(x, y, params)

    g_x, g_w, g_b = svm.loss_backward(x, y, params)
    tensors = {"x": x, "weights": params.weights, "bias": params.bias}
    analytic = {"x": g_x, "weights": g_w, "bias": g_b}
    return _central_diff_check(objective, tensors, analytic, max(step, 1e-4))


def make_probe_bundle(seed):
    """A tiny random bundle plus probe video for whole-chain checks."""
    from .features import ConvExtractorParams
    for attempt in range(64):
        rng = _rng_for(seed, 700 + attempt)
        video = rng.normal(size=(8, 10, 10, 1))
        extractor = ConvExtractorParams(
            rng.normal(0.0, 0.5, size=(2, 3, 3, 1)),
            rng.normal(0.1, 0.05, size=2), 1, 1)
        pool_cfg = PoolConfig(n_sigma=2, n_tau=3, cell_h=2, cell_w=2,
                              window_frames=6, spatial_stride=4)
        d_pool = pool_cfg.descriptor_dim(2)
        projection = ProjectionParams(
            rng.normal(0.0, 0.1, size=d_pool),
            rng.normal(0.0, 0.4, size=(3, d_pool)))
        mixture = _random_gmm(rng, 2, 3)
        classifier = SvmParams(
            rng.normal(0.0, 0.3, size=(3, fisher.fisher_vector_dim(2, 3))),
            rng.normal(size=3), reg_lambda=0.01)
        bundle = ModelBundle(extractor, pool_cfg, projection, mixture,
                             classifier).validate()
        _, _, cache = video_forward(bundle, video, 1, temporal_stride=2)
        pre = cache.extract_cache.pre_activation
        if (np.min(np.abs(pre)) > 1e-3
                and np.min(np.abs(cache.fv_cache.unnormalized)) > 2e-3):
            return bundle, video
    return bundle, video


def _probe_full(seed, step, power):
    bundle, video = make_probe_bundle(seed)

    def objective():
        loss, _, _ = video_forward(bundle, video, 1, temporal_stride=2,
                                   power=power)
        return loss

    _, _, cache = video_forward(bundle, video, 1, temporal_stride=2,
                                power=power)
    grads = video_backward(bundle, cache)
    tensors = bundle.trainable_parameters()
    return _central_diff_check(objective, tensors, grads, step)


_PROBES = {
    "extract": _probe_extract,
    "pool": _probe_pool,
    "project": _probe_project,
    "posteriors": _probe_posteriors,
    "fv": _probe_fv,
    "svm": _probe_svm,
    "full_no_power": lambda seed, step: _probe_full(seed, step, power=False),
    "full": lambda seed, step: _probe_full(seed, step, power=True),
}


def grad_check(layer="all", seed=7, step=1e-5):
    """Central-finite-difference verification of the backward operations.

    Returns a list of :class:`GradCheckResult`, one per checked layer.
    The relative error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8), maximized over every parameter and input coordinate
    of the probe.
    """
    layers = list(_PROBES) if layer == "all" else [layer]
    results = []
    for name in layers:
        if name not in _PROBES:
            raise ValueError(f"unknown gradient-check layer {name!r}")
        err = _PROBES[name](seed, step)
        results.append(GradCheckResult(name, err,
                                       GRAD_CHECK_TOLERANCES[name]))
    return results
