"""End-to-end video classification and model serialization.

A video is classified by sliding the network along the time axis: each
window of ``window_frames`` frames is turned into descriptors, their
unnormalized Fisher-vector statistics are summed across windows (per
crop), and the merged statistics are normalized, scored, and averaged.
Trailing frames that do not fill a whole window are dropped; windows may
overlap when the temporal stride is smaller than the window.

A model bundle is stored as a directory of FVNT tensor files plus a
``bundle.txt`` text header of hyperparameters, so round trips are
bit-exact.
"""

import ast
import os
from dataclasses import dataclass, field

import numpy as np

from . import fisher, gmm, pooling, svm
from .features import ConvExtractorParams, extract, lcn_video
from .gmm import GmmParams
from .pooling import PoolConfig
from .projection import ProjectionParams, project
from .svm import SvmParams
from .tensor import read_tensor, write_tensor

BUNDLE_VERSION = 1
BUNDLE_HEADER = "bundle.txt"


class BundleFormatError(ValueError):
    """Raised when a stored bundle cannot be loaded consistently."""


class DimMismatchError(ValueError):
    """Raised when layer dimensions inside a bundle do not chain up."""


@dataclass
class ModelBundle:
    """All trainable parameters plus the layer hyperparameters."""
    extractor: ConvExtractorParams | None
    pool: PoolConfig
    projection: ProjectionParams
    gmm: GmmParams
    svm: SvmParams
    version: int = BUNDLE_VERSION
    optimizer_state: dict = field(default_factory=dict)

    def feature_channels(self):
        if self.extractor is not None:
            return self.extractor.filters.shape[0]
        d_pool = self.projection.mean.shape[0]
        cells = self.pool.n_sigma ** 2 * self.pool.n_tau
        return d_pool // cells

    def validate(self):
        d = self.feature_channels()
        d_pool = self.pool.descriptor_dim(d)
        if self.projection.mean.shape[0] != d_pool:
            raise DimMismatchError(
                f"pooled descriptor dim {d_pool} != projection input "
                f"{self.projection.mean.shape[0]}")
        n_c = self.projection.axes.shape[0]
        if self.gmm.n_dims != n_c:
            raise DimMismatchError(
                f"projection output {n_c} != mixture dimensionality "
                f"{self.gmm.n_dims}")
        d_fv = fisher.fisher_vector_dim(self.gmm.k, n_c)
        if self.svm.weights.shape[1] != d_fv:
            raise DimMismatchError(
                f"fisher vector dim {d_fv} != classifier columns "
                f"{self.svm.weights.shape[1]}")
        if self.svm.bias.shape[0] != self.svm.weights.shape[0]:
            raise DimMismatchError("classifier bias/weight row mismatch")
        return self

    def trainable_parameters(self):
        """Ordered name -> array view of every trainable tensor."""
        params = {}
        if self.extractor is not None:
            params["extractor.filters"] = self.extractor.filters
            params["extractor.biases"] = self.extractor.biases
        params["projection.mean"] = self.projection.mean
        params["projection.axes"] = self.projection.axes
        params["gmm.alpha"] = self.gmm.alpha
        params["gmm.means"] = self.gmm.means
        params["gmm.log_vars"] = self.gmm.log_vars
        params["svm.weights"] = self.svm.weights
        params["svm.bias"] = self.svm.bias
        return params


@dataclass
class CropSpec:
    """Spatial rectangles (row, col, height, width) in descriptor-grid
    coordinates; the full grid is included as an implicit extra crop
    unless ``include_full`` is cleared."""
    rects: list = field(default_factory=list)
    include_full: bool = True

    def regions(self, grid_h, grid_w):
        regions = []
        if self.include_full:
            regions.append((0, 0, grid_h, grid_w))
        for r0, c0, rh, rw in self.rects:
            if r0 < 0 or c0 < 0 or r0 + rh > grid_h or c0 + rw > grid_w:
                raise ValueError(
                    f"crop {(r0, c0, rh, rw)} outside descriptor grid "
                    f"{(grid_h, grid_w)}")
            regions.append((r0, c0, rh, rw))
        if not regions:
            raise ValueError("crop spec selects no regions")
        return regions


@dataclass
class ClassifyResult:
    label: int
    crop_fvs: list
    scores: np.ndarray


def video_feature_maps(video, bundle):
    """Per-frame feature maps: LCN + extractor, or pass-through.

    A bundle without an extractor treats the input tensor as precomputed
    feature maps (its channel count must already match the pooling input).
    """
    video = np.asarray(video, dtype=np.float64)
    if bundle.extractor is None:
        if video.shape[3] != bundle.feature_channels():
            raise DimMismatchError(
                f"precomputed maps have {video.shape[3]} channels, bundle "
                f"expects {bundle.feature_channels()}")
        return video
    return extract(lcn_video(video), bundle.extractor)


def window_starts(num_frames, window, stride):
    if num_frames < window:
        raise ValueError(
            f"video has {num_frames} frames, window needs {window}")
    return range(0, num_frames - window + 1, stride)


def classify_video(video, bundle, temporal_stride, crops=None):
    """Slide the network over a video and predict its class.

    Per crop, unnormalized Fisher-vector statistics are merged across all
    time windows, normalized once, and scored; the crop scores are
    averaged for the prediction.
    """
    crops = crops if crops is not None else CropSpec()
    maps = video_feature_maps(video, bundle)
    cfg = bundle.pool
    grid_h, grid_w = pooling.output_dims(maps.shape[1], maps.shape[2], cfg)
    regions = crops.regions(grid_h, grid_w)

    k, n_c = bundle.gmm.k, bundle.gmm.n_dims
    accs = [fisher.FvAccumulator.empty(k, n_c) for _ in regions]
    for start in window_starts(maps.shape[0], cfg.window_frames,
                               temporal_stride):
        pooled = pooling.pool(maps[start:start + cfg.window_frames], cfg)
        projected = project(pooled, bundle.projection)
        gamma = gmm.posteriors(projected, bundle.gmm)
        for i, region in enumerate(regions):
            accs[i] = fisher.accumulate(accs[i], projected, gamma,
                                        region=region)

    crop_fvs = [fisher.normalize_fv(fisher.fv_from_stats(acc, bundle.gmm))
                for acc in accs]
    crop_scores = [svm.scores(fv.values, bundle.svm) for fv in crop_fvs]
    mean_scores = np.mean(crop_scores, axis=0)
    return ClassifyResult(int(np.argmax(mean_scores)), crop_fvs, mean_scores)


def count_parameters(d_pool, n_c, k, m):
    """Per-layer trainable parameter counts for a symbolic configuration."""
    projection = d_pool * (n_c + 1)
    mixture = k * (2 * n_c + 1)
    classifier = m * k * (2 * n_c + 1) + m
    return {
        "projection": projection,
        "gmm": mixture,
        "classifier": classifier,
        "total": projection + mixture + classifier,
    }


def count_bundle_parameters(bundle):
    """Parameter counts of an actual bundle; extractor reported separately."""
    d_pool = bundle.projection.mean.shape[0]
    counts = count_parameters(d_pool, bundle.gmm.n_dims, bundle.gmm.k,
                              bundle.svm.num_classes)
    if bundle.extractor is not None:
        counts["extractor"] = (bundle.extractor.filters.size
                               + bundle.extractor.biases.size)
    return counts


_TENSOR_FILES = {
    "projection.mean": ("proj_mean.fvnt", lambda b: b.projection.mean),
    "projection.axes": ("proj_axes.fvnt", lambda b: b.projection.axes),
    "gmm.alpha": ("gmm_alpha.fvnt", lambda b: b.gmm.alpha),
    "gmm.means": ("gmm_means.fvnt", lambda b: b.gmm.means),
    "gmm.log_vars": ("gmm_logvars.fvnt", lambda b: b.gmm.log_vars),
    "svm.weights": ("svm_weights.fvnt", lambda b: b.svm.weights),
    "svm.bias": ("svm_bias.fvnt", lambda b: b.svm.bias),
}


def save_bundle(path, bundle):
    """Write a bundle directory: text header plus one FVNT file per tensor."""
    os.makedirs(path, exist_ok=True)
    header = {
        "format_version": bundle.version,
        "n_sigma": bundle.pool.n_sigma,
        "n_tau": bundle.pool.n_tau,
        "cell_h": bundle.pool.cell_h,
        "cell_w": bundle.pool.cell_w,
        "window_frames": bundle.pool.window_frames,
        "spatial_stride": bundle.pool.spatial_stride,
        "mixture_components": bundle.gmm.k,
        "n_components": bundle.gmm.n_dims,
        "num_classes": bundle.svm.num_classes,
        "svm_c": bundle.svm.c,
        "svm_lambda": bundle.svm.reg_lambda,
        "has_extractor": int(bundle.extractor is not None),
    }
    if bundle.extractor is not None:
        header["pool_window"] = bundle.extractor.pool_window
        header["pool_stride"] = bundle.extractor.pool_stride
    with open(os.path.join(path, BUNDLE_HEADER), "w") as fh:
        for key, value in header.items():
            fh.write(f"{key}={value!r}\n")
    for _, (fname, getter) in _TENSOR_FILES.items():
        write_tensor(os.path.join(path, fname), getter(bundle))
    if bundle.extractor is not None:
        write_tensor(os.path.join(path, "ext_filters.fvnt"),
                     bundle.extractor.filters)
        write_tensor(os.path.join(path, "ext_biases.fvnt"),
                     bundle.extractor.biases)
    for name, arr in bundle.optimizer_state.items():
        write_tensor(os.path.join(path, f"opt_{name}.fvnt"), arr)


def load_bundle(path):
    """Inverse of :func:`save_bundle`, with header/tensor consistency checks."""
    header_path = os.path.join(path, BUNDLE_HEADER)
    if not os.path.exists(header_path):
        raise BundleFormatError(f"{path}: missing {BUNDLE_HEADER}")
    header = {}
    with open(header_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise BundleFormatError(f"{header_path}:{lineno}: bad line")
            key, value = line.split("=", 1)
            try:
                header[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                raise BundleFormatError(
                    f"{header_path}:{lineno}: bad value for {key}") from None

    version = header.get("format_version")
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")

    def tensor(fname):
        return read_tensor(os.path.join(path, fname))

    pool_cfg = PoolConfig(header["n_sigma"], header["n_tau"], header["cell_h"],
                          header["cell_w"], header["window_frames"],
                          header["spatial_stride"])
    projection = ProjectionParams(tensor("proj_mean.fvnt"),
                                  tensor("proj_axes.fvnt"))
    mixture = GmmParams(tensor("gmm_alpha.fvnt"), tensor("gmm_means.fvnt"),
                        tensor("gmm_logvars.fvnt"))
    classifier = SvmParams(tensor("svm_weights.fvnt"), tensor("svm_bias.fvnt"),
                           c=header["svm_c"], reg_lambda=header["svm_lambda"])
    extractor = None
    if header["has_extractor"]:
        extractor = ConvExtractorParams(
            tensor("ext_filters.fvnt"), tensor("ext_biases.fvnt"),
            header["pool_window"], header["pool_stride"])

    if mixture.means.shape[0] != header["mixture_components"]:
        raise BundleFormatError(
            f"dim inconsistency: header K={header['mixture_components']} but "
            f"stored means have {mixture.means.shape[0]} rows")
    if mixture.means.shape[1] != header["n_components"]:
        raise BundleFormatError(
            f"dim inconsistency: header n_c={header['n_components']} but "
            f"stored means have {mixture.means.shape[1]} columns")
    if classifier.num_classes != header["num_classes"]:
        raise BundleFormatError(
            f"dim inconsistency: header m={header['num_classes']} but stored "
            f"weights have {classifier.num_classes} rows")

    optimizer_state = {}
    for fname in sorted(os.listdir(path)):
        if fname.startswith("opt_") and fname.endswith(".fvnt"):
            optimizer_state[fname[4:-5]] = tensor(fname)

    bundle = ModelBundle(extractor, pool_cfg, projection, mixture, classifier,
                         version=version, optimizer_state=optimizer_state)
    try:
        bundle.validate()
    except DimMismatchError as exc:
        raise BundleFormatError(f"dim inconsistency: {exc}") from exc
    return bundle
