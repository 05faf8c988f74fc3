"""Differentiable Fisher-vector video classification.

The network chains per-frame feature extraction, spatio-temporal mean
pooling, a trainable affine projection, a Gaussian-mixture posterior
layer, Fisher-vector encoding, and one-vs-all squared-hinge classifiers.
Everything is initialized unsupervised (PCA, EM) and then finetuned end
to end with manually derived gradients; long videos are handled by
sliding the network along time and summing unnormalized Fisher-vector
statistics.
"""

from .data import DatasetManifest, VideoSample, generate_synthetic, load_manifest
from .features import ConvExtractorParams, ExtractorConfig, extract, lcn
from .fisher import (FisherVector, FvAccumulator, accumulate, fv_from_stats,
                     l2_normalize, merge, normalize_fv, power_normalize)
from .gmm import GmmParams, em_fit, mixture_weights, posteriors
from .pipeline import (ClassifyResult, CropSpec, ModelBundle, classify_video,
                       count_bundle_parameters, count_parameters, load_bundle,
                       save_bundle)
from .pooling import PoolConfig, output_dims, pool
from .projection import ProjectionParams, pca_fit, project
from .svm import SvmParams, predict, scores, train_svm
from .tensor import TensorFileError, crop, read_tensor, write_tensor
from .train import (FinetuneConfig, InitConfig, adagrad_step, dropout_forward,
                    finetune, grad_check, init_pipeline, sgd_momentum_step)

__version__ = "0.1.0"
