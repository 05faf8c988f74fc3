import numpy as np
import pytest

from fvnet.data import generate_synthetic
from fvnet.features import ExtractorConfig
from fvnet.pooling import PoolConfig
from fvnet.train import InitConfig


def tiny_pool_config():
    # 32x32 frames -> conv 5x5 -> 28x28 -> mean pool 2/2 -> 14x14 maps
    return PoolConfig(n_sigma=2, n_tau=3, cell_h=4, cell_w=4,
                      window_frames=12, spatial_stride=3)


def tiny_extractor_config():
    return ExtractorConfig(num_filters=4, kernel_h=5, kernel_w=5,
                           in_channels=1, pool_window=2, pool_stride=2)


def tiny_init_config(seed=0):
    return InitConfig(subvolumes_per_video=12, pca_samples_per_video=6,
                      n_components=6, mixture_components=4, svm_c=100.0,
                      seed=seed, em_iters=40, em_tol=1e-8, svm_epochs=120,
                      svm_lr=0.05)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2-class dataset: 6 train + 2 test videos per class, 16 frames."""
    root = tmp_path_factory.mktemp("tiny_data")
    train = generate_synthetic(root, seed=101, num_classes=2, per_class=6,
                               frames=16, height=32, width=32, split="train")
    test = generate_synthetic(root, seed=202, num_classes=2, per_class=2,
                              frames=16, height=32, width=32, split="test")
    return root, train, test
