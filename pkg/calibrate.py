"""Scratch calibration for the desk-scale end-to-end run (not shipped)."""
import sys
import tempfile
import time

import numpy as np

from fvnet.data import generate_synthetic, load_manifest
from fvnet.features import ExtractorConfig
from fvnet.pooling import PoolConfig
from fvnet.train import (FinetuneConfig, InitConfig, evaluate, finetune,
                         init_pipeline)

t0 = time.time()
root = tempfile.mkdtemp(prefix="cal_")
train = generate_synthetic(root, seed=1001, num_classes=4, per_class=50,
                           frames=30, height=32, width=32, split="train")
test = generate_synthetic(root, seed=2002, num_classes=4, per_class=20,
                          frames=30, height=32, width=32, split="test")
print(f"gen: {time.time()-t0:.1f}s")

pool_cfg = PoolConfig(n_sigma=2, n_tau=3, cell_h=4, cell_w=4,
                      window_frames=15, spatial_stride=3)
ext_cfg = ExtractorConfig(num_filters=8, kernel_h=5, kernel_w=5,
                          in_channels=1, pool_window=2, pool_stride=2)
init_cfg = InitConfig(subvolumes_per_video=30, pca_samples_per_video=10,
                      n_components=12, mixture_components=8, svm_c=100.0,
                      seed=7, em_iters=100, em_tol=1e-9, svm_epochs=200,
                      svm_lr=0.05)

t1 = time.time()
bundle = init_pipeline(train, root, init_cfg, pool_cfg, ext_cfg,
                       temporal_stride=5)
print(f"init: {time.time()-t1:.1f}s")

t2 = time.time()
train_loss, train_acc = evaluate(bundle, train, root, 5)
test_loss, test_acc = evaluate(bundle, test, root, 5)
print(f"init train acc={train_acc:.3f} loss={train_loss:.3f} | "
      f"test acc={test_acc:.3f} loss={test_loss:.3f} "
      f"(eval {time.time()-t2:.1f}s)")

opt = sys.argv[1] if len(sys.argv) > 1 else "sgd_momentum"
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 10
dropout = float(sys.argv[4]) if len(sys.argv) > 4 else 0.0

ft_cfg = FinetuneConfig(optimizer=opt, learning_rate=lr, momentum=0.9,
                        lr_decay=0.95, dropout_p=dropout, epochs=epochs,
                        spatial_stride=3, temporal_stride=5, seed=7)
t3 = time.time()
bundle, metrics = finetune(bundle, train, root, ft_cfg, eval_manifest=test)
for row in metrics:
    print(row)
print(f"finetune {epochs} epochs: {time.time()-t3:.1f}s  "
      f"total {time.time()-t0:.1f}s")
