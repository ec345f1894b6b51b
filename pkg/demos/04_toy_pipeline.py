"""The three training phases on a small toy run, then a dense head on each backbone.

Takes a few minutes on one core; the full desk-scale run is `tosa run --config configs/toy.cfg`.
"""

import logging

from tosa.data import make_toy_dataset
from tosa.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from tosa.training import (
    TrainConfig, accuracy, finetune, plan_overlap, pretrain, train_dense_head, train_selectors,
)

logging.basicConfig(level=logging.INFO, format="%(message)s")

config = ModelConfig()  # 32px, 4px patches, 6 layers, ToSA at 2, 4, 6, r=0.8
train = make_toy_dataset(512, seed=0)
test = make_toy_dataset(256, seed=0, split="test")

state = init_model(config, seed=0)
pretrain(state, TrainConfig("pretrain", epochs=8, lr=1e-3, weight_decay=0.05), train)
save_checkpoint(state, "/tmp/toy_pretrained.ckpt")
baseline = accuracy(state, test, use_tosa=False)

_, _, report = train_selectors(state, TrainConfig("selector", epochs=2, lr=1e-2, batch_size=32), train,
                               probe=test.images[:64])
print(f"selector KLD {report.initial_kld:.3f} -> {report.final_kld:.3f}; "
      f"plan overlap with true maps {plan_overlap(state, test.images[:64]):.2f}")

finetune(state, TrainConfig("finetune", epochs=2, lr=3e-4), train)
print(f"accuracy: standard {baseline:.3f}, ToSA {accuracy(state, test):.3f}")

std = load_checkpoint("/tmp/toy_pretrained.ckpt")
_, _, d_std = train_dense_head(std, TrainConfig("dense", epochs=10), train, test, use_tosa=False)
_, _, d_tosa = train_dense_head(state, TrainConfig("dense", epochs=10), train, test, use_tosa=True)
print(f"per-patch regression MSE: standard {d_std.test_mse:.4f}, ToSA {d_tosa.test_mse:.4f}")
