"""Train a small attention model for a few epochs, then write one attention map."""

import sys

import numpy as np

from attnormals import data_io, experiments, metrics, model

out = sys.argv[1] if len(sys.argv) > 1 else "attention.pgm"
k = 20
train = experiments.make_shape_set(count=6, n_points=2000, per_shape=200, seed=1)
test = experiments.make_shape_set(count=3, n_points=2000, per_shape=200, seed=2)
cfg = model.TrainConfig(epochs=5, batch_size=64, lr=1e-3, seed=0)
params, losses, _ = experiments.train_on_shapes(train, k, cfg)
print("losses", np.round(losses, 4), "temperature", round(params.temperature, 3))
print("held-out rmse", round(metrics.rmse(experiments.evaluate_shape_set(test, "tmhsa", k, params)), 2))
coords, _ = test.patches(k)
data_io.write_attention_map(model.predict_attention(coords[:16], params), out)
print("attention map written to", out)
