"""Angle error of PCA and jet normals against neighbourhood size on synthetic shapes."""

from attnormals import experiments

shapes = experiments.make_shape_set(count=4, n_points=2000, per_shape=300, seed=7)
print(f"{'k':>4} {'estimator':>9} {'rmse':>7} {'pgp5':>6} {'pgp10':>6}")
for k, est, rmse, pgp5, pgp10 in experiments.sweep_k(shapes, (8, 16, 30, 50), ("pca", "jet")):
    print(f"{k:>4} {est:>9} {rmse:7.2f} {pgp5:6.3f} {pgp10:6.3f}")
