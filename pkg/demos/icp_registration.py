"""Register perturbed copies of the registration suite with ground-truth and PCA normals."""

from attnormals import experiments

for name, spec in experiments.icp_suite(n_points=1500):
    cloud = experiments.prepare_shape(spec)
    for est in ("gt", "pca"):
        result = experiments.run_icp_protocol(cloud, est, 30)
        label = result.iterations if result.converged else "F"
        print(f"{name:>10} {est:>4} iterations={label} final_ptplane={result.ptplane_trace[-1]:.3e}")
