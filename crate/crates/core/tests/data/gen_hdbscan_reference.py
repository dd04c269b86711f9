"""Regenerates hdbscan_reference.json with scikit-learn's HDBSCAN."""

import json
import pathlib

import numpy as np
from sklearn.cluster import HDBSCAN


def blobs(rng, centers, n_per, std):
    pts, truth = [], []
    for k, (c, s) in enumerate(zip(centers, std)):
        pts.append(rng.normal(c, s, size=(n_per, len(c))))
        truth += [k] * n_per
    return np.vstack(pts), truth


def main():
    rng = np.random.default_rng(7)
    cases = []

    def add(name, points, truth, mcs, ms, single):
        labels = HDBSCAN(
            min_cluster_size=mcs, min_samples=ms, allow_single_cluster=single, copy=True
        ).fit_predict(points)
        cases.append(
            {
                "name": name,
                "points": points.tolist(),
                "truth": truth,
                "min_cluster_size": mcs,
                "min_samples": ms,
                "allow_single_cluster": single,
                "reference": labels.tolist(),
            }
        )

    p, t = blobs(rng, [(0, 0), (5, 5)], 25, [0.4, 0.4])
    add("two_blobs", p, t, 10, 5, False)
    add("two_blobs_single_allowed", p, t, 10, 5, True)
    add("two_blobs_fine", p, t, 5, 3, False)
    p, t = blobs(rng, [(0, 0, 0), (4, 0, 0), (0, 4, 0)], 20, [0.3, 0.5, 0.4])
    add("three_blobs", p, t, 5, 3, False)
    add("three_blobs_defaults", p, t, 3, 2, True)
    p, t = blobs(rng, [(0, 0), (6, 0), (3, 5)], 17, [0.3, 0.8, 0.5])
    noise = rng.uniform(-3, 9, size=(9, 2))
    add("three_blobs_noise", np.vstack([p, noise]), t + [-1] * 9, 6, 4, False)
    p, t = blobs(rng, [(1, 1, 1, 1)], 30, [0.5])
    add("one_blob", p, t, 5, 3, True)
    p = rng.uniform(0, 1, size=(40, 2))
    add("uniform", p, [0] * 40, 4, 3, False)

    out = pathlib.Path(__file__).with_name("hdbscan_reference.json")
    out.write_text(json.dumps({"cases": cases}, indent=1))


if __name__ == "__main__":
    main()
