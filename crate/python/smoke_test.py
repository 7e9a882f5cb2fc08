"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import os
import sys
import tempfile

import overlap_sampling_py as ovs


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    src, tgt, t_true, ratio = ovs.generate_pair(seed=3, points=600, overlap=0.6)
    check(len(src) == 600 and len(tgt) == 600, "generate_pair sizes")
    check(abs(ratio - 0.6) <= 0.05, f"achieved overlap {ratio:.3f}")

    pts = src.points()
    ids = src.knn(pts[0], 5)
    check(ids[0] == 0 and len(ids) == 5, "knn returns the query point first")
    check(0 in src.radius_query(pts[0], 0.0), "radius query includes the point itself")

    fps = ovs.farthest_point_sample(src, 50)
    check(len(set(fps)) == 50 and fps[0] == 0, "farthest point sampling")
    check(len(ovs.random_sample(src, 120, 7)) == 120, "random sampling")
    check(len(ovs.poisson_disk_sample(src, 0.05, 600)) > 0, "poisson disk sampling")
    check(len(ovs.voxel_grid_sample(src, 0.1)) > 0, "voxel grid sampling")

    moved = src.transformed(t_true)
    est = ovs.kabsch_align(pts, moved.points())
    check(ovs.registration_rmse(est, t_true, src) < 1e-9, "kabsch on exact correspondences")
    inv = t_true.inverse()
    back = inv.apply(t_true.apply(pts[1]))
    check(math.dist(back, pts[1]) < 1e-12, "transform inverse")

    check(abs(ovs.average_precision([0.9, 0.1, 0.5], [True, False, True]) - 1.0) < 1e-12, "average precision")

    run = ovs.run_pair(src, tgt, method="fps", budget=0.3, seed=1)
    check(run["src_points"] == 180 and run["peak_bytes"] > 0, "fps pipeline run")

    model = ovs.Model(seed=0)
    src_scores, _ = model.score(src, tgt, seed=0)
    check(all(0.0 <= o <= 1.0 for o in src_scores["overlap"]), "untrained model scores are probabilities")
    run = ovs.run_pair(src, tgt, method="overlap", budget=0.2, model=model, seed=1)
    check(run["src_points"] == 120, "overlap-aware pipeline run")

    trained = ovs.train([(src, tgt, t_true)], epochs=1, seed=0)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        trained.save(path)
        again = ovs.Model.load(path)
        a, _ = trained.score(src, tgt, seed=2)
        b, _ = again.score(src, tgt, seed=2)
        check(a["overlap"] == b["overlap"], "checkpoint round-trip")

    try:
        ovs.run_pair(src, tgt, method="nope")
    except ValueError:
        check(True, "unknown method raises ValueError")
    else:
        check(False, "unknown method raises ValueError")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
