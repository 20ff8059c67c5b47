#!/usr/bin/env python3
"""Smoke test for the drmflow extension module.

Builds nothing itself: expects `cargo build -p drmflow-py` to have produced
target/debug/libdrmflow.so (or .dylib), which is linked into a temp dir under
the importable name and exercised end to end.
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_drmflow():
    for profile in ("debug", "release"):
        for stem in ("libdrmflow.so", "libdrmflow.dylib", "drmflow.dll"):
            src = os.path.join(ROOT, "target", profile, stem)
            if os.path.exists(src):
                tmp = tempfile.mkdtemp(prefix="drmflow-py-")
                dst = os.path.join(tmp, "drmflow.so")
                shutil.copyfile(src, dst)
                sys.path.insert(0, tmp)
                import drmflow  # noqa: E402

                return drmflow
    sys.exit("drmflow extension not found; run `cargo build -p drmflow-py` first")


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b}"


def main():
    dm = import_drmflow()

    # Interpolation endpoints are exact.
    assert dm.interpolate([1.0, 2.0], [3.0, 4.0], 0.0) == [1.0, 2.0]
    assert dm.interpolate([1.0, 2.0], [3.0, 4.0], 1.0) == [3.0, 4.0]
    approx(dm.interpolate([0.0, 0.0], [2.0, 4.0], 0.5)[1], 2.0)

    # Noise schedule: zero without noise, increasing in t.
    assert dm.sigma_t(0.0, 0.5) == 0.0
    assert dm.sigma_t(0.7, 0.8) > dm.sigma_t(0.7, 0.2) > 0.0

    # Pairwise loss identity and ordering.
    approx(dm.bt_loss(1.3, 1.3), math.log(2.0), 1e-12)
    assert dm.bt_loss(2.0, 0.0) < dm.bt_loss(0.0, 2.0)

    # Advantages: normalized, degenerate group all-zero.
    adv = dm.group_advantage([1.0, 2.0, 3.0, 4.0])
    approx(sum(adv), 0.0, 1e-12)
    approx(sum(a * a for a in adv) / len(adv), 1.0, 1e-12)
    assert dm.step_advantage([5.0, 5.0, 5.0]) == [0.0, 0.0, 0.0]

    # Clipped surrogate is the identity at ratio 1.
    approx(dm.clipped_objective(1.0, 2.5, 0.2), 2.5, 1e-15)
    assert dm.clipped_objective(3.0, 1.0, 0.2) == 1.2

    # KL and transition density basics.
    assert dm.gaussian_kl([1.0, 1.0], [1.0, 1.0], 0.5) == 0.0
    lp_mean = dm.transition_logprob([0.0, 0.0], [0.0, 0.0], 0.3)
    lp_off = dm.transition_logprob([0.5, 0.0], [0.0, 0.0], 0.3)
    assert lp_off < lp_mean

    # Candidate selection: first maximum, monotone-map invariant.
    assert dm.select_best([0.1, 0.9, 0.9]) == 1
    assert dm.select_best([3 * s + 7 for s in [0.1, 0.9, 0.9]]) == 1
    assert dm.diversity_proxy([[0.0, 0.0], [3.0, 4.0]]) == 5.0

    # Deterministic rng: identical streams agree, substreams differ.
    r1, r2 = dm.RngStream(5, 0), dm.RngStream(5, 0)
    assert [r1.normal() for _ in range(10)] == [r2.normal() for _ in range(10)]
    assert r1.counter() == r2.counter()
    assert dm.RngStream(5, 0).substream(1).uniform() != dm.RngStream(5, 0).substream(2).uniform()

    # Train a small model; loss falls and samples land near the right mode.
    model = dm.train_fm_vector2d([(-2.0, -2.0), (2.0, 2.0)], steps=300, seed=3)
    curve = model.loss_curve()
    assert len(curve) == 300
    head = sum(curve[:30]) / 30
    tail = sum(curve[-30:]) / 30
    assert tail < 0.5 * head, f"loss did not fall: {head} -> {tail}"
    for cond, mode in [(0, (-2.0, -2.0)), (1, (2.0, 2.0))]:
        hits = 0
        for i in range(20):
            x = model.sample(cond, seed=9, stream=i)
            if (x[0] - mode[0]) ** 2 + (x[1] - mode[1]) ** 2 < 1.0:
                hits += 1
        assert hits >= 16, f"cond {cond}: only {hits}/20 samples near mode"
    # Same seed, same sample.
    assert model.sample(0, seed=4, stream=2) == model.sample(0, seed=4, stream=2)

    print("smoke test passed")


if __name__ == "__main__":
    main()
