"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import math

import vararray


def main():
    assert set(vararray.builtin_geometries()) == {"ami8", "ami4", "ms7", "ms3"}
    g = vararray.Geometry.builtin("ms7")
    assert g.num_mics == 7

    sample = vararray.simulate(seed=3, index=0, duration_s=2.0, geometries=["ms3"])
    mixture = sample["mixture"]
    refs = sample["references"]
    assert len(mixture) == 3 and sample["active_speakers"] == 2
    assert len(refs) == 4 and len(refs[0]) == len(mixture[0])

    model = vararray.Model(seed=1)
    masks = model.masks(mixture, sample["sample_rate"])
    assert len(masks) == 4 and len(masks[0]) == model.num_bins
    assert all(0.0 <= v <= 1.0 for v in masks[0][0])

    # The masks do not depend on microphone order.
    flipped = model.masks(mixture[::-1], sample["sample_rate"])
    assert max(abs(a - b) for a, b in zip(masks[1][5], flipped[1][5])) < 1e-5

    pre3, post3 = model.flops(mixture, sample["sample_rate"])
    pre2, post2 = model.flops(mixture[:2], sample["sample_rate"])
    assert post3 == post2 and pre3 > pre2

    out0, out1, report = vararray.separate(model, mixture, sample["sample_rate"])
    assert len(out0) == len(out1) == len(mixture[0])
    assert report.startswith("window\t")

    score, perm = vararray.best_perm_si_snr((refs[0], refs[1]), (refs[0], refs[1]))
    assert perm == [0, 1] and score > 60.0
    assert math.isfinite(vararray.si_snr(out0, refs[0]))

    trained, losses = vararray.train_simulated(seed=5, steps=2, num_samples=4, batch_size=2, crop_frames=40)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    print("smoke test passed:", trained)


if __name__ == "__main__":
    main()
