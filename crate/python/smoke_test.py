"""Smoke test for the mmfs_py extension.

Build and install it first:  pip install --no-build-isolation crates/python
Then run:  python python/smoke_test.py   (or pytest python/)
"""

import json
import math
import tempfile

import mmfs_py


def test_distances_and_losses():
    a = [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    assert math.isclose(mmfs_py.dtw_distance(a, a), 0.0, abs_tol=1e-12)
    assert mmfs_py.dtw_distance(a, [[0.0, 1.0]]) > 0.0
    assert math.isclose(mmfs_py.cosine_distance([1.0, 0.0], [0.0, 2.0]), 1.0)
    z = [1.0, 0.0]
    assert math.isclose(mmfs_py.mtriplet_loss(z, z, z, z, 0.2), 0.4)
    assert mmfs_py.mtriplet_loss(z, z, [0.0, 1.0], [0.0, 1.0], 0.2) == 0.0
    assert mmfs_py.cae_loss([0.5, 0.5], [0.5, 0.5]) == 0.0
    try:
        mmfs_py.cosine_distance([0.0, 0.0], [1.0, 0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("zero vector accepted")


def test_synthetic_data():
    (speech, s_labels), (images, i_labels) = mmfs_py.synth_paired_digits(2, 0.1, 7)
    assert len(speech) == len(s_labels) == 22
    assert len(images) == len(i_labels) == 20
    assert all(len(img) == 784 for img in images)
    assert set(s_labels) == set(range(11))


def test_config_and_pipeline():
    cfg = mmfs_py.Config()
    try:
        mmfs_py.Config("[data]\nnoize = 0.1\n")
    except ValueError as e:
        assert "noize" in str(e)
    else:
        raise AssertionError("unknown key accepted")
    with tempfile.TemporaryDirectory() as out:
        cfg = mmfs_py.Config(
            'architecture = "compact"\narms = ["dtw_pixels", "mcae_oracle"]\n'
            "[data]\nn_per_class = 40\n[grid]\nbatch_sizes = [32]\nseeds = [0]\n"
            "[train]\nmax_epochs = 1\n[episodes]\ncount = 10\n"
        )
        cfg.out_dir = out
        cfg.validate()
        try:
            mmfs_py.evaluate(cfg)
        except OSError:
            pass
        else:
            raise AssertionError("evaluate ran before prepare")
        summary = mmfs_py.run(cfg)
        assert summary.config_hash == cfg.config_hash()
        assert set(summary.arms()) == {"dtw_pixels", "mcae_oracle", "mcae_oracle_indirect"}
        mean, ci = summary.accuracy("dtw_pixels")
        assert 0.0 <= mean <= 100.0 and ci is None
        assert json.loads(summary.to_json())["config_hash"] == cfg.config_hash()
        assert "mcae_oracle" in summary.table()
        assert mmfs_py.report(cfg).to_json() == summary.to_json()


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
