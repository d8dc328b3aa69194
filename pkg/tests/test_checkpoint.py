"""Checkpoint round-trip tests: predictions must survive save/load exactly."""

import numpy as np
import pytest

from sysidbench.checkpoint import family_of, load_forecaster, save_forecaster
from sysidbench.base import NodeForecaster, NssmForecaster, SubspaceForecaster
from sysidbench.exceptions import DataError
from sysidbench.trajectory import split_thirds

from test_base import linear_trajectory, sine_trajectory


def roundtrip(tmp_path, est, traj):
    est.fit(traj)
    test = split_thirds(traj).test
    before = est.predict(test)
    path = tmp_path / "model.npz"
    save_forecaster(path, est)
    loaded = load_forecaster(path)
    after = loaded.predict(test)
    return est, loaded, before, after


class TestRoundTrip:
    def test_subspace(self, tmp_path):
        est = SubspaceForecaster(method="cva", state_dim=3, horizon=5)
        est, loaded, before, after = roundtrip(tmp_path, est, linear_trajectory())
        np.testing.assert_array_equal(before, after)
        assert loaded.get_params() == est.get_params()
        assert loaded.history_ == est.history_
        assert loaded.fit_time_ == est.fit_time_

    def test_node(self, tmp_path):
        est = NodeForecaster(
            latent_multiplier=2, field_hidden=8, encoder_hidden=6, epochs=2, seed=1
        )
        est, loaded, before, after = roundtrip(tmp_path, est, sine_trajectory())
        np.testing.assert_array_equal(before, after)
        assert loaded.get_params() == est.get_params()

    def test_nssm_with_factored_maps(self, tmp_path):
        est = NssmForecaster(
            latent_multiplier=2,
            n_steps=2,
            hidden=8,
            epochs=4,
            block="mlp",
            linear_map_kind="soft_svd",
        )
        est, loaded, before, after = roundtrip(
            tmp_path, est, sine_trajectory(n=120, delta=0.1)
        )
        np.testing.assert_array_equal(before, after)
        got = [p.copy() for p in loaded.model_.parameters()]
        want = [p for p in est.model_.parameters()]
        assert len(got) == len(want)
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)


class TestGuards:
    def test_unfitted_estimator_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="not fitted"):
            save_forecaster(tmp_path / "x.npz", SubspaceForecaster())

    def test_family_of_rejects_strangers(self):
        with pytest.raises(TypeError):
            family_of(object())

    def test_future_format_version_rejected(self, tmp_path):
        import json

        path = tmp_path / "x.npz"
        np.savez(path, meta_json=np.array(json.dumps({"format_version": 99})))
        with pytest.raises(DataError, match="format"):
            load_forecaster(path)

    def test_weight_shape_mismatch_rejected(self, tmp_path):
        est = NodeForecaster(
            latent_multiplier=2, field_hidden=8, encoder_hidden=6, epochs=1
        )
        est.fit(sine_trajectory(n=60))
        path = tmp_path / "x.npz"
        save_forecaster(path, est)
        import json

        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        arrays["p0"] = np.zeros((1, 1))
        np.savez(path, **arrays)
        with pytest.raises(DataError, match="shape"):
            load_forecaster(path)
