import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advl.blackbox import ConfigurationError, RegionAttackConfig
from advl.metrics import (ExperimentReport, REPORT_COLUMNS, l2_distortion_8bit, max_perturbation_8bit,
                          render_transfer_matrix, success_rate, summarize, sweep, target_grid,
                          transfer_matrix_csv)
from advl.tensor import DomainError, ShapeError
from advl.whitebox import AttackResult, EpsAttackConfig


def result(success, pert=10.0, l2=20.0, t=0.5, it=3):
    return AttackResult(None, success, it, 0.0, t, pert, l2)


class TestScalars:
    def test_success_rate(self):
        assert success_rate([result(True)] * 3) == 1.0
        assert success_rate([result(False)] * 3) == 0.0
        assert success_rate([result(True), result(False)]) == 0.5
        with pytest.raises(DomainError):
            success_rate([])

    def test_single_pixel(self):
        x = np.zeros((1, 4, 4))
        y = x.copy()
        y[0, 2, 1] = 0.2
        assert max_perturbation_8bit(x, y) == pytest.approx(51.0)
        assert l2_distortion_8bit(x, y) == pytest.approx(51.0)
        assert max_perturbation_8bit(x, x) == 0 and l2_distortion_8bit(x, x) == 0

    def test_uniform_closed_form(self):
        x = np.full(49, 0.5)
        assert l2_distortion_8bit(x, x + 0.1) == pytest.approx(255 * 0.1 * 7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            max_perturbation_8bit(np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeError):
            l2_distortion_8bit(np.zeros(3), np.zeros(4))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 16, elements=st.floats(0, 1)), arrays(np.float64, 16, elements=st.floats(0, 1)))
    def test_norm_sandwich(self, x, y):
        m, l2 = max_perturbation_8bit(x, y), l2_distortion_8bit(x, y)
        assert m <= l2 + 1e-9 and l2 <= 4 * m + 1e-9


class TestReport:
    def rows(self):
        res = [result(True, 12.0, 30.0, 0.25, 4), result(False, 20.0, 40.0, 0.75, 10)]
        return summarize(res, model_id="m", temperature=5.0, attack="epsilon", epsilon_8bit=52.0,
                         sigma=0.0, seed=3)

    def test_summarize(self):
        r = self.rows()
        assert r["success_rate"] == 0.5 and r["mean_max_pert_8bit"] == 16.0
        assert r["median_iterations"] == 7.0 and r["samples"] == 2
        assert set(r) == set(REPORT_COLUMNS)

    def test_csv_roundtrip_and_determinism(self, tmp_path):
        rep = ExperimentReport([self.rows()])
        text = rep.to_csv(tmp_path / "r.csv")
        assert rep.to_csv() == text
        back = ExperimentReport.from_csv(tmp_path / "r.csv")
        assert back.to_csv() == text and back.render() == rep.render()

    def test_reproducible_blanks_timing(self):
        rep = ExperimentReport([self.rows()], include_timing=False)
        line = rep.to_csv().splitlines()[1].split(",")
        for col in ("mean_wall_time", "median_wall_time"):
            assert line[REPORT_COLUMNS.index(col)] == ""
        assert ExperimentReport.from_csv(rep.to_csv()).include_timing is False

    def test_row_validation(self):
        rep = ExperimentReport()
        bad = dict(self.rows(), success_rate=1.5)
        with pytest.raises(ValueError):
            rep.add(bad)
        with pytest.raises(ValueError):
            rep.add(dict(self.rows(), samples=0))

    def test_render_header_states_averaging(self):
        assert "all attempted" in ExperimentReport([self.rows()]).render()

    def test_transfer_matrix(self):
        m = np.array([[0.9, 0.8], [0.1, 0.3]])
        txt = render_transfer_matrix([5, 100], [5, 100], m)
        assert "T=100" in txt and "0.800" in txt
        assert transfer_matrix_csv([5, 100], [5, 100], m).splitlines()[1] == "5,0.9,0.8"


class TestTargetGrid:
    def test_all(self):
        img, t, ids = target_grid(np.array([3, 0]), 10, "all")
        assert len(img) == 18 and ids.tolist() == list(range(18))
        assert sorted(t[img == 0].tolist()) == [0, 1, 2, 4, 5, 6, 7, 8, 9]

    def test_random_excludes_label(self):
        labels = np.arange(100) % 10
        _, t, _ = target_grid(labels, 10, "random", seed=1)
        assert not np.any(t == labels)
        assert np.array_equal(t, target_grid(labels, 10, "random", seed=1)[1])


class TestSweep:
    def test_rows_per_grid_point_and_determinism(self, blob_net):
        net, data = blob_net
        xs = data.images[::12]
        ts = (data.labels[::12] + 1) % 3
        cfg = EpsAttackConfig(max_iters=50, learning_rate=0.1)
        a = sweep("epsilon", [30, 120], cfg, {0.0: net}, xs, ts, include_timing=False)
        b = sweep("epsilon", [30, 120], cfg, {0.0: net}, xs, ts, include_timing=False)
        assert len(a) == 2 and a.to_csv() == b.to_csv()
        assert a.column("epsilon_8bit") == [30.0, 120.0]
        assert a.rows[0]["mean_max_pert_8bit"] <= 30 + 1e-6
        single = sweep("epsilon", [52], cfg, {0.0: net}, xs, ts)
        assert len(single) == 1

    def test_sigma_and_temperature_axes(self, blob_net):
        net, data = blob_net
        xs, ts = data.images[:3], np.array([1, 2, 0])
        rc = RegionAttackConfig(max_iters=5, epsilon_8bit=80)
        s = sweep("sigma", [0.0, 0.4], rc, {0.0: net}, xs, ts)
        assert s.column("sigma") == [0.0, 0.4] and s.column("attack") == ["region"] * 2
        t = sweep("temperature", [1.0, 5.0], rc, {1.0: net, 5.0: net}, xs, ts)
        assert t.column("model_id") == ["student_T1", "student_T5"]

    def test_errors(self, blob_net):
        net, data = blob_net
        xs, ts = data.images[:2], np.array([1, 2])
        with pytest.raises(ValueError):
            sweep("epsilon", [], EpsAttackConfig(), {0.0: net}, xs, ts)
        with pytest.raises(ConfigurationError):
            sweep("temperature", [7.0], EpsAttackConfig(), {0.0: net}, xs, ts)
        with pytest.raises(ConfigurationError):
            sweep("sigma", [0.4], EpsAttackConfig(), {0.0: net}, xs, ts)
        with pytest.raises(ValueError):
            sweep("kappa", [1], EpsAttackConfig(), {0.0: net}, xs, ts)
