import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nlosloc.errors import MapTooSmallForWindow, ShapeMismatch, ZeroEnergyTruth
from nlosloc.localization import Estimate
from nlosloc.metrics import EvalReport, localization_error, mse, nmse, psnr, rmse, ssim

maps = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


def test_mse_examples():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 1, (12, 9))
    assert mse(t, t) == 0.0
    assert mse(t + 0.1, t) == pytest.approx(0.01)
    assert rmse(t + 0.1, t) == pytest.approx(0.1)
    p = rng.uniform(0, 1, t.shape)
    total = 0.0
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            total += (p[i, j] - t[i, j]) ** 2
    assert mse(p, t) == pytest.approx(total / t.size, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        mse(p, t[:, :3])


def test_nmse_examples():
    t = np.random.default_rng(1).uniform(0.1, 1, (10, 10))
    assert nmse(t, t) == 0.0
    assert nmse(np.zeros_like(t), t) == pytest.approx(1.0)
    assert nmse(2 * t, t) == pytest.approx(1.0)
    with pytest.raises(ZeroEnergyTruth):
        nmse(t, np.zeros_like(t))


@given(maps, maps)
def test_metric_identities(p, t):
    assert rmse(p, t) ** 2 == pytest.approx(mse(p, t), abs=1e-12)
    if (t ** 2).sum() > 0:
        assert nmse(p, t) * (t ** 2).sum() == pytest.approx(((p - t) ** 2).sum(), rel=1e-9, abs=1e-300)
    assert ssim(p, t) == pytest.approx(ssim(t, p), abs=1e-12)
    assert -1 - 1e-12 <= ssim(p, t) <= 1 + 1e-12


def test_ssim_examples():
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 1, (64, 64))
    assert ssim(t, t) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(np.full_like(t, 0.5), t)) < 0.1
    other = t.copy()
    other[3, 3] += 0.2
    assert ssim(other, t) < 1 - 1e-9
    with pytest.raises(MapTooSmallForWindow):
        ssim(t[:7, :7], t[:7, :7])


def test_psnr_examples():
    t = np.zeros((10, 10))
    assert psnr(t + 1.0, t) == pytest.approx(0.0)
    assert psnr(t, t) == math.inf
    rng = np.random.default_rng(3)
    err = rng.standard_normal(t.shape) * 0.1
    assert psnr(t + err / 2, t) - psnr(t + err, t) == pytest.approx(20 * math.log10(2))
    values = [psnr(t + e, t) for e in (0.01, 0.02, 0.05, 0.3)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_localization_error_examples():
    assert localization_error((4, 7), (4, 7)) == 0.0
    assert localization_error(Estimate((3, 4), "x"), (0, 0), cell_size=1.0) == 5.0
    assert localization_error((3, 4), (0, 0), cell_size=2.0) == 10.0


def test_eval_report_aggregates_and_csv(tmp_path):
    rng = np.random.default_rng(4)
    rep = EvalReport()
    les = rng.uniform(0, 30, 17)
    for i, le in enumerate(les):
        rep.add(f"s{i}", "edge", "LE", le)
        rep.add(f"s{i}", "edge", "Sampling Ratio", 0.02)
        rep.add(f"s{i}", "vertex", "LE", le / 2)
    mean, std = rep.aggregate("edge", "LE")
    assert mean == pytest.approx(les.mean(), abs=1e-12) and std == pytest.approx(les.std())
    assert rep.groups() == ["edge", "vertex"]
    text = rep.to_csv()
    assert text.startswith("scene_id,group,metric,value\r\n") and text.count("\r\n") == 1 + 3 * 17
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_bytes() == text.encode()
    table = rep.summary_table()
    assert "Sampling Ratio" in table and "2.00%" in table and "SSIM" in table.splitlines()[0]
