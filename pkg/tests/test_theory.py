"""Verification harness: geometry/detection reports, dictionary generation,
synthetic image generation, watermark evaluation, and sweeps."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from addmark import codec, theory, trainer
from addmark.distortions import DistortionSpec
from addmark.losses import MarginLoss, PopulationCurve, solve_r_star
from addmark.lowdim import default_harness_model
from addmark.tensor import SeededRng
from addmark.theory import (
    TheoryReport,
    evaluate_watermark,
    generate_dictionary,
    make_smooth_images,
    sweep_beta,
    verify_detection,
    verify_geometry,
)


@pytest.fixture(scope="module")
def model():
    return default_harness_model(SeededRng(0).spawn(1))


def test_report_fields_and_json():
    rep = TheoryReport(r_star=1.0, mu=1.0)
    d = rep.to_dict()
    assert d["r_star"] == 1.0
    assert d["sigma"] is None
    assert '"r_star": 1.0' in rep.to_json()
    with pytest.raises(TypeError):
        TheoryReport(bogus=1.0)


def test_verify_geometry_on_ideal_watermark(model):
    curve = PopulationCurve(MarginLoss("hinge"), model.sigma_eps, 0.05)
    r_star, _ = solve_r_star(curve)
    w = codec.oracle_watermark(model, r_star, 8)
    rep = verify_geometry(w, model, curve, n=10000)
    # the oracle sits exactly at the predicted geometry
    assert rep.max_subspace_leak < 1e-9
    assert rep.max_pairwise_cos < 1e-9
    assert rep.radius_error < 1e-9
    assert rep.min_norm_sq == pytest.approx(r_star, rel=1e-9)
    assert rep.mu == pytest.approx(r_star)
    assert rep.sigma == pytest.approx(math.sqrt(r_star) * model.sigma_eps)
    assert rep.eps_n_delta > 0


def test_verify_geometry_dimension_check(model):
    curve = PopulationCurve(MarginLoss("hinge"), model.sigma_eps, 0.05)
    g = SeededRng(1).generator
    w = trainer.WatermarkSet(g.standard_normal((2, 16)), (1, 4, 4))
    with pytest.raises(ValueError):
        verify_geometry(w, model, curve)


def test_verify_detection_oracle_statistics(model):
    # mu / sigma = sqrt(r) / sigma_eps = 2 at r = (2 sigma_eps)^2
    r = (2.0 * model.sigma_eps) ** 2
    w = codec.oracle_watermark(model, r, 8)
    rep = verify_detection(w, model, 0.05, 20000, SeededRng(2), r_star=r)
    assert rep.predicted_BA == pytest.approx(norm.cdf(2.0))
    assert rep.empirical_BA == pytest.approx(rep.predicted_BA, abs=0.01)
    assert 0.03 < rep.empirical_FPR < 0.07
    assert rep.empirical_TPR > 0.99


def test_verify_detection_with_dictionary(model):
    r = (2.0 * model.sigma_eps) ** 2
    w = codec.oracle_watermark(model, r, 8)
    d = generate_dictionary(8, 8, 3, SeededRng(3))
    rep = verify_detection(w, model, 0.05, 5000, SeededRng(4), dictionary=d)
    # dictionary decoding exploits d_min: accuracy beats the per-bit rate
    assert rep.empirical_BA > norm.cdf(2.0)
    assert rep.empirical_TPR > 0.99


def test_generate_dictionary_hits_target_distance():
    rng = SeededRng(5)
    d = generate_dictionary(12, 32, 3, rng)
    assert len(d) == 32
    assert d.d_min == 3
    mat = d.matrix
    ham = (12 - mat @ mat.T) / 2
    np.fill_diagonal(ham, 12 + 1)
    assert ham.min() == 3


def test_generate_dictionary_infeasible_raises():
    with pytest.raises(RuntimeError):
        # 3 bits cannot host 8 messages at pairwise distance >= 2
        generate_dictionary(3, 8, 2, SeededRng(6), max_tries=2000)
    with pytest.raises(ValueError):
        generate_dictionary(8, 1, 2, SeededRng(6))


def test_make_smooth_images_range_and_stats():
    imgs = make_smooth_images(16, (3, 24, 24), SeededRng(7))
    assert len(imgs) == 16
    data = np.stack([im.as_array() for im in imgs])
    assert data.min() >= 0.0 and data.max() <= 1.0
    assert data.mean() == pytest.approx(0.5, abs=0.05)
    # smoothing induces strong neighbor correlation
    flat = data[:, 0]
    corr = np.corrcoef(flat[:, :-1, :].ravel(), flat[:, 1:, :].ravel())[0, 1]
    assert corr > 0.8


def test_evaluate_watermark_perfect_code():
    rng = SeededRng(8)
    imgs = make_smooth_images(8, (1, 16, 16), rng.spawn(1))
    # strong orthogonal watermark: DC-free random directions
    g = rng.spawn(2).generator
    V = g.standard_normal((4, 256))
    V -= V.mean(axis=1, keepdims=True)
    V, _ = np.linalg.qr(V.T)
    w = trainer.WatermarkSet(2.0 * V.T[:4], (1, 16, 16), value_range="unit")
    pool = [DistortionSpec("identity"), DistortionSpec("brightness")]
    p, by_kind, overall = evaluate_watermark(w, imgs, rng.spawn(3), pool=pool)
    assert set(by_kind) == {"identity", "brightness"}
    # norm 4 per vector on 256 pixels: PSNR = 10 log10(256 / (4 * 4))
    assert p == pytest.approx(10 * math.log10(256 / 16.0), abs=1e-6)
    assert by_kind["identity"] == 1.0
    assert overall == pytest.approx(np.mean(list(by_kind.values())))


def test_sweep_beta_rows_and_csv(tmp_path):
    rng = SeededRng(9)
    imgs = make_smooth_images(48, (1, 12, 12), rng.spawn(1))
    base = trainer.TrainConfig(
        K=2, beta_alg=0.1 * 144, epochs=2, batch_size=16, seed=0, polish_steps=20
    )
    out = tmp_path / "sweep.csv"
    rows = sweep_beta([0.05 * 144, 0.5 * 144], imgs, base, rng.spawn(2),
                      out_csv=out, seeds=(0,))
    assert [r["parameter"] for r in rows] == [0.05 * 144, 0.5 * 144]
    assert all(np.isfinite(r["psnr"]) and 0 <= r["avg_bit_accuracy"] <= 1
               for r in rows)
    # larger beta means a smaller watermark, hence higher PSNR
    assert rows[1]["psnr"] > rows[0]["psnr"]
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "parameter,psnr,avg_bit_accuracy"
    assert len(lines) == 3
    with pytest.raises(ValueError):
        sweep_beta([], imgs, base, rng)
