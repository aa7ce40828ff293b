import math

import numpy as np
import pytest

from skeldiff.metrics import (
    FidStats,
    IdentityExtractor,
    KccResult,
    KeypointSet,
    MetricReport,
    PhantomKeypointDetector,
    RandomConvExtractor,
    detect_keypoints,
    feature_stats,
    fid,
    kcc,
    lpips,
    mae,
    psnr,
    ssim,
)
from skeldiff.phantom import generate_phantom, sample_params


class TestSsim:
    def test_identical_images(self):
        img = np.random.default_rng(0).uniform(0, 1, (1, 32, 32))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (1, 32, 32))
        b = rng.uniform(0, 1, (1, 32, 32))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_anticorrelated_negative(self):
        # local structure inverted: covariance term goes negative
        rng = np.random.default_rng(2)
        a = rng.uniform(0.2, 0.8, (1, 32, 32))
        assert ssim(a, 1.0 - a) < 0.0

    def test_brute_force_oracle(self):
        # direct python loops with explicit reflect padding, no ndimage
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (8, 8))
        b = rng.uniform(0, 1, (8, 8))
        window, sigma, k1, k2 = 11, 1.5, 0.01, 0.03
        r = window // 2
        xs = np.arange(-r, r + 1, dtype=float)
        w = np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma**2))
        w /= w.sum()

        def reflect(i, n):
            # scipy "reflect" convention: (d c b a | a b c d | d c b a)
            period = 2 * n
            i = i % period
            if i < 0:
                i += period
            return i if i < n else period - 1 - i

        ap = np.pad(a, r, mode="symmetric")
        bp = np.pad(b, r, mode="symmetric")
        vals = []
        for y in range(8):
            for x in range(8):
                wa = ap[y:y + window, x:x + window]
                wb = bp[y:y + window, x:x + window]
                mu_a = (w * wa).sum()
                mu_b = (w * wb).sum()
                va = (w * wa * wa).sum() - mu_a**2
                vb = (w * wb * wb).sum() - mu_b**2
                cov = (w * wa * wb).sum() - mu_a * mu_b
                c1, c2 = k1**2, k2**2
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                            / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2)))
        assert ssim(a, b) == pytest.approx(float(np.mean(vals)), abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ssim(np.zeros((1, 8, 8)), np.zeros((1, 4, 4)))

    def test_bounded_above_by_one(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = rng.uniform(0, 1, (1, 16, 16))
            b = rng.uniform(0, 1, (1, 16, 16))
            assert ssim(a, b) <= 1.0 + 1e-12


class TestPsnr:
    def test_known_twenty_db(self):
        # MSE = 0.01 with range 1 gives exactly 20 dB
        a = np.zeros((1, 10, 10))
        b = np.full((1, 10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_zero_db(self):
        a = np.zeros((1, 4, 4))
        b = np.ones((1, 4, 4))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_identical_is_inf(self):
        img = np.random.default_rng(0).uniform(0, 1, (1, 8, 8))
        assert psnr(img, img) == math.inf


class TestMae:
    def test_hand_value(self):
        a = np.array([[[0.0, 0.5], [1.0, 0.25]]])
        b = np.array([[[0.1, 0.5], [0.8, 0.45]]])
        assert mae(a, b) == pytest.approx((0.1 + 0.0 + 0.2 + 0.2) / 4, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, (1, 8, 8))
        b = rng.uniform(0, 1, (1, 8, 8))
        assert mae(a, b) == mae(b, a)


class TestFid:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(0)
        cov = rng.normal(size=(4, 4))
        cov = cov @ cov.T + np.eye(4)
        s = FidStats(mu=rng.normal(size=4), cov=cov, n=10)
        assert fid(s, s) == pytest.approx(0.0, abs=1e-8)

    def test_one_dimensional_hand_value(self):
        # (mu_r - mu_g)^2 + s_r + s_g - 2 sqrt(s_r s_g) = 4 + 1 + 4 - 4 = 5
        a = FidStats(mu=[0.0], cov=[[1.0]], n=5)
        b = FidStats(mu=[2.0], cov=[[4.0]], n=5)
        assert fid(a, b) == pytest.approx(5.0, abs=1e-10)

    def test_pure_mean_shift(self):
        rng = np.random.default_rng(1)
        cov = rng.normal(size=(3, 3))
        cov = cov @ cov.T + np.eye(3)
        delta = np.array([1.0, -2.0, 0.5])
        a = FidStats(mu=np.zeros(3), cov=cov, n=8)
        b = FidStats(mu=delta, cov=cov.copy(), n=8)
        assert fid(a, b) == pytest.approx(float(delta @ delta), abs=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        c1 = rng.normal(size=(3, 3))
        c1 = c1 @ c1.T + np.eye(3)
        c2 = rng.normal(size=(3, 3))
        c2 = c2 @ c2.T + np.eye(3)
        a = FidStats(mu=rng.normal(size=3), cov=c1, n=5)
        b = FidStats(mu=rng.normal(size=3), cov=c2, n=5)
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)

    def test_diagonal_closed_form(self):
        # diagonal covariances: FID = ||d||^2 + sum (sqrt(s_r) - sqrt(s_g))^2
        sr = np.array([1.0, 4.0, 9.0])
        sg = np.array([4.0, 1.0, 1.0])
        a = FidStats(mu=np.zeros(3), cov=np.diag(sr), n=5)
        b = FidStats(mu=np.ones(3), cov=np.diag(sg), n=5)
        expected = 3.0 + float(np.sum((np.sqrt(sr) - np.sqrt(sg)) ** 2))
        assert fid(a, b) == pytest.approx(expected, abs=1e-10)

    def test_dimension_mismatch(self):
        a = FidStats(mu=np.zeros(2), cov=np.eye(2), n=5)
        b = FidStats(mu=np.zeros(3), cov=np.eye(3), n=5)
        with pytest.raises(ValueError, match="dimension mismatch"):
            fid(a, b)

    def test_asymmetric_cov_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            FidStats(mu=np.zeros(2), cov=np.array([[1.0, 0.5], [0.2, 1.0]]), n=5)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="n >= 2"):
            FidStats(mu=np.zeros(2), cov=np.eye(2), n=1)


class TestFeatureStats:
    def test_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        imgs = [rng.uniform(0, 1, (1, 16, 16)) for _ in range(6)]
        ext = IdentityExtractor()
        stats = feature_stats(imgs, ext)
        feats = np.stack([im.mean(axis=(1, 2)) for im in imgs])
        np.testing.assert_allclose(stats.mu, feats.mean(axis=0), atol=1e-12)
        # unbiased covariance by the explicit two-pass formula
        centered = feats - feats.mean(axis=0)
        np.testing.assert_allclose(
            stats.cov, centered.T @ centered / (len(imgs) - 1), atol=1e-12)

    def test_single_image_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            feature_stats([np.zeros((1, 8, 8))], IdentityExtractor())


class TestLpips:
    def test_self_distance_zero(self):
        ext = RandomConvExtractor()
        img = np.random.default_rng(0).uniform(0, 1, (1, 32, 32))
        assert lpips(img, img, ext) == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self):
        ext = RandomConvExtractor()
        rng = np.random.default_rng(1)
        for _ in range(3):
            a = rng.uniform(0, 1, (1, 32, 32))
            b = rng.uniform(0, 1, (1, 32, 32))
            assert lpips(a, b, ext) >= 0.0

    def test_identity_extractor_hand_value(self):
        # one single-channel layer: unit-normalizing any positive pixel gives
        # 1, so two positive constant images are identical after
        # normalization while a sign flip gives distance 4 per pixel
        ext = IdentityExtractor()
        a = np.full((1, 4, 4), 0.5)
        b = np.full((1, 4, 4), 0.9)
        assert lpips(a, b, ext) == pytest.approx(0.0, abs=1e-6)
        c = np.full((1, 4, 4), -0.5)
        assert lpips(a, c, ext) == pytest.approx(4.0, abs=1e-6)

    def test_extractor_determinism_across_instances(self):
        a = np.random.default_rng(2).uniform(0, 1, (1, 32, 32))
        b = np.random.default_rng(3).uniform(0, 1, (1, 32, 32))
        d1 = lpips(a, b, RandomConvExtractor())
        d2 = lpips(a, b, RandomConvExtractor())
        assert d1 == d2

    def test_symmetry(self):
        ext = RandomConvExtractor()
        a = np.random.default_rng(4).uniform(0, 1, (1, 32, 32))
        b = np.random.default_rng(5).uniform(0, 1, (1, 32, 32))
        assert lpips(a, b, ext) == pytest.approx(lpips(b, a, ext), abs=1e-12)


class TestKcc:
    def test_hand_vector(self):
        # confidences [1.0 x4, 0.7 x3, 0.3 x3]: mean 0.70, 7 of 10 >= 0.65
        confs = [1.0] * 4 + [0.7] * 3 + [0.3] * 3
        kp = KeypointSet(points=[((float(i), 0.0), c) for i, c in enumerate(confs)])
        res = kcc(kp, tau=0.65)
        assert res.S == pytest.approx(0.70, abs=1e-12)
        assert res.completeness == pytest.approx(0.7, abs=1e-12)
        assert res.kcc == pytest.approx(0.49, abs=1e-12)

    def test_boundary_confidence_counts(self):
        kp = KeypointSet(points=[((0.0, 0.0), 0.65)])
        res = kcc(kp, tau=0.65)
        assert res.completeness == 1.0

    def test_just_below_boundary_does_not_count(self):
        kp = KeypointSet(points=[((0.0, 0.0), 0.65 - 1e-9)])
        assert kcc(kp, tau=0.65).completeness == 0.0

    def test_empty_set(self):
        res = kcc(KeypointSet(points=[]))
        assert res.kcc == 0.0 and res.empty

    def test_all_perfect(self):
        kp = KeypointSet(points=[((float(i), 0.0), 1.0) for i in range(10)])
        res = kcc(kp)
        assert res.kcc == 1.0 and not res.empty

    def test_monotone_in_confidence(self):
        lo = KeypointSet(points=[((0.0, 0.0), 0.7), ((5.0, 0.0), 0.7)])
        hi = KeypointSet(points=[((0.0, 0.0), 0.9), ((5.0, 0.0), 0.9)])
        assert kcc(hi).kcc > kcc(lo).kcc

    def test_bad_tau(self):
        with pytest.raises(ValueError, match="tau"):
            kcc(KeypointSet(points=[]), tau=1.5)

    def test_too_many_keypoints_rejected(self):
        pts = [((float(i), 0.0), 0.5) for i in range(11)]
        with pytest.raises(ValueError, match="exceeds"):
            KeypointSet(points=pts)

    def test_confidence_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="confidence"):
            KeypointSet(points=[((0.0, 0.0), 1.2)])

    def test_result_is_product(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            confs = rng.uniform(0, 1, rng.integers(1, 11))
            kp = KeypointSet(points=[((float(i), 0.0), float(c))
                                     for i, c in enumerate(confs)])
            res = kcc(kp)
            assert res.kcc == pytest.approx(res.S * res.completeness, abs=1e-15)
            assert isinstance(res, KccResult)


class TestPhantomDetector:
    def test_high_score_on_clean_phantom(self):
        rng = np.random.default_rng(0)
        pair = generate_phantom(sample_params(rng, resolution=64))
        kp = detect_keypoints(pair.x, PhantomKeypointDetector())
        res = kcc(kp)
        assert kp.M == 10
        assert res.kcc >= 0.9

    def test_detected_points_near_ground_truth(self):
        rng = np.random.default_rng(1)
        pair = generate_phantom(sample_params(rng, resolution=64))
        kp = detect_keypoints(pair.x, PhantomKeypointDetector())
        for gx, gy in pair.keypoints_gt:
            d = np.sqrt(((kp.coordinates - [gx, gy]) ** 2).sum(axis=1)).min()
            assert d <= 2.5

    def test_low_score_on_uniform_image(self):
        kp = detect_keypoints(np.full((1, 64, 64), 0.4), PhantomKeypointDetector())
        assert kcc(kp).kcc <= 0.1

    def test_low_score_on_noise(self):
        img = np.clip(np.random.default_rng(2).normal(0.4, 0.05, (1, 64, 64)), 0, 1)
        assert kcc(detect_keypoints(img, PhantomKeypointDetector())).kcc <= 0.3

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pair = generate_phantom(sample_params(rng, resolution=64))
        a = detect_keypoints(pair.x, PhantomKeypointDetector())
        b = detect_keypoints(pair.x, PhantomKeypointDetector())
        assert a.points == b.points

    def test_out_of_range_input_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            detect_keypoints(np.full((1, 64, 64), 2.0), PhantomKeypointDetector())

    def test_min_distance_respected(self):
        rng = np.random.default_rng(4)
        pair = generate_phantom(sample_params(rng, resolution=64))
        det = PhantomKeypointDetector()
        coords = detect_keypoints(pair.x, det).coordinates
        for i in range(len(coords)):
            for j in range(i + 1, len(coords)):
                assert np.linalg.norm(coords[i] - coords[j]) >= det.min_distance


class TestMetricReport:
    def test_aggregate_means(self):
        rep = MetricReport(ssim=[0.8, 0.6], psnr=[20.0, 30.0], mae=[0.1, 0.3],
                           lpips=[0.2, 0.4], kcc=[0.5, 0.7], fid=3.0,
                           image_ids=["a", "b"])
        agg = rep.aggregate()
        assert agg["ssim"] == pytest.approx(0.7)
        assert agg["psnr"] == pytest.approx(25.0)
        assert agg["mae"] == pytest.approx(0.2)
        assert agg["fid"] == 3.0
        assert agg["kcc_std"] == pytest.approx(0.1)

    def test_text_table_and_save(self, tmp_path):
        rep = MetricReport(ssim=[0.8], psnr=[math.inf], mae=[0.1],
                           lpips=[0.2], kcc=[0.5], fid=1.0, image_ids=["s0"])
        text = rep.to_text()
        assert "SSIM" in text and "KCC" in text and "s0" in text
        assert "inf" in text
        out = tmp_path / "report.txt"
        rep.save(out)
        assert out.read_text() == text

    def test_empty_report_aggregates_nan(self):
        agg = MetricReport().aggregate()
        assert math.isnan(agg["ssim"])
