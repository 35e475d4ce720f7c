import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostdiff.analysis import grating_coefficients, integrate_peaks, sampled_grating
from ghostdiff.correlator import (
    EstimatorError,
    MomentAccumulator,
    autocorrelation,
    cross_correlation,
    ghost_pattern_fixed_pixel,
    ghost_pattern_spatial_average,
    mean_intensities,
    spatial_average,
    visibility,
)
from ghostdiff.optics import (
    BeamSplitterSpec,
    TransmissionObject,
    apply_object,
    lens_far_field,
    split_beam,
)
from ghostdiff.specklefield import GridAxis, SpeckleSpec, child_seed, synthesize_batch

AX = GridAxis.centered(16, 1.0)


def frames(n, seed, width=16):
    rng = np.random.default_rng(seed)
    return rng.exponential(size=(n, width)), rng.exponential(size=(n, width))


def bench(dxn, n_frames, optics, tgbs, master=2006, bs=None, block=500):
    """Far-field frames of the two arms, object in the test arm."""
    ax = GridAxis.centered(1024, 12.5 / 32)
    spec = SpeckleSpec(dxn, 332.5, ax)
    bs = bs or BeamSplitterSpec()
    out1, out2 = [], []
    for start in range(0, n_frames, block):
        near = synthesize_batch(spec, [child_seed(master, k) for k in range(start, min(start + block, n_frames))])
        a1, a2 = split_beam(near, bs)
        f1 = lens_far_field(apply_object(a1, tgbs), optics)
        f2 = lens_far_field(a2, optics)
        out1.append(f1.intensity)
        out2.append(f2.intensity)
    return f1.axis, np.concatenate(out1), np.concatenate(out2), ax


class TestAccumulator:
    def test_mode_validated(self):
        with pytest.raises(ValueError, match="mode"):
            MomentAccumulator(AX, "diagonal")

    def test_shape_mismatch(self):
        acc = MomentAccumulator(AX, rows=[0])
        with pytest.raises(ValueError, match="width"):
            acc.accumulate(np.ones(8), np.ones(8))

    def test_zero_frames_rejected(self):
        acc = MomentAccumulator(AX, rows=[3])
        with pytest.raises(EstimatorError, match="no frames"):
            cross_correlation(acc)

    def test_single_frame_rejected(self):
        acc = MomentAccumulator(AX, rows=[3]).accumulate(np.ones(16), np.ones(16))
        with pytest.raises(EstimatorError, match="at least 2"):
            cross_correlation(acc)

    def test_two_frames_then_merge_equals_sequential(self):
        i1, i2 = frames(2, 0)
        seq = MomentAccumulator(AX, rows=[1, 5]).accumulate(i1[0], i2[0]).accumulate(i1[1], i2[1])
        a = MomentAccumulator(AX, rows=[1, 5]).accumulate(i1[0], i2[0], block=0)
        b = MomentAccumulator(AX, rows=[1, 5]).accumulate(i1[1], i2[1], block=1)
        s1, s2 = seq.sums(), a.merge(b).sums()
        for k in s1:
            assert np.array_equal(s1[k], s2[k])

    @settings(max_examples=40, deadline=None)
    @given(
        st.sampled_from(["fixed_pixel", "full_matrix", "difference_coordinate"]),
        st.integers(1, 25),
        st.integers(1, 5),
        st.randoms(use_true_random=False),
    )
    def test_merge_exact_in_any_partition(self, mode, n_blocks, n_parts, rnd):
        i1, i2 = frames(3 * n_blocks, n_blocks)
        kw = {"rows": [0, 7]} if mode == "fixed_pixel" else {"lags": range(-3, 4)}
        ref = MomentAccumulator(AX, mode, **kw)
        for b in range(n_blocks):
            ref.accumulate(i1[3 * b:3 * b + 3], i2[3 * b:3 * b + 3], block=b)
        order = list(range(n_blocks))
        rnd.shuffle(order)
        parts = [MomentAccumulator(AX, mode, **kw) for _ in range(n_parts)]
        for j, b in enumerate(order):
            parts[rnd.randrange(n_parts)].accumulate(i1[3 * b:3 * b + 3], i2[3 * b:3 * b + 3], block=b)
        rnd.shuffle(parts)
        merged = parts[0]
        for p in parts[1:]:
            merged.merge(p)
        s_ref, s_m = ref.sums(), merged.sums()
        assert merged.n_frames == 3 * n_blocks
        for k in s_ref:
            assert np.array_equal(s_ref[k], s_m[k]), k

    def test_duplicate_block_rejected(self):
        acc = MomentAccumulator(AX, rows=[0]).accumulate(np.ones(16), np.ones(16), block=4)
        with pytest.raises(ValueError, match="twice"):
            acc.accumulate(np.ones(16), np.ones(16), block=4)

    def test_incompatible_merge(self):
        with pytest.raises(ValueError, match="merge"):
            MomentAccumulator(AX, rows=[0]).merge(MomentAccumulator(AX, rows=[1]))

    def test_full_matrix_size_guard(self):
        with pytest.raises(ValueError, match="512"):
            MomentAccumulator(GridAxis.centered(1024, 1.0), "full_matrix")

    def test_mean_of_unit_speckle(self):
        rng = np.random.default_rng(5)
        acc = MomentAccumulator(AX, rows=[0])
        for b in range(20):
            acc.accumulate(rng.exponential(size=(500, 16)), rng.exponential(size=(500, 16)), block=b)
        m1, m2 = mean_intensities(acc)
        assert np.all(np.abs(m1.values - 1) < 0.03)
        assert np.all(np.abs(m2.values - 1) < 0.03)
        assert np.all(m1.stderr > 0)


class TestCorrelations:
    def test_independent_arms_give_zero(self):
        rng = np.random.default_rng(1)
        acc = MomentAccumulator(AX, rows=range(16))
        for b in range(20):
            acc.accumulate(rng.exponential(size=(500, 16)), rng.exponential(size=(500, 16)), block=b)
        for r in (0, 8, 15):
            g = ghost_pattern_fixed_pixel(acc, r)
            assert np.mean(np.abs(g.values) <= 3 * g.stderr) >= 0.9

    def test_same_arm_gives_variance(self):
        i1, _ = frames(400, 2)
        acc = MomentAccumulator(AX, "full_matrix").accumulate(i1, i1)
        g = cross_correlation(acc)
        np.testing.assert_allclose(np.diag(g), i1.var(0), rtol=1e-10)
        assert np.all(np.diag(g) >= 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 2 ** 31))
    def test_autocorrelation_symmetric(self, n, seed):
        i1, i2 = frames(n, seed)
        acc = MomentAccumulator(AX, "full_matrix").accumulate(i1, i2)
        c = np.stack([autocorrelation(acc, r).values for r in range(16)])
        assert np.array_equal(c, c.T)
        assert np.all(np.diag(c) >= 0)

    def test_rows_select_correct_slice(self):
        i1, i2 = frames(300, 3)
        full = MomentAccumulator(AX, "full_matrix").accumulate(i1, i2)
        part = MomentAccumulator(AX, rows=[2, 9, 13]).accumulate(i1, i2)
        for r in (2, 9, 13):
            np.testing.assert_allclose(ghost_pattern_fixed_pixel(part, r).values,
                                       ghost_pattern_fixed_pixel(full, r).values, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(autocorrelation(part, r).values, autocorrelation(full, r).values,
                                       rtol=1e-12, atol=1e-14)

    def test_missing_row(self):
        acc = MomentAccumulator(AX, rows=[2]).accumulate(*frames(4, 0))
        with pytest.raises(EstimatorError, match="slice"):
            ghost_pattern_fixed_pixel(acc, 3)

    def test_normalization_masks_dark_pixels(self):
        i1, i2 = frames(50, 4)
        i2[:, :4] *= 1e-3
        acc = MomentAccumulator(AX, rows=[8]).accumulate(i1, i2)
        p = ghost_pattern_fixed_pixel(acc, 8, normalize=True)
        assert np.all(p.mask[:4]) and not np.any(p.mask[4:])

    def test_all_masked_rejected(self):
        i1, i2 = frames(50, 4)
        i2[:] = 0
        acc = MomentAccumulator(AX, rows=[8]).accumulate(i1, i2)
        with pytest.raises(EstimatorError, match="masked"):
            ghost_pattern_fixed_pixel(acc, 8, normalize=True, floor=2.0)

    def test_rt_squared_scaling(self, optics, tgbs):
        ax, a1, a2, _ = bench(2.0, 400, optics, tgbs, bs=BeamSplitterSpec(np.sqrt(0.5), np.sqrt(0.5)))
        _, b1, b2, _ = bench(2.0, 400, optics, tgbs, bs=BeamSplitterSpec(np.sqrt(0.2), np.sqrt(0.2)))
        ga = cross_correlation(MomentAccumulator(ax, rows=[512]).accumulate(a1, a2))
        gb = cross_correlation(MomentAccumulator(ax, rows=[512]).accumulate(b1, b2))
        # |rt|^2: 0.25 vs 0.04
        np.testing.assert_allclose(ga, gb * 0.25 / 0.04, rtol=1e-9, atol=1e-12)


@pytest.fixture(scope="module")
def incoherent():
    from ghostdiff.optics import OpticalConfig

    cfg = OpticalConfig()
    obj = TransmissionObject.square_phase_grating(12.5, 4.2, 0.84 * np.pi)
    ax, i1, i2, near_ax = bench(2.0, 20_000, cfg, obj)
    pred = grating_coefficients(sampled_grating(obj, near_ax), 2, cfg)
    return ax, i1, i2, pred


class TestGhostPatterns:
    def test_fixed_pixel_reconstructs_first_orders(self, incoherent):
        ax, i1, i2, pred = incoherent
        acc = MomentAccumulator(ax, rows=[ax.center_index])
        for b in range(0, len(i1), 500):
            acc.accumulate(i1[b:b + 500], i2[b:b + 500], block=b // 500)
        p = ghost_pattern_fixed_pixel(acc, ax.center_index, normalize=True)
        peaks = {e.order: e.ratio for e in integrate_peaks(p, pred, 5 * ax.pitch, 0.0, -1)}
        r = pred.ratios()
        for n in (-1, 1):
            assert peaks[n] == pytest.approx(r[n], rel=0.15)

    def test_shift_of_test_pixel_shifts_pattern(self, incoherent):
        ax, i1, i2, pred = incoherent
        c, shift = ax.center_index, 32
        acc = MomentAccumulator(ax, rows=[c, c + shift]).accumulate(i1, i2)
        p0 = ghost_pattern_fixed_pixel(acc, c).values
        p1 = ghost_pattern_fixed_pixel(acc, c + shift).values
        # cross-correlation of the two profiles peaks at the shift
        lags = range(-8, 41)
        score = [np.dot(p0[100:900], p1[100 + k:900 + k]) for k in lags]
        assert list(lags)[int(np.argmax(score))] == shift

    def test_spatial_average_matches_fixed_pixel_ratios(self, incoherent):
        ax, i1, i2, pred = incoherent
        sa = ghost_pattern_spatial_average(i1, i2, ax, max_lag=75)
        fp_acc = MomentAccumulator(ax, rows=[ax.center_index])
        for b in range(0, len(i1), 500):
            fp_acc.accumulate(i1[b:b + 500], i2[b:b + 500], block=b // 500)
        fp = ghost_pattern_fixed_pixel(fp_acc, ax.center_index, normalize=True)
        r_sa = {e.order: e.ratio for e in integrate_peaks(sa, pred, 5 * ax.pitch)}
        r_fp = {e.order: e.ratio for e in integrate_peaks(fp, pred, 5 * ax.pitch, 0.0, -1)}
        for n in (-1, 1):
            # far-field envelope is not flat at 2 um; agreement is at the 20% level
            assert r_sa[n] == pytest.approx(r_fp[n], rel=0.2)

    def test_spatial_average_positive_at_zero_lag(self, incoherent):
        ax, i1, i2, _ = incoherent
        sa = ghost_pattern_spatial_average(i1[:100], i2[:100], ax, max_lag=10)
        assert sa.values[10] > 0

    def test_spatial_average_axis(self):
        i1, i2 = frames(20, 0)
        acc = MomentAccumulator(AX, "difference_coordinate", lags=range(-3, 4))
        acc.accumulate(i1, i2)
        p = spatial_average(acc)
        np.testing.assert_allclose(p.coordinates, np.arange(-3, 4) * AX.pitch)
        # direct average over the common support
        m1, m2 = i1.mean(0), i2.mean(0)
        r = 2
        direct = np.mean([(i1[:, x] * i2[:, x - r]).mean() - m1[x] * m2[x - r] for x in range(3, 13)])
        assert p.values[5] == pytest.approx(direct, rel=1e-12)

    def test_spatial_average_needs_two_frames(self):
        i1, i2 = frames(1, 0)
        with pytest.raises(EstimatorError):
            ghost_pattern_spatial_average(i1, i2, AX, max_lag=2)

    def test_lags_without_support(self):
        with pytest.raises(ValueError, match="support"):
            MomentAccumulator(AX, "difference_coordinate", lags=range(-9, 10))


class TestVisibility:
    def test_constant_frames_zero(self):
        acc = MomentAccumulator(AX, rows=[0, 5]).accumulate(np.ones((10, 16)), np.ones((10, 16)))
        rep = visibility(acc)
        assert rep.max_visibility == 0

    def test_bounded(self):
        i1, i2 = frames(30, 6)
        acc = MomentAccumulator(AX, "full_matrix").accumulate(i1, i1)
        v = visibility(acc).values
        assert np.nanmin(v) >= 0 and np.nanmax(v) <= 1

    def test_thermal_bound(self, optics, tgbs):
        ax, i1, i2, _ = bench(12.0, 10_000, optics, tgbs)
        acc = MomentAccumulator(ax, rows=[ax.center_index, ax.center_index + 32])
        for b in range(0, len(i1), 500):
            acc.accumulate(i1[b:b + 500], i2[b:b + 500], block=b // 500)
        rep = visibility(acc)
        assert rep.max_visibility <= 0.5 + 3 * rep.stderr_at_max

    def test_peak_visibility_follows_reference_intensity(self, optics, tgbs):
        # the first-order peak visibility tracks <I2> at the peak as coherence grows
        vis, ref = [], []
        for dxn in (2.0, 4.0, 6.0):
            ax, i1, i2, _ = bench(dxn, 6000, optics, tgbs)
            c = ax.center_index
            acc = MomentAccumulator(ax, rows=[c]).accumulate(i1, i2)
            v = visibility(acc, floor=0.0).values[0]
            vis.append(v[c - 32])
            ref.append(i2.mean(0)[c - 32] / i2.mean(0)[c])
        assert ref[0] > ref[1] > ref[2]
        assert vis[0] > vis[1] > vis[2]


def flat_peaks(i1, i2, ax, pred):
    sa = ghost_pattern_spatial_average(i1, i2, ax, max_lag=75)
    return {e.order: e.ratio for e in integrate_peaks(sa, pred, 5 * ax.pitch)}


@pytest.fixture(scope="module")
def setup():
    from ghostdiff.optics import OpticalConfig

    cfg = OpticalConfig()
    obj = TransmissionObject.square_phase_grating(12.5, 4.2, 0.84 * np.pi)
    near_ax = GridAxis.centered(1024, 12.5 / 32)
    return cfg, obj, grating_coefficients(sampled_grating(obj, near_ax), 2, cfg)


class TestFlatEnvelope:
    """A 0.8 um source makes the far-field envelope flat over the orders of interest."""

    @pytest.mark.xfail(strict=True, reason="seed 2006 is a ~3 sigma realization at 100 frames (+31% on order 1)")
    def test_hundred_frames_seed_2006(self, setup):
        cfg, obj, pred = setup
        ax, i1, i2, _ = bench(0.8, 100, cfg, obj, master=2006, block=100)
        got, r = flat_peaks(i1, i2, ax, pred), pred.ratios()
        for n in (-2, -1, 1, 2):
            assert got[n] == pytest.approx(r[n], rel=0.15)

    def test_hundred_frames_typical_accuracy(self, setup):
        cfg, obj, pred = setup
        r = pred.ratios()
        err = {n: [] for n in (-2, -1, 1, 2)}
        for master in range(3000, 3020):
            ax, i1, i2, _ = bench(0.8, 100, cfg, obj, master=master, block=100)
            got = flat_peaks(i1, i2, ax, pred)
            for n in err:
                err[n].append(got[n] / r[n] - 1)
        for n in err:
            e = np.array(err[n])
            # unbiased, and a typical 100-frame ensemble lands within 15%
            assert abs(e.mean()) <= 3 * e.std(ddof=1) / np.sqrt(e.size)
            assert np.median(np.abs(e)) <= 0.15

    def test_fixed_pixel_and_spatial_average_agree_within_jackknife_error(self, setup):
        cfg, obj, pred = setup
        ax, i1, i2, _ = bench(0.8, 2000, cfg, obj, master=2006)
        c = ax.center_index

        def both(sel):
            acc = MomentAccumulator(ax, rows=[c]).accumulate(i1[sel], i2[sel])
            fp = ghost_pattern_fixed_pixel(acc, c, normalize=True)
            r_fp = {e.order: e.ratio for e in integrate_peaks(fp, pred, 5 * ax.pitch, 0.0, -1)}
            return r_fp, flat_peaks(i1[sel], i2[sel], ax, pred)

        full_fp, full_sa = both(slice(None))
        groups = np.arange(2000) % 10
        loo = [both(groups != g) for g in range(10)]
        for n in (-2, -1, 1, 2):
            diff = np.array([a[n] - b[n] for a, b in loo])
            se = np.sqrt(9 / 10 * np.sum((diff - diff.mean()) ** 2))
            assert abs(full_fp[n] - full_sa[n]) <= 3 * se
