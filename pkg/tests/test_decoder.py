import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mhdepth import diffcore as dc
from mhdepth.decoder import (DecoderConfig, HypothesisSet, candidate_peaks, candidate_peaks_matrix,
                             decode, decode_marginals, expected_index, hypothesis_windows,
                             marginalize_depth, refine_depth, refine_depth_pooled, soft_argmax_3d,
                             top_k_peaks, window_bounds, windowed_depth)
from mhdepth.fixtures import bimodal_heatmap


def random_marginals(rng, j, d):
    m = rng.random((j, d))
    return m / m.sum(axis=1, keepdims=True)


def naive_softmax_expectation(h):
    j, d, hh, w = h.shape
    out = np.zeros((j, 3))
    for jj in range(j):
        z = 0.0
        for a in range(d):
            for b in range(hh):
                for c in range(w):
                    z += np.exp(h[jj, a, b, c])
        for a in range(d):
            for b in range(hh):
                for c in range(w):
                    p = np.exp(h[jj, a, b, c]) / z
                    out[jj] += p * np.array([c, b, a])
    return out


def naive_marginal(h):
    j, d, hh, w = h.shape
    m = np.zeros((j, d))
    for jj in range(j):
        total = sum(np.exp(v) for v in h[jj].ravel())
        for a in range(d):
            for b in range(hh):
                for c in range(w):
                    m[jj, a] += np.exp(h[jj, a, b, c]) / total
    return m


def naive_window_mean(row, peak, n_w):
    lo, hi = max(0, peak - n_w), min(len(row) - 1, peak + n_w)
    num = den = 0.0
    for i in range(lo, hi + 1):
        num += i * row[i]
        den += row[i]
    return num / den


# -- soft-argmax and marginals --------------------------------------------------
def test_soft_argmax_delta():
    h = np.full((1, 8, 4, 5), -100.0)
    h[0, 5, 2, 3] = 10.0
    np.testing.assert_allclose(soft_argmax_3d(h)[0], [3, 2, 5], atol=1e-6)


def test_soft_argmax_uniform():
    np.testing.assert_allclose(soft_argmax_3d(np.zeros((2, 4, 4, 4))), 1.5)


def test_soft_argmax_matches_naive_loops(rng):
    h = rng.normal(size=(2, 5, 3, 4))
    np.testing.assert_allclose(soft_argmax_3d(h), naive_softmax_expectation(h), rtol=1e-12)


def test_marginal_delta_and_uniform():
    h = np.full((1, 8, 3, 3), -200.0)
    h[0, 5, 1, 1] = 0.0
    m = marginalize_depth(h)
    np.testing.assert_allclose(m[0], np.eye(8)[5], atol=1e-9)
    np.testing.assert_allclose(marginalize_depth(np.zeros((2, 6, 3, 3))), 1 / 6)


def test_marginal_matches_naive_loops(rng):
    h = rng.normal(size=(3, 6, 2, 3))
    m = marginalize_depth(h)
    np.testing.assert_allclose(m, naive_marginal(h), rtol=1e-12)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_heatmap_validation():
    with pytest.raises(ValueError):
        soft_argmax_3d(np.zeros((2, 2, 3, 3)))
    with pytest.raises(ValueError):
        marginalize_depth(np.zeros((3, 4, 4)))
    bad = np.zeros((1, 4, 2, 2))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        decode(bad, DecoderConfig())


# -- candidate peaks ----------------------------------------------------------------
@pytest.mark.parametrize("row, expected", [
    ([0.1, 0.3, 0.2, 0.5, 0.4], [1, 3]),
    ([0.1, 0.2, 0.3, 0.4], []),
    ([0.1, 0.3, 0.3, 0.1], [1, 2]),
    ([0.25, 0.25, 0.25, 0.25], [1, 2]),
])
def test_candidate_peak_examples(row, expected):
    for fn in (candidate_peaks, candidate_peaks_matrix):
        assert list(np.flatnonzero(fn(np.array(row))[0])) == expected


def test_edges_never_candidates(rng):
    m = random_marginals(rng, 50, 10)
    mask = candidate_peaks_matrix(m)
    assert not mask[:, 0].any() and not mask[:, -1].any()


def test_short_rows_rejected():
    for fn in (candidate_peaks, candidate_peaks_matrix):
        with pytest.raises(ValueError):
            fn(np.array([[0.5, 0.5]]))


def test_matrix_peaks_equal_loop_peaks_on_1000_marginals(rng):
    for _ in range(1000):
        m = random_marginals(rng, 18, 64)
        if rng.random() < 0.2:  # exercise plateaus
            m = np.round(m, 2)
        np.testing.assert_array_equal(candidate_peaks(m), candidate_peaks_matrix(m))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(3, 20)),
                  elements=st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.5])))
def test_peak_masks_agree_on_quantised_rows(m):
    np.testing.assert_array_equal(candidate_peaks(m), candidate_peaks_matrix(m))


# -- top-k ---------------------------------------------------------------------------
def test_top_k_example():
    row = np.array([[0.1, 0.3, 0.2, 0.5, 0.4]])
    peaks, valid, fallback = top_k_peaks(row, candidate_peaks(row), 2)
    assert peaks == [[3, 1]] and valid.tolist() == [2] and not fallback.any()


def test_top_k_single_peak():
    row = np.array([[0.1, 0.2, 0.4, 0.2, 0.1]])
    peaks, valid, _ = top_k_peaks(row, candidate_peaks(row), 3)
    assert peaks == [[2]] and valid.tolist() == [1]


def test_top_k_ties_prefer_lower_index():
    row = np.array([[0.0, 0.3, 0.1, 0.3, 0.0, 0.3, 0.0]])
    peaks, _, _ = top_k_peaks(row, candidate_peaks(row), 2)
    assert peaks == [[1, 3]]


def test_top_k_fallback_on_monotone_row():
    row = np.array([[0.1, 0.2, 0.3, 0.4]])
    peaks, valid, fallback = top_k_peaks(row, candidate_peaks(row), 3)
    assert peaks == [[3]] and valid.tolist() == [1] and fallback.tolist() == [True]


def test_top_k_rejects_bad_k():
    with pytest.raises(ValueError):
        top_k_peaks(np.ones((1, 4)), np.ones((1, 4), bool), 0)


def test_top_k_matches_brute_force_sort(rng):
    for _ in range(200):
        m = random_marginals(rng, 4, 16)
        k = int(rng.integers(1, 5))
        mask = candidate_peaks(m)
        peaks, valid, _ = top_k_peaks(m, mask, k)
        for row in range(4):
            cands = sorted(np.flatnonzero(mask[row]), key=lambda i: (-m[row, i], i))
            assert peaks[row] == [int(i) for i in cands[:k]]
            assert valid[row] == min(k, len(cands))


# -- refinement ----------------------------------------------------------------------
def test_refine_symmetric_bump():
    row = np.zeros(17)
    row[5:12] = [1, 2, 3, 4, 3, 2, 1]
    row /= row.sum()
    assert abs(refine_depth(row, [8], 3)[0] - 8.0) < 1e-9


def test_refine_one_hot():
    row = np.eye(10)[5]
    assert refine_depth(row, [5], 2)[0] == 5.0
    assert refine_depth_pooled(row, [5], 2)[0] == 5.0


def test_refine_zero_mass_window_returns_peak():
    row = np.zeros(20)
    row[0] = 1.0
    assert refine_depth(row, [15], 3)[0] == 15.0
    assert refine_depth_pooled(row, [15], 3)[0] == 15.0


def test_refine_matches_naive_loop(rng):
    for _ in range(50):
        row = random_marginals(rng, 1, 30)[0]
        peak = int(rng.integers(0, 30))
        n_w = int(rng.integers(1, 8))
        assert abs(refine_depth(row, [peak], n_w)[0] - naive_window_mean(row, peak, n_w)) < 1e-12


def test_pooled_equals_loop_at_first_interior_peak(rng):
    row = random_marginals(rng, 1, 64)[0]
    assert abs(refine_depth(row, [15], 15)[0] - refine_depth_pooled(row, [15], 15)[0]) < 1e-12


def test_pooled_equals_loop_on_1000_marginals(rng):
    for _ in range(1000):
        m = random_marginals(rng, 18, 64)
        peaks = rng.integers(15, 49, size=3)
        for row in m[:2]:
            np.testing.assert_allclose(refine_depth_pooled(row, peaks, 15),
                                       refine_depth(row, peaks, 15), rtol=0, atol=1e-12)


def test_pooled_equals_loop_at_boundaries(rng):
    m = random_marginals(rng, 1, 64)[0]
    peaks = np.array([0, 1, 5, 14, 50, 62, 63])
    np.testing.assert_allclose(refine_depth_pooled(m, peaks, 15), refine_depth(m, peaks, 15), atol=1e-12)


@given(st.integers(0, 40), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_refined_depth_stays_in_window(peak, n_w, seed):
    row = random_marginals(np.random.default_rng(seed), 1, 41)[0]
    z = refine_depth(row, [peak], n_w)[0]
    lo, hi = window_bounds(peak, n_w, 41)
    assert lo - 1e-12 <= z <= hi + 1e-12


# -- full decode -------------------------------------------------------------------------
def test_bimodal_decode_recovers_both_centres():
    hyps = decode(bimodal_heatmap(), DecoderConfig(n_hypo=2, n_w=15))
    z = hyps.poses[:, :, 2]
    assert np.all(np.abs(z[0] - 16) < 0.5) and np.all(np.abs(z[1] - 48) < 0.5)
    assert hyps.valid_count.tolist() == [2, 2]


def test_unimodal_decode_single_valid_hypothesis():
    z = np.arange(64.0)
    h = np.broadcast_to((-0.5 * ((z - 30.3) / 2.0) ** 2)[None, :, None, None], (2, 64, 4, 4)).copy()
    hyps = decode(h, DecoderConfig(n_hypo=3))
    assert hyps.valid_count.tolist() == [1, 1]
    np.testing.assert_allclose(hyps.poses[0, :, 2], soft_argmax_3d(h)[:, 2], atol=0.5)


def test_single_hypothesis_is_refined_global_peak(rng):
    h = rng.normal(size=(3, 20, 2, 2))
    hyps = decode(h, DecoderConfig(n_hypo=1, n_w=4))
    m = marginalize_depth(h)
    for j in range(3):
        peak = int(np.flatnonzero(candidate_peaks(m[j])[0])[np.argmax(m[j][candidate_peaks(m[j])[0]])])
        assert hyps.poses[0, j, 2] == refine_depth(m[j], [peak], 4)[0]


def test_decode_invariants(rng):
    for _ in range(30):
        h = rng.normal(size=(4, 24, 3, 3)) * 2
        cfg = DecoderConfig(n_hypo=3, n_w=5)
        a, b = decode(h, cfg), decode(h, cfg)
        assert a.poses.tobytes() == b.poses.tobytes()
        assert np.all(np.diff(a.confidences, axis=0) <= 0)
        assert np.all((a.valid_count >= 1) & (a.valid_count <= 3))
        assert np.all((a.poses[..., 2] >= 0) & (a.poses[..., 2] <= 23))
        np.testing.assert_array_equal(a.poses[0, :, :2], soft_argmax_3d(h)[:, :2])
        np.testing.assert_array_equal(a.poses[1, :, :2], a.poses[0, :, :2])


def test_n_hypo_one_close_to_soft_argmax_for_concentrated_marginal():
    z = np.arange(64.0)
    logits = -0.5 * ((z - 33.7) / 2.5) ** 2  # mass outside +-15 bins below 1e-6
    h = np.broadcast_to(logits[None, :, None, None], (1, 64, 2, 2)).copy()
    hyps = decode(h, DecoderConfig(n_hypo=1, n_w=15))
    assert abs(hyps.poses[0, 0, 2] - soft_argmax_3d(h)[0, 2]) < 1.0


def test_hypothesis_set_json_round_trip(rng):
    hyps = decode(rng.normal(size=(2, 10, 2, 2)), DecoderConfig(n_hypo=2, n_w=2))
    back = HypothesisSet.from_json(hyps.to_json())
    np.testing.assert_array_equal(back.poses, hyps.poses)
    np.testing.assert_array_equal(back.valid_count, hyps.valid_count)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(n_hypo=0)
    with pytest.raises(ValueError):
        DecoderConfig(n_w=0)


# -- differentiable training pieces ------------------------------------------------------
def test_windowed_depth_matches_decoder(rng):
    m = random_marginals(rng, 6, 32).reshape(2, 3, 32)
    cfg = DecoderConfig(n_hypo=3, n_w=4)
    windows, valid = hypothesis_windows(m, cfg)
    z = windowed_depth(dc.Tensor(m), windows).data
    for s in range(2):
        hyps = decode_marginals(np.zeros((3, 2)), m[s], cfg)
        np.testing.assert_allclose(z[s], hyps.poses[:, :, 2], atol=1e-12)
        assert valid[s] == hyps.valid_count.max()


def test_expected_index():
    p = dc.Tensor(np.array([[0.0, 0.5, 0.5]]))
    np.testing.assert_allclose(expected_index(p).data, [1.5])
