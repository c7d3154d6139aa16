import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtihc.errors import (
    DegenerateInputError,
    DegenerateValueWarning,
    DimensionError,
    InsufficientTissueError,
    ParseError,
    SingularMatrixError,
)
from virtihc.image import lab_to_rgb, rgb_to_lab, rgb_to_od, tissue_mask
from virtihc.stain import (
    NormalizationReference,
    ReinhardStats,
    StainMatrix,
    concentrations,
    estimate_stain_matrix,
    make_reference,
    max_concentration,
    nmf_factorize,
    normalize_vahadane,
    reinhard_normalize,
    reinhard_stats,
    render,
)

from conftest import two_stain_image

FULL = np.ones((64, 64), dtype=bool)


# ------------------------------------------------------------------ NMF


def test_nmf_recovers_exact_two_factor_product():
    rng = np.random.default_rng(0)
    h = np.array([[0.6, 0.7, 0.3], [0.1, 0.9, 0.2]])
    w = rng.uniform(0, 1, (400, 2))
    w[:20, 1] = 0.0  # some pure rows of each basis vector
    w[20:40, 0] = 0.0
    res = nmf_factorize(w @ h, rank=2, max_iters=20000, tol=1e-14, seed=0)
    assert res.error < 1e-6


def test_nmf_rank_one_input():
    rng = np.random.default_rng(1)
    v = np.outer(rng.uniform(0.5, 2.0, 200), [0.3, 0.5, 0.8])
    res = nmf_factorize(v, rank=2, max_iters=20000, tol=1e-15)
    assert res.error < 1e-8
    assert res.w.min() >= 0 and res.h.min() >= 0


@pytest.mark.parametrize("init", ["extreme", "random"])
@pytest.mark.parametrize("seed", range(5))
def test_nmf_objective_non_increasing(seed, init):
    v = np.random.default_rng(seed).uniform(0, 1, (150, 3))
    res = nmf_factorize(v, rank=2, max_iters=300, tol=0.0, seed=seed, init=init)
    obj = np.array(res.objective)
    assert np.all(np.diff(obj) <= 1e-12 * obj[:-1])


def test_nmf_is_deterministic():
    v = np.random.default_rng(2).uniform(0, 1, (100, 3))
    a = nmf_factorize(v, seed=5, init="random")
    b = nmf_factorize(v, seed=5, init="random")
    assert np.array_equal(a.h, b.h) and np.array_equal(a.w, b.w)


def test_nmf_errors():
    with pytest.raises(DimensionError):
        nmf_factorize(np.ones((1, 3)), rank=2)
    with pytest.raises(DegenerateInputError):
        nmf_factorize(np.zeros((10, 3)))


# ------------------------------------------------------------------ stain matrix


@pytest.mark.parametrize("seed", range(4))
def test_estimate_recovers_he(he_matrix, seed):
    img, _ = two_stain_image(he_matrix, seed=seed)
    est = estimate_stain_matrix(img, FULL, sample_count=4000, seed=seed)
    cos = np.sum(est.rows * he_matrix.rows, axis=1)
    assert np.all(cos > 0.99)


@pytest.mark.parametrize("seed", range(4))
def test_estimate_recovers_h_dab(ihc_matrix, seed):
    img, _ = two_stain_image(ihc_matrix, seed=seed)
    est = estimate_stain_matrix(img, FULL, sample_count=4000, seed=seed)
    assert np.all(np.sum(est.rows * ihc_matrix.rows, axis=1) > 0.99)


def test_estimate_single_stain(he_matrix):
    rng = np.random.default_rng(0)
    conc = np.zeros((64, 64, 2))
    conc[..., 0] = rng.uniform(0.1, 1.0, (64, 64))
    est = estimate_stain_matrix(render(conc, he_matrix), FULL, sample_count=2000)
    assert np.max(est.rows @ he_matrix.rows[0]) > 0.99


def test_estimate_rows_are_nonnegative_unit(he_matrix):
    img, _ = two_stain_image(he_matrix, seed=3)
    est = estimate_stain_matrix(img, FULL, sample_count=2000)
    assert est.rows.min() >= 0
    assert np.allclose(np.linalg.norm(est.rows, axis=1), 1.0, atol=1e-9)


def test_estimate_stable_across_seeds(he_matrix):
    img, _ = two_stain_image(he_matrix, seed=0)
    runs = [estimate_stain_matrix(img, FULL, sample_count=3000, seed=s).rows for s in range(3)]
    for other in runs[1:]:
        assert np.all(np.sum(runs[0] * other, axis=1) > 0.999)


def test_estimate_all_white():
    with pytest.raises(InsufficientTissueError):
        estimate_stain_matrix(np.ones((32, 32, 3)), np.ones((32, 32), bool), sample_count=500)


def test_estimate_uses_downsampled_mask(he_matrix):
    img, _ = two_stain_image(he_matrix, shape=(64, 64), seed=1)
    est = estimate_stain_matrix(img, np.ones((16, 16), bool), sample_count=2000)
    assert np.all(np.sum(est.rows * he_matrix.rows, axis=1) > 0.99)


# ------------------------------------------------------------------ concentrations


def test_concentration_of_pure_row(he_matrix):
    od = he_matrix.rows[0].reshape(1, 1, 3)
    assert np.allclose(concentrations(od, he_matrix)[0, 0], [1.0, 0.0], atol=1e-12)


def test_concentration_of_mixture(he_matrix):
    od = (0.3 * he_matrix.rows[0] + 0.7 * he_matrix.rows[1]).reshape(1, 1, 3)
    assert np.allclose(concentrations(od, he_matrix)[0, 0], [0.3, 0.7], atol=1e-9)


def test_concentrations_match_per_pixel_solver(he_matrix):
    rng = np.random.default_rng(7)
    od = rng.uniform(0, 1.5, (10, 10, 3))
    got = concentrations(od, he_matrix)
    for i in range(10):
        for j in range(10):
            sol, *_ = np.linalg.lstsq(he_matrix.rows.T, od[i, j], rcond=None)
            assert np.allclose(got[i, j], np.maximum(sol, 0.0), atol=1e-10)


def test_concentrations_singular():
    sm = StainMatrix(np.array([[0.6, 0.8, 0.0], [0.6, 0.8, 0.0]]))
    with pytest.raises(SingularMatrixError):
        concentrations(np.zeros((2, 2, 3)), sm)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_render_then_deconvolve_in_span(seed):
    sm = StainMatrix.from_vectors([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]])
    conc = np.random.default_rng(seed).uniform(0, 2, (6, 6, 2))
    od = (conc.reshape(-1, 2) @ sm.rows).reshape(6, 6, 3)
    assert np.max(np.abs(concentrations(od, sm) - conc)) <= 1e-9


# ------------------------------------------------------------------ scale


def test_max_concentration_constant():
    assert np.allclose(max_concentration(np.full((20, 20, 2), 0.5)), 0.5)


def test_max_concentration_nearest_rank():
    col = np.array([0.1] * 900 + [1.0] * 100)
    cm = np.stack([col, col[::-1]], axis=-1).reshape(1000, 1, 2)
    ranked = np.sort(col)
    expected = ranked[int(np.ceil(0.99 * 1000)) - 1]
    assert np.allclose(max_concentration(cm, 99), expected)
    assert np.allclose(max_concentration(cm, 50), 0.1)


def test_max_concentration_all_zero_warns():
    with pytest.warns(DegenerateValueWarning):
        out = max_concentration(np.zeros((5, 5, 2)))
    assert np.allclose(out, 1.0)


# ------------------------------------------------------------------ Vahadane


def _tissue_image(sm, seed=0):
    img, conc = two_stain_image(sm, shape=(64, 64), seed=seed, background=0.3)
    return img, conc, conc.sum(axis=-1) > 0


def test_normalize_against_self(he_matrix):
    img, _, tissue = _tissue_image(he_matrix)
    mask = tissue_mask(img)
    ref = make_reference(img, mask)
    out = normalize_vahadane(img, mask, ref)
    assert np.mean(np.abs(out - img)[tissue]) <= 2 / 255
    assert np.max(np.abs(out - img)[~tissue]) <= 1 / 255


def test_normalize_to_other_matrix(he_matrix, ihc_matrix):
    img, conc, tissue = _tissue_image(he_matrix, seed=2)
    mask = tissue_mask(img)
    own = make_reference(img, mask)
    ref = NormalizationReference(ihc_matrix, own.max_concentration)
    out = normalize_vahadane(img, mask, ref)
    expected = render(conc, ihc_matrix)
    assert np.mean(np.abs(out - expected)[tissue]) <= 2 / 255


def test_normalize_scale_invariance(he_matrix):
    img, conc, _ = _tissue_image(he_matrix, seed=4)
    scaled = render(conc * 0.6, he_matrix)
    ref = make_reference(img, tissue_mask(img))
    a = normalize_vahadane(img, tissue_mask(img), ref)
    b = normalize_vahadane(scaled, tissue_mask(scaled), ref)
    assert np.mean(np.abs(a - b)) <= 2 / 255


def test_reference_json_round_trip(tmp_path, he_matrix):
    ref = NormalizationReference(he_matrix, [0.9, 1.1])
    ref.save(tmp_path / "ref.json")
    back = NormalizationReference.load(tmp_path / "ref.json")
    assert np.array_equal(back.stain_matrix.rows, he_matrix.rows)
    assert np.array_equal(back.max_concentration, [0.9, 1.1])


@pytest.mark.parametrize(
    "doc",
    [
        "{",
        '{"stains": [[1, 0, 0]], "max_concentration": [1, 1]}',
        '{"stains": [[1, 0, 0], [0, 2, 0]], "max_concentration": [1, 1]}',
        '{"stains": [[1, 0, 0], [0, 1, 0]], "max_concentration": [1, -1]}',
        '{"max_concentration": [1, 1]}',
    ],
)
def test_reference_json_validation(doc):
    with pytest.raises(ParseError):
        NormalizationReference.from_json(doc)


# ------------------------------------------------------------------ Reinhard


def test_reinhard_constant_tissue_warns():
    img = np.ones((8, 8, 3))
    img[:4] = 0.4
    mask = np.zeros((8, 8), bool)
    mask[:4] = True
    with pytest.warns(DegenerateValueWarning):
        stats = reinhard_stats(img, mask)
    assert np.allclose(stats.std, 1e-6)


def test_reinhard_two_pixel_stats():
    lab = np.array([[[40.0, 10.0, -5.0], [60.0, 10.0, -5.0]]])
    img = lab_to_rgb(lab)
    lab_back = rgb_to_lab(img)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateValueWarning)
        stats = reinhard_stats(img, np.ones((1, 2), bool))
    assert stats.mean[0] == pytest.approx(50.0, abs=1e-6)
    assert stats.std[0] == pytest.approx(10.0, abs=1e-6)
    assert stats.mean[1] == pytest.approx(lab_back[0, :, 1].mean())


def test_reinhard_stats_match_streaming_oracle():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(20, 20, 3))
    mask = rng.uniform(size=(20, 20)) < 0.6
    stats = reinhard_stats(img, mask)
    lab = rgb_to_lab(img)[mask]
    # Welford's single-pass algorithm
    n, mean, m2 = 0, np.zeros(3), np.zeros(3)
    for row in lab:
        n += 1
        delta = row - mean
        mean += delta / n
        m2 += delta * (row - mean)
    assert np.allclose(stats.mean, mean, atol=1e-9)
    assert np.allclose(stats.std, np.sqrt(m2 / n), atol=1e-9)


def test_reinhard_insufficient_tissue():
    with pytest.raises(InsufficientTissueError):
        reinhard_stats(np.ones((4, 4, 3)), np.zeros((4, 4), bool))


def test_reinhard_identity(he_matrix):
    img, _, _ = _tissue_image(he_matrix, seed=1)
    mask = tissue_mask(img)
    out = reinhard_normalize(img, mask, reinhard_stats(img, mask))
    assert np.max(np.abs(out - img)) <= 1 / 255


def test_reinhard_shifts_constant_tissue():
    src = np.ones((8, 8, 3))
    src[2:6, 2:6] = lab_to_rgb(np.array([40.0, 5.0, 5.0]))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    target = ReinhardStats(mean=np.array([70.0, 0.0, 0.0]), std=np.array([3.0, 2.0, 2.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateValueWarning)
        out = reinhard_normalize(src, mask, target)
    assert np.allclose(rgb_to_lab(out)[mask][:, 0], 70.0, atol=0.5)
    assert np.array_equal(out[~mask], src[~mask])
