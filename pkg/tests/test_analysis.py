import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptlab.analysis import (
    ActivationDump,
    CkaConfig,
    CkaMatrix,
    cka_biased,
    cka_from_dumps,
    cka_minibatch,
    cka_unbiased,
    collect_activations,
    gram_linear,
    hsic_unbiased,
    layer_cka,
    quartile_means,
)
from cptlab.core.rng import make_rng
from cptlab.errors import AlignmentError, DataError, DegeneracyError, EstimatorDomainError
from cptlab.models import ModelSpec, build

IDENTITY_TOL = 1e-6
INVARIANCE_TOL = 1e-5


def _data(seed=0, n=64, d=10, noise=0.5):
    rng = make_rng(seed, "cka-data")
    x = rng.normal(size=(n, d))
    y = x @ rng.normal(size=(d, 7)) + noise * rng.normal(size=(n, 7))
    return x, y


def _orthogonal(d, seed):
    q, _ = np.linalg.qr(make_rng(seed, "q").normal(size=(d, d)))
    return q


# -- gram ------------------------------------------------------------------------
def test_gram_identity():
    np.testing.assert_array_equal(gram_linear(np.eye(5)), np.eye(5))


def test_gram_rank_one_column():
    k = gram_linear(make_rng(1).normal(size=(6, 1)))
    assert np.linalg.matrix_rank(k) == 1


def test_gram_against_arbitrary_precision():
    x = make_rng(2).normal(size=(6, 3))
    mpmath.mp.dps = 50
    xm = mpmath.matrix(x.tolist())
    oracle = xm * xm.T
    k = gram_linear(x)
    err = max(abs(mpmath.mpf(k[i, j]) - oracle[i, j]) / abs(oracle[i, j]) for i in range(6) for j in range(6))
    assert err < 1e-12


def test_gram_needs_two_rows():
    with pytest.raises(EstimatorDomainError):
        gram_linear(np.ones((1, 3)))


# -- hsic -------------------------------------------------------------------------
def _hsic_mp(k, l):
    n = k.shape[0]
    kt = mpmath.matrix(k.tolist())
    lt = mpmath.matrix(l.tolist())
    for i in range(n):
        kt[i, i] = 0
        lt[i, i] = 0
    one = mpmath.matrix([[1]] * n)
    kl = kt * lt
    tr = mpmath.fsum(kl[i, i] for i in range(n))
    a = (one.T * kt * one)[0, 0]
    b = (one.T * lt * one)[0, 0]
    c = (one.T * kl * one)[0, 0]
    return (tr + a * b / ((n - 1) * (n - 2)) - mpmath.mpf(2) / (n - 2) * c) / (n * (n - 3))


@pytest.mark.parametrize("seed", range(3))
def test_hsic_against_arbitrary_precision(seed):
    mpmath.mp.dps = 60
    x, y = _data(seed, n=8)
    k, l = gram_linear(x), gram_linear(y)
    oracle = _hsic_mp(k, l)
    assert abs((mpmath.mpf(hsic_unbiased(k, l)) - oracle) / oracle) < 1e-10


def test_hsic_zero():
    z = np.zeros((6, 6))
    assert hsic_unbiased(z, z) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 20))
def test_hsic_symmetric_exactly(seed, n):
    x, y = _data(seed, n=n)
    k, l = gram_linear(x), gram_linear(y)
    assert hsic_unbiased(k, l) == hsic_unbiased(l, k)


def test_hsic_domain_and_alignment():
    with pytest.raises(EstimatorDomainError):
        hsic_unbiased(np.eye(3), np.eye(3))
    with pytest.raises(AlignmentError):
        hsic_unbiased(np.eye(5), np.eye(6))


# -- cka ---------------------------------------------------------------------------
def test_minibatch_identity():
    x, _ = _data(1)
    assert abs(cka_minibatch(x, x, rng=make_rng(0)) - 1.0) < IDENTITY_TOL


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_linear_cka_invariances(seed, c):
    x, y = _data(seed)
    base = cka_minibatch(x, y, rng=make_rng(seed))
    q = _orthogonal(x.shape[1], seed)
    assert abs(cka_minibatch(x @ q, y, rng=make_rng(seed)) - base) < INVARIANCE_TOL
    assert abs(cka_minibatch(c * x, y, rng=make_rng(seed)) - base) < INVARIANCE_TOL
    assert abs(cka_minibatch(x, c * y @ _orthogonal(y.shape[1], seed + 1), rng=make_rng(seed)) - base) < INVARIANCE_TOL


@pytest.mark.parametrize("seed", range(5))
def test_minibatch_close_to_full_batch(seed):
    x, y = _data(seed, n=64)
    mb = cka_minibatch(x, y, batch_size=16, passes=10, rng=make_rng(seed, "mb"))
    assert abs(mb - cka_unbiased(x, y)) < 0.01


def test_estimator_consistency_as_passes_grow():
    x, y = _data(7, n=64, noise=2.0)
    full = cka_unbiased(x, y)
    gaps = []
    for p in (1, 5, 20):
        diffs = [abs(cka_minibatch(x, y, 16, p, make_rng(r, "cons")) - full) for r in range(30)]
        gaps.append(np.mean(diffs))
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_biased_and_unbiased_agree_on_identity():
    x, _ = _data(3)
    assert cka_biased(x, x) == pytest.approx(1.0, abs=1e-12)
    assert cka_unbiased(x, x) == pytest.approx(1.0, abs=1e-12)


def test_minibatch_errors():
    x, y = _data(0, n=32)
    with pytest.raises(AlignmentError):
        cka_minibatch(x, y[:-1])
    with pytest.raises(AlignmentError):
        cka_minibatch(x, y, ids_x=np.arange(32), ids_y=np.arange(32)[::-1])
    with pytest.raises(EstimatorDomainError):
        cka_minibatch(x, y, batch_size=3)
    with pytest.raises(DataError):
        cka_minibatch(x, y, batch_size=64)
    with pytest.raises(DegeneracyError):
        cka_minibatch(np.ones((32, 3)), y)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_values_in_range(seed):
    rng = make_rng(seed, "range")
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 4))
    v = cka_minibatch(x, y, batch_size=4, passes=2, rng=rng)
    assert -1e-6 <= v <= 1 + 1e-6


# -- layer matrices ------------------------------------------------------------------
SPEC = ModelSpec(depth=3, width=16, heads=2, image_size=8, patch=4)


def _probe(n=48, seed=0):
    return make_rng(seed, "probe").uniform(0, 1, (n, 8, 8, 3)).astype(np.float32)


def test_same_checkpoint_diagonal_ones():
    m = build(SPEC, 0)
    mat = layer_cka(m, m, _probe())
    assert mat.values.shape == (4, 4)
    np.testing.assert_allclose(np.diag(mat.values), 1.0, atol=IDENTITY_TOL)
    assert np.all((mat.values >= -1e-6) & (mat.values <= 1 + 1e-6))


def test_permuted_taps_permute_matrix():
    a, b = build(SPEC, 0), build(SPEC, 1)
    x = _probe()
    da, db = collect_activations(a, x), collect_activations(b, x)
    full = cka_from_dumps(da, db)
    perm = [2, 0, 3, 1]
    db2 = ActivationDump(db.checkpoint_id, db.probe_id, [db.taps[i] for i in perm], db.values, db.sample_ids)
    np.testing.assert_array_equal(cka_from_dumps(da, db2).values, full.values[:, perm])


def test_layer_cka_deterministic_given_seed():
    a, b = build(SPEC, 0), build(SPEC, 1)
    x = _probe()
    m1 = layer_cka(a, b, x, CkaConfig(seed=3))
    m2 = layer_cka(a, b, x, CkaConfig(seed=3))
    assert m1.values.tobytes() == m2.values.tobytes()


def test_cross_family_is_rectangular():
    cnn = build(ModelSpec(family="cnn", depth=2, width=8, image_size=8), 0)
    mat = layer_cka(build(SPEC, 0), cnn, _probe())
    assert mat.values.shape == (4, 2) and mat.cols == ["block0", "block1"]


def test_probe_smaller_than_batch():
    m = build(SPEC, 0)
    with pytest.raises(DataError):
        layer_cka(m, m, _probe(n=10))


def test_dump_alignment_checked():
    m = build(SPEC, 0)
    x = _probe()
    a = collect_activations(m, x)
    b = collect_activations(m, x, sample_ids=np.arange(48)[::-1])
    with pytest.raises(AlignmentError):
        cka_from_dumps(a, b)


def test_dump_and_table_roundtrip(tmp_path):
    m = build(SPEC, 0)
    d = collect_activations(m, _probe(), probe_id="p")
    d.save(tmp_path / "dump.bin")
    e = ActivationDump.load(tmp_path / "dump.bin")
    assert e.taps == d.taps and e.probe_id == "p"
    assert all(np.array_equal(e.values[t], d.values[t]) for t in d.taps)
    mat = cka_from_dumps(d, e)
    text = mat.to_table(["manifest abc", "seed 0"])
    assert text.startswith("# manifest abc\n# seed 0\ntap\t")
    back = CkaMatrix.from_table(text)
    assert back.rows == mat.rows and np.allclose(back.values, mat.values, atol=1e-9)


def test_quartile_means():
    mat = CkaMatrix(["a", "b", "c", "d", "e"], ["a", "b", "c", "d", "e"], np.diag([0.9, 0.8, 0.5, 0.4, 0.1]), "x")
    assert quartile_means(mat) == (0.9, 0.1)
