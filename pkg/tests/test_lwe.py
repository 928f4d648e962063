import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import normal_quantile
from picante.lwe import (InsufficientDataError, LweInstanceSet, LweParams, ParameterError,
                         Verdict, center_rep, gen_instance, gen_samples, read_instance,
                         read_secret, residual_std, sample_error, sample_secret, secret_path,
                         std_interval, verify_guess, verify_guess_detailed, write_instance)

N80 = LweParams(80, 113, h=9)


def test_center_rep_examples():
    assert center_rep(0, 113) == 0
    assert center_rep(70, 113) == -43
    assert center_rep(56, 113) == 56


def test_center_rep_is_bijection_for_q113():
    out = center_rep(np.arange(113), 113)
    assert sorted(out.tolist()) == list(range(-56, 57))


@given(st.integers(-10**12, 10**12), st.integers(1, 10**6).map(lambda k: 2 * k + 1))
def test_center_rep_congruent_and_bounded(x, q):
    r = center_rep(x, q)
    assert (r - x) % q == 0
    assert abs(r) <= (q - 1) // 2


@pytest.mark.parametrize("q", [2, 1, 114])
def test_center_rep_rejects_bad_modulus(q):
    with pytest.raises(ParameterError):
        center_rep(3, q)


@pytest.mark.parametrize("kwargs", [dict(n=0, q=113), dict(n=4, q=112), dict(n=4, q=113, h=5),
                                    dict(n=4, q=113, sigma=0.0), dict(n=4, q=113, m=3)])
def test_params_validation(kwargs):
    with pytest.raises(ParameterError):
        LweParams(**kwargs)


def test_params_default_m():
    assert LweParams(80, 113).m == 320


def test_sample_secret_examples(rng):
    assert sample_secret(LweParams(4, 17, h=4), rng).tolist() == [1, 1, 1, 1]
    assert sample_secret(N80, rng).sum() == 9
    with pytest.raises(ParameterError):
        sample_secret(LweParams(4, 17), rng, h=0)


@given(st.integers(1, 200), st.data())
def test_sample_secret_weight(n, data):
    h = data.draw(st.integers(1, n))
    s = sample_secret(LweParams(n, 101, h=h), np.random.default_rng(n * 1000 + h))
    assert s.sum() == h and set(np.unique(s)) <= {0, 1}


def test_sample_secret_deterministic():
    a = sample_secret(N80, np.random.default_rng(7))
    b = sample_secret(N80, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_sample_error_moments(rng):
    e = sample_error(3.0, rng, size=10**6)
    assert abs(e.mean()) < 0.02
    assert 2.94 <= e.std() <= 3.06
    assert np.abs(e).max() <= 36


def test_sample_error_tiny_sigma(rng):
    assert not np.any(sample_error(1e-9, rng, size=1000))


def test_gen_samples_zero_secret_no_noise(rng):
    params = LweParams(5, 17, h=1, sigma=1e-9)
    inst = gen_samples(params, np.zeros(5, dtype=np.int64), rng)
    assert not np.any(inst.b)
    assert inst.A.min() >= 0 and inst.A.max() < 17


def test_errors_match_generated_noise():
    # replay the documented draw order: A first, then e
    params = LweParams(30, 113, h=3)
    secret = np.zeros(30, dtype=np.int64)
    secret[[1, 5, 7]] = 1
    inst = gen_samples(params, secret, np.random.default_rng(3))
    rng = np.random.default_rng(3)
    rng.integers(0, 113, size=(params.m, params.n), dtype=np.int64)
    e = np.rint(rng.normal(0.0, 3.0, size=params.m)).astype(np.int64)
    assert np.array_equal(inst.errors(), e)
    assert np.all(np.abs(inst.errors()) <= 36)


def test_gen_instance_deterministic():
    a, b = gen_instance(N80, 11), gen_instance(N80, 11)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)
    assert np.array_equal(a.secret, b.secret)


def test_uniform_residue_std():
    r = center_rep(np.random.default_rng(1).integers(0, 113, size=10**5), 113)
    assert abs(r.std() / (113 / math.sqrt(12)) - 1) < 0.03


def _oracle_interval(sigma, m, alpha):
    z = normal_quantile(1 - alpha / 2)
    lo_q = (m - 1) - z * math.sqrt(2 * (m - 1))
    hi_q = (m - 1) + z * math.sqrt(2 * (m - 1))
    return sigma * math.sqrt((m - 1) / hi_q), sigma * math.sqrt((m - 1) / lo_q)


def test_table11_intervals():
    right = std_interval(3.0, 320, 1e-5)
    wrong = std_interval(113 / math.sqrt(12), 320, 1e-5)
    assert (round(right[0], 2), round(right[1], 2)) == (2.58, 3.72)
    assert (round(wrong[0], 2), round(wrong[1], 2)) == (28.08, 40.45)
    assert right == pytest.approx(_oracle_interval(3.0, 320, 1e-5), rel=1e-9)


def test_residual_std_constant_residuals():
    A = np.zeros((10, 3), dtype=np.int64)
    b = np.full(10, 5)
    stats = residual_std(A, b, np.zeros(3), 113)
    assert stats.std_emp == 0.0
    assert stats.ci_low <= stats.std_emp <= stats.ci_high


def test_residual_std_needs_two_samples():
    with pytest.raises(InsufficientDataError):
        residual_std(np.zeros((1, 3)), np.zeros(1), np.zeros(3), 113)


def test_residual_std_uses_sample_formula():
    inst = gen_instance(N80, 4)
    r = center_rep(inst.b - inst.A @ inst.secret, 113)
    expected = math.sqrt(((r - r.mean()) ** 2).sum() / (len(r) - 1))
    assert residual_std(inst.A, inst.b, inst.secret, 113).std_emp == pytest.approx(expected)


def test_verify_true_secret_and_flipped_bit():
    inst = gen_instance(N80, 5)
    assert verify_guess(inst, inst.secret) is Verdict.CORRECT
    flipped = inst.secret.copy()
    flipped[np.flatnonzero(flipped == 0)[0]] = 1
    res = verify_guess_detailed(inst, flipped)
    assert res.verdict is Verdict.WRONG
    assert 28.08 <= res.stats.std_emp <= 40.45


def test_verify_random_wrong_guesses(rng):
    inst = gen_instance(N80, 6)
    for _ in range(100):
        guess = sample_secret(N80, rng)
        if np.array_equal(guess, inst.secret):
            continue
        assert verify_guess(inst, guess) is Verdict.WRONG


def test_verify_indeterminate_for_tiny_m(rng):
    params = LweParams(2, 113, h=1, m=3)
    inst = gen_samples(params, np.array([1, 0]), rng)
    v = verify_guess(inst, np.array([1, 0]))
    assert v is Verdict.INDETERMINATE
    assert not v


def test_verify_true_secret_frequency():
    hits = sum(verify_guess(inst, inst.secret) is Verdict.CORRECT
               for inst in (gen_instance(N80, 10_000 + i) for i in range(1000)))
    assert hits >= 999


def test_verify_guess_length_checked():
    with pytest.raises(ParameterError):
        verify_guess(gen_instance(N80, 1), np.zeros(79))


def test_instance_file_roundtrip(tmp_path):
    inst = gen_instance(LweParams(6, 17, h=2), 9)
    path = tmp_path / "inst.txt"
    write_instance(path, inst)
    back = read_instance(path)
    assert back.secret is None
    assert np.array_equal(back.A, inst.A) and np.array_equal(back.b, inst.b)
    assert back.params == inst.params and back.seed == 9
    assert np.array_equal(read_instance(path, load_secret=True).secret, inst.secret)
    assert path.read_text().splitlines()[0] == "6 17 2 3.0 24 9"


def test_instance_file_without_secret(tmp_path):
    inst = gen_instance(LweParams(6, 17, h=2), 9)
    path = tmp_path / "inst.txt"
    write_instance(path, inst, with_secret=False)
    assert not secret_path(path).exists()


def test_read_instance_ignores_sidecar_by_default(tmp_path):
    inst = gen_instance(LweParams(6, 17, h=2), 9)
    path = tmp_path / "inst.txt"
    write_instance(path, inst)
    secret_path(path).write_text("garbage\n")
    read_instance(path)
    with pytest.raises(ParameterError):
        read_instance(path, load_secret=True)


@pytest.mark.parametrize("text", ["0 1 2\n", "0 1 2 1 0 1\n", "0 1 x 0 0 0\n"])
def test_read_secret_validation(tmp_path, text):
    p = tmp_path / "s"
    p.write_text(text)
    with pytest.raises(ParameterError):
        read_secret(p, 6)


def test_instance_shape_validation():
    with pytest.raises(ParameterError):
        LweInstanceSet(LweParams(4, 17), np.zeros((3, 4)), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_known_secret_residuals_bounded(seed):
    inst = gen_instance(LweParams(20, 113, h=2), seed)
    assert np.all(np.abs(inst.errors()) <= 12 * 3)
