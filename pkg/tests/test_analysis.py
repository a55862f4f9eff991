import numpy as np
import pytest

from rws.analysis import (
    BootstrapReport,
    bootstrap_gradient_study,
    bootstrap_ll_study,
    ll_vs_K_curve,
    write_curve_csv,
)
from rws.estimators import draw_importance_batch
from rws.numerics import log_sum_exp, make_rng
from rws.oracle import ExactPosteriorProposal, exact_log_marginal, exact_marginal_gradient

from conftest import bits, random_pair


@pytest.fixture(scope="module")
def tiny():
    r = make_rng(100)
    p, q = random_pair([2, 3], 5, r, scale=1.2)
    return p, q, bits(4, 5, r)


def test_identity_subset_gives_zero(tiny):
    p, q, X = tiny
    g = bootstrap_gradient_study(p, q, X, 50, [10, 50], 7, make_rng(1), resample=False)
    assert g.bias_l2[-1] == 0.0 and g.std[-1] == 0.0
    ll = bootstrap_ll_study(p, q, X, 50, [10, 50], 7, make_rng(1), resample=False)
    assert ll.bias_l2[-1] == 0.0 and ll.std[-1] == 0.0


def test_studies_are_deterministic(tiny):
    p, q, X = tiny
    for study in (bootstrap_gradient_study, bootstrap_ll_study):
        a = study(p, q, X, 60, [1, 5, 20], 50, make_rng(2))
        b = study(p, q, X, 60, [1, 5, 20], 50, make_rng(2))
        assert a.bias_l2 == b.bias_l2 and a.std == b.std
        assert np.array_equal(a.reference, b.reference)


def _straight_line_gradient_study(p, q, X, K, sizes, R, rng):
    """Loop-by-loop restatement of the resampling procedure."""
    B = X.shape[0]
    batch = draw_importance_batch(p, q, X, K, rng)

    def grad_of(b, idx):
        lw = batch.log_weights[b, idx]
        w = np.exp(lw - lw.max())
        w /= w.sum()
        h = [v[b, idx] for v in batch.h]
        return p.grad(np.repeat(X[b][None], len(idx), axis=0), h, weights=w).flat()

    ref = sum(grad_of(b, np.arange(K)) for b in range(B)) / B
    out = []
    for s in sizes:
        reps = np.zeros((R, ref.size))
        for b in range(B):
            idx = rng.integers(0, K, size=(R, s))
            for r in range(R):
                reps[r] += grad_of(b, idx[r]) / B
        out.append((np.linalg.norm(reps.mean(0) - ref), np.linalg.norm(reps.std(0))))
    return out


def test_gradient_study_matches_reimplementation(tiny):
    p, q, X = tiny
    rep = bootstrap_gradient_study(p, q, X[:2], 40, [1, 3, 10], 30, make_rng(3))
    ref = _straight_line_gradient_study(p, q, X[:2], 40, [1, 3, 10], 30, make_rng(3))
    for (b, s), b2, s2 in zip(ref, rep.bias_l2, rep.std):
        assert b2 == pytest.approx(b, rel=1e-10, abs=1e-12)
        assert s2 == pytest.approx(s, rel=1e-10, abs=1e-12)


def test_gradient_bias_shrinks_between_extremes(tiny):
    p, q, X = tiny
    rep = bootstrap_gradient_study(p, q, X, 500, [1, 100], 1000, make_rng(4))
    assert rep.bias_l2[1] < rep.bias_l2[0]
    assert rep.std[1] < rep.std[0]


def test_gradient_study_with_exact_posterior(tiny):
    # uniform weights make the replicate a plain mean of s per-sample
    # gradients: its spread scales like 1/sqrt(s) and its offset is noise
    p, _, X = tiny
    post = ExactPosteriorProposal(p)
    K, R = 400, 2000
    rep = bootstrap_gradient_study(p, post, X, K, [1, 4, 16, 64], R, make_rng(5))
    exact = np.mean([exact_marginal_gradient(p, x).flat() for x in X], axis=0)
    scaled = np.array(rep.std) * np.sqrt(rep.subset_sizes)
    assert np.allclose(scaled, scaled[0], rtol=0.1)
    for s, b, sd in zip(rep.subset_sizes, rep.bias_l2, rep.std):
        assert b < 4 * sd / np.sqrt(R)
    assert np.linalg.norm(rep.reference - exact) < 4 * scaled[0] / np.sqrt(K)


def test_ll_study_zero_with_exact_posterior(tiny):
    p, _, X = tiny
    rep = bootstrap_ll_study(p, ExactPosteriorProposal(p), X, 100, [1, 2, 5, 25, 100], 200, make_rng(6))
    assert max(abs(b) for b in rep.bias_l2) < 1e-10
    assert max(rep.std) < 1e-10
    truth = np.array([exact_log_marginal(p, x) for x in X])
    assert np.max(np.abs(rep.reference - truth)) < 1e-10


def test_ll_bias_is_negative(tiny):
    p, q, X = tiny
    rep = bootstrap_ll_study(p, q, X, 500, [1, 2, 5, 10, 25, 100], 1000, make_rng(7))
    assert all(b <= 0 for b in rep.bias_l2)
    assert all(a <= b for a, b in zip(rep.bias_l2, rep.bias_l2[1:]))
    truth = np.array([exact_log_marginal(p, x) for x in X])
    # on average the reference itself sits below the truth
    assert np.mean(rep.reference) < np.mean(truth)


@pytest.mark.parametrize("sizes, K, R", [([], 10, 5), ([2, 2], 10, 5), ([0, 3], 10, 5), ([5, 11], 10, 5), ([1], 10, 0)])
def test_invalid_study_arguments(tiny, sizes, K, R):
    p, q, X = tiny
    with pytest.raises(ValueError):
        bootstrap_ll_study(p, q, X, K, sizes, R, make_rng(0))


def test_report_csv_round_trip(tmp_path, tiny):
    p, q, X = tiny
    rep = bootstrap_gradient_study(p, q, X, 30, [1, 5], 10, make_rng(8))
    path = tmp_path / "grad.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "size,bias_l2,std,n_resamples"
    assert len(lines) == 3
    back = BootstrapReport.from_csv(path)
    assert back.bias_l2 == rep.bias_l2 and back.std == rep.std and back.subset_sizes == [1, 5]


def test_curve_flat_under_exact_posterior(tiny):
    p, _, X = tiny
    curve = ll_vs_K_curve(p, ExactPosteriorProposal(p), X, [1, 4, 16], make_rng(9))
    truth = np.mean([exact_log_marginal(p, x) for x in X])
    assert all(abs(r["mean_ll"] - truth) < 1e-10 for r in curve)


def test_curve_k1_is_mean_single_sample_log_weight(tiny):
    p, q, X = tiny
    curve = ll_vs_K_curve(p, q, X, [1, 8], make_rng(10))
    logw = draw_importance_batch(p, q, X, 8, make_rng(10)).log_weights
    assert curve[0]["mean_ll"] == pytest.approx(np.mean(logw[:, 0]), abs=1e-12)
    assert curve[1]["mean_ll"] == pytest.approx(np.mean(log_sum_exp(logw) - np.log(8)), abs=1e-12)


def test_curve_rises_towards_truth(tiny):
    p, q, _ = tiny
    X = bits(300, 5, make_rng(11))
    Ks = [1, 2, 4, 8, 16, 32, 64]
    curve = ll_vs_K_curve(p, q, X, Ks, make_rng(12), chunk_rows=5000)
    truth = np.mean([exact_log_marginal(p, x) for x in X])
    for a, b in zip(curve, curve[1:]):
        assert b["mean_ll"] >= a["mean_ll"] - 2 * b["se"]
    assert all(r["mean_ll"] <= truth + 2 * r["se"] for r in curve)
    assert curve[-1]["mean_ll"] - curve[0]["mean_ll"] > 0


def test_curve_chunking_does_not_change_draws_for_whole_rows(tiny, tmp_path):
    p, q, X = tiny
    a = ll_vs_K_curve(p, q, X, [1, 3], make_rng(13), chunk_rows=1000)
    b = ll_vs_K_curve(p, q, X, [1, 3], make_rng(13), chunk_rows=1000)
    assert a == b
    write_curve_csv(a, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "K,mean_ll,se"
    with pytest.raises(ValueError):
        ll_vs_K_curve(p, q, X, [4, 2], make_rng(0))
