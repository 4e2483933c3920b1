import numpy as np
import pytest

from ioreward import tensor as T
from ioreward.errors import NumericError
from ioreward.tensor import Tensor
from ioreward.verify import (CheckResult, OracleAttentionParams, SCOPES,
                             VerificationReport, _CHECKS, cross_oracle_max_diff,
                             finite_diff_check, oracle_cross_attention,
                             oracle_window_attention, run_suite)


def flat_params(n, d, heads=1, seed=0, with_norm=True):
    rng = np.random.default_rng(seed)
    return OracleAttentionParams(
        wq=rng.normal(0, 0.3, (d, d)), bq=rng.normal(0, 0.1, d),
        wk=rng.normal(0, 0.3, (d, d)), bk=rng.normal(0, 0.1, d),
        wv=rng.normal(0, 0.3, (d, d)), bv=rng.normal(0, 0.1, d),
        wo=rng.normal(0, 0.3, (d, d)), bo=rng.normal(0, 0.1, d),
        tau=rng.uniform(0.5, 1.5, heads),
        bias=rng.normal(0, 0.3, (heads, n, n)),
        gamma=np.ones(d) if with_norm else None,
        beta=np.zeros(d) if with_norm else None,
    )


class TestFlatOracles:
    def test_identical_keys_give_uniform_mean_of_values(self):
        n, d = 4, 6
        p = flat_params(n, d, seed=1)
        p.bias = np.zeros((1, n, n))
        i_tokens = np.tile(np.array([0.3, -0.2, 0.5, 0.1, 0.0, 0.7]), (n, 1))
        o_tokens = np.random.default_rng(2).normal(0, 1, (n, d))
        out = oracle_window_attention(o_tokens * 0 + i_tokens, p)
        # all queries see identical keys -> identical outputs
        assert np.abs(out - out[0]).max() < 1e-12

    def test_single_token_passes_value_through(self):
        d = 5
        p = flat_params(1, d, seed=3)
        i_tok = np.random.default_rng(4).normal(0, 1, (1, d))
        out = oracle_window_attention(i_tok, p)
        v = np.array([sum(i_tok[0, a] * p.wv[a, c] for a in range(d)) +
                      p.bv[c] for c in range(d)])
        want = np.array([sum(v[a] * p.wo[a, c] for a in range(d)) + p.bo[c]
                         for c in range(d)])
        assert np.abs(out[0] - want).max() < 1e-12

    def test_cross_variant_applies_residual_and_norm(self):
        n, d = 4, 6
        p = flat_params(n, d, seed=5)
        rng = np.random.default_rng(6)
        i_tokens = rng.normal(0, 1, (n, d))
        o_tokens = rng.normal(0, 1, (n, d))
        out = oracle_cross_attention(i_tokens, o_tokens, p)
        # post-norm rows are standardized
        assert np.abs(out.mean(axis=1)).max() < 1e-10
        assert np.abs(out.std(axis=1) - 1.0).max() < 1e-3


class TestFiniteDiff:
    def test_quadratic_is_machine_exact(self):
        # central differences are exact for quadratics; the residual is
        # the eps*|f|/2h evaluation-rounding floor
        p = Tensor(np.array([0.3, -0.2, 0.5]), requires_grad=True)
        res = finite_diff_check(lambda: T.tsum(T.mul(p, p)), {"p": p},
                                h=1e-6, rtol=1e-10)
        assert res["p"].max_rel_err < 1e-10

    def test_linear_head_high_precision(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(0, 0.3, (4, 3)))
        w = Tensor(rng.normal(0, 0.3, (3, 2)), requires_grad=True)
        res = finite_diff_check(lambda: T.tsum(T.matmul(x, w)), {"w": w},
                                h=1e-6, rtol=1e-10)
        assert res["w"].max_rel_err < 1e-10

    def test_nonfinite_loss_flagged(self):
        p = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(NumericError):
            finite_diff_check(lambda: T.tsum(p), {"p": p})

    def test_samples_at_most_max_coords(self):
        p = Tensor(np.zeros(500), requires_grad=True)
        res = finite_diff_check(lambda: T.tsum(T.mul(p, p)), {"p": p},
                                max_coords=16)
        assert res["p"].checked_coords == 16


class TestSuite:
    def test_fresh_build_all_pass(self):
        report = run_suite()
        assert report.all_passed, report.to_text()

    def test_one_entry_per_registered_check(self):
        report = run_suite()
        want = sum(len(v) for v in _CHECKS.values())
        assert len(report.results) == want
        assert len({r.name for r in report.results}) == want

    def test_scope_selection(self):
        report = run_suite(["schedule"])
        assert len(report.results) == len(_CHECKS["schedule"])

    def test_unknown_scope_rejected(self):
        with pytest.raises(NumericError):
            run_suite(["gpu"])

    def test_two_runs_identical_reports(self):
        # volatile (wall-clock) checks may vary in measured value; all
        # other fields must be bit-identical between runs
        scopes = ["tensor", "cross", "schedule"]
        a, b = run_suite(scopes), run_suite(scopes)
        for ra, rb in zip(a.results, b.results):
            assert (ra.name, ra.passed, ra.tolerance, ra.seed) == \
                (rb.name, rb.passed, rb.tolerance, rb.seed)
            if not ra.volatile:
                assert ra.measured == rb.measured

    def test_injected_bug_fails_equivalence(self):
        def transpose_k(p):
            p.k.w.data = p.k.w.data.T.copy()

        worst = cross_oracle_max_diff(n_instances=2, perturb=transpose_k)
        assert worst > 1e-3   # the oracle catches the mutation

    def test_report_formats(self):
        report = VerificationReport([
            CheckResult("alpha", True, 1e-12, 1e-10, 3),
            CheckResult("beta", False, 0.5, 1e-3, 4),
        ])
        text = report.to_text()
        assert "PASS" in text and "FAIL" in text and "1 failed" in text
        csv = report.to_csv()
        assert csv.splitlines()[0] == \
            "name,status,measured,tolerance,seed,volatile"
        assert not report.all_passed
