import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbm.bounds import LAMBDA0, BoundParams, MixtureState, Posterior, ValidationError, evaluate_bound, tau0_reached
from avbm.harness import (
    ExperimentSpec,
    PosteriorPolicy,
    derive_seed,
    evaluate_trial,
    posterior_tracks,
    reverify_witness,
    run_coverage,
    run_lln_coverage,
    run_proof_object_suite,
    run_tightness_comparison,
    wilson_upper,
)
from avbm.sim import FamilySpec, PathBundle, generate

RADEMACHER = FamilySpec(4, 2000, "rademacher", 1.0)
POLICY = PosteriorPolicy()
# short horizon with the lower tau0 threshold: violations are frequent enough at large delta
SHORT = FamilySpec(4, 300, "rademacher", 1.0)


def spec(delta=0.05, trials=50, family=RADEMACHER, policy=POLICY, seed=11, variant="thm"):
    return ExperimentSpec(family, BoundParams(delta, family.increment_bound, variant), policy, trials, seed)


def report_bytes(rep):
    return json.dumps(rep.to_dict(), sort_keys=True).encode()


def staircase_bundle(T=200):
    """Hypothesis 0 always moves up; hypothesis 1 alternates. Violates the LLN clause."""
    up = np.arange(T + 1, dtype=float)
    alt = np.array([t % 2 for t in range(T + 1)], dtype=float)
    t = np.arange(T + 1, dtype=float)
    return PathBundle(np.vstack([up, alt]), np.vstack([t, t]), 1.0)


class TestSeeds:
    def test_derived_seeds_distinct(self):
        seeds = {derive_seed(7, i) for i in range(10_000)}
        assert len(seeds) == 10_000

    def test_derived_seed_stable(self):
        assert derive_seed(7, 3) == derive_seed(7, 3)
        assert derive_seed(7, 3) != derive_seed(8, 3)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            ExperimentSpec(RADEMACHER, BoundParams(0.05, 1.0), POLICY, 0)
        with pytest.raises(ValidationError):
            ExperimentSpec(RADEMACHER, BoundParams(0.05, 1.0), POLICY, 1, base_seed=-1)
        with pytest.raises(ValidationError):
            ExperimentSpec(FamilySpec(2, 10, "rademacher", 2.0), BoundParams(0.05, 1.0))
        with pytest.raises(ValidationError):
            ExperimentSpec(RADEMACHER, BoundParams(0.05, 1.0), PosteriorPolicy(fixed=((0.5, 0.5),)))


class TestTracks:
    def test_labels(self):
        pol = PosteriorPolicy(gibbs=(1.0,), fixed=((0.1, 0.2, 0.3, 0.4),))
        labels = [tr.label for tr in posterior_tracks(generate(FamilySpec(4, 20, seed=1)), pol)]
        assert labels == ["point:0", "point:1", "point:2", "point:3", "uniform", "fixed:0",
                          "posthoc-argmax", "gibbs:1.0"]

    def test_posthoc_dominates_point_masses(self):
        b = generate(FamilySpec(4, 300, seed=2))
        tracks = {tr.label: tr for tr in posterior_tracks(b, POLICY)}
        best = np.abs(tracks["posthoc-argmax"].mean_m)
        for h in range(4):
            assert np.all(best >= np.abs(tracks[f"point:{h}"].mean_m))
        assert np.allclose(tracks["posthoc-argmax"].kl, math.log(4))

    def test_gibbs_kl_nonnegative_and_normalised(self):
        b = generate(FamilySpec(3, 300, seed=3))
        tr = posterior_tracks(b, PosteriorPolicy(point_masses=False, uniform=False, posthoc_argmax=False,
                                                 gibbs=(0.05,)))[0]
        assert np.allclose(tr.weights.sum(axis=1), 1.0)
        assert np.all(tr.kl >= 0) and np.all(tr.kl <= math.log(3) + 1e-12)


class TestEvaluateTrial:
    def test_staircase_violates(self):
        res = evaluate_trial(staircase_bundle(), POLICY, BoundParams(0.05, 1.0))
        assert res.violated and "lln" in res.clauses
        assert res.witness["posterior"] in ("point:0", "posthoc-argmax")
        assert reverify_witness(res.witness, [0.5, 0.5], BoundParams(0.05, 1.0))

    def test_staircase_first_violation_is_tau0(self):
        # every t past the gate violates the LLN clause, so the first violation is the gate itself
        p = BoundParams(0.05, 1.0)
        res = evaluate_trial(staircase_bundle(), POLICY, p)
        t = res.first_violation_t
        rho = Posterior.point_mass(0, 2)
        assert tau0_reached(MixtureState(t, t, t), rho, p)
        assert not tau0_reached(MixtureState(t - 1, t - 1, t - 1), rho, p)

    def test_clean_path(self):
        b = PathBundle(np.zeros((2, 50)), np.tile(np.arange(50.0), (2, 1)), 1.0)
        assert not evaluate_trial(b, POLICY, BoundParams(0.05, 1.0)).violated


class TestCoverage:
    def test_scale_zero_family(self):
        fam = FamilySpec(3, 500, "scaled-rademacher", 1.0, scales=(0.0, 0.0, 0.0))
        rep = run_coverage(spec(family=fam, trials=5))
        assert rep.n_violating_trials == 0 and rep.errors == []
        b = generate(fam)
        for tr in posterior_tracks(b, POLICY):
            for t in (1, 250, 500):
                st_ = MixtureState(t, tr.mean_m[t], tr.mean_v[t])
                rho = Posterior(np.asarray(tr.weights if tr.weights.ndim == 1 else tr.weights[t]),
                                np.full(3, 1 / 3))
                assert not tau0_reached(st_, rho, BoundParams(0.05, 1.0))

    def test_report_invariants(self):
        rep = run_coverage(spec(trials=40))
        assert 0 <= rep.empirical_rate <= rep.wilson_upper_95 <= 1
        assert rep.n_trials == 40 and rep.errors == []

    def test_single_trial_deterministic(self):
        assert report_bytes(run_coverage(spec(trials=1))) == report_bytes(run_coverage(spec(trials=1)))

    def test_workers_do_not_change_report(self):
        s = spec(delta=0.9, trials=300, family=SHORT, variant="proof")
        assert report_bytes(run_coverage(s, workers=1)) == report_bytes(run_coverage(s, workers=8))

    def test_env_workers(self, monkeypatch):
        s = spec(delta=0.9, trials=12)
        monkeypatch.setenv("AVBM_WORKERS", "3")
        a = run_coverage(s)
        monkeypatch.setenv("AVBM_WORKERS", "1")
        assert report_bytes(a) == report_bytes(run_coverage(s))

    def test_witnesses_reverify(self):
        s = spec(delta=0.9, trials=300, family=SHORT, variant="proof")
        rep = run_coverage(s)
        assert rep.n_violating_trials > 0
        assert len(rep.witnesses) == rep.n_violating_trials
        prior = np.full(4, 0.25)
        for w in rep.witnesses:
            assert reverify_witness(w, prior, s.params)

    def test_histogram_sums(self):
        rep = run_coverage(spec(delta=0.9, trials=300, family=SHORT, variant="proof"))
        assert rep.n_violating_trials > 0
        rows = rep.histogram_rows()
        assert (rows[-1]["cumulative"] if rows else 0) == rep.n_violating_trials

    def test_containment_not_vacuous(self):
        assert run_coverage(spec(delta=0.9, trials=300, family=SHORT, variant="proof")).n_violating_trials > 0

    @pytest.mark.parametrize("small,large", [(0.01, 0.1), (0.1, 0.5), (0.5, 0.9)])
    def test_delta_monotone_containment(self, small, large):
        a = run_coverage(spec(delta=small, trials=300, family=SHORT, variant="proof"))
        b = run_coverage(spec(delta=large, trials=300, family=SHORT, variant="proof"))
        assert set(a.violating_trials) <= set(b.violating_trials)
        assert a.n_violating_trials <= b.n_violating_trials

    def test_rate_at_half(self):
        rep = run_coverage(spec(delta=0.5, trials=200, family=FamilySpec(4, 500, "rademacher", 1.0)))
        assert rep.wilson_upper_95 <= 0.5

    def test_lln_coverage_at_half(self):
        rep = run_lln_coverage(spec(delta=0.5, trials=200, family=FamilySpec(4, 500, "rademacher", 1.0)))
        assert rep.wilson_upper_95 <= 0.5 and rep.clauses == ("lln",) and rep.tau0_variant == "proof"

    def test_lln_violation_implies_conjunction_violation(self):
        # same gate (proof variant) in both evaluators: every LLN witness re-verifies as a violation
        s = spec(delta=0.9, trials=300, family=SHORT, variant="proof")
        lln = run_lln_coverage(s)
        assert lln.n_violating_trials > 0
        both = run_coverage(s)
        assert set(lln.violating_trials) <= set(both.violating_trials)
        prior = np.full(4, 0.25)
        for w in lln.witnesses:
            rho = Posterior(np.asarray(w["weights"]), prior)
            state = MixtureState(w["t"], w["mean_m"], w["mean_v"])
            assert evaluate_bound(state, rho, s.params, tau0_reached(state, rho, s.params)).violated

    def test_errors_are_reported(self, monkeypatch):
        import avbm.harness as h

        def boom(_):
            raise ValidationError("synthetic failure")
        monkeypatch.setattr(h, "generate", boom)
        rep = run_coverage(spec(trials=3), workers=1)
        assert len(rep.errors) == 3 and "synthetic failure" in rep.errors[0]["error"]


class TestWilson:
    def test_zero_count(self):
        assert 0 < wilson_upper(0, 2000) < 0.002

    def test_known_value(self):
        # closed form with z = 1.959963984540054 for k = 10, n = 100
        z = 1.959963984540054
        p, n = 0.1, 100
        ref = (p + z * z / (2 * n) + z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))) / (1 + z * z / n)
        assert wilson_upper(10, 100) == pytest.approx(ref, rel=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 5000).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
    def test_above_rate(self, kn):
        k, n = kn
        assert k / n <= wilson_upper(k, n) <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 2000).flatmap(lambda n: st.tuples(st.integers(0, n - 1), st.just(n))))
    def test_monotone_in_k(self, kn):
        k, n = kn
        assert wilson_upper(k, n) < wilson_upper(k + 1, n)


class TestTightness:
    def test_small_variance_beats_baseline(self):
        fam = FamilySpec(1, 1_000_000, "scaled-rademacher", 1.0, scales=(0.1,))
        s = ExperimentSpec(fam, BoundParams(0.05, 1.0), PosteriorPolicy(uniform=False, posthoc_argmax=False))
        rows = run_tightness_comparison(s, [1_000_000])
        assert rows[0]["mean_v"] == pytest.approx(1e4)
        assert rows[0]["ratio"] < 1

    def test_rademacher_ratio_recorded(self):
        fam = FamilySpec(1, 100_000, "rademacher", 1.0)
        s = ExperimentSpec(fam, BoundParams(0.05, 1.0), PosteriorPolicy(uniform=False, posthoc_argmax=False))
        rows = run_tightness_comparison(s, [1000, 10_000, 100_000])
        for r in rows:
            assert r["ratio"] is not None and 0.1 < r["ratio"] < 10

    def test_lil_normalised_decreasing(self):
        fam = FamilySpec(1, 100_000, "rademacher", 1.0)
        s = ExperimentSpec(fam, BoundParams(0.05, 1.0), PosteriorPolicy(uniform=False, posthoc_argmax=False))
        rows = run_tightness_comparison(s, [100, 1000, 10_000, 100_000])
        vals = [r["lil_normalized_ratio"] for r in rows]
        assert all(v is not None and math.isfinite(v) for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_undefined_entries_marked(self):
        fam = FamilySpec(1, 10, "scaled-rademacher", 1.0, scales=(0.0,))
        s = ExperimentSpec(fam, BoundParams(0.05, 1.0), PosteriorPolicy(uniform=False, posthoc_argmax=False))
        rows = run_tightness_comparison(s, [1, 10])
        assert len(rows) == 2 and all(r["ratio"] is None for r in rows)

    def test_grid_validation(self):
        with pytest.raises(ValidationError):
            run_tightness_comparison(spec(trials=1), [0])
        with pytest.raises(ValidationError):
            run_tightness_comparison(spec(trials=1), [RADEMACHER.horizon + 1])


class TestProofObjects:
    FAM = FamilySpec(4, 200, "rademacher", 1.0)

    def test_suite_holds(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0), POLICY, 4000, 3)
        res = run_proof_object_suite(s, workers=4)
        assert res["all_hold"], [c for c in res["checks"] if not c["holds"]]

    def test_prior_posterior_bound_one(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0),
                           PosteriorPolicy(point_masses=False, posthoc_argmax=False), 4000, 4)
        res = run_proof_object_suite(s, lambdas=(LAMBDA0,))
        mgf = [c for c in res["checks"] if c["object"] == "mgf_raw" and c["posterior"] == "uniform"][0]
        assert mgf["bound"] == 1.0 and mgf["holds"]

    def test_point_mass_bound_four(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0),
                           PosteriorPolicy(uniform=False, posthoc_argmax=False), 4000, 5)
        res = run_proof_object_suite(s, lambdas=(LAMBDA0,))
        raw = [c for c in res["checks"] if c["object"] == "mgf_raw"]
        assert len(raw) == 4
        for c in raw:
            assert c["bound"] == pytest.approx(4.0) and c["holds"]

    def test_restriction(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.9, 1.0), POLICY, 3000, 6)
        res = run_proof_object_suite(s)
        rows = [c for c in res["checks"] if c["object"] == "restriction"]
        assert rows and all(c["holds"] for c in rows)

    def test_stopped_variant(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0), POLICY, 3000, 7)
        res = run_proof_object_suite(s, stop_rule="cross:5")
        assert res["stop_rule"] == "cross:5.0" and res["all_hold"]

    def test_deterministic_across_workers(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0), POLICY, 200, 8)
        assert run_proof_object_suite(s, workers=1) == run_proof_object_suite(s, workers=3)

    def test_rejects_large_lambda(self):
        s = ExperimentSpec(self.FAM, BoundParams(0.05, 1.0), POLICY, 10, 8)
        with pytest.raises(ValidationError):
            run_proof_object_suite(s, lambdas=(0.5,))
