import itertools

import numpy as np
import pytest

from depdecode.decoding import DemaskSelector, build_selector
from depdecode.errors import ConfigError
from depdecode.oracle import TASK_KINDS, MaskState, VocabSpec, make_task_model
from depdecode.predictor import FeatureConfig, PredictedDependency, PredictorWeights
from depdecode.selection import SelectionConfig
from depdecode.tv import tv_distance
from depdecode.utils import spawn_rng
from depdecode.verification import (
    conditioned_joint,
    induced_output_distribution,
    run_bound_suite,
    run_slack_experiment,
    tv_joint_vs_factorized,
    verify_bound,
)

ALL_AT_ONCE = SelectionConfig(tau=float("inf"), gamma=0.0)


class TestFactorizationError:
    def test_independent_is_zero(self, independent_model):
        tv = tv_joint_vs_factorized(independent_model, MaskState.fully_masked(3), [0, 1, 2])
        assert tv == pytest.approx(0.0, abs=1e-12)

    def test_arithmetic_pair(self, arithmetic_model):
        state = MaskState.from_revealed(3, {0: 1})
        assert tv_joint_vs_factorized(arithmetic_model, state, [1, 2]) == pytest.approx(2 / 3)

    def test_single_position(self, dense_model):
        assert tv_joint_vs_factorized(dense_model, MaskState.fully_masked(3), [1]) == 0.0


class TestBound:
    @pytest.mark.parametrize("tau", [0.0, 0.04, 1.0])
    def test_independent_holds(self, independent_model, tau):
        report = verify_bound(independent_model, MaskState.fully_masked(3), SelectionConfig(tau, 0.0))
        assert report.bound_satisfied
        assert report.measured_tv == pytest.approx(0.0, abs=1e-12)

    def test_tight_on_arithmetic(self, arithmetic_model):
        state = MaskState.from_revealed(3, {0: 0})
        report = verify_bound(arithmetic_model, state, SelectionConfig(tau=1.0, gamma=0.0))
        assert report.selected == (1, 2)
        assert report.accumulated == pytest.approx(2 / 3, abs=1e-9)
        assert report.measured_tv == pytest.approx(2 / 3, abs=1e-9)
        assert report.bound_satisfied
        assert report.gap == pytest.approx(2 / 3 - 1.0)

    def test_zero_budget(self, dense_model):
        report = verify_bound(dense_model, MaskState.fully_masked(3), SelectionConfig(tau=0.0, gamma=0.0))
        assert len(report.selected) == 1
        assert report.measured_tv == 0.0
        assert report.assumption_holds == ()

    def test_predicted_source_reports_gap(self, dense_model):
        cfg = FeatureConfig.for_model(dense_model)
        weights = PredictorWeights(np.zeros((cfg.d, cfg.d)), np.zeros((cfg.d, cfg.d)))
        report = verify_bound(
            dense_model,
            MaskState.fully_masked(3),
            SelectionConfig(tau=1.0, gamma=0.0),
            dep_source="predicted",
            predictor=PredictedDependency(weights, cfg),
        )
        assert report.dep_source == "predicted"
        assert report.accumulated == pytest.approx(0.5)
        assert report.gap == pytest.approx(report.measured_tv - 1.0)

    def test_predicted_source_needs_predictor(self, dense_model):
        with pytest.raises(ConfigError):
            verify_bound(dense_model, MaskState.fully_masked(3), SelectionConfig(), "predicted")

    def test_suite_has_no_counterexamples(self):
        """Test the bound on every random instance where sub-additivity holds."""
        suite = run_bound_suite(n_instances=1000, seed=0)
        assert suite.n_instances == 1000
        assert suite.n_assumption_holds > 0
        assert suite.counterexamples == []
        for report in suite.reports:
            assert 0.0 <= report.measured_tv <= 1.0
            assert report.accumulated <= report.tau

    def test_suite_uses_given_grids(self):
        suite = run_bound_suite(n_instances=30, seed=2, taus=(0.25,), gammas=(0.5,))
        assert {(r.tau, r.gamma) for r in suite.reports} == {(0.25, 0.5)}
        assert suite.counterexamples == []
        with pytest.raises(ConfigError):
            run_bound_suite(n_instances=1, taus=())

    def test_suite_with_predictor_pins_layout(self):
        cfg = FeatureConfig(vocab_size=3, length=4)
        weights = PredictorWeights(np.zeros((cfg.d, cfg.d)), np.zeros((cfg.d, cfg.d)))
        suite = run_bound_suite(
            n_instances=25,
            seed=1,
            taus=(0.5,),
            gammas=(0.0,),
            dep_source="predicted",
            predictor=PredictedDependency(weights, cfg),
            vocab_sizes=(3,),
            lengths=(4,),
        )
        assert all(r.dep_source == "predicted" for r in suite.reports)
        assert all("-v3-n4-" in r.model_id for r in suite.reports)
        # Gaps under a predictor are reported, never counted as violations.
        assert suite.counterexamples == []
        assert suite.max_gap == max(r.gap for r in suite.reports)


def _random_model(i):
    rng = spawn_rng(123, i)
    kind = str(rng.choice(list(TASK_KINDS)))
    size = int(rng.choice([2, 3]))
    length = int(rng.choice([2, 3, 4]))
    return make_task_model(kind, VocabSpec.with_size(size), length, seed=int(rng.integers(1000)))


class TestInducedDistribution:
    @pytest.mark.parametrize("name", ["token-order", "entropy", "top1"])
    def test_sequential_policies_are_exact(self, name):
        selector = build_selector(name, k=1)
        for i in range(100):
            model = _random_model(i)
            induced = induced_output_distribution(model, selector)
            assert induced.sum() == pytest.approx(1.0, abs=1e-10)
            assert tv_distance(induced.ravel(), model.joint.ravel()) <= 1e-10

    def test_adaptive_demask_one_at_a_time_is_exact(self, dense_model):
        selector = DemaskSelector(SelectionConfig(tau=0.0, gamma=0.0))
        induced = induced_output_distribution(dense_model, selector)
        np.testing.assert_allclose(induced, dense_model.joint, atol=1e-12)

    def test_all_at_once_on_independent(self, independent_model):
        induced = induced_output_distribution(independent_model, DemaskSelector(ALL_AT_ONCE))
        np.testing.assert_allclose(induced, independent_model.joint, atol=1e-12)

    def test_all_at_once_on_arithmetic(self, arithmetic_model):
        prompt = {0: 2}
        induced = induced_output_distribution(arithmetic_model, DemaskSelector(ALL_AT_ONCE), prompt=prompt)
        target = conditioned_joint(arithmetic_model, prompt)
        assert induced.sum() == pytest.approx(1.0)
        assert tv_distance(induced.ravel(), target.ravel()) == pytest.approx(2 / 3)

    def test_demask_never_breaks_arithmetic(self, arithmetic_model):
        selector = build_selector("demask", tau=0.04, gamma=0.9)
        induced = induced_output_distribution(arithmetic_model, selector)
        for a, b, c in itertools.product(range(3), repeat=3):
            if induced[a, b, c] > 0:
                assert (a + b) % 3 == c
        np.testing.assert_allclose(induced, arithmetic_model.joint, atol=1e-12)


class TestSlack:
    def test_independent_family(self):
        models = [make_task_model("independent", VocabSpec.with_size(3), 4, seed=s) for s in range(3)]
        report = run_slack_experiment(models, 60, seed=0)
        assert report.records
        assert all(abs(r.slack) <= 1e-12 for r in report.records)
        assert report.violation_rate == 0.0

    def test_single_reveal_stratum_is_zero(self):
        models = [
            make_task_model(kind, VocabSpec.with_size(3), 4, seed=2)
            for kind in ("markov", "dense-random", "arithmetic-mod", "copy")
        ]
        report = run_slack_experiment(models, 200, seed=1)
        singles = [r for r in report.records if r.subset_size == 1]
        assert singles
        assert all(r.slack == 0.0 for r in singles)

        table = report.by_size()
        row = table[table["subset_size"] == 1].iloc[0]
        assert row["mean_slack"] == 0.0
        assert row["violation_rate"] == 0.0
        assert row[["q05", "q25", "q50", "q75", "q95"]].tolist() == [0.0] * 5
        assert list(table["subset_size"]) == sorted(table["subset_size"])

    def test_copy_chain_slack_grows(self):
        model = make_task_model("copy", VocabSpec.with_size(2), 4, seed=0)
        report = run_slack_experiment([model], 200, max_subset_size=3, seed=0)
        means = report.by_size().set_index("subset_size")["mean_slack"]
        assert means[3] > means[2]
        assert means[1] == 0.0

    def test_subset_sizes_bounded(self, dense_model):
        report = run_slack_experiment([dense_model], 50, seed=3)
        assert {r.subset_size for r in report.records} <= {1, 2}
        for record in report.records:
            assert 0.0 <= record.lhs <= 1.0

    def test_empty_report_table(self):
        from depdecode.verification import SlackReport

        assert SlackReport().by_size().empty
