import math

import numpy as np
import pytest

from tandemopt.calibration import Calibrator, sigmoid
from tandemopt.nn import Activation, Scorer, finite_diff_check
from tandemopt.tandem_train import (
    Method,
    Policy,
    PolicyPair,
    RewardKind,
    RewardSpec,
    Splits,
    TrainConfig,
    TrainingDivergedError,
    bce_batch,
    class_pools,
    finetune_epoch,
    iterate_batches,
    policy_accept_probability,
    policy_backward,
    reinforce_batch,
    reinforce_epoch,
    reward,
    run_method,
    sample_action,
    score_trials,
    tandem_action_probability,
)
from tandemopt.types import (
    ASVSPOOF19_COST_PARAMS,
    AsvLabel,
    CmLabel,
    Decision,
    TandemCostParams,
    Trial,
    TrialLabel,
)

TB = TrialLabel(AsvLabel.TARGET, CmLabel.BONAFIDE)
NB = TrialLabel(AsvLabel.NONTARGET, CmLabel.BONAFIDE)
SP = TrialLabel(AsvLabel.TARGET, CmLabel.SPOOF, "A01")
PM1 = RewardSpec(RewardKind.PLUS_MINUS_ONE)
TDCF1 = RewardSpec(RewardKind.TDCF_SINGLE, ASVSPOOF19_COST_PARAMS)


def linear_pair(w_asv, b_asv, w_cm, b_cm):
    asv = Scorer([len(w_asv), 1], Activation.TANH, [np.array([w_asv])], [np.array([b_asv])])
    cm = Scorer([len(w_cm), 1], Activation.TANH, [np.array([w_cm])], [np.array([b_cm])])
    return PolicyPair(asv=Policy(asv), cm=Policy(cm))


def toy_trials(rng, n_per_class=6, d=2):
    trials = []
    for i in range(n_per_class):
        trials.append(Trial(f"tb{i}", rng.normal(0.8, 1, d), rng.normal(0.8, 1, d), TB))
        trials.append(Trial(f"nb{i}", rng.normal(-0.8, 1, d), rng.normal(0.8, 1, d), NB))
        trials.append(Trial(f"sp{i}", rng.normal(0.8, 1, d), rng.normal(-0.8, 1, d), SP))
    return trials


class TestSampleAction:
    def test_high_probability_almost_always_accepts(self):
        rng = np.random.default_rng(0)
        n = 1_000_000
        accepts = sum(
            sample_action(1.0 - 1e-6, rng)[0] is Decision.ACCEPT for _ in range(n)
        )
        assert accepts / n >= 0.9999

    def test_fair_coin(self):
        rng = np.random.default_rng(1)
        n = 1_000_000
        accepts = sum(sample_action(0.5, rng)[0] is Decision.ACCEPT for _ in range(n))
        assert abs(accepts / n - 0.5) <= 0.005

    def test_deterministic_given_seed(self):
        seq1 = [sample_action(0.4, np.random.default_rng(7))[0] for _ in range(1)]
        a = [sample_action(0.4, np.random.default_rng(9))[0] for _ in range(100)]
        b = [sample_action(0.4, np.random.default_rng(9))[0] for _ in range(100)]
        assert a == b

    def test_prob_of_action(self):
        rng = np.random.default_rng(2)
        action, p = sample_action(0.3, rng)
        assert p == pytest.approx(0.3 if action is Decision.ACCEPT else 0.7)

    def test_out_of_range_clamped(self):
        rng = np.random.default_rng(3)
        action, p = sample_action(1.5, rng)
        assert action is Decision.ACCEPT
        assert p == pytest.approx(1.0 - 1e-6)


class TestTandemActionProbability:
    def test_both_accept(self):
        a, p = tandem_action_probability(Decision.ACCEPT, Decision.ACCEPT, 0.5, 0.5)
        assert a is Decision.ACCEPT and p == 0.25

    def test_one_reject(self):
        a, p = tandem_action_probability(Decision.REJECT, Decision.ACCEPT, 0.5, 0.5)
        assert a is Decision.REJECT and p == 0.75

    def test_branches_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p1, p2 = rng.uniform(0.01, 0.99, 2)
            _, pa = tandem_action_probability(Decision.ACCEPT, Decision.ACCEPT, p1, p2)
            _, pr = tandem_action_probability(Decision.REJECT, Decision.ACCEPT, p1, p2)
            assert pa + pr == pytest.approx(1.0)


class TestReward:
    def test_tdcf_single_reproduces_all_branches(self):
        p = ASVSPOOF19_COST_PARAMS
        cases = [
            # (label, action) -> expected cost-weighted reward
            (TB, Decision.ACCEPT, 0.0),
            (TB, Decision.REJECT, -p.c_miss * p.rho_tar),  # miss
            (NB, Decision.ACCEPT, -p.c_fa * p.rho_non),  # bonafide false accept
            (NB, Decision.REJECT, 0.0),
            (SP, Decision.ACCEPT, -p.c_fa_spoof * p.rho_spoof),  # spoof false accept
            (SP, Decision.REJECT, 0.0),
        ]
        for label, action, expected in cases:
            assert reward(TDCF1, action, label) == pytest.approx(expected)
        assert reward(TDCF1, Decision.REJECT, TB) == pytest.approx(-0.9405)

    def test_plus_minus_one_all_cases(self):
        cases = [
            (TB, Decision.ACCEPT, 1.0),
            (TB, Decision.REJECT, -1.0),
            (NB, Decision.ACCEPT, -1.0),
            (NB, Decision.REJECT, 1.0),
            (SP, Decision.ACCEPT, -1.0),
            (SP, Decision.REJECT, 1.0),
        ]
        for label, action, expected in cases:
            assert reward(PM1, action, label) == expected

    def test_tdcf_rewards_bounded(self):
        p = ASVSPOOF19_COST_PARAMS
        worst = -max(p.c_miss * p.rho_tar, p.c_fa * p.rho_non, p.c_fa_spoof * p.rho_spoof)
        for label in (TB, NB, SP):
            for action in Decision:
                assert worst <= reward(TDCF1, action, label) <= 0.0

    def test_tdcf_requires_params(self):
        with pytest.raises(ValueError):
            RewardSpec(RewardKind.TDCF_SINGLE)


class TestPolicyAcceptProbability:
    def test_uncalibrated_is_sigmoid_of_score(self):
        pair = linear_pair([1.0, 0.0], 0.0, [1.0], 0.0)
        x = np.array([0.7, 0.0])
        p, cache = policy_accept_probability(pair.asv, x)
        assert p == pytest.approx(float(sigmoid(0.7)))
        assert cache.score == pytest.approx(0.7)

    def test_calibrated_probability(self):
        scorer = Scorer([1, 1], Activation.TANH, [np.array([[1.0]])], [np.array([0.0])])
        policy = Policy(scorer, Calibrator(a=2.0, b=-1.0, prior_log_odds=math.log(9.0)))
        p, _ = policy_accept_probability(policy, np.array([0.5]))
        assert p == pytest.approx(0.9, abs=1e-9)

    def test_clamped_probability_has_zero_gradient(self):
        scorer = Scorer([1, 1], Activation.TANH, [np.array([[30.0]])], [np.array([0.0])])
        policy = Policy(scorer)
        p, cache = policy_accept_probability(policy, np.array([1.0]))
        assert p == 1.0 - 1e-6
        tape = scorer.new_tape()
        policy_backward(policy, cache, 1.0, tape)
        assert all(np.all(g == 0) for g in tape.d_weights + tape.d_biases)


class TestReinforce:
    def test_zero_reward_means_zero_gradient(self):
        # all-zero costs make every reward exactly 0, so the surrogate
        # gradient vanishes and parameters stay bit-identical
        zero_costs = RewardSpec(
            RewardKind.TDCF_SINGLE,
            TandemCostParams(0.0, 0.0, 0.0, 0.9405, 0.0095, 0.05),
        )
        pair = linear_pair([0.4, 0.1], 0.0, [0.3, -0.1], 0.0)
        rng = np.random.default_rng(5)
        trials = toy_trials(rng, n_per_class=4)
        before = [w.copy() for w in pair.asv.scorer.weights + pair.cm.scorer.weights]
        cfg = TrainConfig(lr=0.5, batch_size=6, epochs=1, seed=5)
        reinforce_epoch(pair, trials, zero_costs, cfg, rng)
        after = pair.asv.scorer.weights + pair.cm.scorer.weights
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_bernoulli_policy_gradient_is_unbiased(self):
        # constant-input policy: p = sigmoid(b), reward +1 for ACCEPT and 0
        # for REJECT, so E[r] = p and dE[r]/dp = 1 exactly. The mean of the
        # probability-level REINFORCE estimates d(log pi)/dp * r must land
        # within 2% of 1.
        b0 = 0.3
        scorer = Scorer([1, 1], Activation.TANH, [np.array([[0.0]])], [np.array([b0])])
        rng = np.random.default_rng(6)
        x = np.array([0.0])
        n = 100_000
        total = 0.0
        for _ in range(n):
            prob, _ = policy_accept_probability(Policy(scorer), x)
            action, _ = sample_action(prob, rng)
            if action is Decision.ACCEPT:
                total += (1.0 / prob) * 1.0  # d log p / dp, reward 1
            else:
                total += (-1.0 / (1.0 - prob)) * 0.0  # reward 0
        assert total / n == pytest.approx(1.0, rel=0.02)

    def test_surrogate_gradient_matches_finite_diff_with_frozen_actions(self):
        rng = np.random.default_rng(7)
        trials = toy_trials(rng, n_per_class=3)
        pair = linear_pair([0.4, -0.2], 0.1, [0.3, 0.2], -0.1)
        # freeze one action sample per trial
        frozen = []
        for t in trials:
            p_asv, _ = policy_accept_probability(pair.asv, t.x_asv)
            p_cm, _ = policy_accept_probability(pair.cm, t.x_cm)
            a_asv, _ = sample_action(p_asv, rng)
            a_cm, _ = sample_action(p_cm, rng)
            frozen.append((t, a_asv, a_cm))

        def surrogate(asv_scorer, tape):
            test_pair = PolicyPair(Policy(asv_scorer), pair.cm)
            total = 0.0
            n = len(frozen)
            for t, a_asv, a_cm in frozen:
                p_asv, cache_asv = policy_accept_probability(test_pair.asv, t.x_asv)
                p_cm, _ = policy_accept_probability(test_pair.cm, t.x_cm)
                a_t, p_t = tandem_action_probability(a_asv, a_cm, p_asv, p_cm)
                r = reward(PM1, a_t, t.label)
                total += math.log(p_t) * r / n
                if tape is not None:
                    if a_t is Decision.ACCEPT:
                        d_p = r / (n * p_asv)
                    else:
                        d_p = -r * p_cm / (n * p_t)
                    policy_backward(test_pair.asv, cache_asv, d_p, tape)
            return total

        assert finite_diff_check(pair.asv.scorer, surrogate) <= 1e-4

    def test_non_finite_surrogate_aborts(self):
        pair = linear_pair([1.0], 0.0, [1.0], 0.0)
        pair.asv.scorer.biases[0][0] = np.nan  # corrupt after construction
        t = Trial("tb0", np.array([1.0]), np.array([1.0]), TB)
        with pytest.raises(TrainingDivergedError):
            reinforce_batch(pair, [t], PM1, np.random.default_rng(0))


class TestBalancedSampling:
    def test_class_frequencies_near_uniform(self):
        rng = np.random.default_rng(8)
        trials = []
        for i in range(300):
            trials.append(Trial(f"tb{i}", np.zeros(1), np.zeros(1), TB))
        for i in range(50):
            trials.append(Trial(f"nb{i}", np.zeros(1), np.zeros(1), NB))
        for i in range(650):
            trials.append(Trial(f"sp{i}", np.zeros(1), np.zeros(1), SP))
        cfg = TrainConfig(batch_size=64, seed=0)
        counts = {"tb": 0, "nb": 0, "sp": 0}
        total = 0
        for _ in range(4):  # several epochs to tighten the estimate
            for batch in iterate_batches(trials, cfg, rng):
                for t in batch:
                    counts[t.id[:2]] += 1
                    total += 1
        for key in counts:
            assert abs(counts[key] / total - 1 / 3) <= 0.02

    def test_unbalanced_partitions_data(self):
        rng = np.random.default_rng(9)
        trials = toy_trials(rng, n_per_class=10)
        cfg = TrainConfig(batch_size=8, balanced=False, seed=0)
        seen = []
        for batch in iterate_batches(trials, cfg, rng):
            seen.extend(t.id for t in batch)
        assert sorted(seen) == sorted(t.id for t in trials)


class TestFinetune:
    def test_well_fit_scorers_barely_move(self):
        rng = np.random.default_rng(10)
        pair = linear_pair([10.0, 0.0], 0.0, [10.0, 0.0], 0.0)
        trials = toy_trials(rng, n_per_class=8)
        # make the toy set separable along the first coordinate
        trials = [
            Trial(
                t.id,
                np.array([3.0 if t.label.asv_label is AsvLabel.TARGET else -3.0, 0.0]),
                np.array([3.0 if t.label.cm_label is CmLabel.BONAFIDE else -3.0, 0.0]),
                t.label,
            )
            for t in trials
        ]
        before = [w.copy() for w in pair.asv.scorer.weights + pair.cm.scorer.weights]
        cfg = TrainConfig(lr=0.01, batch_size=8, seed=0)
        losses = finetune_epoch(
            pair, trials, cfg, np.random.default_rng(0), np.random.default_rng(1)
        )
        after = pair.asv.scorer.weights + pair.cm.scorer.weights
        assert max(losses) < 1e-10
        assert all(np.allclose(a, b, atol=1e-9) for a, b in zip(before, after))

    def test_bce_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        examples = [(rng.normal(0, 1, 4), float(rng.integers(2))) for _ in range(12)]

        def loss(scorer, tape):
            if tape is not None:
                value, grads = bce_batch(scorer, examples)
                grads_copy = grads
                tape.add(grads_copy)
                return value
            return bce_batch(scorer, examples)[0]

        scorer = Scorer.create([4, 5, 1], seed=13)
        assert finite_diff_check(scorer, loss) <= 1e-4

    def test_asv_untouched_by_cm_label_permutation(self):
        rng = np.random.default_rng(12)
        trials = toy_trials(rng, n_per_class=6)
        # permute spoof/bonafide among TARGET trials (keeps labels legal)
        permuted = []
        for t in trials:
            if t.label is TB:
                permuted.append(Trial(t.id, t.x_asv, t.x_cm, SP))
            elif t.label is SP:
                permuted.append(Trial(t.id, t.x_asv, t.x_cm, TB))
            else:
                permuted.append(t)
        cfg = TrainConfig(lr=0.05, batch_size=8, seed=0)

        def run(data):
            pair = linear_pair([0.1, 0.1], 0.0, [0.1, 0.1], 0.0)
            finetune_epoch(pair, data, cfg, np.random.default_rng(3), np.random.default_rng(4))
            return pair

        a = run(trials)
        b = run(permuted)
        assert all(
            np.array_equal(x, y)
            for x, y in zip(a.asv.scorer.weights, b.asv.scorer.weights)
        )
        # and the CM *is* affected (its pools changed)
        assert any(
            not np.array_equal(x, y)
            for x, y in zip(a.cm.scorer.weights, b.cm.scorer.weights)
        )

    def test_cm_untouched_by_asv_label_permutation(self):
        rng = np.random.default_rng(13)
        trials = toy_trials(rng, n_per_class=6)
        permuted = []
        for t in trials:
            if t.label is TB:
                permuted.append(Trial(t.id, t.x_asv, t.x_cm, NB))
            elif t.label is NB:
                permuted.append(Trial(t.id, t.x_asv, t.x_cm, TB))
            else:
                permuted.append(t)
        cfg = TrainConfig(lr=0.05, batch_size=8, seed=0)

        def run(data):
            pair = linear_pair([0.1, 0.1], 0.0, [0.1, 0.1], 0.0)
            finetune_epoch(pair, data, cfg, np.random.default_rng(5), np.random.default_rng(6))
            return pair

        a = run(trials)
        b = run(permuted)
        assert all(
            np.array_equal(x, y)
            for x, y in zip(a.cm.scorer.weights, b.cm.scorer.weights)
        )


def tiny_splits(rng):
    return Splits(
        train=tuple(toy_trials(rng, n_per_class=10)),
        dev=tuple(
            Trial(f"d_{t.id}", t.x_asv, t.x_cm, t.label)
            for t in toy_trials(rng, n_per_class=10)
        ),
        eval=tuple(
            Trial(f"e_{t.id}", t.x_asv, t.x_cm, t.label)
            for t in toy_trials(rng, n_per_class=10)
        ),
    )


class TestRunMethod:
    def test_zero_epochs_equals_direct_evaluation(self):
        from tandemopt.metrics import compute_metric_report

        rng = np.random.default_rng(14)
        splits = tiny_splits(rng)
        pair = linear_pair([0.5, 0.1], 0.0, [0.4, -0.1], 0.0)
        cfg = TrainConfig(epochs=0, seed=0)
        record = run_method(Method.FINETUNE, pair, splits, cfg, ASVSPOOF19_COST_PARAMS)
        assert [r.split for r in record.rows] == ["dev", "eval"]
        direct = compute_metric_report(
            score_trials(pair, splits.dev), ASVSPOOF19_COST_PARAMS
        )
        assert record.reports["dev"][0] == direct

    def test_same_seed_same_record(self):
        rng = np.random.default_rng(15)
        splits = tiny_splits(rng)
        pair = linear_pair([0.5, 0.1], 0.0, [0.4, -0.1], 0.0)
        cfg = TrainConfig(epochs=2, batch_size=8, lr=0.01, seed=3)
        a = run_method(Method.REINFORCE, pair, splits, cfg, ASVSPOOF19_COST_PARAMS)
        b = run_method(Method.REINFORCE, pair, splits, cfg, ASVSPOOF19_COST_PARAMS)
        assert [r.to_csv_line() for r in a.rows] == [r.to_csv_line() for r in b.rows]

    def test_pretrained_pair_not_mutated(self):
        rng = np.random.default_rng(16)
        splits = tiny_splits(rng)
        pair = linear_pair([0.5, 0.1], 0.0, [0.4, -0.1], 0.0)
        before = [w.copy() for w in pair.asv.scorer.weights + pair.cm.scorer.weights]
        cfg = TrainConfig(epochs=1, batch_size=8, lr=0.1, seed=0)
        run_method(Method.SOFT_TDCF, pair, splits, cfg, ASVSPOOF19_COST_PARAMS)
        after = pair.asv.scorer.weights + pair.cm.scorer.weights
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_unknown_method_rejected(self):
        rng = np.random.default_rng(17)
        splits = tiny_splits(rng)
        pair = linear_pair([0.5], 0.0, [0.4], 0.0)
        with pytest.raises(ValueError, match="unknown method"):
            run_method("PPO", pair, splits, TrainConfig(), ASVSPOOF19_COST_PARAMS)

    def test_eval_never_trained_on(self):
        rng = np.random.default_rng(18)
        splits = tiny_splits(rng)
        pair = linear_pair([0.5, 0.1], 0.0, [0.4, -0.1], 0.0)
        cfg = TrainConfig(epochs=2, batch_size=8, lr=0.01, seed=1)
        for method in (Method.FINETUNE, Method.REINFORCE, Method.SOFT_TDCF):
            record = run_method(method, pair, splits, cfg, ASVSPOOF19_COST_PARAMS)
            eval_ids = {t.id for t in splits.eval}
            assert record.trained_trial_ids
            assert not (record.trained_trial_ids & eval_ids)

    def test_calibration_method_attaches_heads(self):
        rng = np.random.default_rng(19)
        splits = tiny_splits(rng)
        pair = linear_pair([1.5, 0.3], 0.0, [1.2, -0.3], 0.0)
        cfg = TrainConfig(epochs=1, batch_size=8, lr=0.01, seed=0)
        record = run_method(
            Method.REINFORCE_CALIB, pair, splits, cfg, ASVSPOOF19_COST_PARAMS
        )
        assert record.final_pair.asv.calibrator is not None
        assert record.final_pair.cm.calibrator is not None
        assert record.final_pair.asv.calibrator.a > 0


class TestPolicyPairSerialization:
    def test_round_trip_with_calibrator(self):
        import json

        pair = linear_pair([0.5, 0.1], 0.2, [0.4], -0.2)
        pair.cm.calibrator = Calibrator(a=1.5, b=0.25, prior_log_odds=2.9444389791664403)
        payload = json.loads(json.dumps(pair.to_json_dict()))
        restored = PolicyPair.from_json_dict(payload)
        assert restored.cm.calibrator == pair.cm.calibrator
        assert restored.asv.calibrator is None
        x = np.array([0.3, -0.7])
        assert restored.asv.scorer.forward(x)[0] == pair.asv.scorer.forward(x)[0]
