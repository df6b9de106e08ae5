"""Tandem optimization: REINFORCE with plain and cost-weighted rewards (with
optional calibrated accept probabilities), the separate-finetuning baseline,
and the soft-cost trainer, all behind a single run_method dispatcher.

One training run owns its RNG stream and is strictly sequential, so a fixed
seed reproduces the run bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .calibration import Calibrator, sigmoid, train_calibrator
from .metrics import compute_metric_report, eer_arrays, filter_attacks
from .nn import Direction, ForwardCache, GradientTape, Scorer
from .records import RunRecord, TelemetryRow
from .soft_tdcf import SoftThresholds, soft_tdcf_train_step
from .types import (
    AsvLabel,
    CmLabel,
    Decision,
    ScoreSet,
    TandemCostParams,
    Trial,
    TrialLabel,
    tandem_ground_truth,
)

logger = logging.getLogger(__name__)

# Accept probabilities are clamped away from {0, 1} before logs are taken;
# inside the clamped region the policy gradient is exactly zero (the clamp is
# flat), which keeps the surrogate value and its gradient consistent.
PROB_FLOOR = 1e-6

# Step size used by the benchmark comparison. The reference training recipe
# (batch 64, five epochs, plain SGD, balanced sampling) was designed for
# detectors with millions of parameters; per-step score movement scales with
# the squared gradient norm of the score, so the desk-scale 16-unit scorers
# need a proportionally larger step to show the same dynamics within five
# epochs. TrainConfig itself defaults to the reference 1e-4.
BENCHMARK_TANDEM_LR = 0.05


class TrainingDivergedError(RuntimeError):
    pass


class Method(Enum):
    FINETUNE = "FINETUNE"
    REINFORCE = "REINFORCE"
    REINFORCE_CALIB = "REINFORCE_CALIB"
    REINFORCE_TDCF = "REINFORCE_TDCF"
    REINFORCE_CALIB_TDCF = "REINFORCE_CALIB_TDCF"
    SOFT_TDCF = "SOFT_TDCF"


class RewardKind(Enum):
    PLUS_MINUS_ONE = "plus_minus_one"
    TDCF_SINGLE = "tdcf_single"


@dataclass(frozen=True)
class RewardSpec:
    kind: RewardKind
    cost_params: TandemCostParams | None = None

    def __post_init__(self) -> None:
        if self.kind is RewardKind.TDCF_SINGLE and self.cost_params is None:
            raise ValueError("TDCF_SINGLE reward requires cost_params")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 5
    balanced: bool = True
    seed: int = 0
    # Off-by-default extras; the defaults match the vanilla training recipe.
    use_reward_baseline: bool = False
    train_calibration: bool = False
    soft_temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "balanced": self.balanced,
            "seed": self.seed,
            "use_reward_baseline": self.use_reward_baseline,
            "train_calibration": self.train_calibration,
            "soft_temperature": self.soft_temperature,
        }


@dataclass
class Policy:
    """A scorer plus an optional frozen calibration head.

    Without calibration the accept probability is sigmoid(score); with it,
    sigmoid(a*score + b + prior_log_odds). Gradients always flow through the
    head into the scorer; the head's own (a, b) move only when explicitly
    requested.
    """

    scorer: Scorer
    calibrator: Calibrator | None = None

    def clone(self) -> "Policy":
        return Policy(scorer=self.scorer.clone(), calibrator=self.calibrator)

    def to_json_dict(self) -> dict:
        d = self.scorer.to_json_dict()
        if self.calibrator is not None:
            d["calibration"] = self.calibrator.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Policy":
        cal = d.get("calibration")
        return cls(
            scorer=Scorer.from_json_dict(d),
            calibrator=Calibrator.from_json_dict(cal) if cal is not None else None,
        )


@dataclass
class PolicyPair:
    asv: Policy
    cm: Policy

    def clone(self) -> "PolicyPair":
        return PolicyPair(asv=self.asv.clone(), cm=self.cm.clone())

    def to_json_dict(self) -> dict:
        return {"asv": self.asv.to_json_dict(), "cm": self.cm.to_json_dict()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "PolicyPair":
        return cls(
            asv=Policy.from_json_dict(d["asv"]), cm=Policy.from_json_dict(d["cm"])
        )


@dataclass
class PolicyCache:
    """Forward state needed to backpropagate through an accept probability."""

    forward_cache: ForwardCache
    score: float
    p: float
    clamped: bool


def policy_accept_probability(policy: Policy, x: np.ndarray) -> tuple[float, PolicyCache]:
    score, cache = policy.scorer.forward(x)
    if policy.calibrator is None:
        z = score
    else:
        c = policy.calibrator
        z = c.a * score + c.b + c.prior_log_odds
    p_raw = float(sigmoid(z))
    p = min(max(p_raw, PROB_FLOOR), 1.0 - PROB_FLOOR)
    clamped = p != p_raw
    if clamped:
        logger.debug("accept probability %.3e clamped", p_raw)
    return p, PolicyCache(forward_cache=cache, score=score, p=p, clamped=clamped)


def policy_backward(
    policy: Policy,
    pcache: PolicyCache,
    d_p: float,
    tape: GradientTape,
    calib_grad: np.ndarray | None = None,
) -> None:
    """Chain d(loss)/d(p) through the sigmoid (and calibration head) into the
    scorer's tape; optionally accumulate [d/da, d/db] for the head itself."""
    if pcache.clamped:
        return  # flat region of the clamp
    dz = d_p * pcache.p * (1.0 - pcache.p)
    scale = 1.0 if policy.calibrator is None else policy.calibrator.a
    policy.scorer.backward(pcache.forward_cache, dz * scale, tape)
    if calib_grad is not None and policy.calibrator is not None:
        calib_grad[0] += dz * pcache.score
        calib_grad[1] += dz


def sample_action(p_accept: float, rng: np.random.Generator) -> tuple[Decision, float]:
    """Stochastic accept/reject: accept iff u <= p_accept for u ~ U[0, 1].

    Returns the action and the probability the policy assigned to it.
    """
    p = min(max(p_accept, PROB_FLOOR), 1.0 - PROB_FLOOR)
    if p != p_accept:
        logger.debug("sample_action clamped probability %.3e", p_accept)
    if rng.uniform() <= p:
        return Decision.ACCEPT, p
    return Decision.REJECT, 1.0 - p


def tandem_action_probability(
    a_asv: Decision, a_cm: Decision, p_asv: float, p_cm: float
) -> tuple[Decision, float]:
    """Combine subsystem actions: tandem accepts iff both accept, with
    probability p_asv*p_cm for accept and its complement for reject."""
    joint = p_asv * p_cm
    if a_asv is Decision.ACCEPT and a_cm is Decision.ACCEPT:
        return Decision.ACCEPT, joint
    return Decision.REJECT, 1.0 - joint


def reward(spec: RewardSpec, a_tandem: Decision, label: TrialLabel) -> float:
    """Per-trial reward: +/-1, or the negated cost-weighted single-trial
    tandem cost (zero when the decision is correct)."""
    truth = tandem_ground_truth(label)
    if spec.kind is RewardKind.PLUS_MINUS_ONE:
        return 1.0 if a_tandem is truth else -1.0
    if a_tandem is truth:
        return 0.0
    p = spec.cost_params
    if label.is_target_bonafide:  # wrongly rejected target
        return -p.c_miss * p.rho_tar
    if label.is_nontarget_bonafide:  # wrongly accepted nontarget
        return -p.c_fa * p.rho_non
    return -p.c_fa_spoof * p.rho_spoof  # wrongly accepted spoof


# ---------------------------------------------------------------------------
# Minibatch sampling
# ---------------------------------------------------------------------------


def _class_key(label: TrialLabel) -> str:
    if label.is_target_bonafide:
        return "tb"
    if label.is_nontarget_bonafide:
        return "nb"
    return "sp"


def class_pools(data: Sequence[Trial]) -> tuple[list[Trial], list[Trial], list[Trial]]:
    tb = [t for t in data if t.label.is_target_bonafide]
    nb = [t for t in data if t.label.is_nontarget_bonafide]
    sp = [t for t in data if t.label.is_spoof]
    return tb, nb, sp


def _balanced_batch(
    pools: Sequence[Sequence[Trial]], size: int, rng: np.random.Generator
) -> list[Trial]:
    """Sample with replacement, picking the class uniformly per item."""
    batch = []
    for _ in range(size):
        pool = pools[int(rng.integers(len(pools)))]
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def iterate_batches(data: Sequence[Trial], cfg: TrainConfig, rng: np.random.Generator):
    """One epoch worth of minibatches: ceil(N/B) batches of size B when
    class-balanced (with replacement), or a shuffled partition otherwise."""
    n_batches = math.ceil(len(data) / cfg.batch_size)
    if cfg.balanced:
        pools = [p for p in class_pools(data) if p]
        for _ in range(n_batches):
            yield _balanced_batch(pools, cfg.batch_size, rng)
    else:
        order = rng.permutation(len(data))
        for i in range(n_batches):
            yield [data[j] for j in order[i * cfg.batch_size : (i + 1) * cfg.batch_size]]


# ---------------------------------------------------------------------------
# REINFORCE
# ---------------------------------------------------------------------------


def reinforce_batch(
    pair: PolicyPair,
    batch: Sequence[Trial],
    spec: RewardSpec,
    rng: np.random.Generator,
    use_baseline: bool = False,
    asv_calib_grad: np.ndarray | None = None,
    cm_calib_grad: np.ndarray | None = None,
) -> tuple[float, GradientTape, GradientTape]:
    """Sample actions for one minibatch and accumulate the policy-gradient
    surrogate (1/B) * sum log(p_tandem) * r and its parameter gradients.

    Returns (surrogate value, asv tape, cm tape) without touching parameters.
    """
    n = len(batch)
    tape_asv = pair.asv.scorer.new_tape()
    tape_cm = pair.cm.scorer.new_tape()
    per_trial = []
    rewards = np.empty(n)
    for i, trial in enumerate(batch):
        p_asv, cache_asv = policy_accept_probability(pair.asv, trial.x_asv)
        p_cm, cache_cm = policy_accept_probability(pair.cm, trial.x_cm)
        a_asv, _ = sample_action(p_asv, rng)
        a_cm, _ = sample_action(p_cm, rng)
        a_tandem, p_tandem = tandem_action_probability(a_asv, a_cm, p_asv, p_cm)
        rewards[i] = reward(spec, a_tandem, trial.label)
        per_trial.append((cache_asv, cache_cm, a_tandem, p_tandem))

    baseline = float(np.mean(rewards)) if use_baseline else 0.0
    surrogate = 0.0
    for i, (cache_asv, cache_cm, a_tandem, p_tandem) in enumerate(per_trial):
        r = rewards[i] - baseline
        surrogate += math.log(p_tandem) * r / n
        if a_tandem is Decision.ACCEPT:
            d_p_asv = r / (n * cache_asv.p)
            d_p_cm = r / (n * cache_cm.p)
        else:
            d_p_asv = -r * cache_cm.p / (n * p_tandem)
            d_p_cm = -r * cache_asv.p / (n * p_tandem)
        policy_backward(pair.asv, cache_asv, d_p_asv, tape_asv, asv_calib_grad)
        policy_backward(pair.cm, cache_cm, d_p_cm, tape_cm, cm_calib_grad)
    if not math.isfinite(surrogate):
        raise TrainingDivergedError(f"non-finite surrogate loss {surrogate}")
    return surrogate, tape_asv, tape_cm


def reinforce_epoch(
    pair: PolicyPair,
    data: Sequence[Trial],
    spec: RewardSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    seen_ids: set[str] | None = None,
) -> list[float]:
    """One epoch of REINFORCE: per minibatch, one gradient-ascent step of
    size cfg.lr on both policies (and on the calibration heads when
    cfg.train_calibration). Returns per-batch surrogate values."""
    losses = []
    for batch in iterate_batches(data, cfg, rng):
        if seen_ids is not None:
            seen_ids.update(t.id for t in batch)
        asv_cal = np.zeros(2) if cfg.train_calibration else None
        cm_cal = np.zeros(2) if cfg.train_calibration else None
        surrogate, tape_asv, tape_cm = reinforce_batch(
            pair, batch, spec, rng, cfg.use_reward_baseline, asv_cal, cm_cal
        )
        pair.asv.scorer.sgd_step(tape_asv, cfg.lr, Direction.ASCENT)
        pair.cm.scorer.sgd_step(tape_cm, cfg.lr, Direction.ASCENT)
        if cfg.train_calibration:
            for policy, grad in ((pair.asv, asv_cal), (pair.cm, cm_cal)):
                if policy.calibrator is not None:
                    c = policy.calibrator
                    policy.calibrator = replace(
                        c, a=c.a + cfg.lr * float(grad[0]), b=c.b + cfg.lr * float(grad[1])
                    )
        losses.append(surrogate)
    return losses


# ---------------------------------------------------------------------------
# Cross-entropy training (pretraining and the finetune baseline)
# ---------------------------------------------------------------------------


def bce_batch(
    scorer: Scorer, examples: Sequence[tuple[np.ndarray, float]]
) -> tuple[float, GradientTape]:
    """Mean binary cross-entropy (on sigmoid(score)) and its gradient."""
    tape = scorer.new_tape()
    n = len(examples)
    loss = 0.0
    for x, y in examples:
        score, cache = scorer.forward(x)
        # log(1 + e^z) - y*z, numerically stable; d/dz = sigmoid(z) - y.
        loss += (np.logaddexp(0.0, score) - y * score) / n
        scorer.backward(cache, (float(sigmoid(score)) - y) / n, tape)
    return float(loss), tape


def bce_epoch(
    scorer: Scorer,
    pools: Sequence[Sequence[Trial]],
    feature: Callable[[Trial], np.ndarray],
    target: Callable[[Trial], float],
    cfg: TrainConfig,
    rng: np.random.Generator,
    seen_ids: set[str] | None = None,
) -> list[float]:
    """One epoch of descent on binary cross-entropy over the given class
    pools (balanced with replacement when cfg.balanced)."""
    pools = [p for p in pools if p]
    n_total = sum(len(p) for p in pools)
    n_batches = math.ceil(n_total / cfg.batch_size)
    losses = []
    flat = [t for pool in pools for t in pool]
    if not cfg.balanced:
        order = rng.permutation(n_total)
    for b in range(n_batches):
        if cfg.balanced:
            batch = _balanced_batch(pools, cfg.batch_size, rng)
        else:
            batch = [flat[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
        if seen_ids is not None:
            seen_ids.update(t.id for t in batch)
        loss, tape = bce_batch(scorer, [(feature(t), target(t)) for t in batch])
        scorer.sgd_step(tape, cfg.lr, Direction.DESCENT)
        losses.append(loss)
    return losses


def asv_bce_target(trial: Trial) -> float:
    return 1.0 if trial.label.asv_label is AsvLabel.TARGET else 0.0


def cm_bce_target(trial: Trial) -> float:
    return 1.0 if trial.label.cm_label is CmLabel.BONAFIDE else 0.0


def finetune_epoch(
    pair: PolicyPair,
    data: Sequence[Trial],
    cfg: TrainConfig,
    rng_asv: np.random.Generator,
    rng_cm: np.random.Generator,
    seen_ids: set[str] | None = None,
) -> list[float]:
    """One epoch of the no-tandem baseline: each scorer descends its own
    binary cross-entropy against its own label. Each system samples from
    pools keyed by its own label with its own RNG stream, so neither system
    is influenced by the other's labels.

    Returns per-batch means of the two task losses.
    """
    asv_pools = [
        [t for t in data if t.label.asv_label is AsvLabel.TARGET],
        [t for t in data if t.label.asv_label is AsvLabel.NONTARGET],
    ]
    cm_pools = [
        [t for t in data if t.label.cm_label is CmLabel.BONAFIDE],
        [t for t in data if t.label.cm_label is CmLabel.SPOOF],
    ]
    asv_losses = bce_epoch(
        pair.asv.scorer, asv_pools, lambda t: t.x_asv, asv_bce_target, cfg, rng_asv, seen_ids
    )
    cm_losses = bce_epoch(
        pair.cm.scorer, cm_pools, lambda t: t.x_cm, cm_bce_target, cfg, rng_cm, seen_ids
    )
    return [(a + c) / 2.0 for a, c in zip(asv_losses, cm_losses)]


# ---------------------------------------------------------------------------
# Evaluation and method dispatch
# ---------------------------------------------------------------------------


def score_trials(pair: PolicyPair, trials: Sequence[Trial]) -> ScoreSet:
    """Raw scorer outputs for every trial (calibration is monotone and does
    not change threshold-swept metrics, so metrics always use raw scores)."""
    rows = []
    for t in trials:
        asv_score, _ = pair.asv.scorer.forward(t.x_asv)
        cm_score, _ = pair.cm.scorer.forward(t.x_cm)
        rows.append((t.id, t.label, asv_score, cm_score))
    return ScoreSet.from_rows(rows)


@dataclass(frozen=True)
class Splits:
    """The three trial sets: train feeds pretraining and calibration only,
    dev is the tandem-training set, eval is never trained on."""

    train: tuple[Trial, ...]
    dev: tuple[Trial, ...]
    eval: tuple[Trial, ...]


def fit_calibrators(
    pair: PolicyPair, train_trials: Sequence[Trial], p: TandemCostParams
) -> PolicyPair:
    """Attach affine calibration heads fitted on pretraining-side scores.

    The ASV head is fitted on target vs nontarget bonafide trials with priors
    renormalized from (rho_tar, rho_non); the CM head on bonafide vs spoof
    with priors (rho_tar + rho_non, rho_spoof).
    """
    scores = score_trials(pair, train_trials)
    asv_rows = [
        (e.asv_score, e.label.is_target_bonafide) for e in scores if not e.label.is_spoof
    ]
    bona = p.rho_tar + p.rho_non
    asv_cal = train_calibrator(asv_rows, (p.rho_tar / bona, p.rho_non / bona))
    cm_rows = [(e.cm_score, not e.label.is_spoof) for e in scores]
    cm_cal = train_calibrator(cm_rows, (bona, p.rho_spoof))
    return PolicyPair(
        asv=Policy(pair.asv.scorer, asv_cal), cm=Policy(pair.cm.scorer, cm_cal)
    )


EVAL_FILTERED_SPLIT = "eval_filtered"

_REWARD_BY_METHOD = {
    Method.REINFORCE: RewardKind.PLUS_MINUS_ONE,
    Method.REINFORCE_CALIB: RewardKind.PLUS_MINUS_ONE,
    Method.REINFORCE_TDCF: RewardKind.TDCF_SINGLE,
    Method.REINFORCE_CALIB_TDCF: RewardKind.TDCF_SINGLE,
}


def run_method(
    method: Method,
    pretrained: PolicyPair,
    splits: Splits,
    cfg: TrainConfig,
    p: TandemCostParams,
    exclude_attacks: set[str] | None = None,
) -> RunRecord:
    """Run one tandem-optimization method from a pretrained pair.

    Training uses the dev split; dev and eval metric reports are recorded
    before training and after every epoch (plus the attack-filtered eval when
    exclude_attacks is given). The pretrained pair is never mutated.
    """
    if not isinstance(method, Method):
        raise ValueError(
            f"unknown method {method!r}; valid: {[m.value for m in Method]}"
        )
    pair = pretrained.clone()
    rng = np.random.default_rng(cfg.seed)
    ft_children = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_asv = np.random.default_rng(ft_children[0])
    rng_cm = np.random.default_rng(ft_children[1])

    if method in (Method.REINFORCE_CALIB, Method.REINFORCE_CALIB_TDCF):
        pair = fit_calibrators(pair, splits.train, p)

    taus: SoftThresholds | None = None
    if method is Method.SOFT_TDCF:
        # Start the surrogate at the evaluation operating point: the hard EER
        # thresholds of the pretrained systems on the tandem-training data.
        cs = score_trials(pair, splits.dev).class_split()
        cs.require_all_classes()
        tau_asv = eer_arrays(cs.tb_asv, cs.nb_asv)[1]
        tau_cm = eer_arrays(np.concatenate([cs.tb_cm, cs.nb_cm]), cs.sp_cm)[1]
        taus = SoftThresholds(tau_asv=tau_asv, tau_cm=tau_cm)

    record = RunRecord(method=method.value, seed=cfg.seed, config=cfg.to_json_dict())
    step = 0

    def evaluate(epoch: int) -> None:
        jobs = [("dev", splits.dev), ("eval", splits.eval)]
        for split, trials in jobs:
            report = compute_metric_report(score_trials(pair, trials), p)
            record.add_report(split, epoch, report)
            record.rows.append(
                TelemetryRow(
                    step=step,
                    epoch=epoch,
                    method=method.value,
                    seed=cfg.seed,
                    split=split,
                    asv_eer=report.asv_eer,
                    cm_eer=report.cm_eer,
                    min_norm_tdcf=report.min_norm_tdcf,
                    train_loss=None,
                )
            )
        if exclude_attacks is not None:
            filtered = filter_attacks(score_trials(pair, splits.eval), exclude_attacks)
            report = compute_metric_report(filtered, p)
            record.add_report(EVAL_FILTERED_SPLIT, epoch, report)
            record.rows.append(
                TelemetryRow(
                    step=step,
                    epoch=epoch,
                    method=method.value,
                    seed=cfg.seed,
                    split=EVAL_FILTERED_SPLIT,
                    asv_eer=report.asv_eer,
                    cm_eer=report.cm_eer,
                    min_norm_tdcf=report.min_norm_tdcf,
                    train_loss=None,
                )
            )

    evaluate(epoch=0)
    for epoch in range(1, cfg.epochs + 1):
        if method is Method.FINETUNE:
            batch_losses = finetune_epoch(
                pair, splits.dev, cfg, rng_asv, rng_cm, record.trained_trial_ids
            )
        elif method is Method.SOFT_TDCF:
            batch_losses = []
            for batch in iterate_batches(splits.dev, cfg, rng):
                # Soft rates are per-class means, so a batch must contain all
                # three classes. A balanced batch of the default size misses a
                # class with negligible probability; tiny batches may not.
                if len({_class_key(t.label) for t in batch}) < 3:
                    logger.debug("skipping soft-cost batch missing a class")
                    continue
                record.trained_trial_ids.update(t.id for t in batch)
                batch_losses.append(
                    soft_tdcf_train_step(
                        pair.asv.scorer,
                        pair.cm.scorer,
                        taus,
                        batch,
                        p,
                        cfg.lr,
                        temperature=cfg.soft_temperature,
                    )
                )
        else:
            spec = RewardSpec(
                _REWARD_BY_METHOD[method],
                p if _REWARD_BY_METHOD[method] is RewardKind.TDCF_SINGLE else None,
            )
            batch_losses = reinforce_epoch(
                pair, splits.dev, spec, cfg, rng, record.trained_trial_ids
            )
        for loss in batch_losses:
            step += 1
            record.rows.append(
                TelemetryRow(
                    step=step,
                    epoch=epoch,
                    method=method.value,
                    seed=cfg.seed,
                    split="train",
                    asv_eer=None,
                    cm_eer=None,
                    min_norm_tdcf=None,
                    train_loss=loss,
                )
            )
        evaluate(epoch=epoch)

    record.final_pair = pair
    record.soft_thresholds = taus
    return record
