"""Reproducible synthetic tandem problems.

Speakers are Gaussian embeddings; verification inputs are element-wise
absolute differences between a noisy enrollment embedding and a noisy test
utterance. Countermeasure inputs are Gaussian, with spoofs shifted along a
per-attack direction. All class-conditional densities are known in closed
form, so likelihood-ratio references are available for every downstream
check. Everything is a pure function of the config seed.

Attack knobs:
  * asv_effectiveness in [0, 1]: how closely the spoof utterance mimics the
    target embedding (1 = indistinguishable from a genuine target trial);
  * cm_detectability in [0, 1]: how far spoofs sit from the bonafide cloud
    in countermeasure feature space (0 = identical distribution).

"Outlier" attacks combine low cm_detectability with low asv_effectiveness:
hard for the countermeasure, but largely harmless against verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .nn import Activation, Scorer
from .tandem_train import (
    PolicyPair,
    Policy,
    Splits,
    TrainConfig,
    asv_bce_target,
    bce_epoch,
    cm_bce_target,
)
from .types import AsvLabel, CmLabel, Trial, TrialLabel

SPLIT_NAMES = ("train", "dev", "eval")


class AttackSplit(Enum):
    SEEN = "seen"
    UNSEEN = "unseen"
    OUTLIER = "outlier"


# Above these knob values an attack no longer qualifies as an outlier.
OUTLIER_MAX_EFFECTIVENESS = 0.4
OUTLIER_MAX_DETECTABILITY = 0.4


@dataclass(frozen=True)
class AttackSpec:
    attack_id: str
    asv_effectiveness: float
    cm_detectability: float
    split: AttackSplit

    def __post_init__(self) -> None:
        for name in ("asv_effectiveness", "cm_detectability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1] for {self.attack_id}")
        if self.split is AttackSplit.OUTLIER:
            if (
                self.asv_effectiveness > OUTLIER_MAX_EFFECTIVENESS
                or self.cm_detectability > OUTLIER_MAX_DETECTABILITY
            ):
                raise ValueError(
                    f"outlier attack {self.attack_id} must have low "
                    "asv_effectiveness and low cm_detectability"
                )


@dataclass(frozen=True)
class WorldConfig:
    n_speakers_train: int = 20
    n_speakers_dev: int = 10
    n_speakers_eval: int = 20
    trials_per_class_train: int = 666
    trials_per_class_dev: int = 666
    trials_per_class_eval: int = 666
    d_asv: int = 8
    d_cm: int = 8
    speaker_scale: float = 1.0
    utterance_noise: float = 0.4
    spoof_offset_scale: float = 5.0
    cm_noise: float = 2.5
    cm_shift_scale: float = 14.0
    attack_dir_jitter: float = 0.15
    attacks: tuple[AttackSpec, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "n_speakers_train",
            "n_speakers_dev",
            "n_speakers_eval",
            "trials_per_class_train",
            "trials_per_class_dev",
            "trials_per_class_eval",
            "d_asv",
            "d_cm",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_speakers_train < 2 or self.n_speakers_dev < 2 or self.n_speakers_eval < 2:
            raise ValueError("each split needs at least 2 speakers for nontarget trials")
        for name in (
            "speaker_scale",
            "utterance_noise",
            "spoof_offset_scale",
            "cm_noise",
            "cm_shift_scale",
            "attack_dir_jitter",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        ids = [a.attack_id for a in self.attacks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate attack ids")
        if not self.split_attacks("train"):
            raise ValueError("no SEEN attacks configured for train/dev spoofs")
        if not self.split_attacks("eval"):
            raise ValueError("no UNSEEN/OUTLIER attacks configured for eval spoofs")

    def split_attacks(self, split: str) -> tuple[AttackSpec, ...]:
        """SEEN attacks belong to train/dev; UNSEEN and OUTLIER to eval only."""
        if split in ("train", "dev"):
            return tuple(a for a in self.attacks if a.split is AttackSplit.SEEN)
        return tuple(a for a in self.attacks if a.split is not AttackSplit.SEEN)

    def n_speakers(self, split: str) -> int:
        return getattr(self, f"n_speakers_{split}")

    def trials_per_class(self, split: str) -> int:
        return getattr(self, f"trials_per_class_{split}")

    def to_json_dict(self) -> dict:
        return {
            "n_speakers_train": self.n_speakers_train,
            "n_speakers_dev": self.n_speakers_dev,
            "n_speakers_eval": self.n_speakers_eval,
            "trials_per_class_train": self.trials_per_class_train,
            "trials_per_class_dev": self.trials_per_class_dev,
            "trials_per_class_eval": self.trials_per_class_eval,
            "d_asv": self.d_asv,
            "d_cm": self.d_cm,
            "speaker_scale": self.speaker_scale,
            "utterance_noise": self.utterance_noise,
            "spoof_offset_scale": self.spoof_offset_scale,
            "cm_noise": self.cm_noise,
            "cm_shift_scale": self.cm_shift_scale,
            "attack_dir_jitter": self.attack_dir_jitter,
            "attacks": [
                {
                    "attack_id": a.attack_id,
                    "asv_effectiveness": a.asv_effectiveness,
                    "cm_detectability": a.cm_detectability,
                    "split": a.split.value,
                }
                for a in self.attacks
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        d["attacks"] = tuple(
            AttackSpec(
                attack_id=a["attack_id"],
                asv_effectiveness=a["asv_effectiveness"],
                cm_detectability=a["cm_detectability"],
                split=AttackSplit(a["split"]),
            )
            for a in d.get("attacks", [])
        )
        return cls(**d)


DEFAULT_ATTACKS = (
    AttackSpec("A01", 0.90, 0.80, AttackSplit.SEEN),
    AttackSpec("A02", 0.85, 0.70, AttackSplit.SEEN),
    AttackSpec("A03", 0.80, 0.75, AttackSplit.SEEN),
    AttackSpec("A07", 0.88, 0.72, AttackSplit.UNSEEN),
    AttackSpec("A08", 0.82, 0.65, AttackSplit.UNSEEN),
    AttackSpec("A09", 0.86, 0.78, AttackSplit.UNSEEN),
    AttackSpec("A10", 0.80, 0.60, AttackSplit.UNSEEN),
    AttackSpec("A17", 0.20, 0.10, AttackSplit.OUTLIER),
    AttackSpec("A18", 0.25, 0.15, AttackSplit.OUTLIER),
)


def default_world_config(seed: int = 7) -> WorldConfig:
    """The benchmark world: 3 seen, 4 unseen, and 2 outlier attacks, roughly
    2,000 trials per split."""
    return WorldConfig(attacks=DEFAULT_ATTACKS, seed=seed)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def attack_directions(cfg: WorldConfig) -> dict[str, np.ndarray]:
    """Unit shift directions in countermeasure space, one per attack: a
    shared global direction plus per-attack jitter. Deterministic in the
    config seed and the attack list order."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[0])
    global_dir = _unit(rng.standard_normal(cfg.d_cm))
    dirs = {}
    for attack in cfg.attacks:
        jitter = rng.standard_normal(cfg.d_cm)
        dirs[attack.attack_id] = _unit(global_dir + cfg.attack_dir_jitter * jitter)
    return dirs


def cm_spoof_mean(cfg: WorldConfig, attack: AttackSpec, direction: np.ndarray) -> np.ndarray:
    return cfg.cm_shift_scale * attack.cm_detectability * direction


def cm_bayes_llr(cfg: WorldConfig, attack: AttackSpec, direction: np.ndarray, x_cm: np.ndarray) -> float:
    """Exact log-likelihood ratio of the bonafide hypothesis against this
    attack's spoof density (both Gaussians with covariance cm_noise^2 * I);
    positive means more bonafide-like."""
    mu = cm_spoof_mean(cfg, attack, direction)
    var = cfg.cm_noise**2
    return float(-(x_cm @ mu - 0.5 * mu @ mu) / var)


def _speaker_table(rng: np.random.Generator, n: int, cfg: WorldConfig) -> np.ndarray:
    return cfg.speaker_scale * rng.standard_normal((n, cfg.d_asv))


def _utterance(rng: np.random.Generator, emb: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    return emb + cfg.utterance_noise * rng.standard_normal(emb.shape)


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    return _unit(rng.standard_normal(dim))


def _generate_split(
    split: str, cfg: WorldConfig, rng: np.random.Generator, dirs: dict[str, np.ndarray]
) -> tuple[Trial, ...]:
    speakers = _speaker_table(rng, cfg.n_speakers(split), cfg)
    n_spk = speakers.shape[0]
    n = cfg.trials_per_class(split)
    attacks = cfg.split_attacks(split)
    trials: list[Trial] = []

    def bona_cm() -> np.ndarray:
        return cfg.cm_noise * rng.standard_normal(cfg.d_cm)

    for i in range(n):
        spk = int(rng.integers(n_spk))
        enroll = _utterance(rng, speakers[spk], cfg)
        test = _utterance(rng, speakers[spk], cfg)
        trials.append(
            Trial(
                id=f"{split}_tar_{i:05d}",
                x_asv=np.abs(enroll - test),
                x_cm=bona_cm(),
                label=TrialLabel(AsvLabel.TARGET, CmLabel.BONAFIDE),
            )
        )

    for i in range(n):
        spk = int(rng.integers(n_spk))
        other = int(rng.integers(n_spk - 1))
        if other >= spk:
            other += 1
        enroll = _utterance(rng, speakers[spk], cfg)
        test = _utterance(rng, speakers[other], cfg)
        trials.append(
            Trial(
                id=f"{split}_non_{i:05d}",
                x_asv=np.abs(enroll - test),
                x_cm=bona_cm(),
                label=TrialLabel(AsvLabel.NONTARGET, CmLabel.BONAFIDE),
            )
        )

    for i in range(n):
        attack = attacks[i % len(attacks)]  # round-robin keeps counts even
        spk = int(rng.integers(n_spk))
        enroll = _utterance(rng, speakers[spk], cfg)
        # The spoof utterance sits at a controlled distance from the target
        # embedding: effectiveness 1 reproduces the genuine-utterance
        # distribution exactly.
        offset = (
            (1.0 - attack.asv_effectiveness)
            * cfg.spoof_offset_scale
            * _random_unit(rng, cfg.d_asv)
        )
        test = _utterance(rng, speakers[spk] + offset, cfg)
        x_cm = cm_spoof_mean(cfg, attack, dirs[attack.attack_id]) + bona_cm()
        trials.append(
            Trial(
                id=f"{split}_spf_{i:05d}",
                x_asv=np.abs(enroll - test),
                x_cm=x_cm,
                label=TrialLabel(AsvLabel.TARGET, CmLabel.SPOOF, attack.attack_id),
            )
        )
    return tuple(trials)


def generate_world(cfg: WorldConfig) -> Splits:
    """Generate the train/dev/eval trial sets, fully determined by cfg.seed.

    Speaker pools are disjoint across splits; SEEN attacks appear in
    train/dev only, UNSEEN and OUTLIER attacks in eval only.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(4)
    dirs = attack_directions(cfg)
    sets = {}
    for split, child in zip(SPLIT_NAMES, children[1:]):
        sets[split] = _generate_split(split, cfg, np.random.default_rng(child), dirs)
    return Splits(train=sets["train"], dev=sets["dev"], eval=sets["eval"])


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    """Per-system pretraining settings.

    The two systems are separate detectors with separate recipes: the
    verification scorer trains to convergence (plateau), while the
    countermeasure stops early, which keeps its scores in the responsive
    range of the sigmoid where both stochastic action sampling and the soft
    surrogate still have signal.
    """

    asv_lr: float = 0.1
    asv_max_epochs: int = 150
    cm_lr: float = 0.04
    cm_max_epochs: int = 8
    batch_size: int = 64
    hidden: int = 16
    plateau_tol: float = 1e-4
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {
            "asv_lr": self.asv_lr,
            "asv_max_epochs": self.asv_max_epochs,
            "cm_lr": self.cm_lr,
            "cm_max_epochs": self.cm_max_epochs,
            "batch_size": self.batch_size,
            "hidden": self.hidden,
            "plateau_tol": self.plateau_tol,
            "seed": self.seed,
        }


# Consecutive non-improving epochs tolerated before the plateau stop fires.
PLATEAU_PATIENCE = 5


def _dataset_bce(scorer: Scorer, examples: list[tuple[np.ndarray, float]]) -> float:
    loss = 0.0
    for x, y in examples:
        score, _ = scorer.forward(x)
        loss += float(np.logaddexp(0.0, score) - y * score)
    return loss / len(examples)


def _pretrain_scorer(
    trials: Sequence[Trial],
    pools: list[list[Trial]],
    feature,
    target,
    input_dim: int,
    lr: float,
    max_epochs: int,
    pre: PretrainConfig,
    rng: np.random.Generator,
    init_seed: int,
) -> Scorer:
    """Train one scorer with BCE until the epoch loss plateaus (relative
    improvement below plateau_tol) or max_epochs is reached."""
    scorer = Scorer.create([input_dim, pre.hidden, 1], Activation.TANH, seed=init_seed)
    cfg = TrainConfig(
        lr=lr, batch_size=pre.batch_size, epochs=1, balanced=True, seed=pre.seed
    )
    examples = [(feature(t), target(t)) for t in trials]
    best = _dataset_bce(scorer, examples)
    if not math.isfinite(best):
        raise RuntimeError("pretraining diverged before the first epoch")
    stalled = 0
    for _ in range(max_epochs):
        bce_epoch(scorer, pools, feature, target, cfg, rng)
        cur = _dataset_bce(scorer, examples)
        if not math.isfinite(cur):
            raise RuntimeError("pretraining diverged (non-finite loss)")
        if best - cur < pre.plateau_tol * max(best, 1e-12):
            # epoch losses fluctuate under sampled minibatches, so the
            # plateau needs a few confirming epochs before stopping
            stalled += 1
            if stalled >= PLATEAU_PATIENCE:
                break
        else:
            stalled = 0
        best = min(best, cur)
    return scorer


def pretrain_pair(train: Sequence[Trial], pre: PretrainConfig) -> PolicyPair:
    """Pre-train the two systems separately on their own tasks.

    The verification scorer sees bonafide trials only (target vs nontarget);
    the countermeasure sees all trials (bonafide vs spoof). The two trainers
    use independent derived RNG streams, so neither is affected by the other
    task's labels.
    """
    children = np.random.SeedSequence(pre.seed).spawn(2)
    rng_asv = np.random.default_rng(children[0])
    rng_cm = np.random.default_rng(children[1])

    bona = [t for t in train if not t.label.is_spoof]
    asv_pools = [
        [t for t in bona if t.label.asv_label is AsvLabel.TARGET],
        [t for t in bona if t.label.asv_label is AsvLabel.NONTARGET],
    ]
    cm_pools = [
        [t for t in train if t.label.cm_label is CmLabel.BONAFIDE],
        [t for t in train if t.label.cm_label is CmLabel.SPOOF],
    ]
    if not all(asv_pools) or not all(cm_pools):
        raise ValueError("pretraining needs every class present in the train split")

    d_asv = train[0].x_asv.size
    d_cm = train[0].x_cm.size
    asv = _pretrain_scorer(
        bona, asv_pools, lambda t: t.x_asv, asv_bce_target, d_asv,
        pre.asv_lr, pre.asv_max_epochs, pre, rng_asv, init_seed=pre.seed * 2 + 1,
    )
    cm = _pretrain_scorer(
        list(train), cm_pools, lambda t: t.x_cm, cm_bce_target, d_cm,
        pre.cm_lr, pre.cm_max_epochs, pre, rng_cm, init_seed=pre.seed * 2 + 2,
    )
    return PolicyPair(asv=Policy(asv), cm=Policy(cm))
