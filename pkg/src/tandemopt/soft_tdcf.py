"""Differentiable tandem cost: sigmoid-softened error rates, the soft t-DCF
loss over a batch, and a joint descent step on both scorers and both
(trainable) thresholds.

Each hard indicator 1(score > tau) is replaced by sigmoid(score - tau); the
joint tandem events (CM pass AND ASV decision) soften to the product of the
two per-subsystem sigmoids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calibration import sigmoid
from .nn import Direction, Scorer
from .types import MissingClassError, ScoreSet, TandemCostParams, Trial, TrialLabel


@dataclass
class SoftThresholds:
    """Trainable decision thresholds for the two subsystems."""

    tau_asv: float
    tau_cm: float


@dataclass(frozen=True)
class SoftTdcfGradients:
    """d(loss)/d(score) per batch element (input order) and d/d(tau)."""

    d_asv_scores: np.ndarray
    d_cm_scores: np.ndarray
    d_tau_asv: float
    d_tau_cm: float


def _sigmoid_prime(z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return s * (1.0 - s)


def soft_rates(
    scores: Sequence[tuple[float, bool]], tau: float, temperature: float = 1.0
) -> tuple[float, float]:
    """Sigmoid-softened miss and false-accept rates at a threshold.

    p_miss_soft = mean over positives of sigmoid((tau - s)/T);
    p_fa_soft   = mean over negatives of sigmoid((s - tau)/T).
    """
    pos = np.asarray([s for s, is_pos in scores if is_pos], dtype=np.float64)
    neg = np.asarray([s for s, is_pos in scores if not is_pos], dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise MissingClassError("soft rates need scores from both classes")
    p_miss = float(np.mean(sigmoid((tau - pos) / temperature)))
    p_fa = float(np.mean(sigmoid((neg - tau) / temperature)))
    return p_miss, p_fa


def soft_tdcf_from_arrays(
    asv: np.ndarray,
    cm: np.ndarray,
    labels: Sequence[TrialLabel],
    taus: SoftThresholds,
    p: TandemCostParams,
    temperature: float = 1.0,
) -> tuple[float, SoftTdcfGradients]:
    """Soft tandem cost over aligned score arrays (duplicates allowed, so a
    batch sampled with replacement works as-is).

    The four error rates are softened as
      p_d: mean over target-bonafide of sig(tau_cm - cm)
      p_a: mean over target-bonafide of sig(cm - tau_cm) * sig(tau_asv - asv)
      p_b: mean over nontarget-bonafide of sig(cm - tau_cm) * sig(asv - tau_asv)
      p_c: mean over spoof of sig(cm - tau_cm) * sig(asv - tau_asv)
    and combined with the usual cost weights. Gradients cover every score and
    both thresholds.
    """
    tb = np.asarray([l.is_target_bonafide for l in labels], dtype=bool)
    nb = np.asarray([l.is_nontarget_bonafide for l in labels], dtype=bool)
    sp = np.asarray([l.is_spoof for l in labels], dtype=bool)
    n_tb, n_nb, n_sp = int(tb.sum()), int(nb.sum()), int(sp.sum())
    if n_tb == 0 or n_nb == 0 or n_sp == 0:
        raise MissingClassError("soft t-DCF needs all three trial classes")

    t = temperature
    u = (cm - taus.tau_cm) / t  # CM pass margin
    v = (asv - taus.tau_asv) / t  # ASV accept margin
    sig_u, sig_v = sigmoid(u), sigmoid(v)
    dsig_u, dsig_v = _sigmoid_prime(u), _sigmoid_prime(v)

    k = np.zeros(len(labels))
    k[tb] = p.c_miss * p.rho_tar / n_tb
    k[nb] = p.c_fa * p.rho_non / n_nb
    k[sp] = p.c_fa_spoof * p.rho_spoof / n_sp

    contrib = np.where(
        tb,
        k * (sig_u * (1.0 - sig_v) + (1.0 - sig_u)),  # p_a + p_d terms
        k * sig_u * sig_v,  # p_b / p_c terms
    )
    loss = float(np.sum(contrib))

    d_cm = np.where(tb, -k * dsig_u * sig_v / t, k * dsig_u * sig_v / t)
    d_asv = np.where(tb, -k * sig_u * dsig_v / t, k * sig_u * dsig_v / t)
    grads = SoftTdcfGradients(
        d_asv_scores=d_asv,
        d_cm_scores=d_cm,
        d_tau_asv=float(-np.sum(d_asv)),
        d_tau_cm=float(-np.sum(d_cm)),
    )
    return loss, grads


def soft_tdcf_loss(
    scores: ScoreSet,
    taus: SoftThresholds,
    p: TandemCostParams,
    temperature: float = 1.0,
) -> tuple[float, SoftTdcfGradients]:
    """Soft tandem cost of a score set and its exact gradients, with the
    per-score gradients aligned to the entry order."""
    asv = np.asarray([e.asv_score for e in scores], dtype=np.float64)
    cm = np.asarray([e.cm_score for e in scores], dtype=np.float64)
    labels = [e.label for e in scores]
    return soft_tdcf_from_arrays(asv, cm, labels, taus, p, temperature=temperature)


def soft_tdcf_train_step(
    asv: Scorer,
    cm: Scorer,
    taus: SoftThresholds,
    batch: Sequence[Trial],
    p: TandemCostParams,
    lr: float,
    temperature: float = 1.0,
) -> float:
    """One descent step on both scorers and both thresholds.

    Returns the loss before the step.
    """
    asv_caches, cm_caches = [], []
    asv_scores, cm_scores = [], []
    for trial in batch:
        asv_score, asv_cache = asv.forward(trial.x_asv)
        cm_score, cm_cache = cm.forward(trial.x_cm)
        asv_caches.append(asv_cache)
        cm_caches.append(cm_cache)
        asv_scores.append(asv_score)
        cm_scores.append(cm_score)
    loss, grads = soft_tdcf_from_arrays(
        np.asarray(asv_scores),
        np.asarray(cm_scores),
        [t.label for t in batch],
        taus,
        p,
        temperature=temperature,
    )

    asv_tape = asv.new_tape()
    cm_tape = cm.new_tape()
    for i in range(len(batch)):
        asv.backward(asv_caches[i], float(grads.d_asv_scores[i]), asv_tape)
        cm.backward(cm_caches[i], float(grads.d_cm_scores[i]), cm_tape)
    asv.sgd_step(asv_tape, lr, Direction.DESCENT)
    cm.sgd_step(cm_tape, lr, Direction.DESCENT)
    taus.tau_asv -= lr * grads.d_tau_asv
    taus.tau_cm -= lr * grads.d_tau_cm
    return loss
