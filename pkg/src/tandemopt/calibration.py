"""Affine score calibration to log-likelihood ratios.

A trained Calibrator maps a raw score s to a calibrated log-odds a*s + b;
adding the prior log-odds and applying the sigmoid yields the accept
probability. (a, b) are fitted by minimizing the prior-weighted logistic
loss with plain gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class CalibrationError(RuntimeError):
    pass


def sigmoid(s):
    """Numerically stable logistic function; accepts scalars or arrays."""
    s_arr = np.asarray(s, dtype=np.float64)
    z = np.exp(-np.abs(s_arr))
    out = np.where(s_arr >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    if np.isscalar(s) or s_arr.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Calibrator:
    """Affine calibration (scale, offset) plus the decision prior log-odds."""

    a: float
    b: float
    prior_log_odds: float

    def __post_init__(self) -> None:
        for name in ("a", "b", "prior_log_odds"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite calibrator field {name}")

    def to_json_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "prior_log_odds": self.prior_log_odds}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Calibrator":
        return cls(a=d["a"], b=d["b"], prior_log_odds=d["prior_log_odds"])


def accept_probability(cal: Calibrator, raw_score: float) -> float:
    """Posterior probability of the accept hypothesis for one raw score."""
    return float(sigmoid(cal.a * raw_score + cal.b + cal.prior_log_odds))


def calibration_loss_and_grad(
    a: float,
    b: float,
    pos: np.ndarray,
    neg: np.ndarray,
    w_pos: float,
    w_neg: float,
    prior_log_odds: float,
) -> tuple[float, float, float]:
    """Prior-weighted logistic loss over calibrated log-odds and its gradient.

    loss = w_pos * sum_P log(1 + exp(-(a s + b + plo)))
         + w_neg * sum_N log(1 + exp(+(a s + b + plo)))
    """
    logit_pos = a * pos + b + prior_log_odds
    logit_neg = a * neg + b + prior_log_odds
    loss = w_pos * np.sum(np.logaddexp(0.0, -logit_pos)) + w_neg * np.sum(
        np.logaddexp(0.0, logit_neg)
    )
    # d/d logit of each term: -sigma(-logit) for positives, +sigma(logit) for negatives.
    d_pos = -w_pos * sigmoid(-logit_pos)
    d_neg = w_neg * sigmoid(logit_neg)
    d_a = float(np.sum(d_pos * pos) + np.sum(d_neg * neg))
    d_b = float(np.sum(d_pos) + np.sum(d_neg))
    return float(loss), d_a, d_b


def train_calibrator(
    scores: Sequence[tuple[float, bool]],
    priors: tuple[float, float],
    max_iter: int = 10000,
    grad_tol: float = 1e-6,
) -> Calibrator:
    """Fit (a, b) by gradient descent on the prior-weighted logistic loss.

    priors = (p_pos, p_neg) must sum to one; the resulting prior log-odds
    log(p_pos/p_neg) sits inside both the training loss and the decision
    rule. Descent runs on scores standardized for conditioning (the fitted
    transform is mapped back exactly) until the gradient norm in the original
    (a, b) parameterization drops below grad_tol. The fit must come out
    orientation-preserving: a <= 0 means the scores rank positives below
    negatives and is reported as an error rather than silently flipped.
    """
    p_pos, p_neg = priors
    if abs(p_pos + p_neg - 1.0) > 1e-9:
        raise ValueError(f"priors sum to {p_pos + p_neg}, expected 1")
    if not (0.0 < p_pos < 1.0):
        raise ValueError("priors must lie strictly inside (0, 1)")
    pos = np.asarray([s for s, is_pos in scores if is_pos], dtype=np.float64)
    neg = np.asarray([s for s, is_pos in scores if not is_pos], dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise CalibrationError("calibration needs scores from both classes")

    prior_log_odds = math.log(p_pos / p_neg)
    w_pos = p_pos / pos.size
    w_neg = p_neg / neg.size

    # Standardize for conditioning; (a~, b~) on standardized scores map back
    # through a = a~/scale, b = b~ - a~*mean/scale.
    all_scores = np.concatenate([pos, neg])
    mean = float(np.mean(all_scores))
    scale = float(np.std(all_scores))
    if scale < 1e-12:
        raise CalibrationError("degenerate scores: zero variance")
    pos_s = (pos - mean) / scale
    neg_s = (neg - mean) / scale

    a_s, b_s = 1.0, 0.0
    step = 1.0
    loss, g_a, g_b = calibration_loss_and_grad(
        a_s, b_s, pos_s, neg_s, w_pos, w_neg, prior_log_odds
    )
    converged = False
    for _ in range(max_iter):
        # Gradient in the original parameterization decides convergence.
        orig_g_a = g_a / scale
        orig_g_b = g_b - g_a * mean / scale
        orig_norm = math.hypot(orig_g_a, orig_g_b)
        if orig_norm < grad_tol:
            converged = True
            break
        sq_norm = g_a * g_a + g_b * g_b
        # Backtracking line search (Armijo) on the standardized loss.
        while True:
            a_new = a_s - step * g_a
            b_new = b_s - step * g_b
            loss_new, g_a_new, g_b_new = calibration_loss_and_grad(
                a_new, b_new, pos_s, neg_s, w_pos, w_neg, prior_log_odds
            )
            if loss_new <= loss - 0.5 * step * sq_norm or step < 1e-16:
                break
            step *= 0.5
        a_s, b_s, loss, g_a, g_b = a_new, b_new, loss_new, g_a_new, g_b_new
        step = min(step * 2.0, 1e6)
    else:
        orig_g_a = g_a / scale
        orig_g_b = g_b - g_a * mean / scale
        orig_norm = math.hypot(orig_g_a, orig_g_b)
        converged = orig_norm < grad_tol

    if not converged:
        raise CalibrationError(
            f"calibration did not converge: gradient norm {orig_norm:.3e} "
            f"after {max_iter} iterations"
        )

    a = a_s / scale
    b = b_s - a_s * mean / scale
    if a <= 0.0:
        raise CalibrationError(
            f"fitted scale a={a:.6g} is not positive: scores are anti-oriented"
        )
    return Calibrator(a=a, b=b, prior_log_odds=prior_log_odds)
