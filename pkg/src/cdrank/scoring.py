"""Effective-response scoring for drug and cell line pairs.

A screened pair is summarized by three dose-response measurements: the area
under the dose-response curve (auc), the curve's lower limit, and the ic50.
All three shrink as a drug becomes more potent, so the score combines them as

    score = log((auc + lower_limit + ic50) / (2 * auc * lower_limit * ic50))

which grows when any measurement falls. Natural log is the default; base 10
is available for sensitivity runs. Pairs are labeled effective when their
score clears mu + 1.28 * sigma of the score population, a cut that keeps
roughly the top decile under a normality assumption.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Score cut used by the cell line screening gate, independent of the
# data-dependent threshold computed on the final training pool.
DEFAULT_GATE_THRESHOLD = 7.2734

# Upper-decile multiplier: P(Z >= 1.28) is about 0.1 for standard normal Z.
TAIL_MULTIPLIER = 1.28

LOG_BASES = ("e", "10")


def effective_score(auc, lower_limit, ic50, log_base: str = "e"):
    """Score one measurement triple, or elementwise over arrays.

    All three inputs must be strictly positive; the offending argument is
    named in the error otherwise. Returns a float for scalar inputs and an
    ndarray for array inputs.
    """
    if log_base not in LOG_BASES:
        raise ValueError(f"log_base must be one of {LOG_BASES}, got {log_base!r}")
    a = np.asarray(auc, dtype=np.float64)
    l = np.asarray(lower_limit, dtype=np.float64)
    i = np.asarray(ic50, dtype=np.float64)
    for name, arr in (("auc", a), ("lower_limit", l), ("ic50", i)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
        if np.any(arr <= 0):
            raise ValueError(f"{name} must be strictly positive")
    ratio = (a + l + i) / (2.0 * a * l * i)
    out = np.log(ratio) if log_base == "e" else np.log10(ratio)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ThresholdSpec:
    """Population statistics behind an effectiveness cut."""

    mu: float
    sigma: float
    threshold: float
    n: int
    log_base: str = "e"

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "threshold": self.threshold,
            "n": self.n,
            "log_base": self.log_base,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "ThresholdSpec":
        return cls(
            mu=float(payload["mu"]),
            sigma=float(payload["sigma"]),
            threshold=float(payload["threshold"]),
            n=int(payload["n"]),
            log_base=str(payload.get("log_base", "e")),
        )

    @classmethod
    def from_json(cls, text: str) -> "ThresholdSpec":
        return cls.from_dict(json.loads(text))


def score_threshold(scores, log_base: str = "e") -> ThresholdSpec:
    """Compute mu + 1.28 * sigma over a score population.

    Sigma is the population standard deviation (divide by n). At least two
    scores are required; identical scores give sigma 0 and threshold mu.
    """
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ValueError("score_threshold needs at least 2 scores")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores contain non-finite values")
    if np.all(arr == arr[0]):
        # identical scores: sigma exactly 0, threshold sits on the common value
        mu = float(arr[0])
        sigma = 0.0
    else:
        mu = float(np.mean(arr))
        sigma = float(np.sqrt(np.mean((arr - mu) ** 2)))
    return ThresholdSpec(
        mu=mu,
        sigma=sigma,
        threshold=mu + TAIL_MULTIPLIER * sigma,
        n=int(arr.size),
        log_base=log_base,
    )


def binarize(scores, threshold: float) -> np.ndarray:
    """Label scores 1 when score >= threshold, else 0. Boundary counts as 1."""
    arr = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores contain non-finite values")
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return (arr >= threshold).astype(np.int64)
