"""Closed-form KL divergences between isotropic Gaussians, a Monte-Carlo
cross-check, and empirical stat fitting.

This module is a diagnostic: evaluation runs fit Gaussian stats to teacher and
student feature matrices and report both the feature-matching KL (full mean and
variance mismatch) and the reconstruction-side KL (mean term only, same
variance). No gradients pass through here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianStats:
    """Isotropic Gaussian: mean vector and a single positive variance."""

    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        if self.mu.ndim != 1 or self.mu.size < 1:
            raise ValueError("mu must be a non-empty vector")
        if not math.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be a positive variance, got {self.sigma}")

    @property
    def d(self) -> int:
        return self.mu.size


def kl_feature(teacher: GaussianStats, student: GaussianStats) -> float:
    """KL(teacher || student) for isotropic Gaussians with distinct variances.

    0.5 * [ ||mu_S - mu_T||^2 / sigma_S - d + d*log(sigma_S/sigma_T) + d*sigma_T/sigma_S ]
    """
    if teacher.d != student.d:
        raise ValueError("dimension mismatch")
    gap = float(np.dot(student.mu - teacher.mu, student.mu - teacher.mu))
    d = teacher.d
    return 0.5 * (
        gap / student.sigma
        - d
        + d * math.log(student.sigma / teacher.sigma)
        + d * teacher.sigma / student.sigma
    )


def kl_recon(teacher: GaussianStats, mu_hat: np.ndarray) -> float:
    """KL(teacher || shifted teacher): only the mean term survives.

    0.5 * ||mu_hat - mu_T||^2 / sigma_T
    """
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    if mu_hat.shape != teacher.mu.shape:
        raise ValueError("dimension mismatch")
    gap = float(np.dot(mu_hat - teacher.mu, mu_hat - teacher.mu))
    return 0.5 * gap / teacher.sigma


@dataclass(frozen=True)
class InequalityReport:
    """Both KL values plus whether the feature-side KL strictly dominates."""

    kl_feature: float
    kl_recon: float
    feature_exceeds_recon: bool
    teacher_sigma: float
    student_sigma: float
    d: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def check_inequality(
    teacher: GaussianStats,
    student_sigma: float,
    mu_gap_feat: np.ndarray | None = None,
    mu_gap_recon: np.ndarray | None = None,
) -> InequalityReport:
    """Evaluate both divergences for a hypothetical student.

    With matched means and student_sigma < teacher sigma the feature KL is
    strictly positive while the reconstruction KL is zero, so the comparison
    always comes out true in that regime.
    """
    zero = np.zeros(teacher.d)
    gap_f = zero if mu_gap_feat is None else np.asarray(mu_gap_feat, dtype=np.float64)
    gap_r = zero if mu_gap_recon is None else np.asarray(mu_gap_recon, dtype=np.float64)
    student = GaussianStats(teacher.mu + gap_f, student_sigma)
    feat = kl_feature(teacher, student)
    recon = kl_recon(teacher, teacher.mu + gap_r)
    return InequalityReport(
        kl_feature=feat,
        kl_recon=recon,
        feature_exceeds_recon=feat > recon,
        teacher_sigma=teacher.sigma,
        student_sigma=student_sigma,
        d=teacher.d,
    )


def fit_gaussian_stats(features) -> GaussianStats:
    """Column means plus the isotropic collapse of the per-dimension variances.

    Uses the population (biased) variance; a degenerate matrix with zero
    variance is rejected because the KL forms blow up at sigma -> 0.
    """
    mat = np.asarray(features, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError("need a [T, d] matrix with at least 2 rows")
    mu = mat.mean(axis=0)
    sigma = float(mat.var(axis=0, ddof=0).mean())
    if sigma <= 0:
        raise ValueError("degenerate features: zero empirical variance")
    return GaussianStats(mu, sigma)


def gaussian_log_density(x: np.ndarray, stats: GaussianStats) -> np.ndarray:
    """Log density of rows of x under an isotropic Gaussian."""
    diff = x - stats.mu
    quad = (diff * diff).sum(axis=-1) / stats.sigma
    return -0.5 * (quad + stats.d * math.log(2 * math.pi * stats.sigma))


def monte_carlo_kl(p: GaussianStats, q: GaussianStats, num_samples: int = 1_000_000, seed: int = 0) -> float:
    """Sample-average log-density ratio estimate of KL(p || q)."""
    rng = np.random.default_rng(seed)
    z = p.mu + math.sqrt(p.sigma) * rng.standard_normal((num_samples, p.d))
    return float(np.mean(gaussian_log_density(z, p) - gaussian_log_density(z, q)))


def kl_report_record(teacher: GaussianStats, student: GaussianStats, recon_mu: np.ndarray) -> dict:
    """Structured diagnostic record for one evaluation pass."""
    return {
        "kl_feature": kl_feature(teacher, student),
        "kl_recon": kl_recon(teacher, recon_mu),
        "teacher_sigma": teacher.sigma,
        "student_sigma": student.sigma,
        "d": teacher.d,
    }
