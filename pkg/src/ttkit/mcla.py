"""Monte-Carlo log-probability averaging under a synthetic noise model.

Estimated log-probs are modelled as ``true + eps`` with seeded, zero-mean
noise.  Averaging K independent estimates divides the noise variance by K.

Randomness comes only from ``numpy.random.SeedSequence`` substreams keyed by
``(seed, trial, ...)``, so a trial's draws are independent of how many other
trials run or in which order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy import stats

from .errors import AlignmentMismatch, ConfigError, TooFewTrials

MIN_TRIALS = 1000


class NoiseDistribution(Enum):
    GAUSSIAN = "Gaussian"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.5
    distribution: NoiseDistribution = NoiseDistribution.GAUSSIAN
    seed: int = 0
    shared_per_trajectory: bool = False

    def __post_init__(self):
        if isinstance(self.distribution, str):
            object.__setattr__(self, "distribution", NoiseDistribution(self.distribution))
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"sigma must be finite and non-negative, got {self.sigma}")

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed & (2**64 - 1), *key]))

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Zero-mean noise with standard deviation sigma."""
        if self.sigma == 0.0:
            return np.zeros(shape)
        if self.distribution is NoiseDistribution.GAUSSIAN:
            return rng.normal(0.0, self.sigma, size=shape)
        half = self.sigma * np.sqrt(3.0)
        return rng.uniform(-half, half, size=shape)


@dataclass(frozen=True)
class MclaConfig:
    K: int = 8
    apply_icepop: bool = False
    tau_ip: float = float(np.log(2.0))

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be at least 1, got {self.K}")
        if self.tau_ip <= 0:
            raise ConfigError("tau_ip must be positive")


def estimate_noise(model: NoiseModel, n_tokens: int, K: int, *key: int) -> np.ndarray:
    """K noise draws for each of n tokens, shape (K, n), from substream ``key``."""
    rng = model.rng(*key)
    if model.shared_per_trajectory:
        return np.repeat(model.draw(rng, (K, 1)), n_tokens, axis=1)
    return model.draw(rng, (K, n_tokens))


def noisy_logprob(true_lp: float, model: NoiseModel, draw_index: int) -> float:
    """One noisy estimate of a log-probability; may exceed 0."""
    return float(true_lp + model.draw(model.rng(draw_index), ()))


def mcla_average(true_lp, model: NoiseModel, cfg: MclaConfig = MclaConfig(), draw_index: int = 0):
    """Mean of K independent noisy estimates of each of the given log-probs."""
    true = np.asarray(true_lp, dtype=np.float64)
    noise = estimate_noise(model, true.size, cfg.K, draw_index)
    avg = true.reshape(-1) + noise.mean(axis=0)
    return float(avg[0]) if true.ndim == 0 else avg.reshape(true.shape)


def importance_weight(rollout_lp, train_lp, clamp: float = 20.0):
    """exp(rollout - train) with the log difference clamped to +-clamp."""
    d = np.clip(np.asarray(rollout_lp, dtype=np.float64) - np.asarray(train_lp, dtype=np.float64), -clamp, clamp)
    w = np.exp(d)
    return float(w) if w.ndim == 0 else w


def icepop_mask(rollout_lps, averaged_train_lps, tau_ip: float) -> np.ndarray:
    """Keep flags: a token is dropped when |rollout - train| exceeds tau_ip."""
    r = np.asarray(rollout_lps, dtype=np.float64)
    t = np.asarray(averaged_train_lps, dtype=np.float64)
    if r.shape != t.shape:
        raise AlignmentMismatch(f"shapes {r.shape} and {t.shape} differ")
    gap = np.abs(r - t)
    return ~(gap > tau_ip)


@dataclass
class VarianceReport:
    config: dict
    var_raw: float
    var_mcla: float
    weight_var_raw: float
    weight_var_mcla: float
    reduction_factor: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    trials: int
    seed: int
    drop_rate_raw: Optional[float] = None
    drop_rate_mcla: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def variance_report(true_lp_sequence, model: NoiseModel, cfg: MclaConfig = MclaConfig(),
                    trials: int = 10_000, confidence: float = 0.95) -> VarianceReport:
    """Monte-Carlo variance of trajectory log-prob estimates and importance weights.

    Each trial estimates the trajectory log-prob (sum over tokens) once from a
    single draw and once from a K-fold average, on independent substreams.
    The importance weight compares the noise-free rollout log-prob with the
    estimate.  The confidence interval on the variance ratio uses the
    F distribution of a ratio of independent sample variances.
    """
    if trials < MIN_TRIALS:
        raise TooFewTrials(f"{trials} trials < {MIN_TRIALS}")
    true = np.atleast_1d(np.asarray(true_lp_sequence, dtype=np.float64))
    n = true.size
    raw = np.empty(trials)
    avg = np.empty(trials)
    drops_raw = drops_avg = 0
    for t in range(trials):
        e1 = estimate_noise(model, n, 1, t, 0)[0]
        eK = estimate_noise(model, n, cfg.K, t, 1).mean(axis=0)
        raw[t] = e1.sum()
        avg[t] = eK.sum()
        if cfg.apply_icepop:
            drops_raw += int((~icepop_mask(true, true + e1, cfg.tau_ip)).sum())
            drops_avg += int((~icepop_mask(true, true + eK, cfg.tau_ip)).sum())
    total = true.sum()
    w_raw = importance_weight(total, total + raw)
    w_avg = importance_weight(total, total + avg)
    var_raw, var_avg = float(raw.var(ddof=1)), float(avg.var(ddof=1))

    factor = lo = hi = None
    if var_avg > 0 and var_raw > 0:
        factor = var_raw / var_avg
        d = trials - 1
        alpha = 1.0 - confidence
        lo = factor / float(stats.f.ppf(1 - alpha / 2, d, d))
        hi = factor / float(stats.f.ppf(alpha / 2, d, d))
    config = {
        "sigma": model.sigma,
        "distribution": model.distribution.value,
        "shared_per_trajectory": model.shared_per_trajectory,
        "K": cfg.K,
        "apply_icepop": cfg.apply_icepop,
        "tau_ip": cfg.tau_ip,
        "tokens": n,
    }
    return VarianceReport(
        config, var_raw, var_avg, float(w_raw.var(ddof=1)), float(w_avg.var(ddof=1)),
        factor, lo, hi, trials, model.seed,
        drops_raw / (trials * n) if cfg.apply_icepop else None,
        drops_avg / (trials * n) if cfg.apply_icepop else None,
    )


def chi_square_band(sigma2: float, n: int, level: float = 0.99) -> tuple:
    """Central band for the sample variance of n iid draws with variance sigma2."""
    d = n - 1
    a = (1.0 - level) / 2
    return sigma2 * stats.chi2.ppf(a, d) / d, sigma2 * stats.chi2.ppf(1 - a, d) / d


@dataclass
class GradientVarianceResult:
    estimates: dict  # K -> (seeds, n_params) array
    traces: dict  # K -> trace of the covariance
    bootstrap_diff: np.ndarray  # trace(K_hi) - trace(K_lo) per resample
    ci: tuple

    @property
    def significant(self) -> bool:
        return self.ci[1] < 0.0


def gradient_variance_demo(params, calls, advantages, model: NoiseModel, ks=(1, 8),
                           seeds: int = 200, cfg=None, bootstrap: int = 2000,
                           confidence: float = 0.95, boot_seed: int = 0) -> GradientVarianceResult:
    """Spread of turn-level policy-gradient estimates with and without averaging.

    The true training log-probs come from the reference net; each seed adds
    noise to them (K-fold averaged) before the clipped turn-level surrogate
    is formed, and the resulting per-token gradients are pulled back through
    the exact network gradient.  For a given seed the K=1 estimate uses the
    first of the K draws, so runs are paired across K.
    """
    from .objectives import ObjectiveConfig, TrajectoryLogprobs, turn_level_objective
    from .refnet import AttentionPlan, backward, flat_vector, forward_logprobs

    cfg = cfg or ObjectiveConfig()
    traces, true_lps = [], []
    for call in calls:
        lp, tr = forward_logprobs(params, call.token_ids, np.arange(len(call)), AttentionPlan.causal(len(call)))
        traces.append(tr)
        true_lps.append(lp)
    sizes = [len(c) for c in calls]
    k_max = max(ks)
    estimates = {k: [] for k in ks}
    for s in range(seeds):
        noise = estimate_noise(model, sum(sizes), k_max, s)
        for k in ks:
            flat = noise[:k].mean(axis=0)
            batch, offset = [], 0
            for call, lp, n in zip(calls, true_lps, sizes):
                gen = call.origins == 1
                rollout = np.where(gen, lp, np.nan)
                noisy = lp + np.where(gen, flat[offset : offset + n], 0.0)
                batch.append(TrajectoryLogprobs(noisy, rollout, call.origins, call.turns))
                offset += n
            res = turn_level_objective(batch, advantages, cfg)
            vec = sum(flat_vector(backward(tr, g)) for tr, g in zip(traces, res.grads))
            estimates[k].append(vec)
    estimates = {k: np.array(v) for k, v in estimates.items()}

    def cov_trace(x):
        return float(x.var(axis=0, ddof=1).sum())

    lo_k, hi_k = min(ks), max(ks)
    rng = np.random.default_rng(boot_seed)
    diffs = np.empty(bootstrap)
    for b in range(bootstrap):
        idx = rng.integers(0, seeds, seeds)
        diffs[b] = cov_trace(estimates[hi_k][idx]) - cov_trace(estimates[lo_k][idx])
    a = (1.0 - confidence) / 2
    ci = (float(np.quantile(diffs, a)), float(np.quantile(diffs, 1 - a)))
    return GradientVarianceResult(estimates, {k: cov_trace(v) for k, v in estimates.items()}, diffs, ci)
