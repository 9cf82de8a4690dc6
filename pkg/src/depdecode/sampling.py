from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from depdecode.errors import InvalidDistribution


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.1
    top_p: float = 0.9

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.temperature == 1.0 and self.top_p == 1.0


IDENTITY_SAMPLER = SamplerConfig(temperature=1.0, top_p=1.0)

# Slack absorbed when comparing a cumulative mass against top_p.
_TOP_P_TOLERANCE = 1e-12


def transform_distribution(dist, cfg: SamplerConfig) -> np.ndarray:
    """
    Apply temperature and nucleus (top-p) truncation to a distribution.

    Parameters:
    -----------
    dist : array-like
        Probability vector over the vocabulary
    cfg : SamplerConfig
        Temperature and top-p settings

    Returns:
    --------
    np.ndarray
        Renormalized probability vector with the same length as ``dist``

    Notes:
    ------
    Temperature scales log-probabilities first. The nucleus is the smallest
    prefix of tokens, sorted by descending probability with ties broken by
    lower index, whose cumulative mass reaches ``top_p``. Zero-probability
    tokens stay at zero under both steps.
    """
    probs = np.asarray(dist, dtype=float)
    if probs.ndim != 1 or probs.size == 0:
        raise InvalidDistribution("Distribution must be a non-empty 1D vector")
    if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-9):
        raise InvalidDistribution(f"Not a probability vector: {probs}")

    if cfg.temperature != 1.0:
        with np.errstate(divide="ignore"):
            logits = np.log(probs) / cfg.temperature
        probs = softmax(logits)

    if cfg.top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        cumulative = np.cumsum(probs[order])
        keep = int(np.searchsorted(cumulative, cfg.top_p - _TOP_P_TOLERANCE)) + 1
        kept = np.zeros_like(probs)
        kept[order[:keep]] = probs[order[:keep]]
        probs = kept

    return probs / probs.sum()


def sample_from_uniform(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw: the first token whose cumulative mass exceeds ``u``."""
    cumulative = np.cumsum(probs)
    index = int(np.searchsorted(cumulative, u, side="right"))
    if index >= len(probs):
        # Rounding left the total just below u; take the last supported token.
        index = int(np.flatnonzero(probs > 0)[-1])
    return index


def transform_sample(dist, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Sample one token from ``dist`` after the temperature/top-p transform."""
    return sample_from_uniform(transform_distribution(dist, cfg), rng.random())
