"""Score-driven masking of caption tokens.

Low-scoring tokens are masked as likely noise, high-scoring tokens are masked
as prediction targets. Both probabilities are scaled sigmoids of the
normalized token score with a shared slope and midpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.special import expit

from .encoder import TokenSequence
from .errors import AlignmentError, ConfigError, ContractViolation


@dataclass
class MaskConfig:
    alpha_n: float = 0.2
    alpha_i: float = 0.3
    lam: float = 10.0
    gamma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.alpha_n <= 1 and 0 <= self.alpha_i <= 1):
            raise ConfigError("mask ceilings must lie in [0, 1]")
        if not self.lam > 0:
            raise ConfigError("sigmoid slope must be positive")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("sigmoid midpoint must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    noise_positions: tuple
    informative_positions: tuple
    p_noise: list
    p_informative: list

    @property
    def positions(self) -> tuple:
        return tuple(sorted(self.noise_positions + self.informative_positions))

    def to_dict(self) -> dict:
        return {
            "noise": list(self.noise_positions),
            "informative": list(self.informative_positions),
            "p_noise": self.p_noise,
            "p_informative": self.p_informative,
        }


def noise_mask_prob(s, cfg: MaskConfig):
    """alpha_n * sigmoid(lam * ((1 - s) - gamma)); decreasing in s."""
    return cfg.alpha_n * expit(cfg.lam * ((1.0 - np.asarray(s, dtype=np.float64)) - cfg.gamma))


def informative_mask_prob(s, cfg: MaskConfig):
    """alpha_i * sigmoid(lam * (s - gamma)); increasing in s."""
    return cfg.alpha_i * expit(cfg.lam * (np.asarray(s, dtype=np.float64) - cfg.gamma))


def mask_rng(seed: int, step: int, key: int) -> np.random.Generator:
    """Independent stream per (seed, step, caption key)."""
    return np.random.default_rng([int(seed), int(step), int(key)])


def protected_positions(seq: TokenSequence) -> set:
    return {0, seq.length - 1, *range(seq.length, len(seq.ids))}


def sample_from_probabilities(p_noise, p_informative, maskable, rng: np.random.Generator) -> MaskPlan:
    """Independent Bernoulli draws per position; informative wins a double pick."""
    p_noise = np.asarray(p_noise, dtype=np.float64)
    p_informative = np.asarray(p_informative, dtype=np.float64)
    maskable = np.asarray(maskable, dtype=bool)
    n = maskable.shape[0]
    u_noise = rng.random(n)
    u_inf = rng.random(n)
    informative = maskable & (u_inf < p_informative)
    noise = maskable & (u_noise < p_noise) & ~informative
    return MaskPlan(
        tuple(int(i) for i in np.flatnonzero(noise)),
        tuple(int(i) for i in np.flatnonzero(informative)),
        [float(x) for x in np.where(maskable, p_noise, 0.0)],
        [float(x) for x in np.where(maskable, p_informative, 0.0)],
    )


def sample_mask(s, seq: TokenSequence, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    s = np.asarray(s.detach().cpu() if isinstance(s, torch.Tensor) else s, dtype=np.float64)
    if s.shape != (len(seq.ids),):
        raise AlignmentError(f"{s.shape[0]} scores for a sequence of {len(seq.ids)} tokens")
    maskable = np.ones(len(seq.ids), dtype=bool)
    maskable[list(protected_positions(seq))] = False
    return sample_from_probabilities(noise_mask_prob(s, cfg), informative_mask_prob(s, cfg), maskable, rng)


def apply_mask(seq: TokenSequence, plan: MaskPlan, mask_id: int) -> TokenSequence:
    positions = plan.positions
    bad = protected_positions(seq).intersection(positions)
    if bad:
        raise ContractViolation(f"mask plan touches protected positions {sorted(bad)}")
    ids = list(seq.ids)
    for i in positions:
        ids[i] = mask_id
    return TokenSequence(ids, seq.length)


def mask_batch(s, ids, lengths, keys, cfg: MaskConfig, step: int, mask_id: int):
    """Sample and apply a plan per caption of a padded batch.

    Returns ``(masked_ids, plans)``; caption ``b`` draws from
    ``mask_rng(cfg.seed, step, keys[b])``.
    """
    masked = ids.clone()
    plans = []
    for b, (length, key) in enumerate(zip(lengths.tolist(), keys)):
        seq = TokenSequence(ids[b].tolist(), length)
        plan = sample_mask(s[b], seq, cfg, mask_rng(cfg.seed, step, key))
        if plan.positions:
            masked[b, list(plan.positions)] = mask_id
        plans.append(plan)
    return masked, plans
