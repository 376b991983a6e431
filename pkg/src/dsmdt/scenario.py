"""Scenario sampling, RIS configurations, and noisy measurement synthesis.

Randomness is counter-based: every draw comes from a Philox generator keyed by
``SeedSequence(entropy=seed, spawn_key=(domain, index))``, so per-UE and
per-domain streams are independent and order-independent.  ``seed`` may be an
int or a tuple (the harness passes (experiment_seed, sweep_index, trial)).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .channel import (
    SPEED_OF_LIGHT,
    BsRisPaths,
    ChannelScenario,
    UeRisPaths,
    map_cascaded,
    synth_measurement,
)

# sub-stream domains
_DOM_BS = 0
_DOM_UE = 1
_DOM_THETA = 2
_DOM_NOISE = 3
_DOM_MISC = 4


def substream(seed, domain: int, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for (seed, domain, index)."""
    if isinstance(seed, (int, np.integer)):
        entropy = (int(seed),)
    else:
        entropy = tuple(int(s) for s in seed)
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=(domain, index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ScenarioConfig:
    """Dimensions and sampling profile for one simulated system."""

    m: int = 32
    n1: int = 8
    n2: int = 8
    k: int = 4
    p: int = 64
    q: int = 12
    l1: int = 3
    l2: int = 3
    snr_db: float = 10.0
    carrier_hz: float = 28e9
    bs_ris_distance_m: float = 30.0
    ue_distance_range_m: tuple[float, float] = (20.0, 40.0)
    l2_overestimate: int = 4
    min_separation: float | None = None

    def __post_init__(self):
        for name in ("m", "n1", "n2", "k", "p", "q", "l1", "l2", "l2_overestimate"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
            setattr(self, name, int(v))
        if self.q <= self.l2_overestimate:
            raise ValueError("q must exceed l2_overestimate (snapshot count)")
        if self.m <= self.l1:
            raise ValueError("m must exceed l1")
        if self.p <= self.l2_overestimate:
            raise ValueError("p must exceed l2_overestimate")
        lo, hi = self.ue_distance_range_m
        if not (0 < lo <= hi):
            raise ValueError("ue_distance_range_m must be 0 < lo <= hi")

    @property
    def n(self) -> int:
        return self.n1 * self.n2

    def with_updates(self, **kwargs) -> "ScenarioConfig":
        return replace(self, **kwargs)


def _gain_scale(distance_m: float, carrier_hz: float) -> float:
    # E|beta|^2 = (c / (4 pi d f_c))^2
    return SPEED_OF_LIGHT / (4.0 * np.pi * distance_m * carrier_hz)


def _cn(rng: np.random.Generator, scale, size) -> np.ndarray:
    s = np.asarray(scale) / np.sqrt(2.0)
    return rng.normal(0.0, 1.0, size) * s + 1j * rng.normal(0.0, 1.0, size) * s


def _min_gap(values: np.ndarray) -> float:
    if len(values) < 2:
        return np.inf
    s = np.sort(values)
    return float(np.min(np.diff(s)))


def sample_scenario(cfg: ScenarioConfig, seed) -> ChannelScenario:
    """Draw ground-truth links: angles/delays U[0,1), gains CN with pathloss.

    When ``cfg.min_separation`` is set, the BS-side AoD set and every per-link
    delay set are rejection-sampled until pairwise gaps meet it (used by the
    noiseless exact-recovery checks).
    """
    sep = cfg.min_separation

    rng = substream(seed, _DOM_BS)
    while True:
        bs = BsRisPaths(
            gains=_cn(rng, _gain_scale(cfg.bs_ris_distance_m, cfg.carrier_hz), cfg.l1),
            delays=rng.uniform(0.0, 1.0, cfg.l1),
            phi=rng.uniform(0.0, 1.0, cfg.l1),
            omega=rng.uniform(0.0, 1.0, cfg.l1),
            psi=rng.uniform(0.0, 1.0, cfg.l1),
        )
        if sep is None or (_min_gap(bs.phi) >= sep and _min_gap(bs.delays) >= sep):
            break

    lo, hi = cfg.ue_distance_range_m
    ues = []
    for k in range(cfg.k):
        rng = substream(seed, _DOM_UE, k)
        while True:
            dists = rng.uniform(lo, hi, cfg.l2)
            ue = UeRisPaths(
                gains=_cn(rng, _gain_scale(dists, cfg.carrier_hz), cfg.l2),
                delays=rng.uniform(0.0, 1.0, cfg.l2),
                omega=rng.uniform(0.0, 1.0, cfg.l2),
                psi=rng.uniform(0.0, 1.0, cfg.l2),
            )
            if sep is None or _min_gap(ue.delays) >= sep:
                break
        ues.append(ue)
    return ChannelScenario(bs=bs, ues=ues)


def sample_ris_config(n: int, q: int, seed) -> np.ndarray:
    """Unit-modulus N x Q RIS configuration, phases U[0, 2*pi)."""
    rng = substream(seed, _DOM_THETA)
    return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, (n, q)))


def apply_awgn(z: np.ndarray, snr_db: float, seed) -> tuple[np.ndarray, float]:
    """Add circular complex white noise at the given per-element SNR.

    sigma^2 = ||z||_F^2 / (z.size * 10^(snr_db/10)); each element's real and
    imaginary parts get independent N(0, sigma^2/2).
    """
    sigma2 = float(np.mean(np.abs(z) ** 2) / 10.0 ** (snr_db / 10.0))
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, _DOM_NOISE)
    return z + _cn(rng, np.sqrt(sigma2), z.shape), sigma2


@dataclass
class MeasurementSet:
    """One trial's observations: K noisy tensors sharing dims and theta."""

    tensors: list[np.ndarray]
    theta: np.ndarray
    noise_variance: float
    scenario: ChannelScenario
    config: ScenarioConfig = field(repr=False, default=None)

    def __post_init__(self):
        shapes = {t.shape for t in self.tensors}
        if len(shapes) != 1:
            raise ValueError("all measurement tensors must share dimensions")
        (shape,) = shapes
        if self.theta.shape[1] != shape[2]:
            raise ValueError("theta column count must match the tensor RIS mode")

    @property
    def n_users(self) -> int:
        return len(self.tensors)


def build_measurement_set(
    cfg: ScenarioConfig, seed, snr_db: float | None = None
) -> MeasurementSet:
    """Sample a scenario + RIS config and synthesize noisy measurements.

    The noise variance is common to all UEs and normalized against the
    *average* per-element signal power over the K tensors, so per-UE effective
    SNR varies with pathloss.  ``snr_db=None`` uses ``cfg.snr_db``;
    ``np.inf`` yields noiseless tensors.
    """
    if snr_db is None:
        snr_db = cfg.snr_db
    scenario = sample_scenario(cfg, seed)
    theta = sample_ris_config(cfg.n, cfg.q, seed)
    clean = [
        synth_measurement(
            map_cascaded(scenario.bs, ue), cfg.m, cfg.p, theta, cfg.n1, cfg.n2
        )
        for ue in scenario.ues
    ]
    if np.isinf(snr_db):
        return MeasurementSet(clean, theta, 0.0, scenario, cfg)
    mean_power = float(np.mean([np.mean(np.abs(z) ** 2) for z in clean]))
    sigma2 = mean_power / 10.0 ** (snr_db / 10.0)
    noisy = [
        z + _cn(substream(seed, _DOM_NOISE, k), np.sqrt(sigma2), z.shape)
        for k, z in enumerate(clean)
    ]
    return MeasurementSet(noisy, theta, sigma2, scenario, cfg)


def misc_stream(seed) -> np.random.Generator:
    """Trial-level auxiliary stream (e.g. reference mis-selection draws)."""
    return substream(seed, _DOM_MISC)
