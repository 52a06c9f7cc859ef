"""DDIM sampling with stochastic input/output conditioning.

Every reverse timestep shuffles the generated latents once, walks them in
consecutive batches of at most G' items, pairs each batch with a fresh
reference subset drawn without replacement, predicts noise (with
classifier-free guidance when the weight differs from 1) and applies one
DDIM step. Latents are read at state t and written at t-1, so batch order
within a timestep cannot influence the result.

One root seed derives three independent streams (initial noise, shuffles,
reference choice); changing the batching parameters therefore never perturbs
the initial noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .conditioning import ConditioningSet
from .errors import ConfigError
from .schedule import NoiseSchedule, cfg_combine, ddim_step

MAX_REFS_PER_PASS = 4


class Denoiser(Protocol):
    """Noise predictor contract.

    Called with the noisy generated latents of one batch, the clean reference
    latents of the sampled subset, both conditioning lists and the source
    timestep; returns predicted noise with the generated latents' shape. The
    unconditional guidance branch receives zeroed reference latents and
    zeroed (``dropped``) conditioning sets.
    """

    def __call__(self, z_gen: np.ndarray, z_ref: np.ndarray,
                 cond_ref: list[ConditioningSet], cond_gen: list[ConditioningSet],
                 t: int, schedule: NoiseSchedule) -> np.ndarray: ...


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 250
    n_generated: int = 1
    per_pass_generated: int = 1
    per_pass_reference: int = 1
    cfg_weight: float = 2.0
    seed: int = 0

    def validate(self, n_reference: int) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (1 <= self.per_pass_generated <= self.n_generated):
            raise ConfigError("per-pass generated count must satisfy 1 <= G' <= G")
        if self.per_pass_reference < 0:
            raise ConfigError("per-pass reference count must be >= 0")
        if self.per_pass_reference > n_reference:
            raise ConfigError(
                f"per-pass reference count {self.per_pass_reference} exceeds "
                f"the {n_reference} available references")
        if self.per_pass_reference > MAX_REFS_PER_PASS:
            raise ConfigError(f"at most {MAX_REFS_PER_PASS} references fit in one pass")


@dataclass
class SampleResult:
    latents: np.ndarray          # (G, H, W, C)
    trace: list = field(default_factory=list)


def _rng_streams(seed: int):
    noise_ss, shuffle_ss, ref_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(noise_ss), np.random.default_rng(shuffle_ss),
            np.random.default_rng(ref_ss))


def sample_stochastic_io(denoiser: Denoiser, z_ref: np.ndarray,
                         cond_ref: list[ConditioningSet],
                         cond_gen: list[ConditioningSet],
                         schedule: NoiseSchedule, config: SamplerConfig,
                         latent_shape: tuple[int, ...] | None = None,
                         progress: Callable[[int], None] | None = None) -> SampleResult:
    """Generate |cond_gen| latents; fully deterministic under config.seed."""
    n_ref = len(cond_ref)
    if z_ref.shape[0] != n_ref:
        raise ConfigError("reference latents and conditioning disagree in count")
    g = len(cond_gen)
    if g != config.n_generated:
        raise ConfigError("generated conditioning count does not match config")
    config.validate(n_ref)
    if schedule.steps != config.steps:
        raise ConfigError("schedule length does not match configured steps")
    if latent_shape is None:
        if n_ref == 0:
            raise ConfigError("latent shape is required when no references are given")
        latent_shape = z_ref.shape[1:]

    noise_rng, shuffle_rng, ref_rng = _rng_streams(config.seed)
    if g == 0:
        return SampleResult(latents=np.zeros((0,) + tuple(latent_shape)))

    z = noise_rng.standard_normal((g,) + tuple(latent_shape))
    gp = config.per_pass_generated
    rp = config.per_pass_reference
    n_batches = -(-g // gp)
    trace = []
    w = config.cfg_weight

    uncond_ref = np.zeros_like(z_ref[:rp]) if rp > 0 else z_ref[:0]
    dropped_ref = [c.dropped() for c in cond_ref[:rp]]
    dropped_gen = {id(c): c.dropped() for c in cond_gen}

    for t in range(config.steps, 0, -1):
        perm = shuffle_rng.permutation(g)
        z_next = np.empty_like(z)
        step_trace = []
        for b in range(n_batches):
            idx = perm[b * gp:(b + 1) * gp]
            refs = (np.sort(ref_rng.choice(n_ref, size=rp, replace=False))
                    if rp > 0 else np.zeros(0, dtype=np.int64))
            batch_cond = [cond_gen[i] for i in idx]
            eps = denoiser(z[idx], z_ref[refs], [cond_ref[r] for r in refs],
                           batch_cond, t, schedule)
            if w != 1.0:
                eps_uncond = denoiser(z[idx], uncond_ref, dropped_ref[:rp],
                                      [dropped_gen[id(c)] for c in batch_cond],
                                      t, schedule)
                eps = cfg_combine(eps, eps_uncond, w)
            z_next[idx] = ddim_step(z[idx], eps, t, t - 1, schedule)
            step_trace.append({"latents": idx.tolist(), "references": refs.tolist()})
        z = z_next
        trace.append({"t": t, "batches": step_trace})
        if progress is not None:
            progress(t)

    return SampleResult(latents=z, trace=trace)
