"""Alternating adversarial training of N coupled generators.

Each outer iteration performs one discriminator update followed by one
joint generator update. Early iterations are a warmup phase in which the
generators learn from their own L1 supervision only (adversarial weight
zero), preventing inter-generator error propagation; after the phase
boundary the shared adversarial term couples all generators through the
synthesis module.

Every random draw (batch choice, dropout) is derived from
(seed, iteration), never from ambient RNG state, so resuming from a
checkpoint is bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .datasets import DatasetManifest
from .exceptions import DataError, NumericalError, ParameterError
from .losses import (
    PHASE_COUPLED,
    PHASE_WARMUP,
    LossReport,
    adversarial_loss_discriminator,
    adversarial_loss_generator,
    l1_loss,
    total_generator_loss,
)
from .networks import (
    ModelState,
    batch_to_tensor,
    derive_seed,
    generator_forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .types import Sample, SourceSet, TrainConfig


@dataclass(frozen=True)
class PhaseSchedule:
    """Warmup/coupled boundary: iterations below it run with weight zero."""

    total_iterations: int
    alpha: float
    boundary: int

    def __post_init__(self):
        if not 0 <= self.boundary <= self.total_iterations:
            raise ParameterError(
                f"boundary {self.boundary} outside [0, {self.total_iterations}]"
            )


def make_schedule(total_iterations: int, alpha: float) -> PhaseSchedule:
    """Boundary at floor((100 - alpha)% of T), computed in exact arithmetic."""
    if total_iterations < 1:
        raise ParameterError("total_iterations must be >= 1")
    if not 0.0 <= alpha <= 100.0:
        raise ParameterError("alpha is a percentage in [0, 100]")
    frac = Fraction(str(100.0 - float(alpha))) / 100
    boundary = math.floor(frac * total_iterations)
    return PhaseSchedule(total_iterations, float(alpha), boundary)


def schedule_for(config: TrainConfig) -> PhaseSchedule:
    """Run schedule for a config; l1_only disables the adversarial phase."""
    if config.coupling_mode == "l1_only":
        return PhaseSchedule(config.total_iterations, config.alpha, config.total_iterations)
    return make_schedule(config.total_iterations, config.alpha)


def phase_of(iteration: int, schedule: PhaseSchedule) -> str:
    """'warmup' strictly before the boundary, 'coupled' from it onward."""
    if not 0 <= iteration < schedule.total_iterations:
        raise ParameterError(
            f"iteration {iteration} outside [0, {schedule.total_iterations})"
        )
    return PHASE_WARMUP if iteration < schedule.boundary else PHASE_COUPLED


def sample_batch(samples: list[Sample], config: TrainConfig, iteration: int, stream: str) -> list[Sample]:
    """Seed-derived minibatch; a pure function of (seed, iteration, stream)."""
    if not samples:
        raise DataError("no samples to draw a batch from")
    rng = np.random.default_rng(derive_seed(config.seed, "batch", stream, iteration))
    n = len(samples)
    replace = config.batch_size > n
    idx = rng.choice(n, size=config.batch_size, replace=replace)
    return [samples[int(i)] for i in idx]


def _truth_tensors(batch: list[Sample], n_sources: int) -> list[torch.Tensor]:
    for s in batch:
        if s.truth.n_sources != n_sources:
            raise DataError(
                f"sample {s.id} has {s.truth.n_sources} sources, expected {n_sources}"
            )
    return [
        batch_to_tensor([s.truth[i] for s in batch]) for i in range(n_sources)
    ]


def _check_finite(value: torch.Tensor, what: str, iteration: int, batch: list[Sample]):
    if not torch.isfinite(value).all():
        ids = [s.id for s in batch]
        raise NumericalError(
            f"non-finite {what} at iteration {iteration} (batch ids: {ids})",
            iteration=iteration,
            batch_ids=ids,
        )


def _clamped_synthesis(preds: list[torch.Tensor]) -> torch.Tensor:
    return torch.clamp(torch.stack(preds).sum(dim=0), 0.0, 1.0)


def discriminator_step(state: ModelState, batch: list[Sample]) -> float:
    """One optimizer step on the discriminator(s); generators untouched.

    Coupled mode scores real pairs (mixed, mixed) against fake pairs
    (mixed, clamp(sum of generator outputs)); independent mode scores each
    per-source pair (mixed, truth_i) against (mixed, generator_i output).
    Returns the discriminator loss (mean across discriminators).
    """
    if not batch:
        raise ParameterError("batch must be nonempty")
    if not state.discriminators:
        return 0.0
    config = state.config
    it = state.iteration
    torch.manual_seed(derive_seed(config.seed, "dstep", it))
    state.train_mode()
    mixed = batch_to_tensor([s.mixed for s in batch])
    losses = []
    if config.coupling_mode == "coupled":
        with torch.no_grad():
            fake_mix = _clamped_synthesis([g(mixed) for g in state.generators])
        disc, opt = state.discriminators[0], state.disc_optimizers[0]
        loss = adversarial_loss_discriminator(disc(mixed, mixed), disc(mixed, fake_mix))
        _check_finite(loss, "discriminator loss", it, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    else:  # independent_gans
        truths = _truth_tensors(batch, state.n_sources)
        for i, (disc, opt) in enumerate(
            zip(state.discriminators, state.disc_optimizers)
        ):
            with torch.no_grad():
                fake_i = state.generators[i](mixed)
            loss = adversarial_loss_discriminator(
                disc(mixed, truths[i]), disc(mixed, fake_i)
            )
            _check_finite(loss, f"discriminator {i} loss", it, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return float(np.mean(losses))


def _generator_adversarial(
    state: ModelState, mixed: torch.Tensor, preds: list[torch.Tensor]
) -> torch.Tensor:
    config = state.config
    if config.coupling_mode == "coupled":
        fake_mix = _clamped_synthesis(preds)
        scores = state.discriminators[0](mixed, fake_mix)
        return adversarial_loss_generator(scores, config.non_saturating)
    terms = [
        adversarial_loss_generator(
            state.discriminators[i](mixed, preds[i]), config.non_saturating
        )
        for i in range(state.n_sources)
    ]
    return torch.stack(terms).mean()


def generator_step(
    state: ModelState, batch: list[Sample], phase: str, adversarial_d: float = 0.0
) -> LossReport:
    """One joint update of all generators; discriminator parameters untouched.

    Warmup: each generator descends only its own L1 term, so no gradient
    flows between generators. Coupled: the shared adversarial term is added
    with weight lambda and couples every generator through the synthesis
    sum. Returns the loss report for the training log.
    """
    if not batch:
        raise ParameterError("batch must be nonempty")
    if phase not in (PHASE_WARMUP, PHASE_COUPLED):
        raise ParameterError(f"unknown phase {phase!r}")
    config = state.config
    it = state.iteration
    torch.manual_seed(derive_seed(config.seed, "gstep", it))
    state.train_mode()
    mixed = batch_to_tensor([s.mixed for s in batch])
    truths = _truth_tensors(batch, state.n_sources)
    preds = [g(mixed) for g in state.generators]
    l1_terms = [l1_loss(preds[i], truths[i]) for i in range(state.n_sources)]

    coupled = phase == PHASE_COUPLED and state.discriminators
    lambda_used = config.lambda_adv if coupled else 0.0

    for d in state.discriminators:
        d.requires_grad_(False)
    try:
        if coupled:
            adv_g = _generator_adversarial(state, mixed, preds)
            total = total_generator_loss(l1_terms, adv_g, lambda_used)
        else:
            # warmup total omits the adversarial graph entirely: generator
            # updates must be independent of every other generator
            total = total_generator_loss(l1_terms, 0.0, 0.0)
            if state.discriminators:
                state.eval_mode()
                with torch.no_grad():
                    adv_g = _generator_adversarial(
                        state, mixed, [p.detach() for p in preds]
                    )
                state.train_mode()
            else:
                adv_g = torch.tensor(0.0)
        _check_finite(total, "generator loss", it, batch)
        _check_finite(adv_g, "generator adversarial loss", it, batch)
        for opt in state.gen_optimizers:
            opt.zero_grad(set_to_none=True)
        total.backward()
        for opt in state.gen_optimizers:
            opt.step()
    finally:
        for d in state.discriminators:
            d.requires_grad_(True)

    return LossReport.make(
        iteration=it,
        phase=phase,
        l1_per_source=[t.item() for t in l1_terms],
        adversarial_g=adv_g.item(),
        adversarial_d=adversarial_d,
        lambda_used=lambda_used,
    )


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    checkpoint_dir=None,
    log_path=None,
    resume_from=None,
) -> tuple[ModelState, list[LossReport]]:
    """Run the full training loop; fully deterministic given the seed.

    Alternates one discriminator step and one generator step per iteration,
    sampling fresh minibatches for each side (``share_batch`` reuses the
    discriminator batch). Checkpoints land in ``checkpoint_dir`` every
    ``checkpoint_every`` iterations plus a final one; loss reports are
    appended to ``log_path`` as JSON lines.
    """
    train_samples = manifest.train_samples
    if not train_samples:
        raise DataError("manifest has no train samples")
    for s in train_samples:
        h, w, _ = s.mixed.shape
        if h != config.image_size or w != config.image_size:
            raise DataError(
                f"sample {s.id} is {h}x{w}, config expects {config.image_size}"
            )

    if resume_from is not None:
        state = load_checkpoint(resume_from, expected_config=config)
    else:
        state = init_model(config)
    schedule = schedule_for(config)

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8")

    reports: list[LossReport] = []
    try:
        for it in range(state.iteration, config.total_iterations):
            state.iteration = it
            phase = phase_of(it, schedule)
            batch_d = sample_batch(train_samples, config, it, "d")
            batch_g = batch_d if config.share_batch else sample_batch(
                train_samples, config, it, "g"
            )
            d_loss = discriminator_step(state, batch_d)
            report = generator_step(state, batch_g, phase, adversarial_d=d_loss)
            state.iteration = it + 1
            reports.append(report)
            if log_file is not None:
                log_file.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
                log_file.flush()
            if checkpoint_dir is not None and (
                state.iteration % config.checkpoint_every == 0
                or state.iteration == config.total_iterations
            ):
                save_checkpoint(
                    state, checkpoint_dir / f"checkpoint_{state.iteration:06d}.pt"
                )
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_dir is not None:
        save_checkpoint(state, checkpoint_dir / "checkpoint_final.pt")
    return state, reports


def separate(state: ModelState, mixed, stain_names=None) -> SourceSet:
    """Decompose a mixed image with the trained generators (inference mode)."""
    outputs = [generator_forward(g, mixed) for g in state.generators]
    return SourceSet(outputs, stain_names)


def read_training_log(path) -> list[LossReport]:
    """Parse a JSON-lines training log back into loss reports."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(LossReport.from_dict(json.loads(line)))
    return out
