"""Training objectives: per-source L1, model-aware adversarial terms, total.

Expectations are realized as means over batch elements and spatial
positions, which keeps every loss invariant to batch size. Logs are
epsilon-clamped so saturated discriminator scores never produce non-finite
values. All functions accept torch tensors (gradients flow) or plain
arrays and return 0-dim tensors; ``.item()`` gives the float.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .exceptions import DimensionError, ParameterError

LOG_EPS = 1e-7

PHASE_WARMUP = "warmup"
PHASE_COUPLED = "coupled"


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.double() if not t.is_floating_point() else t


def l1_loss(pred, target) -> torch.Tensor:
    """Mean absolute per-element difference between two images/batches."""
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise DimensionError(f"l1_loss shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    return (p - t).abs().mean()


def _clamped_log(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(scores.clamp(LOG_EPS, 1.0 - LOG_EPS))


def adversarial_loss_discriminator(score_real, score_fake) -> torch.Tensor:
    """Descent form of the discriminator's ascent objective.

    Returns -(mean log score_real + mean log(1 - score_fake)); lower is
    better for the discriminator.
    """
    real, fake = _as_tensor(score_real), _as_tensor(score_fake)
    return -(_clamped_log(real).mean() + _clamped_log(1.0 - fake).mean())


def adversarial_loss_generator(score_fake, non_saturating: bool = False) -> torch.Tensor:
    """Generator-side adversarial term, minimized by the generators.

    The default minimax form is mean log(1 - score_fake); the optional
    non-saturating variant -mean log(score_fake) avoids the early-training
    stall of the minimax form.
    """
    fake = _as_tensor(score_fake)
    if non_saturating:
        return -_clamped_log(fake).mean()
    return _clamped_log(1.0 - fake).mean()


def total_generator_loss(l1_terms, adv_g, lambda_used: float) -> torch.Tensor:
    """Weighted overall generator objective: sum of L1 terms + lambda * adv."""
    if lambda_used < 0:
        raise ParameterError("lambda_used must be >= 0")
    terms = [_as_tensor(t) for t in l1_terms]
    if not terms:
        raise ParameterError("at least one L1 term required")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total + lambda_used * _as_tensor(adv_g)


@dataclass(frozen=True)
class LossReport:
    """One training-log row; total_g == sum(l1_per_source) + lambda * adv_g.

    The identity holds exactly in float64 because ``make`` computes the
    total from the already-extracted floats.
    """

    iteration: int
    phase: str
    l1_per_source: tuple[float, ...]
    adversarial_g: float
    adversarial_d: float
    total_g: float
    lambda_used: float

    @staticmethod
    def make(
        iteration: int,
        phase: str,
        l1_per_source,
        adversarial_g: float,
        adversarial_d: float,
        lambda_used: float,
    ) -> "LossReport":
        l1 = tuple(float(v) for v in l1_per_source)
        adv_g = float(adversarial_g)
        return LossReport(
            iteration=int(iteration),
            phase=phase,
            l1_per_source=l1,
            adversarial_g=adv_g,
            adversarial_d=float(adversarial_d),
            total_g=sum(l1) + float(lambda_used) * adv_g,
            lambda_used=float(lambda_used),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l1_per_source"] = list(self.l1_per_source)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LossReport":
        return LossReport(
            iteration=int(d["iteration"]),
            phase=str(d["phase"]),
            l1_per_source=tuple(float(v) for v in d["l1_per_source"]),
            adversarial_g=float(d["adversarial_g"]),
            adversarial_d=float(d["adversarial_d"]),
            total_g=float(d["total_g"]),
            lambda_used=float(d["lambda_used"]),
        )
