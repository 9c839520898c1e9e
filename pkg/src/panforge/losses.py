"""Adversarial, perceptual-adversarial and pixel objectives.

Conventions:

* ``s`` is the weighted perceptual distance, sum_i lambda_i * mean|H_i(y) - H_i(T(x))|.
* ``J_T = mean log(1 - D(T(x))) + s``; T minimizes it.
* ``J_D = mean[-log D(y) - log(1 - D(T(x)))] + max(0, m - s)``; D minimizes it,
  which pushes ``s`` up until it clears the margin, after which the third
  term contributes no gradient at all.
"""

from __future__ import annotations

from dataclasses import dataclass

from panforge import tensor as tc
from panforge.errors import ConfigError, ShapeError
from panforge.tensor import PROB_CLAMP, Tensor

DEFAULT_LAMBDAS = (5.0, 1.5, 1.5, 5.0)
DEFAULT_MARGIN = 13.0
VARIANTS = ("pan", "l2", "l2_gan")


@dataclass
class LossConfig:
    lambdas: tuple = DEFAULT_LAMBDAS
    margin: float = DEFAULT_MARGIN
    variant: str = "pan"
    pixel_weight: float = 1.0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"loss variant must be one of {VARIANTS}, got {self.variant!r}", field="loss")
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ConfigError(f"need four nonnegative lambda weights, got {self.lambdas}", field="lambda")
        if self.variant == "pan" and not any(v > 0 for v in self.lambdas):
            raise ConfigError("the pan variant needs at least one positive lambda", field="lambda")
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive, got {self.margin}", field="margin")
        if self.pixel_weight < 0:
            raise ConfigError("pixel_weight must be nonnegative", field="pixel_weight")

    @property
    def uses_discriminator(self):
        return self.variant != "l2"

    @property
    def uses_perceptual(self):
        return self.variant == "pan"

    @property
    def uses_pixel(self):
        return self.variant in ("l2", "l2_gan")


def perceptual_distance(feats_fake, feats_real, lambdas=DEFAULT_LAMBDAS) -> Tensor:
    if len(feats_fake) != len(feats_real) or len(feats_fake) != len(lambdas):
        raise ShapeError(f"need {len(lambdas)} taps on both sides, got {len(feats_fake)} and {len(feats_real)}")
    total = None
    for i, (f, r, lam) in enumerate(zip(feats_fake, feats_real, lambdas), start=1):
        if f.shape != r.shape:
            raise ShapeError(f"tap {i}: feature shapes differ, {f.shape} vs {r.shape}")
        if lam == 0:
            continue
        term = tc.reduce_mean_abs_diff(r, f) * lam
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0, dtype=feats_fake[0].dtype)
    return total


def hinge(s: Tensor, margin) -> Tensor:
    """max(0, margin - s)."""
    if not margin > 0:
        raise ConfigError(f"margin must be positive, got {margin}", field="margin")
    return tc.relu(tc.sub(margin, s))


def _prob(p):
    return tc.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def log_one_minus(p: Tensor) -> Tensor:
    return tc.log(tc.sub(1.0, _prob(p)))


def log_prob(p: Tensor) -> Tensor:
    return tc.log(_prob(p))


def pixel_l2(y_hat: Tensor, y: Tensor) -> Tensor:
    return tc.mean_squared_diff(y_hat, y)


def loss_T(prob_fake: Tensor | None, s: Tensor | None, variant="pan", pixel_term: Tensor | None = None,
           pixel_weight=1.0) -> Tensor:
    if variant == "pan":
        if prob_fake is None or s is None:
            raise ConfigError("pan loss needs the fake probability and the perceptual distance", field="loss")
        return tc.mean_all(log_one_minus(prob_fake)) + s
    if variant == "l2":
        if pixel_term is None:
            raise ConfigError("l2 loss needs a pixel term", field="loss")
        return pixel_term
    if variant == "l2_gan":
        if prob_fake is None or pixel_term is None:
            raise ConfigError("l2_gan loss needs the fake probability and a pixel term", field="loss")
        return pixel_term * pixel_weight + tc.mean_all(log_one_minus(prob_fake))
    raise ConfigError(f"unknown loss variant {variant!r}", field="loss")


def gan_terms_D(prob_real: Tensor, prob_fake: Tensor) -> Tensor:
    return tc.mean_all(tc.sub(0.0, log_prob(prob_real)) - log_one_minus(prob_fake))


def loss_D(prob_real: Tensor, prob_fake: Tensor, s: Tensor | None, margin=DEFAULT_MARGIN,
           variant="pan") -> Tensor:
    gan = gan_terms_D(prob_real, prob_fake)
    if variant == "pan":
        if s is None:
            raise ConfigError("pan discriminator loss needs the perceptual distance", field="loss")
        return gan + hinge(s, margin)
    if variant == "l2_gan":
        return gan
    raise ConfigError(f"variant {variant!r} has no discriminator loss", field="loss")
