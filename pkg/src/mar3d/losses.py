"""Training objectives for the two-generator, two-discriminator model.

Expectations are batch means; L1 terms are averaged per voxel and the
feature term is an RMS over feature elements, so the loss weights do not
depend on image resolution. Generators and discriminators are plain
callables on tensors of shape (B, N, H, W).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import torch

EPS = 1e-7


class Variant(str, enum.Enum):
    CGAN = "CGAN"
    CGAN_ID = "CGAN_ID"
    PROPOSED = "PROPOSED"


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_int: float = 25.0
    lambda_fea: float = 1.0
    lambda_id: float = 5.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class LossReport:
    adv_xy: float
    adv_yx: float
    cyc: float
    int: float
    fea: float
    id: float
    total: float

    FIELDS = ("adv_xy", "adv_yx", "cyc", "int", "fea", "id", "total")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}


def _check_batch(*batches):
    for b in batches:
        if b.shape[0] == 0:
            raise ValueError("empty batch")


def _log(p):
    return torch.log(torch.clamp(p, EPS, 1.0 - EPS))


def _l1(a, b):
    return (a - b).abs().mean()


def _rms_distance(a, b):
    """Per-sample L2 distance of feature maps, normalized by element count, batch mean."""
    d = (a - b).flatten(1)
    return (torch.linalg.vector_norm(d, dim=1) / math.sqrt(d.shape[1])).mean()


def adversarial_value(d_real, d_fake):
    """E[log D(t)] + E[log(1 - D(G(s)))] from discriminator probabilities."""
    return _log(d_real).mean() + _log(1.0 - d_fake).mean()


def adversarial_loss(D, G, batch_src, batch_tgt):
    _check_batch(batch_src, batch_tgt)
    return adversarial_value(D(batch_tgt), D(G(batch_src)))


def cycle_loss(G_X, G_Y, batch_x, batch_y):
    _check_batch(batch_x, batch_y)
    return _l1(G_X(G_Y(batch_x)), batch_x) + _l1(G_Y(G_X(batch_y)), batch_y)


def intensity_loss(G_X, G_Y, batch_x, batch_y):
    _check_batch(batch_x, batch_y)
    return _l1(G_Y(batch_x), batch_x) + _l1(G_X(batch_y), batch_y)


def identity_loss(G_X, G_Y, batch_x, batch_y):
    _check_batch(batch_x, batch_y)
    return _l1(G_Y(batch_y), batch_y) + _l1(G_X(batch_x), batch_x)


def feature_terms(f, x, y, fake_y, fake_x, rec_x, rec_y):
    """Feature loss from precomputed translations.

    fake_y = G_Y(x), fake_x = G_X(y), rec_x = G_X(G_Y(x)), rec_y = G_Y(G_X(y)).
    The artifact removed by G_Y should look like the artifact added by G_X,
    both on the first translation and on the cycle's second leg.
    """
    first = _rms_distance(f(x - fake_y), f(fake_x - y))
    second = _rms_distance(f(fake_x - rec_y), f(rec_x - fake_y))
    return first + second


def feature_loss(f, G_X, G_Y, batch_x, batch_y):
    _check_batch(batch_x, batch_y)
    fake_y, fake_x = G_Y(batch_x), G_X(batch_y)
    return feature_terms(f, batch_x, batch_y, fake_y, fake_x, G_X(fake_y), G_Y(fake_x))


def combine(variant: Variant, weights: LossWeights, adv_xy, adv_yx, cyc, int=0.0, fea=0.0, id=0.0):
    """Objective total for a variant; works on floats and tensors alike."""
    variant = Variant(variant)
    total = adv_xy + adv_yx + weights.lambda_cyc * cyc
    if variant is Variant.PROPOSED:
        total = total + weights.lambda_int * int + weights.lambda_fea * fea
    elif variant is Variant.CGAN_ID:
        total = total + weights.lambda_id * id
    return total


@dataclass
class ObjectiveTerms:
    """Loss tensors of one forward pass, kept attached to the graph."""

    adv_xy: torch.Tensor
    adv_yx: torch.Tensor
    cyc: torch.Tensor
    int: torch.Tensor
    fea: torch.Tensor
    id: torch.Tensor
    gen_adv: torch.Tensor  # non-saturating generator adversarial term
    total: torch.Tensor  # value of the full objective
    gen_total: torch.Tensor  # what the generators minimize

    def report(self) -> LossReport:
        return LossReport(*(float(getattr(self, k).detach()) for k in LossReport.FIELDS))


def objective_terms(variant, weights: LossWeights, nets, batch_x, batch_y) -> ObjectiveTerms:
    """Evaluate every term needed by ``variant`` with shared forward passes."""
    _check_batch(batch_x, batch_y)
    variant = Variant(variant)
    G_X, G_Y, D_X, D_Y = nets.G_X, nets.G_Y, nets.D_X, nets.D_Y
    fake_y, fake_x = G_Y(batch_x), G_X(batch_y)
    rec_x, rec_y = G_X(fake_y), G_Y(fake_x)
    d_fake_y, d_fake_x = D_Y(fake_y), D_X(fake_x)
    adv_xy = adversarial_value(D_Y(batch_y), d_fake_y)
    adv_yx = adversarial_value(D_X(batch_x), d_fake_x)
    cyc = _l1(rec_x, batch_x) + _l1(rec_y, batch_y)
    zero = batch_x.new_zeros(())
    inten = fea = ident = zero
    if variant is Variant.PROPOSED:
        inten = _l1(fake_y, batch_x) + _l1(fake_x, batch_y)
        fea = feature_terms(nets.f, batch_x, batch_y, fake_y, fake_x, rec_x, rec_y)
    elif variant is Variant.CGAN_ID:
        ident = _l1(G_Y(batch_y), batch_y) + _l1(G_X(batch_x), batch_x)
    total = combine(variant, weights, adv_xy, adv_yx, cyc, inten, fea, ident)
    gen_adv = -_log(d_fake_y).mean() - _log(d_fake_x).mean()
    gen_total = combine(variant, weights, gen_adv, 0.0, cyc, inten, fea, ident)
    return ObjectiveTerms(adv_xy, adv_yx, cyc, inten, fea, ident, gen_adv, total, gen_total)


def full_objective(variant, weights: LossWeights, nets, batch_x, batch_y) -> LossReport:
    with torch.no_grad():
        return objective_terms(variant, weights, nets, batch_x, batch_y).report()


def discriminator_loss(nets, batch_x, batch_y, fake_x, fake_y):
    """Negated adversarial value for both discriminators (fakes already detached)."""
    return -(adversarial_value(nets.D_Y(batch_y), nets.D_Y(fake_y))
             + adversarial_value(nets.D_X(batch_x), nets.D_X(fake_x)))
