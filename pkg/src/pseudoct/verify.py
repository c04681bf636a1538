"""Finite-difference gradient suite over every layer type and a small generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gan import Discriminator, DiscriminatorConfig, TrainConfig, loss_adv_gen, loss_gen_total, loss_pix
from .netgen import Generator, GeneratorConfig, MultiHeadAttention, TransformerLayer
from .tensor import Tensor

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def reduced_config() -> dict:
    """Built-in tiny configuration used when no config is supplied."""
    return {
        "seed": 0,
        "generator": {
            "levels": 2, "base_channels": 2, "proj_dim": 4, "tf_layers": 1,
            "tf_heads": 2, "ffn_expansion": 2, "input_dims": [4, 4, 8],
        },
        "discriminator": {"channels": [2, 2, 2, 2], "slope": 0.2},
        "end_to_end_dims": [16, 16, 16],
    }


def _projected(fn, shape, rng):
    """Scalar ``sum(fn(x) * r)`` with a fixed random ``r``; avoids symmetric sums."""
    r = Tensor(rng.normal(size=shape))

    def scalar(x):
        return T.sum_all(fn(x) * r)
    return scalar


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def layer_checks(seed=0):
    """``(name, scalar_fn, x)`` triples for every differentiable layer."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    checks = []

    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3)
    b = Tensor(rng.normal(size=3))
    x = rng.normal(size=(1, 2, 5, 4, 6))
    out = T.conv3d(Tensor(x), w, b, 2, 1).shape
    checks.append(("conv3d.input", _projected(lambda t: T.conv3d(t, w, b, 2, 1), out, rng), x))
    xc = Tensor(x)
    checks.append(("conv3d.weight", _projected(lambda t: T.conv3d(xc, t, b, 2, 1), out, rng), w.data.copy()))

    wt = Tensor(rng.normal(size=(2, 3, 4, 4, 4)) * 0.3)
    x = rng.normal(size=(1, 2, 3, 2, 3))
    out = T.conv_transpose3d(Tensor(x), wt, b, 2, 1).shape
    checks.append(("conv_transpose3d.input", _projected(lambda t: T.conv_transpose3d(t, wt, b, 2, 1), out, rng), x))
    xc2 = Tensor(x)
    checks.append((
        "conv_transpose3d.weight",
        _projected(lambda t: T.conv_transpose3d(xc2, t, b, 2, 1), out, rng), wt.data.copy(),
    ))

    gamma = Tensor(rng.uniform(0.5, 1.5, 3))
    beta = Tensor(rng.normal(size=3))
    x = rng.normal(size=(2, 3, 3, 2, 2))

    def bn(t):
        return T.batch_norm3d(t, gamma, beta, np.zeros(3), np.ones(3), training=True)
    checks.append(("batch_norm3d", _projected(bn, x.shape, rng), x))

    x = _away_from_zero(rng, (3, 7))
    checks.append(("relu", _projected(T.relu, x.shape, rng), x))
    checks.append(("leaky_relu", _projected(T.leaky_relu, x.shape, rng), x))
    x = rng.normal(size=(3, 7)) * 2
    checks.append(("sigmoid", _projected(T.sigmoid, x.shape, rng), x))
    checks.append(("gelu", _projected(T.gelu, x.shape, rng), x))
    checks.append(("softmax", _projected(lambda t: T.softmax(t, axis=-1), x.shape, rng), x))

    bm = Tensor(rng.normal(size=(2, 5, 4)))
    x = rng.normal(size=(2, 3, 5))
    checks.append(("matmul", _projected(lambda t: T.matmul(t, bm), (2, 3, 4), rng), x))

    g = Tensor(rng.uniform(0.5, 1.5, 6))
    be = Tensor(rng.normal(size=6))
    x = rng.normal(size=(4, 6))
    checks.append(("layer_norm", _projected(lambda t: T.layer_norm(t, g, be), x.shape, rng), x))

    mha = MultiHeadAttention(8, 2, rng=rng, dtype=f64)
    for lin in (mha.q, mha.k, mha.v, mha.out):
        lin.weight.data *= 10.0
    x = rng.normal(size=(1, 5, 8))
    checks.append(("attention", _projected(mha, x.shape, rng), x))

    layer = TransformerLayer(8, 2, 2, rng=rng, dtype=f64)
    x = rng.normal(size=(1, 5, 8))
    checks.append(("transformer_layer", _projected(layer, x.shape, rng), x))

    z = rng.normal(size=(1, 1, 2, 2, 3)) * 3
    checks.append(("bce_with_logits", lambda t: T.bce_with_logits(t, 1.0), z))
    target = Tensor(rng.uniform(size=(2, 3)))
    x = rng.uniform(size=(2, 3)) + 0.01
    checks.append(("l1_loss", lambda t: T.l1_loss(t, target), x))
    return checks


def end_to_end_check(cfg_dict=None):
    """Generator total loss (pixel + adversarial) against the US input."""
    cfg_dict = dict(cfg_dict or reduced_config())
    dims = tuple(cfg_dict.pop("end_to_end_dims", (16, 16, 16)))
    gen_dict = dict(cfg_dict.get("generator", {}))
    gen_dict["input_dims"] = list(dims)
    cfg_dict["generator"] = gen_dict
    cfg = TrainConfig.from_dict(cfg_dict).validate()
    rng = np.random.default_rng(cfg.seed)
    gen = Generator(cfg.generator, rng=rng, dtype=np.float64)
    disc = Discriminator(cfg.discriminator or DiscriminatorConfig(), rng=rng, dtype=np.float64)
    # eval-mode discriminator: its batch statistics would otherwise couple in a second kink set
    disc.eval()
    u = rng.uniform(0.05, 1.0, size=(1, 1) + dims)
    c = Tensor(rng.uniform(size=(1, 1) + dims))

    def total(t):
        fake = gen(t)
        return loss_gen_total(loss_pix(fake, c), loss_adv_gen(disc(t, fake)), cfg)
    return "generator_end_to_end", total, u


def run_suite(cfg_dict=None, eps=1e-6, seed=0) -> list[GradCheckResult]:
    results = []
    for name, fn, x in layer_checks(seed):
        err = T.grad_check(fn, Tensor(np.array(x, dtype=np.float64)), eps=eps)
        results.append(GradCheckResult(name, err, LAYER_TOL))
    name, fn, x = end_to_end_check(cfg_dict)
    err = T.grad_check(fn, Tensor(np.array(x, dtype=np.float64)), eps=eps)
    results.append(GradCheckResult(name, err, END_TO_END_TOL))
    return results
