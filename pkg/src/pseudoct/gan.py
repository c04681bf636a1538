"""Conditional 3-D PatchGAN discriminator, losses, Adam and training."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, load_module_state, module_state, save_arrays
from .errors import CheckpointMismatch, ConfigError, EmptyDataset, InputTooSmall, NonFiniteValue, ShapeMismatch
from .netgen import Generator, GeneratorConfig
from .nn import BatchNorm3d, Conv3d, Module
from .tensor import Tensor

LOSS_KEYS = ("disc", "gen_total", "gen_pix")


# --- discriminator ----------------------------------------------------

@dataclass
class DiscriminatorConfig:
    channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    slope: float = 0.2

    def layer_specs(self):
        """``(cin, cout, k, stride, pad, batchnorm)`` for every conv."""
        c = self.channels
        specs = [(2, c[0], 4, 2, 1, False)]
        specs += [(c[i - 1], c[i], 4, 2, 1, True) for i in range(1, len(c) - 1)]
        specs.append((c[-2], c[-1], 4, 1, 1, True))
        specs.append((c[-1], 1, 3, 1, 1, False))
        return specs

    def problems(self) -> list[str]:
        if len(self.channels) < 2:
            return ["discriminator needs at least two channel entries"]
        return []


def discriminator_shape_trace(dims, cfg: DiscriminatorConfig | None = None) -> list[tuple]:
    """Shapes after each discriminator conv for ``(D, H, W)`` inputs.

    Raises :class:`InputTooSmall` as soon as a layer would be empty.
    """
    cfg = cfg or DiscriminatorConfig()
    spatial = tuple(int(n) for n in dims)
    trace = []
    for i, (_, cout, k, s, p, _) in enumerate(cfg.layer_specs()):
        spatial = tuple(T.conv_out_size(n, k, s, p) for n in spatial)
        if min(spatial) < 1:
            raise InputTooSmall(f"input {tuple(dims)} is too small for the discriminator (layer {i})")
        trace.append((f"conv{i}", (1, cout) + spatial))
    return trace


class Discriminator(Module):
    """Scores ``(U, C)`` pairs with a map of patch logits (no sigmoid)."""

    def __init__(self, cfg: DiscriminatorConfig | None = None, rng=None, dtype=np.float32):
        self.cfg = cfg or DiscriminatorConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        self.convs = []
        self.norms = []
        for cin, cout, k, s, p, bn in self.cfg.layer_specs():
            self.convs.append(Conv3d(cin, cout, k, s, p, rng=rng, dtype=dtype))
            self.norms.append(BatchNorm3d(cout, dtype=dtype) if bn else None)

    def forward(self, u, cx):
        u, cx = T._as_tensor(u), T._as_tensor(cx)
        if u.shape != cx.shape or u.ndim != 5 or u.shape[:2] != (1, 1):
            raise ShapeMismatch(f"discriminator inputs must both be (1, 1, D, H, W): {u.shape}, {cx.shape}")
        discriminator_shape_trace(u.shape[2:], self.cfg)
        x = T.concat([u, cx], axis=1)
        last = len(self.convs) - 1
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            if i < last:
                x = T.leaky_relu(x, self.cfg.slope)
        return x


# --- losses -----------------------------------------------------------

def loss_pix(fake, real):
    return T.l1_loss(fake, real)


def loss_adv_gen(logits_fake):
    return T.bce_with_logits(logits_fake, 1.0)


def loss_gen_total(pix, adv, cfg: "TrainConfig"):
    return pix * cfg.lambda_pix + adv * cfg.lambda_adv


def loss_disc(logits_real, logits_fake):
    return (T.bce_with_logits(logits_real, 1.0) + T.bce_with_logits(logits_fake, 0.0)) * 0.5


# --- optimiser --------------------------------------------------------

class Adam:
    """Adam with bias correction; moments are stored per parameter name."""

    def __init__(self, named_params, lr=1e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._scratch = {}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
            scratch = self._scratch.get(p.data.shape)
            if scratch is None or scratch.dtype != p.data.dtype:
                scratch = self._scratch[p.data.shape] = np.empty_like(p.data)
            adam_step(p.data, g, self.m[name], self.v[name], self.t, self.lr, b1, b2, self.eps, scratch)

    def state_arrays(self, prefix) -> dict:
        out = {f"{prefix}m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays, prefix, t):
        for k in self.params:
            self.m[k][...] = arrays[f"{prefix}m.{k}"]
            self.v[k][...] = arrays[f"{prefix}v.{k}"]
        self.t = int(t)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps, scratch=None):
    """One in-place Adam update of ``param`` and its moments ``m``, ``v``."""
    tmp = np.empty_like(param) if scratch is None else scratch
    np.multiply(grad, grad, out=tmp)
    tmp *= 1 - beta2
    v *= beta2
    v += tmp
    np.multiply(grad, 1 - beta1, out=tmp)
    m *= beta1
    m += tmp
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / math.sqrt(1 - beta2**t)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / (1 - beta1**t)
    param -= tmp


# --- training ---------------------------------------------------------

@dataclass
class TrainConfig:
    lambda_pix: float = 50.0
    lambda_adv: float = 5.0
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    freeze_disc: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def problems(self) -> list[str]:
        out = []
        if self.lambda_pix < 0 or self.lambda_adv < 0:
            out.append("loss weights must be non-negative")
        if not self.lr > 0:
            out.append(f"learning rate must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append(f"adam betas must be two values in [0, 1), got {self.betas}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        out += self.generator.problems()
        out += self.discriminator.problems()
        if not out:
            try:
                discriminator_shape_trace(self.generator.input_dims, self.discriminator)
            except InputTooSmall as exc:
                out.append(str(exc))
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        if "generator" in d:
            gen = d["generator"]
            gen_unknown = sorted(set(gen) - set(GeneratorConfig.__dataclass_fields__))
            if gen_unknown:
                raise ConfigError([f"unknown generator key {k!r}" for k in gen_unknown])
            d["generator"] = GeneratorConfig.from_dict(gen)
        if "discriminator" in d:
            d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: Adam
    opt_d: Adam
    cfg: TrainConfig
    step: int = 0
    epochs_done: int = 0
    history: list = field(default_factory=list)
    dtype: np.dtype = np.dtype(np.float32)


def init_state(cfg: TrainConfig, dtype=np.float32) -> TrainState:
    """Build both networks from one seeded stream, generator first."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    gen = Generator(cfg.generator, rng=rng, dtype=dtype)
    disc = Discriminator(cfg.discriminator, rng=rng, dtype=dtype)
    opt_g = Adam(gen.named_parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    opt_d = Adam(disc.named_parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    return TrainState(gen, disc, opt_g, opt_d, cfg, dtype=np.dtype(dtype))


def _checked(value, what, step):
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteValue(f"{what} loss is not finite at step {step}", step=step)
    return value


def discriminator_phase(state: TrainState, u: Tensor, c: Tensor, fake: Tensor) -> float:
    """One discriminator update on real vs. detached fake."""
    disc = state.discriminator
    disc.requires_grad_(True)
    disc.zero_grad()
    ld = loss_disc(disc(u, c), disc(u, fake.detach()))
    value = _checked(ld.data, "discriminator", state.step)
    ld.backward()
    state.opt_d.step()
    disc.zero_grad()
    return value


def generator_phase(state: TrainState, u: Tensor, c: Tensor, fake: Tensor) -> tuple[float, float, float]:
    disc = state.discriminator
    disc.requires_grad_(False)
    try:
        lpix = loss_pix(fake, c)
        ladv = loss_adv_gen(disc(u, fake))
        total = loss_gen_total(lpix, ladv, state.cfg)
        value = _checked(total.data, "generator", state.step)
        state.generator.zero_grad()
        total.backward()
        state.opt_g.step()
        state.generator.zero_grad()
    finally:
        disc.requires_grad_(True)
    return value, float(lpix.data), float(ladv.data)


def train_step(state: TrainState, u, c, epoch=None) -> dict:
    """Discriminator update, then generator update; returns the loss record."""
    u = Tensor(np.asarray(getattr(u, "data", u), dtype=state.dtype))
    c = Tensor(np.asarray(getattr(c, "data", c), dtype=state.dtype))
    state.generator.train()
    state.discriminator.train()
    state.generator.zero_grad()
    try:
        fake = state.generator(u)
        if state.cfg.freeze_disc:
            with T.no_grad():
                state.discriminator.eval()
                d_loss = _checked(
                    loss_disc(state.discriminator(u, c), state.discriminator(u, fake.detach())).data,
                    "discriminator", state.step,
                )
        else:
            d_loss = discriminator_phase(state, u, c, fake)
        total, pix, adv = generator_phase(state, u, c, fake)
    except NonFiniteValue as exc:
        if exc.step is not None:
            raise
        raise NonFiniteValue(f"{exc} at step {state.step}", step=state.step) from exc
    finally:
        state.discriminator.train()
    state.step += 1
    state.history.append({
        "step": state.step, "epoch": epoch, "disc": d_loss,
        "gen_total": total, "gen_pix": pix, "gen_adv": adv,
    })
    return {"disc": d_loss, "gen_total": total, "gen_pix": pix}


def epoch_order(seed, epoch, n) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_loop(pairs, cfg: TrainConfig, out_dir=None, state: TrainState | None = None, log=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of batch-1 training over ``pairs``.

    ``pairs`` is a sequence of ``(U, C)`` arrays shaped ``(1, 1, D, H, W)``.
    Resuming from a loaded ``state`` continues at ``state.epochs_done``.
    With ``out_dir`` a checkpoint and the loss curve are written per epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("training needs at least one (US, CT) pair")
    expected = (1, 1) + cfg.generator.input_dims
    for i, (u, c) in enumerate(pairs):
        if np.shape(u) != expected or np.shape(c) != expected:
            raise ShapeMismatch(f"pair {i} has shapes {np.shape(u)}, {np.shape(c)}; expected {expected}")
    state = state or init_state(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(state.epochs_done, cfg.epochs):
        for i in epoch_order(cfg.seed, epoch, len(pairs)):
            rec = train_step(state, pairs[i][0], pairs[i][1], epoch=epoch)
            if log is not None:
                log(state.step, epoch, rec)
        state.epochs_done = epoch + 1
        if out_dir is not None:
            save_state(out_dir / f"checkpoint_epoch{epoch + 1:03d}", state)
            save_state(out_dir / "checkpoint_last", state)
            write_loss_curve(out_dir / "loss_curve.jsonl", state.history)
    return state


def write_loss_curve(path, history) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in history]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_loss_curve(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- checkpoints ------------------------------------------------------

def save_state(stem, state: TrainState):
    arrays = {}
    arrays.update(module_state(state.generator, "gen."))
    arrays.update(module_state(state.discriminator, "disc."))
    arrays.update(state.opt_g.state_arrays("opt_g."))
    arrays.update(state.opt_d.state_arrays("opt_d."))
    meta = {
        "config": state.cfg.to_dict(),
        "step": state.step,
        "epochs_done": state.epochs_done,
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
        "history": state.history,
    }
    return save_arrays(stem, arrays, meta)


def load_state(stem) -> TrainState:
    arrays, meta = load_arrays(stem)
    cfg = TrainConfig.from_dict(meta["config"])
    dtype = next(iter(arrays.values())).dtype
    state = init_state(cfg, dtype=dtype)
    load_module_state(state.generator, arrays, "gen.")
    load_module_state(state.discriminator, arrays, "disc.")
    state.opt_g.load_state(arrays, "opt_g.", meta["opt_g_t"])
    state.opt_d.load_state(arrays, "opt_d.", meta["opt_d_t"])
    state.step = meta["step"]
    state.epochs_done = meta["epochs_done"]
    state.history = list(meta["history"])
    return state


def load_generator(stem, input_dims=None) -> Generator:
    """Generator for inference; checks the configured input dims first."""
    arrays, meta = load_arrays(stem)
    gcfg = GeneratorConfig.from_dict(meta["config"]["generator"])
    if input_dims is not None and tuple(input_dims) != gcfg.input_dims:
        raise CheckpointMismatch(
            f"checkpoint generator expects dims {gcfg.input_dims}, volume has {tuple(input_dims)}"
        )
    dtype = arrays[next(k for k in arrays if k.startswith("gen."))].dtype
    gen = Generator(gcfg, rng=np.random.default_rng(0), dtype=dtype)
    load_module_state(gen, arrays, "gen.")
    return gen.eval()
