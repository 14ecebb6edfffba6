"""Day-to-night translation: ResNet generator, PatchGAN discriminator and
the edge-consistency adversarial training loop.

Three variants share the loop:

* ``hedn_gan``: the consistency detector is a student HED distilled from a
  frozen teacher while the generator trains.
* ``hedgan_frozen``: the frozen teacher itself is the consistency detector.
* ``cycle``: two generators and two discriminators with cycle and identity
  losses, no edge detectors.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import edges
from .imaging import from_model_range, random_scale_crop, to_model_range

log = logging.getLogger(__name__)

VARIANTS = ("hedn_gan", "hedgan_frozen", "cycle")


def _he_init(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class ResnetBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.BatchNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3, bias=False),
            nn.BatchNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """7x7 stem, two stride-2 downsamplings, residual blocks, two transposed
    convolution upsamplings and a tanh head."""

    stride = 4

    def __init__(self, in_channels=3, out_channels=3, ngf=64, n_blocks=9):
        super().__init__()
        self.config = {"in_channels": in_channels, "out_channels": out_channels, "ngf": ngf, "n_blocks": n_blocks}
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, ngf, 7, bias=False), nn.BatchNorm2d(ngf), nn.ReLU(True)]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(ngf * mult, ngf * mult * 2, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(ngf * mult * 2),
                nn.ReLU(True),
            ]
        layers += [ResnetBlock(ngf * 4) for _ in range(n_blocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(ngf * mult, ngf * mult // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                nn.BatchNorm2d(ngf * mult // 2),
                nn.ReLU(True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        self.apply(_he_init)

    def forward(self, x):
        # reflect-pad to a multiple of the downsampling stride, crop back after
        h, w = x.shape[-2:]
        ph, pw = (-h) % self.stride, (-w) % self.stride
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect" if min(h, w) > max(ph, pw) else "replicate")
        return self.model(x)[..., :h, :w]


class PatchDiscriminator(nn.Module):
    """PatchGAN; with ``n_layers=3`` every output cell sees a 70x70 patch."""

    def __init__(self, in_channels=3, ndf=64, n_layers=3):
        super().__init__()
        self.config = {"in_channels": in_channels, "ndf": ndf, "n_layers": n_layers}
        layers = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2**n, 8)
            stride = 2 if n < n_layers else 1
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, 4, stride, 1, bias=False),
                nn.BatchNorm2d(ndf * mult),
                nn.LeakyReLU(0.2, True),
            ]
        layers += [nn.Conv2d(ndf * mult, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)
        self.apply(_he_init)

    def forward(self, x):
        return self.model(x)


def patch_output_size(size: int, n_layers=3) -> int:
    """Side length of the discriminator score map for a square input."""
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


def receptive_field(n_layers=3) -> int:
    rf = 1
    for stride in reversed([2] * n_layers + [1, 1]):
        rf = rf * stride + 4 - stride
    return rf


@torch.no_grad()
def translate(gen: nn.Module, img: torch.Tensor) -> torch.Tensor:
    """Run the generator in eval mode on a model-range batch or image."""
    was_training = gen.training
    gen.eval()
    single = img.dim() == 3
    out = gen(img[None] if single else img)
    gen.train(was_training)
    return out[0] if single else out


def translate_image(gen: nn.Module, img: np.ndarray) -> np.ndarray:
    """Numpy ``(H, W, 3)`` in [0, 1] -> translated numpy image in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(to_model_range(img).transpose(2, 0, 1))).float()
    y = translate(gen, x)
    return from_model_range(y.numpy().transpose(1, 2, 0)).astype(np.float64)


# losses ---------------------------------------------------------------------


def lsgan_d_loss(d_real, d_fake):
    return 0.5 * (((d_real - 1) ** 2).mean() + (d_fake**2).mean())


def lsgan_g_loss(d_fake):
    return ((d_fake - 1) ** 2).mean()


def edge_consistency_l1(source_logits, translated_logits):
    """Post-sigmoid L1 between the edge maps of source and translation."""
    return (torch.sigmoid(source_logits) - torch.sigmoid(translated_logits)).abs().mean()


def cycle_losses(g_ab, g_ba, real_a, real_b, fake_b=None, fake_a=None):
    """(cycle, identity) L1 terms, each summed over both directions."""
    fake_b = g_ab(real_a) if fake_b is None else fake_b
    fake_a = g_ba(real_b) if fake_a is None else fake_a
    cycle = (g_ba(fake_b) - real_a).abs().mean() + (g_ab(fake_a) - real_b).abs().mean()
    identity = (g_ab(real_b) - real_b).abs().mean() + (g_ba(real_a) - real_a).abs().mean()
    return cycle, identity


# config and state -------------------------------------------------------------


@dataclass
class GanConfig:
    variant: str = "hedn_gan"
    lambda_edge: float = 10.0
    epochs: int = 50
    iterations_per_epoch: int = 10000
    batch_size: int = 10
    crop: int = 256
    scale_range: tuple = (0.8, 1.0)
    ngf: int = 64
    n_blocks: int = 9
    ndf: int = 64
    d_layers: int = 3
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    student_lr: float = 1e-6
    student_weight_decay: float = 2e-4
    preserve_weight: float = 1.0
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be nonnegative")
        self.scale_range = tuple(self.scale_range)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown GAN config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_d: float = 0.0
    edge_l1: float = 0.0
    student_l1: float = 0.0
    cycle: float = 0.0
    identity: float = 0.0

    def as_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def mean(reports):
        keys = LossReport.__dataclass_fields__
        return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


@dataclass
class GanState:
    cfg: GanConfig
    gen: nn.Module
    disc: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    teacher: nn.Module | None = None
    student: nn.Module | None = None
    opt_s: torch.optim.Optimizer | None = None
    gen_b: nn.Module | None = None
    disc_b: nn.Module | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    epoch: int = 0
    schedulers: list = field(default_factory=list)

    @property
    def consistency_detector(self):
        return self.student if self.cfg.variant == "hedn_gan" else self.teacher

    def networks(self):
        nets = {"gen": self.gen, "disc": self.disc}
        for name in ("gen_b", "disc_b", "student", "teacher"):
            if getattr(self, name) is not None:
                nets[name] = getattr(self, name)
        return nets

    def optimizers(self):
        opts = {"gen": self.opt_g, "disc": self.opt_d}
        if self.opt_s is not None:
            opts["student"] = self.opt_s
        return opts


def build_gan_state(cfg: GanConfig, teacher: nn.Module | None = None) -> GanState:
    """Fresh networks and optimizers, seeded from ``cfg.seed``.

    ``teacher`` may be omitted only when no edge term is needed
    (``lambda_edge == 0`` or the cycle variant).
    """
    torch.manual_seed(cfg.seed)
    gen = ResnetGenerator(ngf=cfg.ngf, n_blocks=cfg.n_blocks)
    disc = PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.d_layers)
    params_g = list(gen.parameters())
    params_d = list(disc.parameters())
    gen_b = disc_b = None
    if cfg.variant == "cycle":
        gen_b = ResnetGenerator(ngf=cfg.ngf, n_blocks=cfg.n_blocks)
        disc_b = PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.d_layers)
        params_g += list(gen_b.parameters())
        params_d += list(disc_b.parameters())
    elif teacher is None and cfg.lambda_edge > 0:
        raise ValueError(f"variant {cfg.variant} with lambda_edge > 0 needs a teacher edge detector")

    betas = (cfg.beta1, cfg.beta2)
    state = GanState(
        cfg=cfg,
        gen=gen,
        disc=disc,
        opt_g=torch.optim.Adam(params_g, lr=cfg.lr, betas=betas),
        opt_d=torch.optim.Adam(params_d, lr=cfg.lr, betas=betas),
        gen_b=gen_b,
        disc_b=disc_b,
        rng=np.random.default_rng(cfg.seed),
    )
    if teacher is not None and cfg.variant != "cycle":
        state.teacher = edges.freeze(teacher)
        if cfg.variant == "hedn_gan":
            state.student = edges.make_student(teacher)
            state.opt_s = edges.student_optimizer(state.student, cfg.student_lr, weight_decay=cfg.student_weight_decay)
    if cfg.variant == "cycle":
        # constant for the first half, linear decay to zero over the second
        half = cfg.epochs // 2

        def decay(epoch):
            return 1.0 if epoch < half else max(0.0, 1.0 - (epoch - half + 1) / (cfg.epochs - half + 1))

        state.schedulers = [torch.optim.lr_scheduler.LambdaLR(o, decay) for o in (state.opt_g, state.opt_d)]
    return state


def _set_grad(nets, flag):
    for net in nets:
        if net is not None:
            for p in net.parameters():
                p.requires_grad_(flag)


def gan_training_step(state: GanState, day: torch.Tensor, night: torch.Tensor) -> LossReport:
    """One generator, discriminator and (student variant) detector update
    on unpaired model-range batches ``day`` and ``night``."""
    if day.shape[0] != night.shape[0]:
        raise ValueError(f"day batch {day.shape[0]} and night batch {night.shape[0]} differ in size")
    if state.cfg.variant == "cycle":
        return _cycle_step(state, day, night)
    cfg = state.cfg
    gen, disc, det = state.gen, state.disc, state.consistency_detector
    gen.train()
    disc.train()

    # generator
    _set_grad([disc, state.student], False)
    fake = gen(day)
    adv_g = lsgan_g_loss(disc(fake))
    edge_l1 = torch.zeros(())
    if det is not None:
        with torch.no_grad():
            src_logits = state.teacher(day)
        if cfg.lambda_edge > 0:
            edge_l1 = edge_consistency_l1(src_logits, det(fake))
        else:
            with torch.no_grad():
                edge_l1 = edge_consistency_l1(src_logits, det(fake))
    loss_g = adv_g + cfg.lambda_edge * edge_l1 if cfg.lambda_edge > 0 else adv_g
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    # discriminator
    _set_grad([disc], True)
    fake = fake.detach()
    adv_d = lsgan_d_loss(disc(night), disc(fake))
    state.opt_d.zero_grad(set_to_none=True)
    adv_d.backward()
    state.opt_d.step()

    student_l1 = 0.0
    if state.student is not None:
        _set_grad([state.student], True)
        student_l1 = edges.student_distill_step(
            state.student, state.teacher, day, fake, state.opt_s, cfg.preserve_weight
        )
    return LossReport(adv_g=float(adv_g.detach()), adv_d=float(adv_d.detach()), edge_l1=float(edge_l1.detach()), student_l1=student_l1)


def _cycle_step(state: GanState, day, night) -> LossReport:
    cfg = state.cfg
    g_ab, g_ba, d_b, d_a = state.gen, state.gen_b, state.disc, state.disc_b
    for net in (g_ab, g_ba, d_a, d_b):
        net.train()

    _set_grad([d_a, d_b], False)
    fake_night, fake_day = g_ab(day), g_ba(night)
    adv_g = lsgan_g_loss(d_b(fake_night)) + lsgan_g_loss(d_a(fake_day))
    cycle, identity = cycle_losses(g_ab, g_ba, day, night, fake_night, fake_day)
    loss_g = adv_g + cfg.lambda_cycle * cycle + cfg.lambda_identity * identity
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()

    _set_grad([d_a, d_b], True)
    adv_d = lsgan_d_loss(d_b(night), d_b(fake_night.detach())) + lsgan_d_loss(d_a(day), d_a(fake_day.detach()))
    state.opt_d.zero_grad(set_to_none=True)
    adv_d.backward()
    state.opt_d.step()
    return LossReport(
        adv_g=float(adv_g.detach()), adv_d=float(adv_d.detach()), cycle=float(cycle.detach()), identity=float(identity.detach())
    )


def sample_batch(images, rng: np.random.Generator, cfg: GanConfig) -> torch.Tensor:
    """Random scale-crop a batch drawn with replacement from ``images``."""
    idx = rng.integers(0, len(images), size=cfg.batch_size)
    crops = [random_scale_crop(images[int(i)], rng, cfg.scale_range, (cfg.crop, cfg.crop)) for i in idx]
    batch = np.stack([to_model_range(c).transpose(2, 0, 1) for c in crops])
    return torch.from_numpy(np.ascontiguousarray(batch)).float()


@torch.no_grad()
def edge_consistency_metric(teacher, detector, src_imgs, gen) -> float:
    """Mean over images of the post-sigmoid L1 between the teacher edge map
    of each source and the detector edge map of its translation.

    ``gen`` is a generator module (run in eval mode) or any callable on
    model-range batches.
    """
    if len(src_imgs) == 0:
        raise ValueError("edge consistency needs at least one source image")
    run = (lambda x: translate(gen, x)) if isinstance(gen, nn.Module) else gen
    vals = []
    for img in src_imgs:
        x = img[None] if img.dim() == 3 else img
        src = edges.detect_edges(teacher, x, "probability")
        out = edges.detect_edges(detector, run(x), "probability")
        vals.append(float((src - out).abs().mean()))
    return float(np.mean(vals))


# checkpointing ------------------------------------------------------------------


def gan_checkpoint_blobs(state: GanState) -> dict:
    blobs = {name: net.state_dict() for name, net in state.networks().items()}
    arch = {name: net.config for name, net in state.networks().items()}
    optim = {name: opt.state_dict() for name, opt in state.optimizers().items()}
    return {"blobs": blobs, "arch": arch, "optim": optim}


def save_gan_checkpoint(path, state: GanState, losses: LossReport | None = None):
    from .checkpoint import save_checkpoint

    parts = gan_checkpoint_blobs(state)
    save_checkpoint(
        path,
        kind="gan",
        blobs=parts["blobs"],
        optim=parts["optim"],
        rng={"numpy": state.rng.bit_generator.state, "torch": torch.get_rng_state()},
        config={"gan": state.cfg.to_dict(), "arch": parts["arch"], "epoch": state.epoch, "losses": losses.as_dict() if losses else None},
    )


def load_generator(path_or_ckpt, which="gen") -> ResnetGenerator:
    """Day-to-night generator from a GAN checkpoint, in eval mode."""
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path_or_ckpt) if not isinstance(path_or_ckpt, dict) else path_or_ckpt
    if ckpt["kind"] != "gan":
        raise ValueError(f"checkpoint kind {ckpt['kind']!r} has no generator")
    gen = ResnetGenerator(**ckpt["config"]["arch"][which])
    gen.load_state_dict(ckpt["blobs"][which])
    return gen.eval()


# training loop -------------------------------------------------------------------


@dataclass
class GanRun:
    state: GanState
    history: list
    checkpoints: list


def train_gan(day_set, night_set, cfg: GanConfig, teacher=None, out_dir=None, on_epoch=None) -> GanRun:
    """Train for ``cfg.epochs * cfg.iterations_per_epoch`` steps.

    ``day_set``/``night_set`` are sequences of ``(H, W, 3)`` arrays in
    [0, 1].  A checkpoint is produced after every epoch: written to
    ``out_dir/epoch_XXX.ckpt`` when ``out_dir`` is given, otherwise kept in
    memory as a deep copy of the generator weights.
    """
    if len(day_set) == 0 or len(night_set) == 0:
        raise ValueError(f"both domains need images (day={len(day_set)}, night={len(night_set)})")
    from pathlib import Path

    state = build_gan_state(cfg, teacher)
    history, checkpoints = [], []
    for epoch in range(cfg.epochs):
        reports = []
        for _ in range(cfg.iterations_per_epoch):
            day = sample_batch(day_set, state.rng, cfg)
            night = sample_batch(night_set, state.rng, cfg)
            reports.append(gan_training_step(state, day, night))
        for sched in state.schedulers:
            sched.step()
        state.epoch = epoch + 1
        avg = LossReport.mean(reports)
        history.append(avg)
        log.info("epoch %d %s", epoch + 1, avg.as_dict())
        if out_dir is not None:
            path = Path(out_dir) / f"epoch_{epoch + 1:03d}.ckpt"
            save_gan_checkpoint(path, state, avg)
            checkpoints.append(path)
        else:
            checkpoints.append(copy.deepcopy(state.gen.state_dict()))
        if on_epoch is not None:
            on_epoch(epoch + 1, avg, state)
    return GanRun(state, history, checkpoints)
