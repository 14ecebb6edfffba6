"""Global descriptors: backbone, GeM/MAC pooling, L2 normalization, the
contrastive tuple loss, and the metric-learning training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ClaheConfig, clahe, to_model_range
from .mining import MiningConfig, build_epoch_tuples

log = logging.getLogger(__name__)

BACKBONES = ("tiny_conv", "vgg16", "resnet101")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_LR = {"vgg16": 1e-6, "resnet101": 5e-7, "tiny_conv": 1e-3}


@dataclass
class EmbeddingConfig:
    backbone: str = "vgg16"
    pooling: str = "gem"
    p: float = 3.0
    learn_p: bool = True
    input_mode: str = "image"
    clahe_enabled: bool = True
    clahe_grid: tuple = (8, 8)
    clahe_clip: float = 1.0
    margin: float = 0.85
    squared_loss: bool = True
    lr: float | None = None
    weight_decay: float = 1e-6
    image_size: int | None = 362
    tiny_width: int = 16
    scales: tuple = (1.0,)
    pretrained: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.pooling not in ("gem", "mac"):
            raise ValueError(f"pooling must be 'gem' or 'mac', got {self.pooling!r}")
        if self.input_mode not in ("image", "edgemap"):
            raise ValueError(f"input_mode must be 'image' or 'edgemap', got {self.input_mode!r}")
        if not 0 < self.margin <= 2:
            raise ValueError(f"margin must lie in (0, 2], got {self.margin}")
        if not self.p > 0:
            raise ValueError(f"GeM exponent must be positive, got {self.p}")
        self.clahe_grid = tuple(self.clahe_grid)
        self.scales = tuple(self.scales)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.backbone]

    @property
    def in_channels(self):
        return 1 if self.input_mode == "edgemap" else 3

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["clahe_grid"], d["scales"] = list(self.clahe_grid), list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown embedding config keys: {sorted(unknown)}")
        return cls(**d)


# pooling and normalization --------------------------------------------------------


def gem_pool(x, p, eps=1e-6):
    """Generalized mean over the last two axes: ``mean(x**p) ** (1/p)``.

    Works on ``(C, H, W)`` or ``(B, C, H, W)`` tensors or arrays; values
    are clamped at ``eps`` from below.
    """
    if not torch.is_tensor(x):
        return gem_pool(torch.as_tensor(np.asarray(x, dtype=np.float64)), float(p), eps).numpy()
    if (torch.as_tensor(p) <= 0).any():
        raise ValueError(f"GeM exponent must be positive, got {p}")
    return x.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


def mac_pool(x):
    """Per-channel spatial maximum."""
    if not torch.is_tensor(x):
        return np.asarray(x).max(axis=(-2, -1))
    return x.amax(dim=(-2, -1))


def l2_normalize(v):
    """Unit-norm copy of a vector; a zero vector is an error."""
    if torch.is_tensor(v):
        n = v.norm()
        if n == 0:
            raise ValueError("cannot normalize a zero vector")
        return v / n
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


class GeM(nn.Module):
    def __init__(self, p=3.0, learn_p=True, eps=1e-6):
        super().__init__()
        p = torch.tensor([float(p)])
        self.p = nn.Parameter(p) if learn_p else nn.Parameter(p, requires_grad=False)
        self.eps = eps

    def forward(self, x):
        return gem_pool(x, self.p, self.eps)


class MAC(nn.Module):
    def forward(self, x):
        return mac_pool(x)


# losses ---------------------------------------------------------------------------


def _distance(a, b):
    sq = ((a - b) ** 2).sum(-1)
    nz = sq > 0
    # sqrt has an infinite derivative at 0; route zeros around it
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq)), sq


def contrastive_pair_loss(a, b, positive: bool, margin=0.85, squared=True):
    """Positive pairs cost ``d**2 / 2``, negatives ``max(0, margin - d)**2 / 2``.

    ``squared=False`` gives the plain ``d`` / ``relu(margin - d)`` form.
    """
    d, sq = _distance(a, b)
    if positive:
        return 0.5 * sq if squared else d
    hinge = F.relu(margin - d)
    return 0.5 * hinge**2 if squared else hinge


def tuple_loss(descs, margin=0.85, squared=True, n_negatives=5):
    """Sum of the positive-pair and negative-pair losses against the anchor.

    ``descs`` rows: anchor, positive, then ``n_negatives`` negatives.
    """
    if descs.shape[0] != 2 + n_negatives:
        raise ValueError(f"expected {2 + n_negatives} descriptors (anchor, positive, {n_negatives} negatives), got {descs.shape[0]}")
    anchor = descs[0]
    loss = contrastive_pair_loss(anchor, descs[1], True, margin, squared)
    return loss + contrastive_pair_loss(anchor[None], descs[2:], False, margin, squared).sum()


# networks ----------------------------------------------------------------------------


def tiny_conv(in_channels=3, width=16) -> tuple[nn.Module, int]:
    layers = nn.Sequential(
        nn.Conv2d(in_channels, width, 3, padding=1),
        nn.ReLU(True),
        nn.MaxPool2d(2),
        nn.Conv2d(width, 2 * width, 3, padding=1),
        nn.ReLU(True),
        nn.MaxPool2d(2),
        nn.Conv2d(2 * width, 4 * width, 3, padding=1),
        nn.ReLU(True),
    )
    return layers, 4 * width


def build_backbone(cfg: EmbeddingConfig) -> tuple[nn.Module, int]:
    if cfg.backbone == "tiny_conv":
        return tiny_conv(cfg.in_channels, cfg.tiny_width)
    import torchvision

    if cfg.backbone == "vgg16":
        features = torchvision.models.vgg16(weights=None).features[:-1]
        if cfg.in_channels != 3:
            features[0] = nn.Conv2d(cfg.in_channels, 64, 3, padding=1)
        return features, 512
    net = torchvision.models.resnet101(weights=None)
    if cfg.in_channels != 3:
        net.conv1 = nn.Conv2d(cfg.in_channels, 64, 7, 2, 3, bias=False)
    return nn.Sequential(*list(net.children())[:-2]), 2048


class EmbeddingNet(nn.Module):
    """Backbone, pooling and L2 normalization; returns ``(B, D)``."""

    def __init__(self, cfg: EmbeddingConfig):
        super().__init__()
        self.cfg = cfg
        self.features, self.dim = build_backbone(cfg)
        self.pool = GeM(cfg.p, cfg.learn_p) if cfg.pooling == "gem" else MAC()
        if cfg.pretrained:
            state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
            self.features.load_state_dict(state)

    def forward(self, x):
        return F.normalize(self.pool(self.features(x)), dim=-1)


def prepare_input(img, cfg: EmbeddingConfig) -> torch.Tensor:
    """Numpy image in [0, 1] -> normalized ``(C, H, W)`` float tensor."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] != cfg.in_channels:
        raise ValueError(f"{cfg.input_mode} mode expects {cfg.in_channels}-channel input, got {img.shape[2]} channels")
    if cfg.clahe_enabled and cfg.input_mode == "image":
        img = clahe(img, ClaheConfig(cfg.clahe_grid, cfg.clahe_clip))
    if cfg.image_size:
        img = resize_longest(img, cfg.image_size)
    if cfg.input_mode == "image":
        if cfg.backbone == "tiny_conv":
            img = to_model_range(img)
        else:
            img = (img - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def resize_longest(img, size: int):
    h, w = img.shape[:2]
    s = size / max(h, w)
    if s == 1:
        return img
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    out = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_AREA if s < 1 else cv2.INTER_LINEAR)
    return out.reshape(nh, nw, img.shape[2])


@torch.no_grad()
def extract_descriptors(model: EmbeddingNet, images, cfg: EmbeddingConfig | None = None, batch_size=64) -> np.ndarray:
    """``(N, D)`` unit descriptors in eval mode.

    With several ``cfg.scales`` the per-scale descriptors are averaged and
    renormalized.
    """
    cfg = cfg or model.cfg
    was_training = model.training
    model.eval()
    out = np.zeros((len(images), model.dim))
    for scale in cfg.scales:
        scfg = cfg
        if scale != 1.0:
            scfg = dataclasses.replace(cfg, image_size=max(1, round((cfg.image_size or max(np.shape(images[0])[:2])) * scale)))
        tensors = [prepare_input(img, scfg) for img in images]
        for start in range(0, len(tensors), batch_size):
            chunk = tensors[start : start + batch_size]
            if all(t.shape == chunk[0].shape for t in chunk):
                out[start : start + len(chunk)] += model(torch.stack(chunk)).double().numpy()
            else:
                for j, t in enumerate(chunk):
                    out[start + j] += model(t[None])[0].double().numpy()
    model.train(was_training)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def extract_descriptor(model: EmbeddingNet, img, cfg: EmbeddingConfig | None = None) -> np.ndarray:
    return extract_descriptors(model, [img], cfg)[0]


@torch.no_grad()
def edge_embedding_input(detector, img) -> np.ndarray:
    """Non-binarized probability edge map ``(H, W, 1)`` of an RGB image."""
    from .edges import detect_edges

    x = torch.from_numpy(np.ascontiguousarray(to_model_range(np.asarray(img)).transpose(2, 0, 1))).float()
    return detect_edges(detector, x, "probability").numpy().transpose(1, 2, 0).astype(np.float64)


# training ------------------------------------------------------------------------------


def save_embedding_checkpoint(path, model, opt, cfg: EmbeddingConfig, epoch, loss, rng=None):
    from .checkpoint import save_checkpoint

    save_checkpoint(
        path,
        kind="embedding",
        blobs={"net": model.state_dict()},
        optim={"net": opt.state_dict()} if opt is not None else None,
        rng={"numpy": rng.bit_generator.state} if rng is not None else None,
        config={"embedding": cfg.to_dict(), "epoch": epoch, "loss": loss},
    )


def load_embedding(path_or_ckpt) -> EmbeddingNet:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path_or_ckpt, kind="embedding") if not isinstance(path_or_ckpt, dict) else path_or_ckpt
    cfg = EmbeddingConfig.from_dict({**ckpt["config"]["embedding"], "pretrained": None})
    model = EmbeddingNet(cfg)
    model.load_state_dict(ckpt["blobs"]["net"])
    return model.eval()


@dataclass
class EmbeddingRun:
    model: EmbeddingNet
    epoch_losses: list
    checkpoints: list
    generator_calls: int = 0


def check_generator(generator, cfg: EmbeddingConfig):
    """Reject a generator that cannot produce inputs for this embedding."""
    conf = getattr(generator, "config", {})
    if cfg.input_mode != "image":
        raise ValueError("anchor translation needs image input mode")
    if conf.get("in_channels", 3) != 3 or conf.get("out_channels", 3) != 3:
        raise ValueError(f"generator maps {conf.get('in_channels')} to {conf.get('out_channels')} channels, need RGB to RGB")
    if cfg.image_size is not None and cfg.image_size < 4 * getattr(generator, "stride", 4):
        raise ValueError(f"image_size {cfg.image_size} is too small for the generator")


def train_embedding(
    dataset,
    cfg: EmbeddingConfig,
    mining: MiningConfig,
    epochs: int,
    seed=0,
    ids=None,
    generator=None,
    out_dir=None,
) -> EmbeddingRun:
    """Metric learning with per-epoch tuple mining.

    One optimizer step per tuple; ``mining.anchors_per_epoch`` tuples per
    epoch.  ``generator`` (frozen, eval mode) translates the flagged share
    of anchors; with ``translate_prob == 0`` it is never called.
    """
    from .nightgan import translate_image

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = EmbeddingNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    calls = 0
    translate = None
    if generator is not None:
        check_generator(generator, cfg)
        generator.eval()
        for p in generator.parameters():
            p.requires_grad_(False)

        def translate(img):
            nonlocal calls
            calls += 1
            return np.clip(translate_image(generator, img), 0, 1)

    def describe(images):
        return extract_descriptors(model, images, cfg)

    losses, ckpts = [], []
    for epoch in range(epochs):
        epoch_tuples = build_epoch_tuples(dataset, describe, mining, rng, translate, ids)
        model.train()
        running = []
        for t in epoch_tuples.tuples:
            imgs = [epoch_tuples.translated[t.anchor_id] if t.anchor_translated else dataset.load_image(t.anchor_id)]
            imgs += [dataset.load_image(i) for i in [t.positive_id, *t.negative_ids]]
            tensors = [prepare_input(im, cfg) for im in imgs]
            if all(x.shape == tensors[0].shape for x in tensors):
                descs = model(torch.stack(tensors))
            else:
                descs = torch.cat([model(x[None]) for x in tensors])
            loss = tuple_loss(descs, cfg.margin, cfg.squared_loss, mining.negatives)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
        mean = float(np.mean(running)) if running else math.nan
        losses.append(mean)
        log.info("embedding epoch %d loss %.5f", epoch + 1, mean)
        if out_dir is not None:
            path = Path(out_dir) / f"epoch_{epoch + 1:03d}.ckpt"
            save_embedding_checkpoint(path, model, opt, cfg, epoch + 1, mean, rng)
            ckpts.append(path)
    model.eval()
    return EmbeddingRun(model, losses, ckpts, calls)
