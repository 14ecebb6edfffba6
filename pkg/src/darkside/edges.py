"""HED-style holistic edge detection with teacher/student roles."""
from __future__ import annotations

import copy
from collections.abc import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VGG_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
TINY_STAGES = ((16, 2), (16, 2), (16, 2))

# BGR channel means of the caffe HED model, applied on a 0-255 scale
CAFFE_MEAN_BGR = (104.00698793, 116.66876762, 122.67891434)

_EXTERNAL_STAGE_NAMES = ("VggOne", "VggTwo", "VggThr", "VggFou", "VggFiv")
_EXTERNAL_SCORE_NAMES = ("ScoreOne", "ScoreTwo", "ScoreThr", "ScoreFou", "ScoreFiv")


class HED(nn.Module):
    """Convolutional trunk with one 1x1 side head per stage and a 1x1 fusion.

    ``forward`` takes a batch in model range [-1, 1] and returns the fused
    pre-sigmoid edge map at input resolution.  ``input_norm="caffe"`` maps
    inputs to the BGR, mean-subtracted 0-255 convention of the published
    HED weights; ``"none"`` feeds the model-range tensor as is.
    """

    def __init__(self, stages=VGG_STAGES, in_channels=3, input_norm="caffe"):
        super().__init__()
        if input_norm not in ("caffe", "none"):
            raise ValueError(f"unknown input_norm {input_norm!r}")
        if input_norm == "caffe" and in_channels != 3:
            raise ValueError("caffe normalization needs 3 input channels")
        self.config = {"stages": [list(s) for s in stages], "in_channels": in_channels, "input_norm": input_norm}
        self.input_norm = input_norm
        self.stages = nn.ModuleList()
        self.side = nn.ModuleList()
        prev = in_channels
        for i, (width, depth) in enumerate(stages):
            layers = [nn.MaxPool2d(2, 2)] if i > 0 else []
            for _ in range(depth):
                layers += [nn.Conv2d(prev, width, 3, 1, 1), nn.ReLU(inplace=False)]
                prev = width
            self.stages.append(nn.Sequential(*layers))
            self.side.append(nn.Conv2d(width, 1, 1, 1, 0))
        self.fuse = nn.Conv2d(len(stages), 1, 1, 1, 0)
        self.register_buffer("mean_bgr", torch.tensor(CAFFE_MEAN_BGR).view(1, 3, 1, 1))
        self.ready = False

    def _normalize(self, x):
        if self.input_norm == "none":
            return x
        x = (x + 1.0) * 127.5
        return x.flip(1) - self.mean_bgr

    def side_logits(self, x):
        h, w = x.shape[-2:]
        feats = self._normalize(x)
        outs = []
        for stage, head in zip(self.stages, self.side):
            feats = stage(feats)
            outs.append(F.interpolate(head(feats), size=(h, w), mode="bilinear", align_corners=False))
        return outs

    def forward(self, x):
        return self.fuse(torch.cat(self.side_logits(x), dim=1))


def tiny_hed(seed=None, in_channels=3) -> HED:
    """Three-stage, 16-channel detector for desk-scale runs."""
    if seed is not None:
        torch.manual_seed(seed)
    det = HED(TINY_STAGES, in_channels=in_channels, input_norm="none")
    det.ready = True
    return det


def build_hed(config: Mapping) -> HED:
    return HED(tuple(tuple(s) for s in config["stages"]), config["in_channels"], config["input_norm"])


def freeze(det: HED) -> HED:
    """Make ``det`` an immutable teacher: no gradients, eval mode."""
    for p in det.parameters():
        p.requires_grad_(False)
    return det.eval()


def make_student(teacher: HED) -> HED:
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.requires_grad_(True)
    return student.train()


def load_hed_weights(det: HED, weights) -> HED:
    """Load weights given either in this package's key layout or the
    external ``netVggOne.0.weight`` / ``moduleVggOne.0.weight`` layout used
    by the widely distributed PyTorch HED port.
    """
    if not isinstance(weights, Mapping):
        weights = torch.load(weights, map_location="cpu", weights_only=True)
    state = {}
    for key, value in weights.items():
        key = key.replace("module", "net", 1) if key.startswith("module") else key
        for i, name in enumerate(_EXTERNAL_STAGE_NAMES):
            key = key.replace(f"net{name}.", f"stages.{i}.")
        for i, name in enumerate(_EXTERNAL_SCORE_NAMES):
            key = key.replace(f"net{name}.", f"side.{i}.")
        key = key.replace("netCombine.0.", "fuse.")
        state[key] = value
    state.setdefault("mean_bgr", det.mean_bgr)
    det.load_state_dict(state)
    det.ready = True
    return det


def detect_edges(det: HED, img: torch.Tensor, form="probability") -> torch.Tensor:
    """Edge map of a ``(B, C, H, W)`` or ``(C, H, W)`` batch in model range.

    Returns ``(B, 1, H, W)`` (or ``(1, H, W)``) logits or sigmoid
    probabilities.
    """
    if det is None or not getattr(det, "ready", False):
        raise RuntimeError("edge detector has no weights loaded")
    if form not in ("probability", "logit"):
        raise ValueError(f"form must be 'probability' or 'logit', got {form!r}")
    single = img.dim() == 3
    x = img[None] if single else img
    out = det(x)
    if form == "probability":
        out = torch.sigmoid(out)
    return out[0] if single else out


def distillation_loss(student, teacher, day, fake_night, preserve_weight=1.0):
    """L1 between student and teacher logits.

    Night term: student on the translated image vs teacher on the source
    day image.  Preservation term (scaled by ``preserve_weight``): student
    vs teacher, both on the day image.
    """
    if day.shape != fake_night.shape:
        raise ValueError(f"day {tuple(day.shape)} and fake night {tuple(fake_night.shape)} differ in shape")
    with torch.no_grad():
        target = teacher(day)
    loss = (student(fake_night) - target).abs().mean()
    if preserve_weight:
        loss = loss + preserve_weight * (student(day) - target).abs().mean()
    return loss


def student_optimizer(student, lr=1e-6, betas=(0.9, 0.999), weight_decay=2e-4):
    return torch.optim.Adam(student.parameters(), lr=lr, betas=betas, weight_decay=weight_decay)


def student_distill_step(student, teacher, day, fake_night, opt, preserve_weight=1.0) -> float:
    """One optimizer step on the student; the teacher is never touched."""
    opt.zero_grad(set_to_none=True)
    loss = distillation_loss(student, teacher, day, fake_night.detach(), preserve_weight)
    loss.backward()
    opt.step()
    return float(loss.detach())


def sobel_edge_targets(images: np.ndarray, threshold=0.15) -> np.ndarray:
    """Binary edge labels from Sobel gradient magnitude of the luma.

    ``images`` is ``(N, H, W, 3)`` in [0, 1]; returns ``(N, H, W)`` floats.
    """
    import cv2

    from .imaging import luminance

    out = []
    for img in images:
        y = luminance(img).astype(np.float32)
        gx = cv2.Sobel(y, cv2.CV_32F, 1, 0, ksize=3)
        gy = cv2.Sobel(y, cv2.CV_32F, 0, 1, ksize=3)
        out.append((np.hypot(gx, gy) > threshold * 4).astype(np.float32))
    return np.stack(out)


def fit_edge_detector(det: HED, images: np.ndarray, targets: np.ndarray, steps=300, batch_size=16, lr=1e-3, seed=0):
    """Supervised fit of ``det`` to binary edge labels with the
    class-balanced cross entropy of HED, applied to every side output and
    the fused output.  Returns the per-step losses.
    """
    rng = np.random.default_rng(seed)
    x_all = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2) * 2 - 1)).float()
    y_all = torch.from_numpy(targets[:, None]).float()
    opt = torch.optim.Adam(det.parameters(), lr=lr)
    det.train()
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(x_all), size=min(batch_size, len(x_all)))
        x, y = x_all[idx], y_all[idx]
        pos = y.mean().clamp(1e-3, 1 - 1e-3)
        weight = torch.where(y > 0.5, 1 - pos, pos)
        sides = det.side_logits(x)
        fused = det.fuse(torch.cat(sides, dim=1))
        loss = sum(F.binary_cross_entropy_with_logits(s, y, weight=weight) for s in sides + [fused])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    det.ready = True
    return losses
