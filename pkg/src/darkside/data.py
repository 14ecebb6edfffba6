"""Retrieval datasets: JSON manifest ingestion and a synthetic day/night
scene generator for desk-scale experiments.

Manifest layout::

    {
      "images": [{"id": "a", "path": "img/a.png", "domain": "day", "cluster": 3}, ...],
      "pairs":  [["a", "b"], ...],
      "split":  {"train": ["a", "b", ...], "val": [...], ...}
    }

Relative paths resolve against ``$DARKSIDE_DATA_ROOT`` when set, else
against the manifest's directory.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)

DOMAINS = ("day", "night", "unknown")
DATA_ROOT_ENV = "DARKSIDE_DATA_ROOT"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    domain: str
    cluster: object


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, img: np.ndarray):
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path)


class RetrievalDataset:
    """Images with domain and cluster labels plus positive pairs.

    Construction validates the invariants: unique ids, a cluster for every
    image, known domains, pairs referencing known ids within one cluster,
    split lists referencing known ids, and (optionally) resolvable paths.
    """

    def __init__(self, images, pairs=(), split=None, root=None, check_paths=True, cache=True):
        self.root = Path(root) if root is not None else Path(".")
        self.images: list[ImageRecord] = []
        self.index: dict[str, int] = {}
        for n, rec in enumerate(images):
            if not isinstance(rec, ImageRecord):
                rec = _record_from_json(rec, n)
            if rec.id in self.index:
                raise ManifestError(f"duplicate image id {rec.id!r} (record {n})")
            self.index[rec.id] = len(self.images)
            self.images.append(rec)

        self.pairs: list[tuple[str, str]] = []
        for n, pair in enumerate(pairs):
            if len(pair) != 2:
                raise ManifestError(f"pair {n} must have two ids, got {pair!r}")
            a, p = str(pair[0]), str(pair[1])
            for x in (a, p):
                if x not in self.index:
                    raise ManifestError(f"pair {n} ({a!r}, {p!r}) references unknown image id {x!r}")
            if self.cluster(a) != self.cluster(p):
                raise ManifestError(f"pair {n} ({a!r}, {p!r}) spans clusters {self.cluster(a)!r} and {self.cluster(p)!r}")
            self.pairs.append((a, p))

        self.split: dict[str, list[str]] = {}
        for name, ids in (split or {}).items():
            ids = [str(i) for i in ids]
            missing = [i for i in ids if i not in self.index]
            if missing:
                raise ManifestError(f"split {name!r} references unknown image id {missing[0]!r}")
            self.split[name] = ids

        if check_paths:
            for rec in self.images:
                if not self.resolve(rec.path).exists():
                    raise ManifestError(f"image {rec.id!r}: path {rec.path!r} does not resolve ({self.resolve(rec.path)})")

        self._positives = defaultdict(list)
        for a, p in self.pairs:
            self._positives[a].append(p)
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.images)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.images]

    def record(self, image_id) -> ImageRecord:
        return self.images[self.index[image_id]]

    def cluster(self, image_id):
        return self.images[self.index[image_id]].cluster

    def domain(self, image_id) -> str:
        return self.images[self.index[image_id]].domain

    def positives(self, image_id) -> list[str]:
        return list(self._positives.get(image_id, ()))

    def anchors(self, ids=None) -> list[str]:
        """Ids with at least one positive partner, optionally within ``ids``."""
        if ids is None:
            return [r.id for r in self.images if self._positives.get(r.id)]
        allowed = set(ids)
        return [i for i in ids if any(p in allowed for p in self._positives.get(i, ()))]

    def select(self, split=None, domain=None) -> list[str]:
        ids = self.split[split] if split is not None else self.ids
        if domain is not None:
            ids = [i for i in ids if self.domain(i) == domain]
        return list(ids)

    def resolve(self, path) -> Path:
        path = Path(path)
        if path.is_absolute():
            return path
        env = os.environ.get(DATA_ROOT_ENV)
        return (Path(env) if env else self.root) / path

    def load_image(self, image_id) -> np.ndarray:
        if self._cache is not None and image_id in self._cache:
            return self._cache[image_id]
        img = read_image(self.resolve(self.record(image_id).path))
        if self._cache is not None:
            self._cache[image_id] = img
        return img

    def summary(self) -> dict:
        counts = defaultdict(int)
        for r in self.images:
            counts[r.domain] += 1
        return {
            "images": len(self.images),
            "clusters": len({r.cluster for r in self.images}),
            "pairs": len(self.pairs),
            "domains": dict(counts),
            "splits": {k: len(v) for k, v in self.split.items()},
        }

    def to_manifest(self) -> dict:
        return {
            "images": [dataclasses.asdict(r) for r in self.images],
            "pairs": [list(p) for p in self.pairs],
            "split": {k: list(v) for k, v in self.split.items()},
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_manifest(), indent=1))
        return path

    def __eq__(self, other):
        return isinstance(other, RetrievalDataset) and self.to_manifest() == other.to_manifest()


def _record_from_json(rec, n) -> ImageRecord:
    if not isinstance(rec, dict):
        raise ManifestError(f"image record {n} must be an object")
    for key in ("id", "path"):
        if key not in rec:
            raise ManifestError(f"image record {n} is missing {key!r}")
    if rec.get("cluster") is None:
        raise ManifestError(f"image {rec['id']!r} (record {n}) has no cluster id")
    domain = str(rec.get("domain", "unknown")).lower()
    if domain not in DOMAINS:
        raise ManifestError(f"image {rec['id']!r} has unknown domain {domain!r}")
    return ImageRecord(str(rec["id"]), str(rec["path"]), domain, rec["cluster"])


def load_dataset(manifest_path, check_paths=True, min_size=None) -> RetrievalDataset:
    """Read and validate a JSON manifest.

    ``min_size`` drops images whose shorter side is below it (the filter
    applied to GAN training pools); pairs and split entries touching a
    dropped image are dropped with it.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ManifestError(f"cannot read manifest {manifest_path}: {err}") from err
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise ManifestError(f"{manifest_path}: top level must be an object with an 'images' list")
    images, pairs, split = doc["images"], doc.get("pairs", []), doc.get("split", {})
    ds = RetrievalDataset(images, pairs, split, root=manifest_path.parent, check_paths=check_paths)
    if min_size is not None:
        keep = set()
        for rec in ds.images:
            with PILImage.open(ds.resolve(rec.path)) as im:
                if min(im.size) >= min_size:
                    keep.add(rec.id)
        ds = RetrievalDataset(
            [r for r in ds.images if r.id in keep],
            [p for p in ds.pairs if p[0] in keep and p[1] in keep],
            {k: [i for i in v if i in keep] for k, v in ds.split.items()},
            root=ds.root,
            check_paths=False,
        )
    log.info("loaded %s: %s", manifest_path, ds.summary())
    return ds


def export_pairs_jsonl(ds: RetrievalDataset, path):
    with open(path, "w") as fh:
        for a, p in ds.pairs:
            fh.write(json.dumps({"anchor": a, "positive": p, "cluster": ds.cluster(a)}) + "\n")


# synthetic day/night scenes -------------------------------------------------------


@dataclass
class NightTransform:
    """Deterministic day-to-night rendering.

    ``gamma=1`` and zero for the other fields is the identity.
    """

    gamma: float = 2.2
    chroma_shift: float = 0.25
    vignette: float = 0.5
    light_spots: int = 3
    spot_intensity: float = 0.6
    spot_radius: float = 0.07

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = img.shape[:2]
        out = np.clip(img, 0, 1) ** self.gamma
        out = out * np.array([1 - self.chroma_shift, 1 - 0.5 * self.chroma_shift, 1 + self.chroma_shift])
        if self.vignette:
            yy, xx = np.mgrid[0:h, 0:w]
            r2 = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2
            out = out * (1 - self.vignette * np.clip(r2 / 2, 0, 1))[..., None]
        if self.light_spots:
            yy, xx = np.mgrid[0:h, 0:w]
            sigma = self.spot_radius * max(h, w)
            for _ in range(self.light_spots):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                out = out + self.spot_intensity * blob[..., None] * np.array([1.0, 0.85, 0.5])
        return np.clip(out, 0.0, 1.0)


@dataclass
class SceneSpec:
    seed: int = 0
    n_scenes: int = 100
    views_per_scene: int = 4
    night_views_per_scene: int = 2
    image_size: int = 64
    val_fraction: float = 0.4
    night: NightTransform = dataclasses.field(default_factory=NightTransform)

    def __post_init__(self):
        if isinstance(self.night, dict):
            self.night = NightTransform(**self.night)
        if self.image_size < 32:
            raise ValueError(f"image_size must be at least 32, got {self.image_size}")
        if self.n_scenes < 2:
            raise ValueError("need at least 2 scenes so negatives exist")
        if self.views_per_scene < 2:
            raise ValueError("need at least 2 day views per scene to form positive pairs")


def render_canvas(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random gradient background with filled polygons, discs and bars."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)
    c0, c1 = rng.uniform(0.2, 1.0, 3), rng.uniform(0.2, 1.0, 3)
    canvas = ((1 - t)[..., None] * c0 + t[..., None] * c1) * 255
    canvas = np.ascontiguousarray(canvas.astype(np.uint8))
    for _ in range(int(rng.integers(8, 14))):
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        kind = rng.integers(0, 3)
        if kind == 0:
            n = int(rng.integers(3, 7))
            center = rng.uniform(0.1, 0.9, 2) * size
            radius = rng.uniform(0.08, 0.25) * size
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            pts = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], 1)
            cv2.fillPoly(canvas, [np.round(pts).astype(np.int32)], color, lineType=cv2.LINE_AA)
        elif kind == 1:
            center = tuple(int(v) for v in rng.uniform(0.1, 0.9, 2) * size)
            cv2.circle(canvas, center, int(rng.uniform(0.04, 0.15) * size), color, -1, lineType=cv2.LINE_AA)
        else:
            p0 = tuple(int(v) for v in rng.uniform(0, 1, 2) * size)
            p1 = tuple(int(v) for v in rng.uniform(0, 1, 2) * size)
            cv2.line(canvas, p0, p1, color, max(1, int(rng.uniform(0.01, 0.04) * size)), lineType=cv2.LINE_AA)
    return canvas.astype(np.float64) / 255.0


def render_view(canvas: np.ndarray, rng: np.random.Generator, out_size: int) -> np.ndarray:
    """A jittered viewpoint: random rotation, zoom and shift of the canvas."""
    size = canvas.shape[0]
    angle = rng.uniform(-8, 8)
    scale = out_size / (size / 1.5) * rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.08, 0.08, 2) * out_size
    M = cv2.getRotationMatrix2D((size / 2, size / 2), angle, scale)
    M[:, 2] += np.array([out_size / 2, out_size / 2]) - np.array([size / 2, size / 2]) + shift
    view = cv2.warpAffine(canvas, M, (out_size, out_size), flags=cv2.INTER_AREA, borderMode=cv2.BORDER_REFLECT)
    return np.clip(view * rng.uniform(0.93, 1.07), 0, 1)


def make_synthetic_daynight(spec: SceneSpec, out_dir) -> RetrievalDataset:
    """Render a scene-clustered day/night dataset into ``out_dir``.

    Each scene is one cluster.  Day views form all ordered positive pairs
    within their scene; night views come from their own viewpoints and are
    unpaired.  Splits: ``train``/``val`` by scene, and ``gan_day`` /
    ``gan_night`` pools drawn from the training scenes.  Output is a pure
    function of ``spec``.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    scene_seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_scenes)
    n_val = int(round(spec.val_fraction * spec.n_scenes))
    n_train = spec.n_scenes - n_val
    canvas_size = int(math.ceil(spec.image_size * 1.5))

    images, pairs = [], []
    split = {"train": [], "val": [], "gan_day": [], "gan_night": []}
    for s, seq in enumerate(scene_seeds):
        rng = np.random.default_rng(seq)
        canvas = render_canvas(rng, canvas_size)
        which = "train" if s < n_train else "val"
        day_ids = []
        for v in range(spec.views_per_scene):
            iid = f"s{s:04d}_d{v}"
            write_image(out_dir / "images" / f"{iid}.png", render_view(canvas, rng, spec.image_size))
            images.append({"id": iid, "path": f"images/{iid}.png", "domain": "day", "cluster": s})
            day_ids.append(iid)
        for v in range(spec.night_views_per_scene):
            iid = f"s{s:04d}_n{v}"
            night = spec.night.apply(render_view(canvas, rng, spec.image_size), rng)
            write_image(out_dir / "images" / f"{iid}.png", night)
            images.append({"id": iid, "path": f"images/{iid}.png", "domain": "night", "cluster": s})
            split[which].append(iid)
            if which == "train":
                split["gan_night"].append(iid)
        split[which].extend(day_ids)
        if which == "train":
            split["gan_day"].extend(day_ids)
        pairs += [[a, b] for a in day_ids for b in day_ids if a != b]

    ds = RetrievalDataset(images, pairs, split, root=out_dir)
    ds.save(out_dir / "manifest.json")
    return ds
