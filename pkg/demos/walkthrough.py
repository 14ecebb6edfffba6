"""A tour of the library API on a tiny synthetic dataset (about a minute).

    python demos/walkthrough.py [workdir]

Each step prints what it shows; nothing here is needed by the CLI.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from darkside import edges, embedding, evaluation, imaging, mining, nightgan
from darkside.data import SceneSpec, make_synthetic_daynight

torch.manual_seed(0)
work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="darkside-"))

# Render a small set of scenes.  Each scene is one cluster with several day
# views and a couple of night renderings of the same geometry.
ds = make_synthetic_daynight(SceneSpec(seed=0, n_scenes=30, image_size=64), work / "synth")
print("dataset:", ds.summary())

# Night images are dark and low contrast.  CLAHE on the L channel lifts
# local contrast without touching chroma.
night_id = ds.select("train", "night")[0]
night = ds.load_image(night_id)
print(f"luminance std: night {imaging.luminance(night).std():.3f}", end="")
for clip in (1.0, 4.0):  # 1.0 is the training default and deliberately mild
    eq = imaging.clahe(night, imaging.ClaheConfig(grid=(8, 8), clip_limit=clip))
    print(f", CLAHE clip {clip:g} {imaging.luminance(eq).std():.3f}", end="")
print()

# A small edge detector fitted to Sobel targets stands in for HED.
day = [ds.load_image(i) for i in ds.split["gan_day"]]
night_imgs = [ds.load_image(i) for i in ds.split["gan_night"]]
teacher = edges.tiny_hed(0)
imgs = np.stack(day)
edges.fit_edge_detector(teacher, imgs, edges.sobel_edge_targets(imgs), steps=100, seed=0)

# A very short GAN run; the edge term keeps day edges in the night output.
cfg = nightgan.GanConfig(crop=64, ngf=8, n_blocks=2, ndf=8, epochs=1, iterations_per_epoch=30, student_lr=1e-4)
run = nightgan.train_gan(day, night_imgs, cfg, teacher=teacher)
fake = nightgan.translate_image(run.state.gen, day[0])
print(f"day luminance {imaging.luminance(day[0]).mean():.3f} -> translated {imaging.luminance(np.clip(fake, 0, 1)).mean():.3f}")

# Diverse anchors: each pick is drawn from the middle band of the ranking
# by distance to the anchors already chosen.
train = ds.select("train", "day")
ecfg = embedding.EmbeddingConfig(backbone="tiny_conv", image_size=64)
net = embedding.EmbeddingNet(ecfg)
pool = embedding.extract_descriptors(net, [ds.load_image(i) for i in train], ecfg)
print("diverse anchor picks:", mining.mine_diverse_anchors(pool, 5, 0.2, 0.8, np.random.default_rng(0)))

# Train the embedding with a quarter of the anchors replaced by their
# night translation, then evaluate day queries against night positives.
mcfg = mining.MiningConfig(pool_size=len(train), anchors_per_epoch=40, translate_prob=0.25, neg_candidate_pool=len(train))
result = embedding.train_embedding(ds, ecfg, mcfg, epochs=2, seed=0, ids=train, generator=run.state.gen)
val = ds.select("val")
d = embedding.extract_descriptors(result.model, [ds.load_image(i) for i in val], ecfg)
for proto in ("domain:day:night", "domain:day:day", "tokyo"):
    r = evaluation.evaluate_map(d, val, ds, evaluation.EvalProtocol.parse(proto))
    print(f"{proto:18s} mAP {100 * r.mAP:.1f}")
print("outputs in", work)
