"""Training tuple assembly: diverse anchor selection, cluster-constrained
hard negative mining and per-epoch anchor translation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MiningConfig:
    pool_size: int = 10000
    anchors_per_epoch: int = 2000
    lo: float = 0.2
    hi: float = 0.8
    negatives: int = 5
    translate_prob: float = 0.25
    neg_candidate_pool: int = 20000
    diverse: bool = True

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError(f"need 0 <= lo < hi <= 1, got lo={self.lo}, hi={self.hi}")
        if self.anchors_per_epoch > self.pool_size:
            raise ValueError("anchors_per_epoch cannot exceed pool_size")
        if self.negatives < 1:
            raise ValueError("need at least one negative")
        if not 0 <= self.translate_prob <= 1:
            raise ValueError("translate_prob must be in [0, 1]")


@dataclass
class TrainingTuple:
    anchor_id: str
    positive_id: str
    negative_ids: list
    anchor_translated: bool
    anchor_cluster: object

    @property
    def ids(self):
        return [self.anchor_id, self.positive_id, *self.negative_ids]


@dataclass
class EpochTuples:
    tuples: list
    translated: dict = field(default_factory=dict)


def percentile_window(m: int, lo: float, hi: float) -> tuple[int, int]:
    """Half-open rank window ``[floor(lo*m), ceil(hi*m))`` over ``m``
    candidates, widened to all of them if it comes out empty."""
    a, b = math.floor(lo * m), min(math.ceil(hi * m), m)
    return (a, b) if a < b else (0, m)


def mine_diverse_anchors(pool_descs, k: int, lo=0.2, hi=0.8, rng: np.random.Generator | None = None) -> list[int]:
    """Pick ``k`` pool indices, each new one far from the ones already picked.

    The first pick is uniform.  Afterwards the remaining candidates are
    ranked by their minimum Euclidean distance to the picked set (ties by
    ascending index) and the next pick is uniform over the ranks in
    :func:`percentile_window`.  RNG use: one ``integers(M)`` draw, then
    one ``integers(window_width)`` draw per further pick.
    """
    X = np.asarray(pool_descs, dtype=np.float64)
    M = len(X)
    if k > M:
        raise ValueError(f"cannot pick {k} anchors from a pool of {M}")
    rng = rng if rng is not None else np.random.default_rng()
    if k <= 0:
        return []
    first = int(rng.integers(M))
    picked = [first]
    remaining = np.ones(M, dtype=bool)
    remaining[first] = False
    mind = np.linalg.norm(X - X[first], axis=1)
    order_idx = np.arange(M)
    for _ in range(k - 1):
        cand = order_idx[remaining]
        ranked = cand[np.lexsort((cand, mind[cand]))]
        a, b = percentile_window(len(ranked), lo, hi)
        nxt = int(ranked[a + int(rng.integers(b - a))])
        picked.append(nxt)
        remaining[nxt] = False
        np.minimum(mind, np.linalg.norm(X - X[nxt], axis=1), out=mind)
    return picked


def mine_hard_negatives(anchor_desc, cand_descs, cand_ids, cand_clusters, anchor_cluster, n=5) -> list:
    """Nearest candidates to the anchor, at most one per cluster and none
    from the anchor's cluster, in ascending distance order."""
    cand_descs = np.asarray(cand_descs, dtype=np.float64)
    d = np.linalg.norm(cand_descs - np.asarray(anchor_desc, dtype=np.float64), axis=1)
    chosen, seen = [], {anchor_cluster}
    for i in np.argsort(d, kind="stable"):
        cl = cand_clusters[i]
        if cl in seen:
            continue
        chosen.append(cand_ids[i])
        seen.add(cl)
        if len(chosen) == n:
            return chosen
    raise ValueError(
        f"only {len(chosen)} of {n} negatives available: candidates cover {len(seen) - 1} foreign clusters, "
        f"short by {n - len(chosen)}"
    )


def build_epoch_tuples(dataset, describe, cfg: MiningConfig, rng: np.random.Generator, translate=None, ids=None) -> EpochTuples:
    """Assemble one epoch of training tuples.

    ``describe`` maps a list of images to an ``(N, D)`` array of unit
    descriptors with the network in its current state; ``translate`` maps
    one day image to its night rendering.  ``ids`` restricts anchors,
    positives and negatives to a subset of the dataset.

    Steps: sample an anchor pool, select anchors (diverse or uniform),
    translate exactly ``round(translate_prob * k)`` (halves up) of them, describe the
    anchors as they will be trained (translated where applicable), then
    mine negatives against those descriptors.
    """
    ids = dataset.ids if ids is None else list(ids)
    allowed = set(ids)
    anchors_all = dataset.anchors(ids)
    if not anchors_all:
        raise ValueError("dataset has no positive pairs to train on")
    pool_n = min(cfg.pool_size, len(anchors_all))
    k = cfg.anchors_per_epoch
    if k > pool_n:
        raise ValueError(f"anchors_per_epoch={k} exceeds the available anchor pool of {pool_n}")
    pool = [anchors_all[i] for i in rng.choice(len(anchors_all), size=pool_n, replace=False)]

    if cfg.diverse:
        pool_descs = describe([dataset.load_image(i) for i in pool])
        sel = mine_diverse_anchors(pool_descs, k, cfg.lo, cfg.hi, rng)
    else:
        sel = [int(i) for i in rng.choice(pool_n, size=k, replace=False)]
    anchor_ids = [pool[i] for i in sel]

    n_tr = math.floor(cfg.translate_prob * k + 0.5)  # half-up, not banker's rounding
    flagged = set(int(i) for i in rng.choice(k, size=n_tr, replace=False)) if n_tr else set()
    if flagged and translate is None:
        raise ValueError("translate_prob > 0 needs a generator")

    translated = {}
    anchor_imgs = []
    for j, aid in enumerate(anchor_ids):
        img = dataset.load_image(aid)
        if j in flagged:
            img = translate(img)
            translated[aid] = img
        anchor_imgs.append(img)
    anchor_descs = describe(anchor_imgs)

    m = min(cfg.neg_candidate_pool, len(ids))
    cand_ids = [ids[i] for i in np.sort(rng.choice(len(ids), size=m, replace=False))]
    cand_descs = describe([dataset.load_image(i) for i in cand_ids])
    cand_clusters = [dataset.cluster(i) for i in cand_ids]

    tuples = []
    for j, aid in enumerate(anchor_ids):
        positives = [p for p in dataset.positives(aid) if p in allowed]
        pos = positives[int(rng.integers(len(positives)))]
        negs = mine_hard_negatives(anchor_descs[j], cand_descs, cand_ids, cand_clusters, dataset.cluster(aid), cfg.negatives)
        tuples.append(TrainingTuple(aid, pos, negs, j in flagged, dataset.cluster(aid)))
    return EpochTuples(tuples, translated)


def check_tuple(t: TrainingTuple, dataset) -> None:
    """Raise if ``t`` breaks a cluster invariant."""
    clusters = [dataset.cluster(n) for n in t.negative_ids]
    if dataset.cluster(t.positive_id) != t.anchor_cluster:
        raise AssertionError(f"positive {t.positive_id} is outside the anchor cluster")
    if t.anchor_cluster in clusters:
        raise AssertionError(f"a negative of {t.anchor_id} shares its cluster")
    if len(set(clusters)) != len(clusters):
        raise AssertionError(f"negatives of {t.anchor_id} repeat a cluster")


def export_tuples_jsonl(tuples, path):
    with open(path, "w") as fh:
        for t in tuples:
            fh.write(json.dumps(asdict(t)) + "\n")
