"""Retrieval evaluation: average precision, mAP under day/night protocols,
and descriptor ensembles."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("plain", "same_scene_cross_light", "domain_pair")


@dataclass
class EvalProtocol:
    """Which images are queries, positives and junk.

    * ``plain``: every image queries; same-cluster images are positive.
    * ``same_scene_cross_light``: every image queries; same-cluster images
      of another domain are positive, same-cluster same-domain ones junk.
    * ``domain_pair``: queries from ``query_domain``; same-cluster images of
      ``positive_domain`` are positive, other same-cluster images junk.

    ``junk`` adds per-query excluded ids on top.  The query itself is never
    part of its own ranking.
    """

    kind: str = "plain"
    query_domain: str | None = None
    positive_domain: str | None = None
    junk: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"protocol kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "domain_pair" and not (self.query_domain and self.positive_domain):
            raise ValueError("domain_pair needs query_domain and positive_domain")

    @classmethod
    def parse(cls, text: str) -> "EvalProtocol":
        """``plain``, ``tokyo`` or ``domain:<query>:<positive>`` (e.g. ``domain:day:night``)."""
        if text == "plain":
            return cls("plain")
        if text in ("tokyo", "same_scene_cross_light"):
            return cls("same_scene_cross_light")
        parts = text.split(":")
        if len(parts) == 3 and parts[0] == "domain":
            return cls("domain_pair", parts[1], parts[2])
        raise ValueError(f"cannot parse protocol {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "domain_pair":
            return f"{self.query_domain[0].upper()}->{self.positive_domain[0].upper()}"
        return self.kind


def average_precision(relevance) -> float:
    """Mean over the relevant ranks ``i`` (1-based) of ``hits_up_to_i / i``."""
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("average precision is undefined without a relevant item")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def rank(scores: np.ndarray, ids) -> np.ndarray:
    """Indices by descending score, ties by ascending id."""
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object).astype(str), kind="stable"), kind="stable")
    return np.lexsort((id_rank, -np.asarray(scores)))


def query_labels(protocol: EvalProtocol, q, ids, clusters, domains):
    """Boolean (positive, junk) masks over ``ids`` for query index ``q``."""
    same = clusters == clusters[q]
    if protocol.kind == "plain":
        pos, junk = same.copy(), np.zeros_like(same)
    elif protocol.kind == "same_scene_cross_light":
        pos = same & (domains != domains[q])
        junk = same & (domains == domains[q])
    else:
        pos = same & (domains == protocol.positive_domain)
        junk = same & (domains != protocol.positive_domain)
    extra = set(protocol.junk.get(ids[q], ()))
    if extra:
        junk |= np.array([i in extra for i in ids])
    junk[q] = True
    pos &= ~junk
    return pos, junk


@dataclass
class MapResult:
    protocol: str
    mAP: float
    per_query: list
    skipped: list

    def to_json(self) -> dict:
        return asdict(self)


def evaluate_map(descs, ids, dataset, protocol: EvalProtocol) -> MapResult:
    """mAP of inner-product ranking over the images ``ids``.

    ``descs`` rows correspond to ``ids``; ``dataset`` supplies cluster and
    domain labels.  Queries without positives are skipped and listed.
    """
    descs = np.asarray(descs, dtype=np.float64)
    ids = list(ids)
    if descs.ndim != 2 or len(descs) != len(ids):
        raise ValueError(f"{len(ids)} ids but descriptor matrix of shape {descs.shape}")
    clusters = np.array([dataset.cluster(i) for i in ids], dtype=object)
    domains = np.array([dataset.domain(i) for i in ids], dtype=object)
    queries = range(len(ids))
    if protocol.kind == "domain_pair":
        queries = [q for q in queries if domains[q] == protocol.query_domain]
    scores = descs @ descs.T
    per_query, skipped = [], []
    for q in queries:
        pos, junk = query_labels(protocol, q, ids, clusters, domains)
        if not pos.any():
            skipped.append(ids[q])
            continue
        order = rank(scores[q], ids)
        order = order[~junk[order]]
        per_query.append({"id": ids[q], "ap": average_precision(pos[order])})
    mean = float(np.mean([r["ap"] for r in per_query])) if per_query else float("nan")
    return MapResult(protocol.name, mean, per_query, skipped)


def ensemble_concat(a, b) -> np.ndarray:
    """Concatenate two unit descriptors (or row-aligned matrices) scaled by
    ``1/sqrt(2)`` so the result is unit norm again."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.concatenate([a, b], axis=-1) / np.sqrt(2.0)


def write_report(path, results, extra=None):
    doc = {"results": [r.to_json() for r in results], **(extra or {})}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def write_table(path, rows: dict):
    """CSV with one row per method and one mAP column (in percent) per protocol.

    ``rows`` maps method name -> list of :class:`MapResult`.
    """
    protocols = []
    for results in rows.values():
        for r in results:
            if r.protocol not in protocols:
                protocols.append(r.protocol)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "avg", *protocols])
        for method, results in rows.items():
            by = {r.protocol: 100 * r.mAP for r in results}
            vals = [by.get(p) for p in protocols]
            avg = np.mean([v for v in vals if v is not None])
            w.writerow([method, f"{avg:.1f}", *("" if v is None else f"{v:.1f}" for v in vals)])
