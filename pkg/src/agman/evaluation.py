"""Attribute-specific retrieval (MAP), triplet relation prediction, ranking
and attention-map export."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AttributeSpace, DatasetSplit, ImageStore, Triplet
from .losses import cosine_similarity, triplet_loss
from .model import AGMAN

logger = logging.getLogger(__name__)


class DegenerateQueryError(ValueError):
    """Average precision is undefined for a ranking with no relevant item."""


def average_precision(relevance: Sequence[int]) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.size == 0 or rel.sum() == 0:
        raise DegenerateQueryError("ranking has no relevant entry")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float((hits / ranks)[rel > 0].mean())


def rank_candidates(query: np.ndarray, candidates: np.ndarray, candidate_ids: Sequence[str]):
    """Order candidates by descending cosine score, ties by ascending id.

    Returns (order, scores) where ``order`` indexes ``candidate_ids``.
    """
    # row-wise products keep the score of a vector independent of its row
    # position (BLAS kernels may round remainder rows differently)
    scores = (candidates * query).sum(axis=1)
    ids = np.asarray(candidate_ids, dtype=object)
    # lexsort keys: last is primary
    order = np.lexsort((ids, -scores))
    return order, scores


@dataclass
class RankingResult:
    query_id: str
    attribute: int
    candidate_ids: list[str]
    scores: list[float]
    relevant: list[bool]
    truncated: bool = False
    note: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "rank", "candidate_id", "score", "relevant"])
        for rank, (cid, s, r) in enumerate(zip(self.candidate_ids, self.scores, self.relevant), start=1):
            w.writerow([self.query_id, rank, cid, repr(float(s)), int(r)])
        return buf.getvalue()


@dataclass
class EvalReport:
    per_attribute: dict[str, float | None] = field(default_factory=dict)
    overall_map: float | None = None
    attribute_mean_map: float | None = None
    triplet_accuracy: float | None = None
    triplet_avg_loss: float | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_attribute": self.per_attribute,
            "overall_map": self.overall_map,
            "attribute_mean_map": self.attribute_mean_map,
            "triplet_accuracy": self.triplet_accuracy,
            "triplet_avg_loss": self.triplet_avg_loss,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def merge(self, other: "EvalReport") -> "EvalReport":
        d = self.to_dict()
        for k, v in other.to_dict().items():
            if k == "counts":
                d["counts"] = {**d["counts"], **v}
            elif v not in (None, {}):
                d[k] = v
        return EvalReport(**d)


def _pool(split: DatasetSplit, attribute: int):
    """(query ids, candidate ids) labelled for ``attribute``."""
    if split.query_ids:
        queries = [q for q in split.query_ids if attribute in split[q].labels]
        candidates = [c for c in split.candidate_ids if attribute in split[c].labels]
    else:
        queries = candidates = [r.id for r in split.labeled_for(attribute)]
    return queries, candidates


def map_from_embeddings(query_emb: np.ndarray, query_labels: Sequence[int], query_ids: Sequence[str],
                        cand_emb: np.ndarray, cand_labels: Sequence[int], cand_ids: Sequence[str]):
    """Per-query AP for one attribute; queries without a relevant candidate
    are skipped. Returns (list of AP, number skipped)."""
    qn = _normalise(query_emb)
    cn = _normalise(cand_emb)
    cand_labels = np.asarray(cand_labels)
    cand_ids = list(cand_ids)
    aps, skipped = [], 0
    for qi, qid in enumerate(query_ids):
        keep = np.array([cid != qid for cid in cand_ids], dtype=bool)
        ids = [c for c, k in zip(cand_ids, keep) if k]
        order, _ = rank_candidates(qn[qi], cn[keep], ids)
        rel = (cand_labels[keep][order] == query_labels[qi]).astype(int)
        if rel.sum() == 0:
            skipped += 1
            continue
        aps.append(average_precision(rel))
    return aps, skipped


def _normalise(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding")
    return x / norms


def _embed_ids(model: AGMAN, store: ImageStore, ids: list[str], attribute: int,
               cache: dict | None = None) -> np.ndarray:
    if cache is not None:
        missing = [i for i in ids if (i, attribute) not in cache]
        if missing:
            emb = model.embed_many(store.get(missing), attribute).double().numpy()
            cache.update({(i, attribute): e for i, e in zip(missing, emb)})
        return np.stack([cache[(i, attribute)] for i in ids]) if ids else np.zeros((0, 1))
    return model.embed_many(store.get(ids), attribute).double().numpy()


def _mean(values) -> float:
    """Exactly rounded, so independent of query order."""
    return math.fsum(values) / len(values)


def evaluate_map(model: AGMAN, split: DatasetSplit, space: AttributeSpace,
                 store: ImageStore | None = None) -> EvalReport:
    """Attribute-specific retrieval MAP over the split's query/candidate pools."""
    store = store or ImageStore(split, model.image_size)
    per_attr: dict[str, float | None] = {}
    all_aps: list[float] = []
    attr_maps: list[float] = []
    counts = {"queries": {}, "candidates": {}, "excluded_queries": {}, "skipped_attributes": []}
    cache: dict = {}
    for a, name in enumerate(space.names):
        queries, candidates = _pool(split, a)
        counts["queries"][name] = len(queries)
        counts["candidates"][name] = len(candidates)
        if not queries or not candidates:
            per_attr[name] = None
            counts["excluded_queries"][name] = len(queries)
            counts["skipped_attributes"].append(name)
            logger.warning("attribute %s skipped: %d queries, %d candidates", name, len(queries), len(candidates))
            continue
        q_emb = _embed_ids(model, store, queries, a, cache)
        c_emb = _embed_ids(model, store, candidates, a, cache)
        aps, skipped = map_from_embeddings(q_emb, [split[q].labels[a] for q in queries], queries,
                                           c_emb, [split[c].labels[a] for c in candidates], candidates)
        counts["excluded_queries"][name] = skipped
        if not aps:
            per_attr[name] = None
            counts["skipped_attributes"].append(name)
            continue
        per_attr[name] = _mean(aps)
        attr_maps.append(per_attr[name])
        all_aps.extend(aps)
    return EvalReport(
        per_attribute=per_attr,
        overall_map=_mean(all_aps) if all_aps else None,
        attribute_mean_map=_mean(attr_maps) if attr_maps else None,
        counts=counts,
    )


def predict_from_embeddings(ea, ep, en) -> tuple[bool, float]:
    """Correct iff cos(a, p) > cos(a, n); an exact tie counts as wrong."""
    s_p = float(cosine_similarity(torch.as_tensor(ea, dtype=torch.float64), torch.as_tensor(ep, dtype=torch.float64)))
    s_n = float(cosine_similarity(torch.as_tensor(ea, dtype=torch.float64), torch.as_tensor(en, dtype=torch.float64)))
    if s_p == s_n:
        return False, 0.0
    return s_p > s_n, s_p - s_n


def predict_triplet(model: AGMAN, t: Triplet, store: ImageStore) -> tuple[bool, float]:
    emb = model.embed_many(store.get([t.anchor, t.positive, t.negative]), t.attribute).double()
    return predict_from_embeddings(emb[0], emb[1], emb[2])


def triplet_scores(embeddings: list[tuple], margin: float = 0.2, mode: str = "similarity_corrected"):
    """(accuracy, average loss) over (e_a, e_p, e_n) embedding triples."""
    if not embeddings:
        raise ValueError("no triplets to evaluate")
    correct = 0
    losses = []
    for ea, ep, en in embeddings:
        ok, _ = predict_from_embeddings(ea, ep, en)
        correct += ok
        ea, ep, en = (torch.as_tensor(e, dtype=torch.float64) for e in (ea, ep, en))
        losses.append(float(triplet_loss(ea, ep, en, margin, mode)))
    return correct / len(embeddings), float(np.mean(losses))


def evaluate_triplets(model: AGMAN, triplets: list[Triplet], store: ImageStore,
                      margin: float = 0.2, mode: str = "similarity_corrected") -> EvalReport:
    """Triplet relation prediction accuracy and mean triplet loss."""
    if not triplets:
        raise ValueError("no triplets to evaluate")
    cache: dict = {}
    by_attr: dict[int, list[str]] = {}
    for t in triplets:
        by_attr.setdefault(t.attribute, []).extend([t.anchor, t.positive, t.negative])
    for a, ids in sorted(by_attr.items()):
        _embed_ids(model, store, sorted(set(ids)), a, cache)
    embs = [(cache[(t.anchor, t.attribute)], cache[(t.positive, t.attribute)], cache[(t.negative, t.attribute)])
            for t in triplets]
    acc, loss = triplet_scores(embs, margin, mode)
    return EvalReport(triplet_accuracy=acc, triplet_avg_loss=loss, counts={"triplets": len(triplets)})


def retrieve(model: AGMAN, query_id: str, attribute: int, split: DatasetSplit, k: int,
             store: ImageStore | None = None) -> RankingResult:
    """Top-``k`` candidates for ``query_id`` under ``attribute``."""
    if query_id not in split:
        raise KeyError(f"unknown query id {query_id!r}")
    q_label = split[query_id].labels.get(attribute)
    if q_label is None:
        raise ValueError(f"query {query_id!r} is not labelled for attribute {attribute}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    store = store or ImageStore(split, model.image_size)
    _, candidates = _pool(split, attribute)
    candidates = [c for c in candidates if c != query_id]
    if not candidates:
        raise ValueError(f"no candidates labelled for attribute {attribute}")
    q = _normalise(_embed_ids(model, store, [query_id], attribute))[0]
    c = _normalise(_embed_ids(model, store, candidates, attribute))
    order, scores = rank_candidates(q, c, candidates)
    note = ""
    if k > len(candidates):
        note = f"requested k={k} but only {len(candidates)} candidates exist"
    order = order[:k]
    return RankingResult(
        query_id, attribute,
        [candidates[i] for i in order],
        [float(scores[i]) for i in order],
        [split[candidates[i]].labels[attribute] == q_label for i in order],
        truncated=bool(note), note=note,
    )


def attention_map(model: AGMAN, image: torch.Tensor, attribute: int) -> torch.Tensor:
    """The [h, w] spatial softmax map the attribute-guided stage applies."""
    if model.aga.asa is None:
        raise ValueError("attribute-guided spatial attention is disabled in this model; no spatial map exists")
    _, trace = model.embed(image, attribute)
    return trace.spatial_softmax_map


def export_attention(amap: torch.Tensor, out_dir: str | Path, image_id: str, attribute: str) -> tuple[Path, Path]:
    """Write the map as a CSV grid and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"attention_{image_id}_{attribute}"
    grid = out_dir / f"{stem}.csv"
    with grid.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in amap.double().tolist():
            w.writerow([repr(v) for v in row])
    h, wd = amap.shape
    side = out_dir / f"{stem}.json"
    side.write_text(json.dumps({"image_id": image_id, "attribute": attribute, "h": h, "w": wd},
                               sort_keys=True) + "\n")
    return grid, side
