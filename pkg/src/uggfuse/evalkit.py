"""Closed-set retrieval metrics, the noise-robustness sweep, and the
variant-ladder runner.

Ranking protocol: ascending distance with ties broken by gallery index
(stable sort), gallery entries sharing the query's sample-id excluded, no
camera filtering. AP averages precision at each relevant position; CMC[r] is
the fraction of queries with a hit in the top r. Queries whose identity never
appears in the (filtered) gallery are excluded and counted, not scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Dataset, NoiseSpec, inject_noise, per_dim_std
from .errors import ConfigError, ContractViolationError, MissingCheckpointError
from .model import VARIANTS
from .objective import Checkpoint, TrainConfig, fit

METRICS = ("euclidean", "cosine")
CMC_RANKS = (1, 5, 10)


# -- distance and report types ---------------------------------------------------


def compute_distances(query: np.ndarray, gallery: np.ndarray,
                      metric: str = "euclidean") -> np.ndarray:
    """(Q, F) x (G, F) -> (Q, G) nonnegative distances."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ContractViolationError("query/gallery must be (Q, F) and (G, F)")
    if metric == "euclidean":
        sq = (query ** 2).sum(1)[:, None] + (gallery ** 2).sum(1)[None, :]
        d2 = np.maximum(sq - 2.0 * query @ gallery.T, 0.0)
        return np.sqrt(d2)
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ConfigError(f"metric must be one of {METRICS}")


@dataclass
class RetrievalResult:
    """Distance matrix plus the labels/ids needed to score it."""

    distances: np.ndarray  # (Q, G), >= 0
    query_labels: np.ndarray
    gallery_labels: np.ndarray
    query_ids: np.ndarray | None = None  # sample ids, for self-pair exclusion
    gallery_ids: np.ndarray | None = None

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        self.gallery_labels = np.asarray(self.gallery_labels, dtype=np.int64)
        q, g = self.distances.shape
        if q < 1:
            raise ContractViolationError("need at least one query")
        if self.query_labels.shape != (q,) or self.gallery_labels.shape != (g,):
            raise ContractViolationError("label shapes disagree with distances")
        if (self.distances < 0).any() or not np.isfinite(self.distances).all():
            raise ContractViolationError("distances must be finite and >= 0")
        for name in ("query_ids", "gallery_ids"):
            ids = getattr(self, name)
            if ids is not None:
                setattr(self, name, np.asarray(ids, dtype=np.int64))


@dataclass
class MetricReport:
    """mAP, the CMC curve, and per-query APs (invalid queries excluded)."""

    map: float
    cmc: np.ndarray  # full-length curve over gallery depth
    per_query_ap: list
    invalid_queries: int = 0

    def __post_init__(self):
        self.cmc = np.asarray(self.cmc, dtype=np.float64)
        if (np.diff(self.cmc) < -1e-12).any():
            raise ContractViolationError("CMC curve must be nondecreasing")
        if self.per_query_ap and \
                abs(self.map - float(np.mean(self.per_query_ap))) > 1e-12:
            raise ContractViolationError("mAP must equal the mean per-query AP")

    def rank(self, r: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def summary(self) -> dict:
        out = {"mAP": self.map, "invalid_queries": self.invalid_queries}
        for r in CMC_RANKS:
            out[f"rank{r}"] = self.rank(r)
        return out


# -- evaluation -------------------------------------------------------------------


def evaluate_result(res: RetrievalResult) -> MetricReport:
    q, g = res.distances.shape
    aps: list = []
    hits = np.zeros(g, dtype=np.float64)
    invalid = 0
    for i in range(q):
        order = np.argsort(res.distances[i], kind="stable")
        if res.query_ids is not None and res.gallery_ids is not None:
            keep = res.gallery_ids[order] != res.query_ids[i]
            order = order[keep]
        rel = res.gallery_labels[order] == res.query_labels[i]
        n_rel = int(rel.sum())
        if n_rel == 0:
            invalid += 1
            continue
        pos = np.flatnonzero(rel)
        precision = (np.arange(n_rel) + 1.0) / (pos + 1.0)
        aps.append(float(precision.mean()))
        hits[pos[0]:] += 1.0
    if not aps:
        raise ContractViolationError("every query was invalid; nothing to score")
    cmc = hits[:g] / len(aps)
    return MetricReport(map=float(np.mean(aps)), cmc=cmc, per_query_ap=aps,
                        invalid_queries=invalid)


def evaluate(query_feats, gallery_feats, query_labels, gallery_labels,
             query_ids=None, gallery_ids=None,
             metric: str = "euclidean") -> MetricReport:
    """Score a retrieval problem given raw feature matrices."""
    res = RetrievalResult(
        distances=compute_distances(query_feats, gallery_feats, metric),
        query_labels=query_labels, gallery_labels=gallery_labels,
        query_ids=query_ids, gallery_ids=gallery_ids)
    return evaluate_result(res)


def evaluate_splits(ck: Checkpoint, query: Dataset, gallery: Dataset,
                    metric: str = "euclidean") -> MetricReport:
    """Embed both splits with the checkpointed model and score retrieval."""
    model = ck.build_model()
    return evaluate(model.embed(query.tokens), model.embed(gallery.tokens),
                    query.labels, gallery.labels,
                    query_ids=query.sample_ids, gallery_ids=gallery.sample_ids,
                    metric=metric)


# -- robustness sweep ---------------------------------------------------------------


@dataclass
class SweepReport:
    """One row per (epsilon, variant, seed) cell of the robustness grid."""

    rows: list = field(default_factory=list)  # dicts: epsilon, variant, seed, ...

    def add(self, epsilon, variant, seed, report: MetricReport):
        self.rows.append({"epsilon": float(epsilon), "variant": variant,
                          "seed": int(seed), "mAP": report.map,
                          "rank1": report.rank(1)})

    def mean_map(self, variant: str, epsilon: float) -> float:
        vals = [r["mAP"] for r in self.rows
                if r["variant"] == variant and r["epsilon"] == float(epsilon)]
        if not vals:
            raise ContractViolationError(
                f"no sweep rows for variant {variant!r} at epsilon {epsilon}")
        return float(np.mean(vals))

    def aggregate(self) -> list:
        """Per (variant, epsilon): mean and std of mAP/rank1 over seeds."""
        keys = sorted({(r["variant"], r["epsilon"]) for r in self.rows})
        out = []
        for variant, eps in keys:
            cell = [r for r in self.rows
                    if r["variant"] == variant and r["epsilon"] == eps]
            out.append({
                "variant": variant, "epsilon": eps, "seeds": len(cell),
                "mAP_mean": float(np.mean([r["mAP"] for r in cell])),
                "mAP_std": float(np.std([r["mAP"] for r in cell])),
                "rank1_mean": float(np.mean([r["rank1"] for r in cell])),
                "rank1_std": float(np.std([r["rank1"] for r in cell])),
            })
        return out


def noise_sweep(checkpoints: dict, train: Dataset, query: Dataset,
                gallery: Dataset, eps_list, seeds, kind: str = "gaussian",
                modalities=None, metric: str = "euclidean",
                variants=None) -> SweepReport:
    """Test-time corruption grid: clean-trained models, noisy query/gallery.

    checkpoints maps variant letter -> Checkpoint (or a mapping of seeds to
    checkpoints, one per sweep seed). The noise scale is pinned to the clean
    train split's per-dimension std, never the corrupted copies'.
    """
    variants = list(variants) if variants is not None else sorted(checkpoints)
    missing = [v for v in variants if v not in checkpoints]
    if missing:
        raise MissingCheckpointError(
            f"no checkpoint for variant(s) {', '.join(missing)}")
    ref = per_dim_std(train)
    report = SweepReport()
    for variant in variants:
        entry = checkpoints[variant]
        for seed in seeds:
            ck = entry[seed] if isinstance(entry, dict) else entry
            model = ck.build_model()
            for eps in eps_list:
                spec = NoiseSpec(kind=kind, epsilon=float(eps), target="test-only",
                                 seed=int(seed),
                                 modalities=tuple(modalities) if modalities
                                 else NoiseSpec().modalities)
                nq = inject_noise(query, spec, ref_std=ref)
                ng = inject_noise(gallery, spec, ref_std=ref)
                rep = evaluate(model.embed(nq.tokens), model.embed(ng.tokens),
                               nq.labels, ng.labels,
                               query_ids=nq.sample_ids, gallery_ids=ng.sample_ids,
                               metric=metric)
                report.add(eps, variant, seed, rep)
    return report


# -- ablation ladder -----------------------------------------------------------------


def ablation_run(base: TrainConfig, train: Dataset, query: Dataset,
                 gallery: Dataset, seeds, variants=VARIANTS,
                 metric: str = "euclidean"):
    """Train and evaluate each variant per seed; returns (rows, checkpoints).

    rows: one dict per (variant, seed) with mAP and Rank-1/5/10.
    checkpoints: {variant: {seed: Checkpoint}} for reuse by the sweep.
    """
    rows = []
    checkpoints: dict = {}
    for variant in variants:
        checkpoints[variant] = {}
        for seed in seeds:
            cfg = replace(base, variant=variant, seed=int(seed))
            try:
                ck = fit(cfg, train)
            except Exception as err:
                raise type(err)(f"variant {variant} (seed {seed}): {err}") from err
            checkpoints[variant][seed] = ck
            rep = evaluate_splits(ck, query, gallery, metric=metric)
            rows.append({"variant": variant, "seed": int(seed), "mAP": rep.map,
                         "rank1": rep.rank(1), "rank5": rep.rank(5),
                         "rank10": rep.rank(10)})
    return rows, checkpoints


def ablation_table(rows) -> list:
    """Seed-aggregated view: one dict per variant, mean and std per metric."""
    variants = sorted({r["variant"] for r in rows})
    out = []
    for v in variants:
        cell = [r for r in rows if r["variant"] == v]
        entry = {"variant": v, "seeds": len(cell)}
        for key in ("mAP", "rank1", "rank5", "rank10"):
            vals = [r[key] for r in cell]
            entry[f"{key}_mean"] = float(np.mean(vals))
            entry[f"{key}_std"] = float(np.std(vals))
        out.append(entry)
    return out


# -- report files --------------------------------------------------------------------


def write_rows_csv(rows: list, path, comment: str | None = None) -> None:
    """Any list of uniform dicts as CSV, keys in first-row order."""
    if not rows:
        raise ContractViolationError("refusing to write an empty report")
    cols = list(rows[0])
    lines = ([f"# {comment}"] if comment else []) + [",".join(cols)]
    for row in rows:
        if list(row) != cols:
            raise ContractViolationError("report rows have inconsistent columns")
        lines.append(",".join(_cell(row[c]) for c in cols))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_json(path, run_id: str, config_hash: str, rows: list,
                      extra: dict | None = None) -> None:
    """Single-document run report: identity, resolved-config hash, rows."""
    doc = {"run_id": run_id, "config_hash": config_hash, "rows": rows}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
