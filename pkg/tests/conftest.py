"""Shared test oracles, independent of the package's own implementations."""

import numpy as np


def oracle_retrieval(distances, query_labels, gallery_labels,
                     query_ids=None, gallery_ids=None):
    """Definitional O(Q*G^2) AP/CMC scorer used to certify evaluate().

    Ranks ascending by distance with ties going to the lower gallery index,
    drops gallery entries whose sample-id equals the query's, and computes
    precision at each relevant rank by re-counting relevants from scratch.
    Returns (mAP, cmc array over gallery depth, per-query AP list, n_invalid).
    """
    distances = np.asarray(distances, dtype=np.float64)
    q, g = distances.shape
    aps = []
    cmc_hits = np.zeros(g)
    invalid = 0
    for i in range(q):
        entries = sorted(range(g), key=lambda j: (distances[i, j], j))
        if query_ids is not None and gallery_ids is not None:
            entries = [j for j in entries if gallery_ids[j] != query_ids[i]]
        relevant = [gallery_labels[j] == query_labels[i] for j in entries]
        if not any(relevant):
            invalid += 1
            continue
        precisions = []
        for rank_idx, is_rel in enumerate(relevant):
            if is_rel:
                count = 0
                for jj in range(rank_idx + 1):  # the deliberate O(G^2) recount
                    if relevant[jj]:
                        count += 1
                precisions.append(count / (rank_idx + 1))
        aps.append(sum(precisions) / len(precisions))
        first = relevant.index(True)
        cmc_hits[first:] += 1.0
    cmc = cmc_hits / len(aps) if aps else cmc_hits
    mean_ap = sum(aps) / len(aps) if aps else float("nan")
    return mean_ap, cmc, aps, invalid
