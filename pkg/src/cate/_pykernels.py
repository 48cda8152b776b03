"""numpy implementations of the compiled kernels (used when the extension is unavailable)."""
import numpy as np


def topk_indices(scores, k):
    scores = np.asarray(scores, dtype=np.float64)
    k = min(int(k), scores.shape[0])
    # stable sort on the negated score keeps lower indices first among ties
    return np.argsort(-scores, kind="stable")[:k].astype(np.int64)


def cosine_max_scores(features, anchors):
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.where(norms > 0, norms, 1.0)
    return (unit @ np.asarray(anchors, dtype=np.float64).T).max(axis=1)


def mann_whitney_auc(scores, labels):
    """Binary AUC as the normalized Mann-Whitney U statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # midranks (1-based) for tie groups
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks = np.empty_like(scores)
    ranks[order] = np.repeat(mid, counts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
