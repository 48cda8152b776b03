import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cate import kernels

from oracles import brute_auc


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=80)
@given(hnp.arrays(np.float64, st.integers(0, 40), elements=st.floats(-3, 3, allow_nan=False)), st.integers(0, 45))
def test_topk_matches_stable_sort(scores, k):
    from cate import _pykernels

    ref = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    assert _pykernels.topk_indices(scores, k).tolist() == ref


def test_backends_agree_on_topk(backend, rng):
    for _ in range(200):
        n = int(rng.integers(1, 60))
        scores = np.round(rng.standard_normal(n), 1)  # many ties
        k = int(rng.integers(1, n + 3))
        ref = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
        assert backend.topk_indices(scores, k).tolist() == ref


def test_cosine_scores_backend(backend, rng):
    feats = rng.standard_normal((20, 6))
    feats[3] = 0.0
    anchors = rng.standard_normal((4, 6))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    ref = ((feats / np.where(norms > 0, norms, 1)) @ anchors.T).max(1)
    np.testing.assert_allclose(backend.cosine_max_scores(feats, anchors), ref, atol=1e-12)


def test_auc_backend_matches_brute_force(backend, rng):
    for _ in range(300):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n).astype(bool)
        if labels.all() or not labels.any():
            labels[0] = not labels[0]
        scores = np.round(rng.random(n), 1)
        assert backend.mann_whitney_auc(scores, labels) == brute_auc(scores, labels)
