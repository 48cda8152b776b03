"""Concept anchors: prompt-ensembled text embeddings and representative patch selection.

Anchor order is fixed everywhere in the package: class-specific anchors sorted by
class label, then by concept name within a class; class-agnostic anchors sorted by name.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateAnchorError, ValidationError

_NORM_TOL = 1e-6


def build_anchor(template_embeddings: Sequence[Sequence[float]]) -> np.ndarray:
    """Average the per-template embeddings of one concept name and L2-normalize."""
    if len(template_embeddings) == 0:
        raise ValidationError("template_embeddings is empty")
    try:
        arr = np.asarray(template_embeddings, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise ValidationError(f"template embeddings have non-uniform dimension: {exc}") from None
    if arr.ndim != 2:
        raise ValidationError(f"expected a list of vectors, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("template embeddings contain non-finite entries")
    mean = arr.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12 * max(1.0, float(np.abs(arr).max())):
        raise DegenerateAnchorError("mean of template embeddings has zero norm")
    return mean / norm


@dataclass(frozen=True)
class ConceptBank:
    """Immutable set of unit-norm concept anchors.

    ``cs_vectors`` rows are the m class-specific anchors, ``cs_labels`` gives the
    class of each row. ``ca_vectors`` rows are the n class-agnostic anchors.
    """

    dim: int
    cs_vectors: np.ndarray
    cs_labels: np.ndarray
    cs_names: tuple[str, ...]
    ca_vectors: np.ndarray
    ca_names: tuple[str, ...]

    def __post_init__(self):
        cs = np.array(self.cs_vectors, dtype=np.float64).reshape(-1, self.dim)
        ca = np.array(self.ca_vectors, dtype=np.float64).reshape(-1, self.dim)
        labels = np.array(self.cs_labels, dtype=np.int64).reshape(-1)
        for arr in (cs, ca, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "cs_vectors", cs)
        object.__setattr__(self, "ca_vectors", ca)
        object.__setattr__(self, "cs_labels", labels)
        if len(labels) != cs.shape[0] or len(self.cs_names) != cs.shape[0] or len(self.ca_names) != ca.shape[0]:
            raise ValidationError("anchor names/labels do not match anchor counts")
        if cs.shape[0] == 0:
            raise ValidationError("concept bank needs at least one class-specific anchor")
        norms = np.linalg.norm(np.vstack([cs, ca]), axis=1)
        if np.any(np.abs(norms - 1.0) > _NORM_TOL):
            raise ValidationError("all anchors must have unit L2 norm")

    @property
    def m(self) -> int:
        return self.cs_vectors.shape[0]

    @property
    def n(self) -> int:
        return self.ca_vectors.shape[0]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.cs_labels))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> tuple[str, ...]:
        return self.cs_names + self.ca_names

    @property
    def class_specific(self) -> dict[int, np.ndarray]:
        return {c: self.cs_vectors[self.cs_labels == c] for c in self.classes}

    @property
    def class_agnostic(self) -> np.ndarray:
        return self.ca_vectors

    @property
    def all_vectors(self) -> np.ndarray:
        """All m + n anchors, class-specific first."""
        return np.vstack([self.cs_vectors, self.ca_vectors])

    def anchors_for(self, label: int) -> np.ndarray:
        mask = self.cs_labels == label
        if not mask.any():
            raise LookupError(f"label {label!r} has no class-specific anchors in this bank")
        return self.cs_vectors[mask]

    def positive_anchor(self, label: int) -> np.ndarray:
        """Renormalized mean of the label's class-specific anchors."""
        mean = self.anchors_for(label).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DegenerateAnchorError(f"class {label} anchors average to zero")
        return mean / norm

    @classmethod
    def from_anchors(
        cls,
        class_specific: Mapping[str, tuple[int, Sequence[float]]],
        class_agnostic: Mapping[str, Sequence[float]],
    ) -> "ConceptBank":
        """Build a bank from ``{name: (label, unit_vector)}`` and ``{name: unit_vector}``."""
        if not class_specific:
            raise ValidationError("no class-specific concepts given")
        dims = {len(v) for _, v in class_specific.values()} | {len(v) for v in class_agnostic.values()}
        if len(dims) != 1:
            raise ValidationError(f"anchors have mismatched dimensions {sorted(dims)}")
        (dim,) = dims
        cs_items = sorted(class_specific.items(), key=lambda kv: (kv[1][0], kv[0]))
        ca_items = sorted(class_agnostic.items())
        return cls(
            dim=dim,
            cs_vectors=np.array([v for _, (_, v) in cs_items], dtype=np.float64).reshape(-1, dim),
            cs_labels=np.array([lab for _, (lab, _) in cs_items], dtype=np.int64),
            cs_names=tuple(name for name, _ in cs_items),
            ca_vectors=np.array([v for _, v in ca_items], dtype=np.float64).reshape(-1, dim),
            ca_names=tuple(name for name, _ in ca_items),
        )


def load_concept_bank(
    concepts: Mapping[str, Sequence[Sequence[float]]],
    class_map: Mapping[str, int],
    num_classes: int | None = None,
    dim: int | None = None,
) -> ConceptBank:
    """Ensemble each concept's template embeddings into one anchor.

    Names found in ``class_map`` become class-specific anchors of that label; all
    other names are class-agnostic. If ``num_classes`` is given, every label in
    ``range(num_classes)`` must own at least one name.
    """
    unknown = set(class_map) - set(concepts)
    if unknown:
        raise ValidationError(f"class map names without embeddings: {sorted(unknown)}")
    anchors = {}
    for name, templates in concepts.items():
        if len(templates) == 0:
            raise ValidationError(f"concept {name!r} has no template embeddings")
        anchors[name] = build_anchor(templates)
    dims = {a.shape[0] for a in anchors.values()}
    if dim is not None:
        dims.add(int(dim))
    if len(dims) > 1:
        raise ValidationError(f"dimension mismatch across concept names: {sorted(dims)}")
    labels = set(class_map.values())
    if num_classes is not None:
        missing = set(range(num_classes)) - labels
        if missing:
            raise ValidationError(f"classes without any concept name: {sorted(missing)}")
    cs = {name: (int(lab), anchors[name]) for name, lab in class_map.items()}
    ca = {name: vec for name, vec in anchors.items() if name not in class_map}
    return ConceptBank.from_anchors(cs, ca)


def read_prompt_file(path: str | Path) -> tuple[dict, dict, int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("dim", "concepts", "classes"):
        if key not in doc:
            raise ValidationError(f"prompt embedding file is missing key {key!r}")
    return doc["concepts"], doc["classes"], int(doc["dim"])


def load_concept_file(path: str | Path, num_classes: int | None = None) -> ConceptBank:
    concepts, classes, dim = read_prompt_file(path)
    if num_classes is None:
        num_classes = len(set(classes.values()))
    return load_concept_bank(concepts, classes, num_classes=num_classes, dim=dim)


def write_prompt_file(path: str | Path, concepts: Mapping[str, np.ndarray], classes: Mapping[str, int]) -> None:
    dims = {np.asarray(v).shape[-1] for v in concepts.values()}
    if len(dims) != 1:
        raise ValidationError(f"dimension mismatch across concept names: {sorted(dims)}")
    doc = {
        "dim": dims.pop(),
        "concepts": {k: [[float(x) for x in row] for row in np.asarray(v)] for k, v in concepts.items()},
        "classes": {k: int(v) for k, v in classes.items()},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def patch_scores(features: np.ndarray, bank: ConceptBank, label: int) -> np.ndarray:
    """Per-patch max cosine similarity to the label's class-specific anchors."""
    return kernels.cosine_max_scores(features, bank.anchors_for(label))


def select_representative(features: np.ndarray, bank: ConceptBank, label: int, k: int = 10) -> np.ndarray:
    """Indices of the k patches most similar to the label's concepts.

    Ties go to the lower patch index; the result is ordered by descending score.
    """
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValidationError("bag must contain at least one patch")
    return kernels.topk_indices(patch_scores(feats, bank, label), k)
