"""Synthetic joint embedding worlds with planted site shift, plus analytic MI oracles.

Patches are drawn around unit anchors: a tumor patch sits near one of its bag
class's anchors, every other patch near a class-agnostic anchor. Every patch of
a bag also carries its site's fixed offset ``nuisance_strength * u_site``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bags import Bag
from .concepts import ConceptBank
from .errors import DomainError, ValidationError

# stream tags for the counter-based generator
_ANCHORS, _SITES, _BAGS, _PATCHES, _TEMPLATES = range(5)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class WorldSpec:
    dim: int = 32
    num_classes: int = 2
    anchors_per_class: int = 5
    num_agnostic: int = 14
    sites_ind: list[str] = field(default_factory=lambda: ["A1", "A2"])
    sites_ood: list[str] = field(default_factory=lambda: ["B1", "B2", "B3"])
    nuisance_strength: float = 1.0
    tumor_fraction: float = 0.3
    patches_per_bag: tuple[int, int] = (40, 80)
    bags_per_site: int = 20
    noise_sigma: float = 0.5
    seed: int = 0
    site_class_skew: float = 0.0

    def __post_init__(self):
        self.sites_ind = [str(s) for s in self.sites_ind]
        self.sites_ood = [str(s) for s in self.sites_ood]
        self.patches_per_bag = tuple(int(x) for x in self.patches_per_bag)
        self.validate()

    def validate(self) -> None:
        for name in ("dim", "num_classes", "anchors_per_class", "num_agnostic", "bags_per_site"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        sites = self.sites_ind + self.sites_ood
        if len(set(sites)) != len(sites):
            raise ValidationError("sites_ind/sites_ood: site identifiers must be distinct and disjoint")
        if not self.sites_ind:
            raise ValidationError("sites_ind must not be empty")
        if not (0.0 < self.tumor_fraction <= 1.0):
            raise ValidationError(f"tumor_fraction must lie in (0, 1], got {self.tumor_fraction}")
        if not (self.nuisance_strength >= 0.0 and math.isfinite(self.nuisance_strength)):
            raise ValidationError(f"nuisance_strength must be non-negative, got {self.nuisance_strength}")
        if not (0.0 <= self.site_class_skew < 1.0):
            raise ValidationError(f"site_class_skew must lie in [0, 1), got {self.site_class_skew}")
        if not (self.noise_sigma > 0.0 and math.isfinite(self.noise_sigma)):
            raise ValidationError(f"noise_sigma must be positive, got {self.noise_sigma}")
        lo, hi = self.patches_per_bag if len(self.patches_per_bag) == 2 else (0, 0)
        if len(self.patches_per_bag) != 2 or lo < 1 or hi < lo:
            raise ValidationError(f"patches_per_bag must be a range (lo, hi) with 1 <= lo <= hi, got {self.patches_per_bag}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def sites(self) -> list[str]:
        return self.sites_ind + self.sites_ood

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patches_per_bag"] = list(self.patches_per_bag)
        return d


@dataclass
class GroundTruth:
    """Generative facts that training code must never see."""

    tumor_masks: dict[str, np.ndarray]
    site_offsets: dict[str, np.ndarray]
    anchor_choice: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "tumor_masks": {k: v.astype(int).tolist() for k, v in self.tumor_masks.items()},
            "site_offsets": {k: v.tolist() for k, v in self.site_offsets.items()},
            "anchor_choice": {k: v.tolist() for k, v in self.anchor_choice.items()},
        }


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def concept_names(spec: WorldSpec) -> tuple[dict[str, int], list[str]]:
    """Synthetic concept names: ``{name: label}`` for class anchors, list of agnostic names."""
    cs = {f"class{c}_concept{j:02d}": c for c in range(spec.num_classes) for j in range(spec.anchors_per_class)}
    ca = [f"agnostic{j:02d}" for j in range(spec.num_agnostic)]
    return cs, ca


def tumor_count(n_patches: int, tumor_fraction: float) -> int:
    return min(n_patches, max(1, int(round(n_patches * tumor_fraction))))


def site_labels(spec: WorldSpec, site_index: int) -> np.ndarray:
    """Bag labels for one site, in bag order."""
    k, n = spec.num_classes, spec.bags_per_site
    if spec.site_class_skew == 0.0:
        return np.arange(n) % k
    major = site_index % k
    n_major = int(round(n * (1.0 / k + spec.site_class_skew * (1.0 - 1.0 / k))))
    others = [c for c in range(k) if c != major] or [major]
    labels = np.array([major] * n_major + [others[i % len(others)] for i in range(n - n_major)])
    return labels[_rng(int(spec.seed), _BAGS, site_index).permutation(n)]


def generate_world(spec: WorldSpec) -> tuple[ConceptBank, list[Bag], GroundTruth]:
    spec.validate()
    seed = int(spec.seed)
    rng = _rng(seed, _ANCHORS)
    cs_anchors = _unit_rows(rng, spec.num_classes * spec.anchors_per_class, spec.dim)
    ca_anchors = _unit_rows(rng, spec.num_agnostic, spec.dim)
    cs_names, ca_names = concept_names(spec)
    bank = ConceptBank.from_anchors(
        {name: (lab, cs_anchors[i]) for i, (name, lab) in enumerate(cs_names.items())},
        dict(zip(ca_names, ca_anchors)),
    )

    offsets = {}
    for s_idx, site in enumerate(spec.sites):
        direction = _unit_rows(_rng(seed, _SITES, s_idx), 1, spec.dim)[0]
        offsets[site] = spec.nuisance_strength * direction

    bags, masks, choices = [], {}, {}
    lo, hi = spec.patches_per_bag
    per_class = cs_anchors.reshape(spec.num_classes, spec.anchors_per_class, spec.dim)
    for s_idx, site in enumerate(spec.sites):
        labels = site_labels(spec, s_idx)
        for b_idx in range(spec.bags_per_site):
            brng = _rng(seed, _BAGS, s_idx, b_idx)
            label = int(labels[b_idx])
            n = int(brng.integers(lo, hi + 1))
            mask = np.zeros(n, dtype=bool)
            mask[brng.permutation(n)[: tumor_count(n, spec.tumor_fraction)]] = True
            feats = np.empty((n, spec.dim), dtype=np.float64)
            choice = np.empty(n, dtype=np.int64)
            for p in range(n):
                prng = _rng(seed, _PATCHES, s_idx, b_idx, p)
                if mask[p]:
                    choice[p] = prng.integers(spec.anchors_per_class)
                    center = per_class[label, choice[p]]
                else:
                    choice[p] = prng.integers(spec.num_agnostic)
                    center = ca_anchors[choice[p]]
                feats[p] = center + spec.noise_sigma * prng.standard_normal(spec.dim) + offsets[site]
            bag_id = f"TCGA-{site}-{b_idx:04d}-01Z"
            bags.append(Bag(bag_id, feats.astype(np.float32), label, site))
            masks[bag_id] = mask
            choices[bag_id] = choice
    return bank, bags, GroundTruth(masks, offsets, choices)


def template_embeddings(bank: ConceptBank, num_templates: int, jitter: float, seed: int) -> dict[str, np.ndarray]:
    """Fake per-template text embeddings scattered around each anchor.

    Stands in for a text encoder run over a prompt-template list.
    """
    out = {}
    for i, (name, vec) in enumerate(zip(bank.names, bank.all_vectors)):
        rng = _rng(int(seed), _TEMPLATES, i)
        out[name] = vec + jitter * rng.standard_normal((num_templates, bank.dim))
    return out


@dataclass(frozen=True)
class GaussianPair:
    rho: float
    dim: int = 1

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise DomainError(f"|rho| must be < 1, got {self.rho}")
        if self.dim < 1:
            raise ValidationError(f"dim must be positive, got {self.dim}")

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        a = rng.standard_normal((n, self.dim))
        b = self.rho * a + math.sqrt(1.0 - self.rho**2) * rng.standard_normal((n, self.dim))
        return a, b


def gaussian_mi_oracle(pair: GaussianPair | float, dim: int = 1) -> float:
    """Mutual information (nats) of ``dim`` independent bivariate Gaussians with correlation rho."""
    if not isinstance(pair, GaussianPair):
        pair = GaussianPair(float(pair), dim)
    return -0.5 * math.log1p(-pair.rho**2) * pair.dim


def linear_gaussian_channel_mi(weight_matrix, noise_sigma: float) -> float:
    """I(x; Wx + eps) for x ~ N(0, I) and eps ~ N(0, noise_sigma^2 I)."""
    w = np.atleast_2d(np.asarray(weight_matrix, dtype=np.float64))
    if not np.all(np.isfinite(w)):
        raise ValidationError("weight_matrix contains non-finite entries")
    if not (noise_sigma > 0 and math.isfinite(noise_sigma)):
        raise ValidationError(f"noise_sigma must be positive, got {noise_sigma}")
    gram = np.eye(w.shape[0]) + (w @ w.T) / noise_sigma**2
    sign, logdet = np.linalg.slogdet(gram)
    return 0.5 * logdet
