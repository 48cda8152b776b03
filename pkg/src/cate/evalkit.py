"""Site-aware IND/OOD protocol: splits, Monte-Carlo CV, AUC/ACC, reports and ablations."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .bags import Bag
from .concepts import ConceptBank
from .errors import ParseError, UndefinedMetricError, ValidationError
from .trainer import TrainConfig, derive_seed, predict_proba, train

log = logging.getLogger(__name__)

METRICS = ("ind_auc", "ind_acc", "ood_auc", "ood_acc")


def parse_site(barcode: str) -> str:
    """Tissue source site of a sample barcode, e.g. ``"TCGA-D8-A1XQ-01Z" -> "D8"``."""
    if not isinstance(barcode, str) or not barcode:
        raise ParseError("barcode must be a non-empty string", 0)
    first = barcode.find("-")
    if first <= 0:
        raise ParseError(f"barcode {barcode!r} lacks a PROJECT- prefix", max(first, 0) if first == 0 else len(barcode))
    second = barcode.find("-", first + 1)
    end = len(barcode) if second == -1 else second
    site = barcode[first + 1 : end]
    if not site:
        raise ParseError(f"barcode {barcode!r} has an empty site field", first + 1)
    if second == -1:
        raise ParseError(f"barcode {barcode!r} has no field after the site", len(barcode))
    return site


# -- metrics ----------------------------------------------------------------
def auc(scores, labels) -> float:
    """ROC AUC as the normalized Mann-Whitney U (ties count one half).

    With 2-D ``scores`` (n, K) and integer labels, returns the macro one-vs-rest AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2:
        if scores.shape[1] == 2:
            return auc(scores[:, 1], labels == 1)
        return float(np.mean([auc(scores[:, c], labels == c) for c in range(scores.shape[1])]))
    labels = labels.astype(bool)
    if scores.shape != labels.shape:
        raise ValidationError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    return float(kernels.mann_whitney_auc(scores, labels))


def auc_from_probs(labels, probs) -> float:
    return auc(np.asarray(probs), np.asarray(labels))


def accuracy(labels, probs) -> float:
    return float(np.mean(np.argmax(np.asarray(probs), axis=1) == np.asarray(labels)))


def selection_score(labels, probs) -> tuple[float, float]:
    """Validation ranking key: AUC first, mean log-likelihood breaks ties.

    A single-class validation split has no AUC and ranks on likelihood alone.
    """
    labels = np.asarray(labels)
    p = np.asarray(probs)[np.arange(len(labels)), labels]
    loglik = float(np.mean(np.log(np.clip(p, 1e-300, 1.0))))
    try:
        return auc_from_probs(labels, probs), loglik
    except UndefinedMetricError:
        return -np.inf, loglik


# -- splits -----------------------------------------------------------------
@dataclass
class SplitPlan:
    ind_sites: list[str]
    ood_sites: list[str] = field(default_factory=list)
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    runs: int = 10
    master_seed: int = 0
    site_preserved: bool = False
    stratify: bool = False

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {self.fractions}")
        if set(self.ind_sites) & set(self.ood_sites):
            raise ValidationError("ind_sites and ood_sites overlap")
        if not self.ind_sites:
            raise ValidationError("ind_sites is empty")
        if self.runs < 1:
            raise ValidationError(f"runs must be positive, got {self.runs}")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test_ind: np.ndarray
    test_ood: np.ndarray


def split_sizes(total: int, fractions: Sequence[float]) -> list[int]:
    """Floor each share, then hand out the remainder one by one starting with train."""
    sizes = [int(np.floor(total * f + 1e-9)) for f in fractions]
    i = 0
    while sum(sizes) < total:
        if fractions[i % len(sizes)] > 0:
            sizes[i % len(sizes)] += 1
        i += 1
    return sizes


def make_splits(bags: Sequence[Bag], plan: SplitPlan) -> list[Split]:
    sites = np.array([b.site for b in bags])
    ind = np.flatnonzero(np.isin(sites, plan.ind_sites))
    ood = np.flatnonzero(np.isin(sites, plan.ood_sites))
    if ind.size == 0:
        raise ValidationError("no bags from the IND sites")
    missing = [s for s in plan.ind_sites if s not in set(sites[ind])]
    if missing:
        raise ValidationError(f"IND sites without bags: {missing}")
    splits = []
    for r in range(plan.runs):
        rng = np.random.default_rng(np.random.SeedSequence(int(plan.master_seed), spawn_key=(r,)))
        if plan.site_preserved:
            order = rng.permutation(plan.ind_sites)
            n_tr, n_va, n_te = split_sizes(len(order), plan.fractions)
            groups = [order[:n_tr], order[n_tr : n_tr + n_va], order[n_tr + n_va :]]
            parts = [ind[np.isin(sites[ind], g)] for g in groups]
        elif plan.stratify:
            # partition each (site, label) stratum separately, then merge
            parts = [[], [], []]
            keys = sorted({(bags[i].site, bags[i].label) for i in ind})
            for key in keys:
                members = np.array([i for i in ind if (bags[i].site, bags[i].label) == key])
                perm = members[rng.permutation(members.size)]
                n_tr, n_va, _ = split_sizes(perm.size, plan.fractions)
                for part, chunk in zip(parts, (perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :])):
                    part.extend(chunk.tolist())
            parts = [np.array(p, dtype=np.int64) for p in parts]
        else:
            perm = ind[rng.permutation(ind.size)]
            n_tr, n_va, _ = split_sizes(ind.size, plan.fractions)
            parts = [perm[:n_tr], perm[n_tr : n_tr + n_va], perm[n_tr + n_va :]]
        splits.append(Split(*(np.sort(p) for p in parts), test_ood=ood.copy()))
    return splits


# -- reports ----------------------------------------------------------------
def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


@dataclass
class EvalReport:
    runs: list[dict]
    fingerprint: str
    label: str = ""
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for key in METRICS:
            vals = [r[key] for r in self.runs if r.get(key) is not None]
            if vals:
                arr = np.array(vals, dtype=np.float64)
                out[key] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0}
        return out

    def mean(self, key: str) -> float:
        return self.aggregate[key]["mean"]

    def std(self, key: str) -> float:
        return self.aggregate[key]["std"]

    def to_dict(self) -> dict:
        return {"label": self.label, "fingerprint": self.fingerprint, "config": self.config,
                "runs": self.runs, "aggregate": self.aggregate}

    def to_json(self) -> str:
        def clean(obj):
            if isinstance(obj, float):
                return float(_fmt(obj))
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, list):
                return [clean(v) for v in obj]
            return obj

        return json.dumps(clean(self.to_dict()), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(runs=d["runs"], fingerprint=d["fingerprint"], label=d.get("label", ""), config=d.get("config", {}))


def fingerprint(cfg: TrainConfig, plan: SplitPlan) -> str:
    blob = json.dumps({"train": asdict(cfg), "plan": asdict(plan)}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _metrics(model, bags: Sequence[Bag], idx: np.ndarray) -> tuple[float | None, float | None]:
    if idx.size == 0:
        return None, None
    sub = [bags[i] for i in idx]
    labels = np.array([b.label for b in sub])
    probs = predict_proba(model, sub)
    try:
        a = auc_from_probs(labels, probs)
    except UndefinedMetricError:
        a = None
    return a, accuracy(labels, probs)


def run_single(bags: Sequence[Bag], bank: ConceptBank, cfg: TrainConfig, split: Split, run: int, master_seed: int) -> dict:
    run_cfg = cfg.replace(seed=derive_seed(int(master_seed), run, int(cfg.seed)))
    train_bags = [bags[i] for i in split.train]
    val_bags = [bags[i] for i in split.val]
    result = train(train_bags, bank, run_cfg, val_bags=val_bags or None, score_fn=selection_score)
    model = result.model
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    ind_auc, ind_acc = _metrics(model, bags, split.test_ind)
    ood_auc, ood_acc = _metrics(model, bags, split.test_ood)
    return {"run": run, "seed": run_cfg.seed, "best_epoch": result.best_epoch,
            "ind_auc": ind_auc, "ind_acc": ind_acc, "ood_auc": ood_auc, "ood_acc": ood_acc}


def run_experiment(
    bags: Sequence[Bag], bank: ConceptBank, train_cfg: TrainConfig, plan: SplitPlan, label: str = "", n_jobs: int = 1
) -> EvalReport:
    """Monte-Carlo CV: per run train on IND-train, pick the best-val-AUC epoch, test on IND and OOD."""
    if bags and bank.dim != bags[0].dim:
        raise ValidationError(f"concept bank dim {bank.dim} != feature dim {bags[0].dim}")
    splits = make_splits(bags, plan)
    jobs = list(enumerate(splits))
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(n_jobs) as pool:
            futures = [pool.submit(run_single, bags, bank, train_cfg, s, r, plan.master_seed) for r, s in jobs]
            runs = []
            for r, fut in enumerate(futures):
                try:
                    runs.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"run {r} failed: {exc}") from exc
    else:
        runs = []
        for r, s in jobs:
            try:
                runs.append(run_single(bags, bank, train_cfg, s, r, plan.master_seed))
            except Exception as exc:
                raise RuntimeError(f"run {r} failed: {exc}") from exc
            log.info("%s run %d: %s", label or train_cfg.mode, r, runs[-1])
    return EvalReport(runs, fingerprint(train_cfg, plan), label or train_cfg.mode, asdict(train_cfg))


# -- ablations --------------------------------------------------------------
PAPER_DEFAULTS = {"k": 10, "lambda_s": 30.0}


@dataclass
class AblationTable:
    rows: list[tuple[str, TrainConfig, EvalReport]]
    parameter: str = "mode"

    def __len__(self):
        return len(self.rows)

    def report(self, label: str) -> EvalReport:
        for lab, _, rep in self.rows:
            if lab == label:
                return rep
        raise KeyError(label)

    def to_csv(self) -> str:
        head = ["config", "parameter", "value", "paper_default"]
        for key in METRICS:
            head += [f"{key}_mean", f"{key}_std"]
        head.append("ood_auc_delta")
        lines = [",".join(head)]
        ref = self.rows[0][2].aggregate.get("ood_auc", {}).get("mean") if self.rows else None
        for lab, cfg, rep in self.rows:
            agg = rep.aggregate
            value = getattr(cfg, self.parameter)
            default = self.parameter in PAPER_DEFAULTS and value == PAPER_DEFAULTS[self.parameter]
            cells = [lab, self.parameter, str(value), "yes" if default else ""]
            for key in METRICS:
                cells += [_fmt(agg.get(key, {}).get("mean")), _fmt(agg.get(key, {}).get("std"))]
            ood = agg.get("ood_auc", {}).get("mean")
            cells.append(_fmt(ood - ref) if ood is not None and ref is not None else "")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(self.to_csv(), encoding="utf-8")
        for lab, _, rep in self.rows:
            (out / f"report_{lab}.json").write_text(rep.to_json() + "\n", encoding="utf-8")


def ablate(
    bags: Sequence[Bag],
    bank: ConceptBank,
    base_cfg: TrainConfig,
    plan: SplitPlan,
    modes: Iterable[str] | None = None,
    sweep: tuple[str, Sequence] | None = None,
    n_jobs: int = 1,
) -> AblationTable:
    """One report per mode (default: the six ablation modes) or per value of a swept parameter."""
    if sweep is not None:
        name, values = sweep
        if not hasattr(base_cfg, name):
            raise ValidationError(f"unknown sweep parameter {name!r}")
        cfgs = [(f"{name}={v:g}" if isinstance(v, float) else f"{name}={v}", base_cfg.replace(**{name: v})) for v in values]
        parameter = name
    else:
        from .trainer import TABLE3_MODES

        cfgs = [(m, base_cfg.replace(mode=m)) for m in (modes or TABLE3_MODES)]
        parameter = "mode"
    if not cfgs:
        raise ValidationError("empty ablation grid")
    rows = [(lab, cfg, run_experiment(bags, bank, cfg, plan, label=lab, n_jobs=n_jobs)) for lab, cfg in cfgs]
    return AblationTable(rows, parameter)
