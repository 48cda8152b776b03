"""Joint training of encoder, interference layer and MIL head; checkpoints."""
from __future__ import annotations

import base64
import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .bags import Bag
from .cfi import SnnLayer, enhance, interference, similarity_vector
from .cib import CalibratedSample, PimConfig, StochasticEncoder, encode, pim_loss, sim_loss
from .concepts import ConceptBank, select_representative
from .errors import FormatError, NumericError, ValidationError
from .mil import AttentionHead, classification_loss

log = logging.getLogger(__name__)

# mode -> (uses encoder, PIM term, SIM term, MIL input)
MODES: dict[str, tuple[bool, bool, bool, str]] = {
    "baseline": (False, False, False, "x"),
    "pim_only": (True, True, False, "alpha"),
    "sim_only": (True, False, True, "alpha"),
    "pim_sim": (True, True, True, "alpha"),
    "cfi_only": (True, False, False, "beta"),
    "full": (True, True, True, "alpha+beta"),
}
TABLE3_MODES = tuple(MODES)


@dataclass
class TrainConfig:
    mode: str = "full"
    lambda_p: float = 1.0
    lambda_s: float = 30.0
    k: int = 10
    tau: float = 0.07
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_bags: int = 1
    seed: int = 0
    attn_hidden: int = 128
    encoder_hidden: list[int] | None = None
    normalize: bool = True
    positive: str = "mean"
    sample_in_train: bool = True
    grad_clip: float = 5.0
    init_logvar: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        for name in ("lambda_p", "lambda_s"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be a non-negative real, got {v!r}")
        for name in ("k", "epochs", "batch_bags", "attn_hidden"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        for name in ("tau", "learning_rate", "grad_clip"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be positive, got {v!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        PimConfig(self.tau, self.normalize, self.positive)

    @property
    def uses_encoder(self) -> bool:
        return MODES[self.mode][0]

    @property
    def uses_pim(self) -> bool:
        return MODES[self.mode][1]

    @property
    def uses_sim(self) -> bool:
        return MODES[self.mode][2]

    @property
    def mil_input(self) -> str:
        return MODES[self.mode][3]

    @property
    def pim(self) -> PimConfig:
        return PimConfig(self.tau, self.normalize, self.positive)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**data)


def total_loss(l_ce, l_pim, l_sim, cfg: TrainConfig):
    """Weighted objective ``CE + lambda_p * PIM + lambda_s * SIM`` (absent terms count 0)."""
    total = l_ce
    if cfg.uses_pim:
        total = total + cfg.lambda_p * l_pim
    if cfg.uses_sim:
        total = total + cfg.lambda_s * l_sim
    return total


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


class CateModel(nn.Module):
    """Encoder + interference layer + gated-attention head, wired per training mode."""

    def __init__(self, cfg: TrainConfig, dim: int, bank: ConceptBank, num_classes: int | None = None):
        super().__init__()
        if bank.dim != dim:
            raise ValidationError(f"concept bank dim {bank.dim} != feature dim {dim}")
        self.mode = cfg.mode
        self.dim = dim
        self.num_classes = num_classes or bank.num_classes
        self.encoder = StochasticEncoder(dim, cfg.encoder_hidden, cfg.init_logvar) if cfg.uses_encoder else None
        self.snn = SnnLayer(bank.m, dim) if "beta" in cfg.mil_input else None
        in_dim = {"x": dim, "alpha": dim, "beta": dim, "alpha+beta": 2 * dim}[cfg.mil_input]
        self.head = AttentionHead(in_dim, self.num_classes, cfg.attn_hidden)
        self.register_buffer("cs_anchors", torch.tensor(bank.cs_vectors, dtype=torch.float32))
        self.register_buffer("all_anchors", torch.tensor(bank.all_vectors, dtype=torch.float32))
        self.register_buffer("cs_labels", torch.tensor(bank.cs_labels, dtype=torch.long))
        positives = np.stack([bank.positive_anchor(c) for c in range(self.num_classes)])
        self.register_buffer("positives", torch.as_tensor(positives, dtype=torch.float32))
        self._mil_input = cfg.mil_input

    def calibrate(self, x: torch.Tensor, train_mode: bool, generator=None) -> CalibratedSample | None:
        if self.encoder is None:
            return None
        return encode(self.encoder, x, generator, train_mode)

    def features(self, x: torch.Tensor, sample: CalibratedSample | None) -> torch.Tensor:
        if self._mil_input == "x":
            return x
        alpha = sample.alpha
        if self._mil_input == "alpha":
            return alpha
        if self._mil_input == "beta":
            return interference(similarity_vector(alpha, self.cs_anchors), self.snn)
        return enhance(alpha, self.cs_anchors, self.snn)

    def forward(self, x: torch.Tensor, train_mode: bool = False, generator=None):
        sample = self.calibrate(x, train_mode, generator)
        logits, attention = self.head(self.features(x, sample))
        return logits, attention, sample


def build_model(cfg: TrainConfig, dim: int, bank: ConceptBank, num_classes: int | None = None) -> CateModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(int(cfg.seed), 1))
        model = CateModel(cfg, dim, bank, num_classes)
    return model


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    epoch: int
    rng_state: bytes
    adam_step: int = 0
    adam_state: dict[str, np.ndarray] = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[dict]
    steps: list[dict]
    best_state: dict[str, torch.Tensor] | None = None
    best_epoch: int | None = None
    val_history: list[float] = field(default_factory=list)
    model: CateModel | None = None


def _step_losses(model: CateModel, cfg: TrainConfig, x, label, selected, generator):
    sample = model.calibrate(x, cfg.sample_in_train, generator)
    logits, _ = model.head(model.features(x, sample))
    l_ce = classification_loss(logits, label)
    zero = torch.zeros((), dtype=x.dtype)
    l_pim = zero
    if cfg.uses_pim:
        own = model.cs_anchors[model.cs_labels == label]
        l_pim = pim_loss(sample, model.all_anchors, model.positives[label], selected, cfg.pim, own)
    l_sim = sim_loss(sample) if cfg.uses_sim else zero
    return l_ce, l_pim, l_sim


def train(
    bags: Sequence[Bag],
    bank: ConceptBank,
    cfg: TrainConfig,
    val_bags: Sequence[Bag] | None = None,
    resume: Checkpoint | None = None,
    score_fn: Callable[[np.ndarray, np.ndarray], object] | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (or until ``stop_epoch``), one bag per step by default.

    If ``val_bags`` is given, the parameters with the best validation score
    (``score_fn(labels, probs)``, any orderable value; AUC by default) are kept in
    ``best_state``. Ties keep the earlier epoch.
    """
    if not bags:
        raise ValidationError("no training bags")
    dim = bags[0].dim
    if any(b.dim != dim for b in bags):
        raise ValidationError("training bags have inconsistent feature dims")
    if bank.dim != dim:
        raise ValidationError(f"concept bank dim {bank.dim} != feature dim {dim}")
    num_classes = bank.num_classes
    model = build_model(cfg, dim, bank, num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(derive_seed(int(cfg.seed), 2))
    start_epoch, curve = 0, []
    if resume is not None:
        start_epoch, curve = restore(resume, model, optimizer, generator), list(resume.curve)

    xs = [torch.from_numpy(b.features) for b in bags]
    selections = [
        select_representative(b.features, bank, b.label, cfg.k) if cfg.uses_pim else None for b in bags
    ]
    if score_fn is None:
        from .evalkit import auc_from_probs as score_fn
    best_score, best_state, best_epoch, val_history = None, None, None, []
    steps: list[dict] = []
    params = [p for p in model.parameters()]
    end_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    step = start_epoch * len(bags)
    for epoch in range(start_epoch, end_epoch):
        model.train()
        order = np.random.default_rng([int(cfg.seed), 3, epoch]).permutation(len(bags))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_bags):
            chunk = order[start : start + cfg.batch_bags]
            optimizer.zero_grad(set_to_none=True)
            for i in chunk:
                l_ce, l_pim, l_sim = _step_losses(model, cfg, xs[i], bags[i].label, selections[i], generator)
                loss = total_loss(l_ce, l_pim, l_sim, cfg)
                rec = {"epoch": epoch, "step": step, "ce": l_ce.item(), "pim": l_pim.item(), "sim": l_sim.item()}
                rec["total"] = rec["ce"] + (cfg.lambda_p * rec["pim"] if cfg.uses_pim else 0.0) + (
                    cfg.lambda_s * rec["sim"] if cfg.uses_sim else 0.0
                )
                if not math.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: ce={rec['ce']} pim={rec['pim']} sim={rec['sim']}"
                    )
                (loss / len(chunk)).backward()
                steps.append(rec)
                sums += (rec["ce"], rec["pim"], rec["sim"], rec["total"])
                step += 1
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
        means = sums / len(order)
        curve.append({"epoch": epoch, "ce": means[0], "pim": means[1], "sim": means[2], "total": means[3]})
        if val_bags:
            score = score_fn(np.array([b.label for b in val_bags]), predict_proba(model, val_bags))
            val_history.append(score)
            if best_score is None or score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d: %s", epoch, curve[-1])

    ckpt = snapshot(model, optimizer, generator, cfg, end_epoch, curve, bank)
    return TrainResult(ckpt, curve, steps, best_state, best_epoch, val_history, model)


@torch.no_grad()
def predict_proba(model: CateModel, bags: Sequence[Bag]) -> np.ndarray:
    """Class probabilities per bag (eval mode: alpha is the posterior mean)."""
    model.eval()
    out = []
    for b in bags:
        logits, _, _ = model(torch.from_numpy(b.features), train_mode=False)
        out.append(torch.softmax(logits.double(), dim=-1).numpy())
    return np.stack(out)


def snapshot(model, optimizer, generator, cfg, epoch, curve, bank) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    params = {n: p.detach().numpy().astype(np.float32).copy() for n, p in model.named_parameters()}
    adam_state, adam_step = {}, 0
    for n, p in zip(names, model.parameters()):
        st = optimizer.state.get(p)
        if st:
            adam_step = int(st["step"])
            adam_state[f"exp_avg.{n}"] = st["exp_avg"].numpy().astype(np.float32).copy()
            adam_state[f"exp_avg_sq.{n}"] = st["exp_avg_sq"].numpy().astype(np.float32).copy()
    meta = {"dim": model.dim, "num_classes": model.num_classes, "m": bank.m, "n": bank.n,
            "anchor_names": list(bank.names)}
    return Checkpoint(cfg, params, epoch, bytes(generator.get_state().numpy().tobytes()),
                      adam_step, adam_state, [dict(r) for r in curve], meta)


def restore(ckpt: Checkpoint, model: CateModel, optimizer=None, generator=None) -> int:
    """Load checkpoint state into live objects; returns the epoch to resume from."""
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.params):
        raise FormatError(f"checkpoint parameters {sorted(ckpt.params)} do not match model {sorted(own)}")
    with torch.no_grad():
        for n, p in own.items():
            p.copy_(torch.from_numpy(ckpt.params[n]))
    if optimizer is not None and ckpt.adam_state:
        sd = optimizer.state_dict()
        names = [n for n, _ in model.named_parameters()]
        sd["state"] = {
            i: {
                "step": torch.tensor(float(ckpt.adam_step)),
                "exp_avg": torch.from_numpy(ckpt.adam_state[f"exp_avg.{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.adam_state[f"exp_avg_sq.{n}"].copy()),
            }
            for i, n in enumerate(names)
        }
        optimizer.load_state_dict(sd)
    if generator is not None and ckpt.rng_state:
        generator.set_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
    return ckpt.epoch


def load_model(ckpt: Checkpoint, bank: ConceptBank) -> CateModel:
    model = build_model(ckpt.config, ckpt.meta.get("dim", bank.dim), bank, ckpt.meta.get("num_classes"))
    restore(ckpt, model)
    model.eval()
    return model


# -- checkpoint container ---------------------------------------------------
CKPT_MAGIC = b"CATE"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Binary layout: b"CATE" | u32 version | u64 header length | JSON header | float32 LE blob.

    The header's ``tensors`` table lists name, shape and byte offset into the blob.
    """
    table, blobs, offset = [], [], 0
    for prefix, group in (("param", ckpt.params), ("adam", ckpt.adam_state)):
        for name in sorted(group):
            arr = np.ascontiguousarray(group[name], dtype="<f4")
            raw = arr.tobytes()
            table.append({"name": f"{prefix}:{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam_step,
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "curve": ckpt.curve,
        "meta": ckpt.meta,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("checkpoint file truncated")
    magic, version, head_len = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[_CKPT_HEAD.size : _CKPT_HEAD.size + head_len].decode("utf-8"))
    base = _CKPT_HEAD.size + head_len
    params, adam = {}, {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(buf):
            raise FormatError(f"tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(entry["shape"]).astype(np.float32)
        prefix, name = entry["name"].split(":", 1)
        (params if prefix == "param" else adam)[name] = arr
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        params=params,
        epoch=int(header["epoch"]),
        rng_state=base64.b64decode(header["rng_state"]),
        adam_step=int(header["adam_step"]),
        adam_state=adam,
        curve=header["curve"],
        meta=header["meta"],
    )


def write_curve_csv(curve: list[dict], path: str | Path) -> None:
    lines = ["epoch,ce,pim,sim,total"]
    lines += [f"{r['epoch']},{r['ce']:.6g},{r['pim']:.6g},{r['sim']:.6g},{r['total']:.6g}" for r in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
