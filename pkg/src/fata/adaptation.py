"""Pretraining, the online adaptation loop, and selection analytics."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augmentation import AugState, channel_mean, delta_sigma, ema_update, fata_augment
from .losses import (
    REDUCTIONS,
    cross_entropy_hard,
    entropy_min_loss,
    fata_loss,
    mse_aug_loss,
    simple_aug_loss,
    simple_ce_loss,
    total_loss,
)
from .model import FataModel
from .nn import SGD, LayerStack, adaptable_parameters
from .selection import SelectionConfig, entropy, select, weight

log = logging.getLogger(__name__)

# method -> (uses the entropy-minimisation loss, augmentation loss or None)
METHODS: dict[str, tuple[bool, str | None]] = {
    "no_adapt": (False, None),
    "ent_min": (True, None),
    "ent_min+fata": (True, "fata"),
    "fata_only": (False, "fata"),
    "simple_aug": (True, "simple_aug"),
    "mse": (True, "mse"),
    "simple_ce": (True, "simple_ce"),
}
REPORT_SCHEMA_VERSION = 1


class NumericalFailure(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    method: str = "ent_min+fata"
    lr: float = 5e-4
    momentum: float = 0.9
    aug_position: int = 2
    sigma_n: float = 1.0
    lambda_ema: float = 0.95
    e0_frac: float = 0.5
    ew_frac: float = 0.4
    reduction: str = "batch_mean"
    ema_source: str = "all"
    mse_through_orig: bool = False
    norm_mode: str | None = None  # None: eval (source stats) for no_adapt, adapt otherwise
    collapse_window: int = 50
    collapse_threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.norm_mode not in (None, "adapt", "eval"):
            raise ValueError("norm_mode must be 'adapt', 'eval' or null")
        if self.ema_source not in ("all", "selected"):
            raise ValueError("ema_source must be 'all' or 'selected'")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be >= 0")

    @property
    def resolved_norm_mode(self) -> str:
        if self.norm_mode is not None:
            return self.norm_mode
        return "eval" if self.method == "no_adapt" else "adapt"

    def selection(self, num_classes: int) -> SelectionConfig:
        return SelectionConfig(num_classes, e0_frac=self.e0_frac, ew_frac=self.ew_frac)


# ---------------------------------------------------------------- model plumbing


def clone_stack(stack: LayerStack) -> LayerStack:
    copy = LayerStack(stack.config, rng=0)
    copy.load_snapshot(stack.snapshot())
    return copy


def configure_for_adaptation(stack: LayerStack) -> list:
    """Freeze everything except normalization affine parameters."""
    params = adaptable_parameters(stack)
    live = {id(p) for p in params}
    for p in stack.parameters():
        p.requires_grad = id(p) in live
        p.grad = None
    return params


def evaluate(stack: LayerStack, x: np.ndarray, y: np.ndarray, mode: str = "eval",
             batch_size: int = 256) -> float:
    model = FataModel(stack, aug_position=0, mode=mode)
    correct = 0
    for k in range(0, len(y), batch_size):
        correct += int((model.predict(x[k : k + batch_size]) == y[k : k + batch_size]).sum())
    return correct / max(len(y), 1)


def pretrain(stack: LayerStack, train: tuple[np.ndarray, np.ndarray], epochs: int = 20,
             lr: float = 0.02, batch_size: int = 64, momentum: float = 0.9,
             weight_decay: float = 5e-4, seed: int | np.random.SeedSequence = 0,
             val: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    """Supervised cross-entropy training of every parameter (in place)."""
    x, y = train
    params = stack.parameters()
    for p in params:
        p.requires_grad = True
    opt = SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    model = FataModel(stack, aug_position=0, mode="train")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total, seen = 0.0, 0
        for k in range(0, len(y), batch_size):
            idx = order[k : k + batch_size]
            if len(idx) < 2 and stack.config.norm == "batch":
                continue
            probs = model(x[idx])
            loss = T.mean(cross_entropy_hard(probs, y[idx]))
            if not math.isfinite(loss.item()):
                raise NumericalFailure(
                    f"pretraining diverged at epoch {epoch}, batch {k // batch_size}: loss={loss.item()}"
                )
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / max(seen, 1))
        log.debug("pretrain epoch %d loss %.4f", epoch, history[-1])
    summary = {"epochs": epochs, "loss_history": history, "train_accuracy": evaluate(stack, x, y)}
    if val is not None:
        summary["clean_accuracy"] = evaluate(stack, *val)
    return summary


# ---------------------------------------------------------------- one adaptation step


@dataclass
class Episode:
    """Mutable state of one online episode: model, EMA/noise state, optimizer."""

    model: FataModel
    aug: AugState
    cfg: AdaptConfig
    sel: SelectionConfig
    opt: SGD

    @classmethod
    def start(cls, stack: LayerStack, cfg: AdaptConfig, noise_seed=0) -> "Episode":
        params = configure_for_adaptation(stack)
        model = FataModel(stack, aug_position=cfg.aug_position, mode=cfg.resolved_norm_mode)
        channels = stack.config.widths[cfg.aug_position]
        aug = AugState(channels, lambda_ema=cfg.lambda_ema, sigma_n=cfg.sigma_n,
                       seed=noise_seed, ema_source=cfg.ema_source)
        opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum)
        return cls(model, aug, cfg, cfg.selection(stack.config.num_classes), opt)


def _aug_loss(kind: str, p_orig, p_aug, pseudo, ent, ep: Episode):
    red = ep.cfg.reduction
    if kind == "fata":
        return fata_loss(p_aug, pseudo, ent, ep.sel, red)
    if kind == "simple_aug":
        return simple_aug_loss(p_aug, ent, ep.sel, red)
    if kind == "mse":
        return mse_aug_loss(p_orig, p_aug, ent, ep.sel, red, through_orig=ep.cfg.mse_through_orig)
    return simple_ce_loss(p_orig, p_aug, ent, ep.sel, red)


def adapt_step(ep: Episode, x: np.ndarray, y: np.ndarray | None = None) -> dict:
    """One online step; predictions are recorded before the parameter update."""
    uses_tta, aug_kind = METHODS[ep.cfg.method]
    adapting = ep.cfg.method != "no_adapt"
    model = ep.model
    if not adapting:
        with T.no_grad():
            p_orig = model.forward_from(model.forward_to(x))
        z = None
    else:
        z = model.forward_to(x)
        p_orig = model.forward_from(z)
    ent = entropy(T.stop_gradient(p_orig)).data.astype(np.float64)
    mask = select(ent, ep.sel.e0)
    w = weight(ent, ep.sel.ew)
    preds = T.argmax(p_orig, axis=-1)

    l_tta = entropy_min_loss(p_orig, ep.sel, ep.cfg.reduction) if uses_tta else T.Tensor(0.0)
    l_aug = T.Tensor(0.0)
    if aug_kind is not None:
        rows = channel_mean(z)
        if ep.aug.ema_source == "selected":
            rows = rows[mask]
        if len(rows):
            ema_update(ep.aug, delta_sigma(rows))
        p_aug = model.forward_from(fata_augment(z, ep.aug))
        l_aug = _aug_loss(aug_kind, p_orig, p_aug, preds, ent, ep)
    loss = total_loss(l_tta, l_aug)
    values = (l_tta.item(), l_aug.item(), loss.item())
    # non-finite predictions count too: they select nothing, so the losses alone stay finite
    finite = all(math.isfinite(v) for v in values) and bool(np.isfinite(p_orig.data).all())
    updated = False
    if adapting and finite and loss.requires_grad and ep.opt.lr > 0:
        ep.opt.zero_grad()
        T.backward(loss)
        ep.opt.step()
        updated = True

    rec = {
        "batch_size": int(len(preds)),
        "l_tta": values[0],
        "l_fata": values[1],
        "total": values[2],
        "n_selected": int(mask.sum()),
        "mean_entropy": float(ent.mean()),
        "mean_weight_selected": float(w[mask].mean()) if mask.any() else 0.0,
        "finite": finite,
        "updated": updated,
        "degenerate_norm": model.degenerate_norm(),
        "delta_bar_mean": float(ep.aug.delta_bar.mean()) if aug_kind else None,
        "preds": [int(v) for v in preds],
        "mask": [bool(v) for v in mask],
    }
    if y is not None:
        correct = int((preds == y).sum())
        rec["n_correct"] = correct
        rec["batch_acc"] = correct / len(y)
        rec["labels"] = [int(v) for v in y]
    return rec


# ---------------------------------------------------------------- episodes and reports


@dataclass
class AdaptReport:
    steps: list[dict] = field(default_factory=list)
    num_classes: int = 0
    class_selected: list[int] = field(default_factory=list)
    class_seen: list[int] = field(default_factory=list)
    collapse_windows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return sum(s["batch_size"] for s in self.steps)

    @property
    def n_selected(self) -> int:
        return sum(s["n_selected"] for s in self.steps)

    @property
    def accuracy(self) -> float:
        n = self.n_samples
        return sum(s.get("n_correct", 0) for s in self.steps) / n if n else 0.0

    @property
    def fraction_selected(self) -> float:
        n = self.n_samples
        return self.n_selected / n if n else 0.0

    @property
    def nonfinite_steps(self) -> int:
        return sum(not s["finite"] for s in self.steps)

    def summary(self) -> dict:
        preds = np.concatenate([s["preds"] for s in self.steps]) if self.steps else np.zeros(0, int)
        freq = np.bincount(preds, minlength=self.num_classes) if len(preds) else np.zeros(1)
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "accuracy": self.accuracy,
            "n_steps": len(self.steps),
            "n_samples": self.n_samples,
            "n_selected": self.n_selected,
            "fraction_selected": self.fraction_selected,
            "nonfinite_steps": self.nonfinite_steps,
            "mean_entropy": float(np.mean([s["mean_entropy"] for s in self.steps])) if self.steps else 0.0,
            "max_class_prediction_share": float(freq.max() / max(len(preds), 1)),
            "collapse_flagged": bool(self.collapse_windows),
            "n_collapse_windows": len(self.collapse_windows),
            "class_selected": list(self.class_selected),
            "class_seen": list(self.class_seen),
            "config": self.config,
            "seed": self.seed,
            "meta": self.meta,
        }


class CollapseMonitor:
    """Flags windows of ``window`` steps where one class takes > ``threshold`` of predictions."""

    def __init__(self, num_classes: int, window: int = 50, threshold: float = 0.9) -> None:
        self.num_classes = num_classes
        self.window = window
        self.threshold = threshold
        self._steps: deque[np.ndarray] = deque(maxlen=window)

    def push(self, step: int, preds) -> dict | None:
        self._steps.append(np.bincount(np.asarray(preds, int), minlength=self.num_classes))
        if len(self._steps) < self.window:
            return None
        counts = np.sum(self._steps, axis=0)
        share = counts.max() / counts.sum()
        if share > self.threshold:
            return {"end_step": step, "class": int(counts.argmax()), "share": float(share)}
        return None


def run_scenario(stack: LayerStack, batches, cfg: AdaptConfig, noise_seed=0,
                 seed: int | None = None, meta: dict | None = None) -> AdaptReport:
    """Run one episode over ``batches`` (list of ``(x, y)``) on a copy of ``stack``."""
    ep = Episode.start(clone_stack(stack), cfg, noise_seed=noise_seed)
    C = stack.config.num_classes
    report = AdaptReport(num_classes=C, class_selected=[0] * C, class_seen=[0] * C,
                         config=asdict(cfg), seed=seed, meta=dict(meta or {}))
    monitor = CollapseMonitor(C, cfg.collapse_window, cfg.collapse_threshold)
    for k, (xb, yb) in enumerate(batches):
        rec = {"step": k, **adapt_step(ep, xb, yb)}
        if not rec["finite"]:
            log.warning("step %d: non-finite loss, update skipped", k)
        for label, chosen in zip(yb, rec["mask"]):
            report.class_seen[int(label)] += 1
            report.class_selected[int(label)] += int(chosen)
        flag = monitor.push(k, rec["preds"])
        if flag is not None:
            report.collapse_windows.append(flag)
        report.steps.append(rec)
    report.meta["final_state"] = {"aug": {"delta_bar": [float(v) for v in ep.aug.delta_bar],
                                          "initialized": ep.aug.initialized}}
    return report


def selection_histogram(class_selected, bucket_width: int = 5) -> dict:
    """Per-class selection counts grouped as 0, 1-5, 6-10, ...

    Accepts an ``AdaptReport`` or a per-class count sequence.
    """
    counts = list(class_selected.class_selected if isinstance(class_selected, AdaptReport)
                  else class_selected)
    top = max(counts) if counts else 0
    n_buckets = 1 + math.ceil(top / bucket_width) if top else 1
    buckets = []
    for b in range(n_buckets):
        lo, hi = (0, 0) if b == 0 else ((b - 1) * bucket_width + 1, b * bucket_width)
        buckets.append({"lo": lo, "hi": hi, "label": str(lo) if b == 0 else f"{lo}-{hi}",
                        "classes": sum(lo <= c <= hi for c in counts)})
    return {"per_class": {str(k): int(c) for k, c in enumerate(counts)}, "buckets": buckets}


def histogram_from_steps(steps: list[dict], num_classes: int) -> list[int]:
    """Recompute per-class selection counts from raw step records."""
    counts = [0] * num_classes
    for s in steps:
        for label, chosen in zip(s["labels"], s["mask"]):
            counts[label] += int(chosen)
    return counts


# ---------------------------------------------------------------- report files


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_report(report: AdaptReport, out_dir: str | Path, stem: str) -> dict[str, Path]:
    """``<stem>.steps.jsonl``, ``<stem>.summary.json`` and ``<stem>.hist.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "steps": out_dir / f"{stem}.steps.jsonl",
        "summary": out_dir / f"{stem}.summary.json",
        "hist": out_dir / f"{stem}.hist.csv",
    }
    with paths["steps"].open("w", encoding="utf-8", newline="\n") as fh:
        for rec in report.steps:
            fh.write(_dumps({"schema_version": REPORT_SCHEMA_VERSION, **rec}) + "\n")
    paths["summary"].write_text(
        json.dumps(report.summary(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with paths["hist"].open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "selected", "seen"])
        for k, (sel, seen) in enumerate(zip(report.class_selected, report.class_seen)):
            writer.writerow([k, sel, seen])
    return paths


def read_steps(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
