"""End-to-end mini-batch SGD over the composed smoothing/classification graph.

Each mini-batch holds all volumes of one (subject, noise level) group.  The
forward pass per volume is: cached noise feature -> predicted width ->
filter -> separable smoothing; the batch then goes through the standardized
sigmoid classifier.  Backward runs the exact chain rule down to the
width-predicting weights, with plain SGD updates, validation-based early
stopping, and an optional logarithmic grid search over (lr, lambda).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classifier, params_net
from .conv3d import convolve_separable
from .errors import DataError, NumericalError
from .gaussian_filter import (
    apply_degenerate_policy,
    build_filter,
    filter_radius,
    sigma_to_fwhm_mm,
)
from .volume_io import DatasetManifest, read_manifest, read_volume

DEFAULT_LR_GRID = (1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_LAMBDA_GRID = (0.0, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    lambda_l2: float = 0.0
    max_epochs: int = 200
    patience: int = 10
    bump_probability: float = 0.5
    truncation: float = 4.0
    seed: int = 0
    width_m: int = 50
    fixed_sigma: float | None = None  # bypass the width network when set
    lr_grid: tuple = DEFAULT_LR_GRID
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID

    def validate(self):
        if self.learning_rate < 0 or self.lambda_l2 < 0:
            raise DataError("learning rate and lambda must be >= 0")
        if not self.lr_grid or not self.lambda_grid:
            raise DataError("search grids must be non-empty")


@dataclass
class MiniBatch:
    subject_id: str
    noise_level: float
    split: str
    volumes: list
    labels: np.ndarray
    features: np.ndarray  # cached noise features, one per volume
    voxel_size_mm: float = 3.0

    @property
    def size(self) -> int:
        return len(self.volumes)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # rows of per-epoch metrics
    best_epoch: int = -1
    stopped_epoch: int = -1
    test_accuracy: float = float("nan")
    per_noise: dict = field(default_factory=dict)  # noise -> dict of metrics
    clamp_events: int = 0
    fit_clamp_events: int = 0
    bump_events: int = 0
    config: TrainConfig | None = None

    def epochs_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy"]
        for row in self.epochs:
            lines.append(f"{row['epoch']},{row['train_loss']:.9g},"
                         f"{row['val_loss']:.9g},{row['val_accuracy']:.9g}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = []
        lines.append(f"best epoch: {self.best_epoch}  stopped after epoch: {self.stopped_epoch}")
        lines.append(f"bump events: {self.bump_events}  preactivation clamps: "
                     f"{self.clamp_events}  width-fit clamps: {self.fit_clamp_events}")
        lines.append("")
        lines.append("noise     accuracy   mean sigma_f   mean FWHM (mm)")
        for noise in sorted(self.per_noise):
            m = self.per_noise[noise]
            if "mean_sigma" in m:
                lines.append(f"{noise:<9g} {m['accuracy']:<10.3f} "
                             f"{m['mean_sigma']:<14.4f} ({m['mean_fwhm_mm']:.1f})")
            else:
                lines.append(f"{noise:<9g} {m['accuracy']:<10.3f} -              -")
        lines.append("")
        lines.append(f"overall test accuracy: {self.test_accuracy:.3f}")
        return "\n".join(lines) + "\n"


def load_dataset(manifest_path, data_dir=None) -> list[MiniBatch]:
    """Read a manifest and its volumes into per-(subject, noise) groups,
    with the per-volume noise features precomputed."""
    manifest = read_manifest(manifest_path)
    base = Path(data_dir) if data_dir is not None else Path(manifest_path).parent
    return group_batches(manifest, base)


def group_batches(manifest: DatasetManifest, base_dir) -> list[MiniBatch]:
    groups = {}
    for e in manifest.entries:
        groups.setdefault((e.subject_id, e.noise_level), []).append(e)
    batches = []
    for (sid, noise), entries in sorted(groups.items()):
        vols, labels, feats = [], [], []
        for e in entries:
            v = read_volume(Path(base_dir) / e.path)
            vols.append(v.data)
            labels.append(e.label)
            feats.append(params_net.noise_feature(v.data))
        batches.append(MiniBatch(sid, noise, manifest.split[sid], vols,
                                 np.array(labels, dtype=np.float64),
                                 np.array(feats), v.voxel_size_mm))
    return batches


def make_batches(batches: list[MiniBatch], seed: int,
                 split: str = "train") -> list[MiniBatch]:
    """Select one split's groups in a seed-shuffled order; membership is fixed."""
    selected = [b for b in batches if b.split == split]
    for b in selected:
        if b.size < 2:
            raise DataError(
                f"group ({b.subject_id}, {b.noise_level}) has {b.size} volume(s); "
                "batch standardization needs >= 2")
    order = np.random.default_rng(seed).permutation(len(selected))
    return [selected[i] for i in order]


def _max_sigma_for(dims, t: float) -> float:
    # largest width whose filter still fits the volume (odd side <= min dim)
    r_max = (min(dims) - 1) // 2
    return (2.0 * r_max + 1.4) / t


@dataclass
class _Counters:
    clamp: params_net.ClampStats = field(default_factory=params_net.ClampStats)
    fit_clamps: int = 0
    bumps: int = 0


def _forward_batch(batch: MiniBatch, pnw, cw, cfg: TrainConfig, training: bool,
                   rng, counters: _Counters):
    """Smooth every volume with its own predicted (or fixed) width, then
    classify the batch.  Returns everything backward needs."""
    sigmas, filters, smoothed = [], [], []
    max_sigma = _max_sigma_for(batch.volumes[0].shape, cfg.truncation)
    for x, feat in zip(batch.volumes, batch.features):
        if cfg.fixed_sigma is not None:
            sigma = cfg.fixed_sigma
            fit_clamped = False
        else:
            sigma = params_net.map_to_sigma(float(feat), pnw, counters.clamp)
            bumped = apply_degenerate_policy(sigma, cfg.truncation,
                                             cfg.bump_probability, training, rng)
            if bumped != sigma:
                counters.bumps += 1
            sigma = bumped
            fit_clamped = sigma > max_sigma
            if fit_clamped:
                counters.fit_clamps += 1
                sigma = max_sigma
        filt = build_filter(sigma, cfg.truncation)
        sigmas.append((sigma, fit_clamped))
        filters.append(filt)
        smoothed.append(convolve_separable(x, filt.profile_1d))
    probs, stats, cache = classifier.forward(smoothed, cw)
    data_loss = classifier.bce_loss(probs, batch.labels)
    penalty, pen_grad = classifier.l2_penalty(cw, cfg.lambda_l2)
    return {
        "sigmas": sigmas, "filters": filters, "smoothed": smoothed,
        "probs": probs, "cache": cache, "loss": data_loss + penalty,
        "data_loss": data_loss, "pen_grad": pen_grad,
    }


def _conv_with_filter_derivative(x, filt):
    """convolve(x, dQ/dsigma) using the product-rule separable decomposition."""
    p, dp = filt.profile_1d, filt.d_profile_1d
    return (convolve_separable(x, (dp, p, p))
            + convolve_separable(x, (p, dp, p))
            + convolve_separable(x, (p, p, dp)))


def _backward_batch(batch: MiniBatch, fwd, pnw, cw, cfg: TrainConfig):
    """Gradients of the batch loss with respect to all trainable weights."""
    dl_dw, dl_dbias, dl_dz = classifier.backward(fwd["cache"], batch.labels)
    dl_dw = dl_dw + fwd["pen_grad"]
    grads = {"w": dl_dw, "bias": dl_dbias}
    if cfg.fixed_sigma is None:
        da = np.zeros(pnw.m)
        db = np.zeros(pnw.m)
        dv = np.zeros(pnw.m)
        dc = 0.0
        dims = batch.volumes[0].shape
        for i, (x, feat) in enumerate(zip(batch.volumes, batch.features)):
            sigma, fit_clamped = fwd["sigmas"][i]
            filt = fwd["filters"][i]
            if fit_clamped or filt.radius == 0:
                continue  # clamped width and single-cell filter carry no gradient
            up = dl_dz[i].reshape(dims)
            dl_dsigma = float(np.sum(up * _conv_with_filter_derivative(x, filt)))
            # the stochastic bump is pass-through: d(sigma+1)/dsigma = 1
            gi = params_net.map_to_sigma_backward(float(feat), pnw, dl_dsigma)
            da += gi[0]
            db += gi[1]
            dv += gi[2]
            dc += gi[3]
        grads.update({"a": da, "b": db, "v": dv, "c": dc})
    return grads


def batch_loss_and_grads(batch: MiniBatch, pnw, cw, cfg: TrainConfig,
                         training: bool = True, rng=None,
                         counters: _Counters | None = None):
    """One forward/backward pass over a batch; the hook used by gradient tests."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if counters is None:
        counters = _Counters()
    fwd = _forward_batch(batch, pnw, cw, cfg, training, rng, counters)
    grads = _backward_batch(batch, fwd, pnw, cw, cfg)
    return fwd["loss"], grads, fwd


def _evaluate_split(batches, pnw, cw, cfg, split, fixed_sigma=None):
    """Loss/accuracy per noise level, using batch statistics at evaluation
    time as well (deliberate deviation from running-average batch norm)."""
    eval_cfg = replace(cfg, fixed_sigma=fixed_sigma if fixed_sigma is not None
                       else cfg.fixed_sigma)
    counters = _Counters()
    rng = np.random.default_rng(0)  # never consumed: no bump outside training
    per_noise = {}
    total_loss, total_correct, total_n = 0.0, 0.0, 0
    voxel_mm = 3.0
    for b in batches:
        if b.split != split:
            continue
        voxel_mm = b.voxel_size_mm
        fwd = _forward_batch(b, pnw, cw, eval_cfg, False, rng, counters)
        acc = classifier.accuracy(fwd["probs"], b.labels)
        rec = per_noise.setdefault(b.noise_level, {"n": 0, "correct": 0.0,
                                                   "loss": 0.0, "sigma_sum": 0.0})
        rec["n"] += b.size
        rec["correct"] += acc * b.size
        rec["loss"] += fwd["data_loss"] * b.size
        rec["sigma_sum"] += sum(s for s, _ in fwd["sigmas"])
        total_loss += fwd["data_loss"] * b.size
        total_correct += acc * b.size
        total_n += b.size
    if total_n == 0:
        raise DataError(f"split {split!r} is empty")
    table = {}
    for noise, rec in per_noise.items():
        row = {"accuracy": rec["correct"] / rec["n"],
               "loss": rec["loss"] / rec["n"], "n": rec["n"]}
        if eval_cfg.fixed_sigma is None:
            mean_sigma = rec["sigma_sum"] / rec["n"]
            row["mean_sigma"] = mean_sigma
            row["mean_fwhm_mm"] = sigma_to_fwhm_mm(mean_sigma, voxel_mm)
        table[noise] = row
    return {"loss": total_loss / total_n, "accuracy": total_correct / total_n,
            "per_noise": table}


def evaluate(pnw, cw, batches, split: str, cfg: TrainConfig | None = None,
             fixed_sigma: float | None = None):
    """Accuracy table for one split; `fixed_sigma` bypasses the width network
    (the fixed-FWHM baseline protocol)."""
    if cfg is None:
        cfg = TrainConfig()
    return _evaluate_split(batches, pnw, cw, cfg, split, fixed_sigma)


def train(cfg: TrainConfig, batches: list[MiniBatch]):
    """SGD with validation-based early stopping.  Deterministic per seed."""
    cfg.validate()
    train_groups = [b for b in batches if b.split == "train"]
    if not train_groups:
        raise DataError("training split is empty")
    for split in ("validation", "test"):
        if not any(b.split == split for b in batches):
            raise DataError(f"{split} split is empty")
    dims = train_groups[0].volumes[0].shape
    for b in batches:
        for v in b.volumes:
            if v.shape != dims:
                raise DataError(f"dim mismatch: {v.shape} vs {dims}")

    pnw = params_net.init_weights(cfg.width_m, cfg.seed)
    cw = classifier.xavier_init(dims, cfg.seed + 1)
    bump_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    counters = _Counters()
    report = TrainReport(config=cfg)

    best = {"loss": math.inf, "epoch": -1, "pnw": None, "cw": None}
    epochs_since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss, n_seen = 0.0, 0
        for batch in make_batches(batches, cfg.seed + epoch):
            fwd = _forward_batch(batch, pnw, cw, cfg, True, bump_rng, counters)
            if not math.isfinite(fwd["loss"]):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} "
                    f"(subject {batch.subject_id}, noise {batch.noise_level}); "
                    f"last widths {[round(s, 4) for s, _ in fwd['sigmas']]}, "
                    f"preactivation clamps {counters.clamp.events}, "
                    f"width-fit clamps {counters.fit_clamps}")
            grads = _backward_batch(batch, fwd, pnw, cw, cfg)
            lr = cfg.learning_rate
            cw.w = cw.w - lr * grads["w"]
            cw.bias = cw.bias - lr * grads["bias"]
            if cfg.fixed_sigma is None:
                pnw.a = pnw.a - lr * grads["a"]
                pnw.b = pnw.b - lr * grads["b"]
                pnw.v = pnw.v - lr * grads["v"]
                pnw.c = pnw.c - lr * grads["c"]
            epoch_loss += fwd["loss"] * batch.size
            n_seen += batch.size
        train_loss = epoch_loss / n_seen

        val = _evaluate_split(batches, pnw, cw, cfg, "validation")
        report.epochs.append({"epoch": epoch, "train_loss": train_loss,
                              "val_loss": val["loss"],
                              "val_accuracy": val["accuracy"]})
        if val["loss"] < best["loss"]:
            best = {"loss": val["loss"], "epoch": epoch,
                    "pnw": copy.deepcopy(pnw), "cw": copy.deepcopy(cw),
                    "val_accuracy": val["accuracy"]}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    if best["pnw"] is not None:
        pnw, cw = best["pnw"], best["cw"]
    report.best_epoch = best["epoch"]
    report.stopped_epoch = report.epochs[-1]["epoch"]
    report.clamp_events = counters.clamp.events
    report.fit_clamp_events = counters.fit_clamps
    report.bump_events = counters.bumps

    test = _evaluate_split(batches, pnw, cw, cfg, "test")
    report.test_accuracy = test["accuracy"]
    report.per_noise = test["per_noise"]
    return pnw, cw, report


def grid_search(cfg: TrainConfig, batches: list[MiniBatch]):
    """Train one model per (lr, lambda) grid point and pick the best by
    validation accuracy; ties break to lower validation loss then lower lr."""
    cfg.validate()
    results = []
    for lr in cfg.lr_grid:
        for lam in cfg.lambda_grid:
            cell_cfg = replace(cfg, learning_rate=lr, lambda_l2=lam)
            row = {"learning_rate": lr, "lambda_l2": lam}
            try:
                pnw, cw, report = train(cell_cfg, batches)
                val = _evaluate_split(batches, pnw, cw, cell_cfg, "validation")
                row.update({"val_accuracy": val["accuracy"], "val_loss": val["loss"],
                            "test_accuracy": report.test_accuracy, "error": ""})
            except (DataError, NumericalError) as exc:
                row.update({"val_accuracy": float("nan"), "val_loss": float("nan"),
                            "test_accuracy": float("nan"), "error": str(exc)})
            results.append(row)
    ok = [r for r in results if not r["error"]]
    if not ok:
        raise NumericalError("every grid cell failed")
    best = min(ok, key=lambda r: (-r["val_accuracy"], r["val_loss"], r["learning_rate"]))
    return (best["learning_rate"], best["lambda_l2"]), results


def parse_config(path) -> TrainConfig:
    """Line-based `key = value` config file; '#' starts a comment."""
    cfg = TrainConfig()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                if key in ("learning_rate", "lambda_l2", "bump_probability",
                           "truncation", "fixed_sigma"):
                    setattr(cfg, key, float(value))
                elif key in ("max_epochs", "patience", "seed", "width_m"):
                    setattr(cfg, key, int(value))
                elif key in ("lr_grid", "lambda_grid"):
                    setattr(cfg, key, tuple(float(x) for x in value.split(",")))
                else:
                    raise DataError(f"{path}:{lineno}: unknown key {key!r}")
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return cfg
