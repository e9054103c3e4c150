"""Training loop, K-fold evaluation, weights export, parity fixtures.

Input: the training CSV exported by the guidance package
(``pdg export-training``).  The constraint table has one row per accepted
outer iteration (features p0..p15 plus the iteration index k, binary
labels b0..b*); the solution table has one row per converged sample
(features p0..p15, regression targets y0..y*).

Losses: per-bit sigmoid cross-entropy for the constraint network, MSE on
standardized targets for the solution network.  Optimizer: Adam with a
linear warmup followed by inverse-square-root decay.  Training is
deterministic under a fixed seed (single-process, single-worker).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .model import SingleTokenEncoder
from .tscx import save_tensors


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    kind: str                 # "constraint" or "solution"
    batch_size: int = 128
    epochs: int = 2
    folds: int = 3
    warmup_steps: int = 4000
    embed: int = 0            # 0 -> kind default (384 constraint, 768 solution)
    n_heads: int = 2
    n_layers: int = 4
    dropout: float = 0.1
    peak_lr: float = 3e-4
    seed: int = 0

    def resolved_embed(self) -> int:
        if self.embed:
            return self.embed
        return 384 if self.kind == "constraint" else 768


def load_csv(path, kind: str):
    """(features, labels, split tags) from an exported training table."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_params = sum(1 for c in header if c.startswith("p"))
    if kind == "constraint":
        feat_cols = list(range(1, 1 + n_params)) + [header.index("k")]
        lab0 = header.index("b0")
    elif kind == "solution":
        feat_cols = list(range(1, 1 + n_params))
        lab0 = header.index("y0")
    else:
        raise ValueError(f"unknown table kind {kind!r}")
    feats = np.array([[float(r[c]) for c in feat_cols] for r in body])
    labels = np.array([[float(v) for v in r[lab0:]] for r in body])
    splits = np.array([r[0] for r in body])
    return feats, labels, splits


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    s = max(step, 1)
    if s <= cfg.warmup_steps:
        return cfg.peak_lr * s / cfg.warmup_steps
    return cfg.peak_lr * (cfg.warmup_steps / s) ** 0.5


def _loss_fn(kind: str):
    if kind == "constraint":
        return torch.nn.BCEWithLogitsLoss()
    return torch.nn.MSELoss()


def _fit(model, X, Y, cfg: TrainConfig, epochs: int, step0: int = 0,
         log=None) -> int:
    loss_fn = _loss_fn(cfg.kind)
    opt = torch.optim.Adam(model.parameters(), lr=lr_at(1, cfg))
    rng = np.random.default_rng(cfg.seed)
    step = step0
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(X.shape[0])
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            step += 1
            for g in opt.param_groups:
                g["lr"] = lr_at(step, cfg)
            opt.zero_grad()
            loss = loss_fn(model(X[idx]), Y[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"step {step}: loss {loss.item()}")
            loss.backward()
            opt.step()
        if log:
            log(f"epoch {epoch + 1}/{epochs}: loss {loss.item():.6f}")
    model.eval()
    return step


@torch.no_grad()
def _eval_loss(model, X, Y, kind: str) -> float:
    model.eval()
    return float(_loss_fn(kind)(model(X), Y).item())


@torch.no_grad()
def _metrics(model, X, Y, kind: str) -> dict:
    model.eval()
    out = model(X)
    if kind == "constraint":
        pred = (out > 0).float()
        acc = float((pred == Y).float().mean().item())
        return {"binary_accuracy": acc,
                "baseline_zeros_accuracy": float((Y == 0).float().mean())}
    return {"mse_standardized": float(((out - Y) ** 2).mean().item())}


def _standardize(train_rows: np.ndarray):
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _new_model(cfg: TrainConfig, in_w: int, out_w: int) -> SingleTokenEncoder:
    torch.manual_seed(cfg.seed)
    return SingleTokenEncoder(in_w, out_w, cfg.resolved_embed(),
                              cfg.n_heads, cfg.n_layers, cfg.dropout)


def train(csv_path, cfg: TrainConfig, out_path, metrics_path=None, log=None):
    """K-fold evaluation then a final fit on the full training split;
    writes the TSCX weights file and returns the metrics dict."""
    torch.manual_seed(cfg.seed)
    feats, labels, splits = load_csv(csv_path, cfg.kind)
    tr = splits == "train"
    te = splits == "test"
    if not tr.any():
        raise ValueError("training CSV has no train-split rows")
    in_mean, in_std = _standardize(feats[tr])
    if cfg.kind == "solution":
        out_mean, out_std = _standardize(labels[tr])
    else:
        out_mean = np.zeros(labels.shape[1])
        out_std = np.ones(labels.shape[1])

    def tensors(mask):
        X = torch.tensor((feats[mask] - in_mean) / in_std,
                         dtype=torch.float32)
        Y = torch.tensor((labels[mask] - out_mean) / out_std
                         if cfg.kind == "solution" else labels[mask],
                         dtype=torch.float32)
        return X, Y

    X_tr, Y_tr = tensors(tr)
    in_w, out_w = feats.shape[1], labels.shape[1]

    # K-fold pass: per-fold train/validation losses on the training split
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(X_tr.shape[0])
    folds = np.array_split(order, cfg.folds)
    fold_rows = []
    for i, hold in enumerate(folds):
        keep = np.concatenate([f for j, f in enumerate(folds) if j != i])
        model = _new_model(replace(cfg, seed=cfg.seed + i), in_w, out_w)
        _fit(model, X_tr[keep], Y_tr[keep], cfg, cfg.epochs, log=None)
        fold_rows.append({
            "fold": i,
            "train_loss": _eval_loss(model, X_tr[keep], Y_tr[keep], cfg.kind),
            "val_loss": _eval_loss(model, X_tr[hold], Y_tr[hold], cfg.kind),
        })
        if log:
            log(f"fold {i}: train {fold_rows[-1]['train_loss']:.6f} "
                f"val {fold_rows[-1]['val_loss']:.6f}")

    # final model on the full training split
    model = _new_model(cfg, in_w, out_w)
    _fit(model, X_tr, Y_tr, cfg, cfg.epochs, log=log)

    metrics = {"config": {k: getattr(cfg, k) for k in (
        "kind", "batch_size", "epochs", "folds", "warmup_steps", "n_heads",
        "n_layers", "dropout", "peak_lr", "seed")},
        "embed": cfg.resolved_embed(),
        "n_train": int(tr.sum()), "n_test": int(te.sum()),
        "folds": fold_rows,
        "train_loss": _eval_loss(model, X_tr, Y_tr, cfg.kind)}
    if te.any():
        X_te, Y_te = tensors(te)
        metrics["held_out"] = _metrics(model, X_te, Y_te, cfg.kind)
        if cfg.kind == "solution":
            # MSE in label units for comparison against lookup predictors
            with torch.no_grad():
                pred = model(X_te).numpy() * out_std + out_mean
            metrics["held_out"]["mse"] = float(
                np.mean((pred - labels[te]) ** 2))

    save_tensors(model.named_export_tensors((in_mean, in_std),
                                            (out_mean, out_std)), out_path)
    if metrics_path:
        Path(metrics_path).write_text(json.dumps(metrics, indent=2))
    return model, (in_mean, in_std), metrics


@torch.no_grad()
def emit_parity_fixture(model: SingleTokenEncoder, input_stats, n_inputs: int,
                        path, seed: int = 0, tolerance: float = 1e-4) -> list:
    """Record random inputs and their exact logits for cross-implementation
    forward-pass parity checks."""
    in_mean, in_std = input_stats
    rng = np.random.default_rng(seed)
    model.eval()
    fixtures = []
    for _ in range(n_inputs):
        z = rng.standard_normal(model.input_width)
        raw = z * in_std + in_mean
        logits = model(torch.tensor(z[None, :], dtype=torch.float32))[0]
        fixtures.append({"input": raw.tolist(),
                         "logits": logits.numpy().astype(float).tolist(),
                         "tolerance": tolerance})
    Path(path).write_text(json.dumps(fixtures, indent=2))
    return fixtures


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="pdg-train",
        description="Train a tight-set or solution prediction network on an "
                    "exported training CSV and write TSCX weights.")
    p.add_argument("kind", choices=("constraint", "solution"))
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="TSCX weights output path")
    p.add_argument("--metrics", help="metrics JSON output path")
    p.add_argument("--fixtures-out", help="parity fixture JSON output path")
    p.add_argument("--n-fixtures", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--warmup-steps", type=int, default=4000)
    p.add_argument("--embed", type=int, default=0,
                   help="0 = kind default (384 constraint / 768 solution)")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--peak-lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    cfg = TrainConfig(kind=args.kind, batch_size=args.batch_size,
                      epochs=args.epochs, folds=args.folds,
                      warmup_steps=args.warmup_steps, embed=args.embed,
                      n_heads=args.heads, n_layers=args.layers,
                      dropout=args.dropout, peak_lr=args.peak_lr,
                      seed=args.seed)
    try:
        model, stats, metrics = train(args.csv, cfg, args.out,
                                      metrics_path=args.metrics, log=print)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.fixtures_out:
        emit_parity_fixture(model, stats, args.n_fixtures, args.fixtures_out,
                            seed=cfg.seed)
    held = metrics.get("held_out")
    if held:
        print("held-out:", json.dumps(held))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
