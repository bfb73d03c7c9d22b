"""Training loop, metrics, checkpoints."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import container
from .network import EquiLoPONet, NetworkSpec, PlainCNN


@dataclass
class TrainConfig:
    lr: float = 0.005
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    recalibrate: int = 200
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> None:
        # lr = 0 is accepted: it is the identity run used to check the loop
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("lr must be a finite non-negative number")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.recalibrate < 0:
            raise ValueError("recalibrate must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""

    def __init__(self, epoch: int, step: int, layer: str):
        super().__init__(f"non-finite value at epoch {epoch}, step {step}, first offending layer: {layer}")
        self.epoch, self.step, self.layer = epoch, step, layer


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def build_model(model: dict):
    """Construct a network from a model description ``{"kind": ..., ...}``."""
    kind = model.get("kind", "equilopo")
    if kind == "equilopo":
        fields = {k: v for k, v in model.items() if k != "kind"}
        if "downsample_before" in fields:
            fields["downsample_before"] = tuple(fields["downsample_before"])
        return EquiLoPONet(NetworkSpec(**fields))
    if kind == "cnn":
        fields = {k: v for k, v in model.items() if k != "kind"}
        if "widths" in fields:
            fields["widths"] = tuple(fields["widths"])
        return PlainCNN(**fields)
    raise ValueError(f"unknown model kind {kind!r}")


def model_description(net) -> dict:
    if isinstance(net, EquiLoPONet):
        return {"kind": "equilopo", **net.net_spec.to_dict()}
    if isinstance(net, PlainCNN):
        return {"kind": "cnn", **net.config()}
    raise TypeError("unsupported network type")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest ROC AUC averaged over classes present with both outcomes."""
    aucs = []
    for c in range(probs.shape[1]):
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        r = rankdata(probs[:, c])
        aucs.append((r[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else float("nan")


def predict(net, volumes: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Class scores in inference mode."""
    was = net.training
    net.eval()
    try:
        with ad.no_grad():
            out = [net(volumes[i : i + batch_size]).data for i in range(0, len(volumes), batch_size)]
    finally:
        net.train(was)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(net, volumes: np.ndarray, labels: np.ndarray, batch_size: int = 50) -> dict:
    logits = predict(net, volumes, batch_size)
    return _metrics(logits, labels)


def _metrics(logits: np.ndarray, labels: np.ndarray) -> dict:
    probs = ad.softmax_probs(logits)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))))
    return {
        "loss": loss,
        "accuracy": float(np.mean(probs.argmax(axis=1) == labels)),
        "auc": macro_auc(probs, labels),
    }


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _first_nonfinite(loss: ad.Tensor) -> str:
    for i, t in enumerate(ad._topo_order(loss)[::-1]):
        if not np.all(np.isfinite(t.data)):
            return f"{t.op or 'input'} (node {i})"
    return "loss"


def _check_grads(net, epoch: int, step: int) -> None:
    for name, p in net.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(epoch, step, f"gradient of {name}")


def train(
    net,
    train_data: tuple,
    cfg: TrainConfig,
    val_data: tuple | None = None,
    metrics_path=None,
    log=None,
) -> list:
    """Minimize cross-entropy with Adam; returns the per-epoch metric records.

    Records hold ``epoch, split, loss, accuracy, auc``; the ``train`` record
    uses training-mode scores accumulated over the epoch, ``val`` records are
    computed in inference mode after the epoch. Normalization statistics are
    recomputed on the first ``cfg.recalibrate`` training samples after every
    epoch, since running averages lag behind weights that move quickly.
    """
    cfg.validate()
    X, y = train_data
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = ad.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    records = []
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        net.train()
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            perm = rng.permutation(len(X))
            logits = np.zeros((len(X), 0))
            chunks, order = [], []
            for step, i in enumerate(range(0, len(X), cfg.batch_size)):
                idx = perm[i : i + cfg.batch_size]
                opt.zero_grad()
                out = net(X[idx])
                loss = ad.cross_entropy(out, y[idx])
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(epoch, step, _first_nonfinite(loss))
                loss.backward()
                _check_grads(net, epoch, step)
                opt.step()
                chunks.append(out.data)
                order.append(idx)
            if chunks:
                logits = np.empty((len(X), chunks[0].shape[1]))
                logits[np.concatenate(order)] = np.concatenate(chunks)
            if cfg.recalibrate:
                recalibrate(net, X[: cfg.recalibrate], cfg.batch_size)
            recs = [{"epoch": epoch, "split": "train", **_metrics(logits, y)}]
            if val_data is not None:
                recs.append({"epoch": epoch, "split": "val", **evaluate(net, *val_data)})
            for r in recs:
                records.append(r)
                if fh is not None:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")
                    fh.flush()
            if log is not None:
                log(f"epoch {epoch}: " + ", ".join(
                    f"{r['split']} acc {r['accuracy']:.3f} loss {r['loss']:.4f}" for r in recs
                ) + f" ({time.perf_counter() - t0:.1f}s)")
    finally:
        if fh is not None:
            fh.close()
    return records


def recalibrate(net, volumes: np.ndarray, batch_size: int = 8) -> None:
    """Recompute running normalization statistics as an equal-weight average over ``volumes``.

    Runs the network in training mode (batch statistics) without gradients
    or dropout, so inference uses statistics of the final weights.
    """
    from .nonlinear import BatchNormSO3, DropoutSO3

    norms = [m for m in net.modules() if isinstance(m, BatchNormSO3)]
    drops = [m for m in net.modules() if isinstance(m, DropoutSO3)]
    if not norms or len(volumes) == 0:
        return
    saved = [m.momentum for m in norms]
    was = net.training
    net.train()
    for m in drops:
        m.training = False
    try:
        with ad.no_grad():
            for k, i in enumerate(range(0, len(volumes), batch_size)):
                for m in norms:
                    m.momentum = k / (k + 1.0)
                net(volumes[i : i + batch_size])
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        net.train(was)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    manifest = {"kind": "checkpoint", "model": model_description(net)}
    if cfg is not None:
        manifest["train"] = cfg.to_dict()
    if extra:
        manifest.update(extra)
    container.write(path, net.state_dict(), manifest)


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; returns ``(net, manifest)``."""
    arrays, manifest = container.read(path)
    if not manifest or manifest.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path}: not a checkpoint container")
    net = build_model(manifest["model"])
    net.load_state_dict(arrays)
    net.eval()
    return net, manifest
