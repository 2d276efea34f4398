"""Minibatch Adam training loops for the feed-forward and recurrent predictors."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .datagen import View
from .models import Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    seq_len: int = 30  # truncated BPTT window
    seq_batch: int = 4  # sequences per recurrent minibatch


@dataclass
class History:
    epoch_loss: list[float]
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


def train_step(net: Network, x: np.ndarray, y: np.ndarray, opt: AdamState, cfg: TrainConfig) -> float:
    net.zero_grad()
    loss = ad.mse(net.forward(x), y)
    loss.backward()
    params = net.parameters()
    ad.adam_update([p.data for p in params], [p.grad for p in params], opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return float(loss.data)


def fit(
    net: Network,
    sample: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    n: int,
    cfg: TrainConfig,
    progress: Callable[[str], None] | None = None,
) -> History:
    """Shuffle-and-sweep training; `sample(idx)` returns the (inputs, targets) minibatch."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.zeros_like([p.data for p in net.parameters()])
    losses = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            x, y = sample(idx)
            total += train_step(net, x, y, opt, cfg) * len(idx)
        losses.append(total / n)
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.6f}")
    return History(losses, time.perf_counter() - t0)


def fit_images(net: Network, view: View, cfg: TrainConfig, progress=None) -> History:
    """Train a static-schema or scene-conditioned network on a view's frames."""
    return fit(net, lambda idx: (view.inputs(idx), view.targets(idx)), len(view), cfg, progress)


def fit_autoencoder(net: Network, images: np.ndarray, cfg: TrainConfig, progress=None) -> History:
    def sample(idx):
        x = images[idx].astype(np.float32) / 255.0
        return x, x

    return fit(net, sample, len(images), cfg, progress)


def fit_recurrent(net: Network, view: View, cfg: TrainConfig, progress=None) -> History:
    """Truncated BPTT over whole batches; LSTM state is carried (detached) across windows."""
    if view.features is None:
        raise ValueError("recurrent training needs feature targets on the view")
    rng = np.random.default_rng(cfg.seed)
    seqs = view.sequences()
    length = min(len(s) for s in seqs)
    opt = AdamState.zeros_like([p.data for p in net.parameters()])
    losses = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(seqs))
        total, count = 0.0, 0
        for g in range(0, len(order), cfg.seq_batch):
            group = [seqs[k][:length] for k in order[g : g + cfg.seq_batch]]
            state = None
            for s in range(0, length, cfg.seq_len):
                rows = np.stack([r[s : s + cfg.seq_len] for r in group])  # (B, L)
                b, L = rows.shape
                x = view.inputs(rows.reshape(-1)).reshape((b, L) + net.spec.input_shape)
                y = view.features[rows.reshape(-1)].reshape(b, L, -1)
                net.zero_grad()
                out, (h, c) = net.forward_sequence(x, state)
                loss = ad.mse(out, y)
                loss.backward()
                params = net.parameters()
                ad.adam_update(
                    [q.data for q in params], [q.grad for q in params], opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
                )
                state = (Tensor(h.data.copy()), Tensor(c.data.copy()))
                total += float(loss.data) * b * L
                count += b * L
        losses.append(total / count)
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.6f}")
    return History(losses, time.perf_counter() - t0)


class RecurrentImageModel:
    """Frozen autoencoder decoder on top of a recurrent feature predictor."""

    def __init__(self, autoencoder: Network, predictor: Network):
        if autoencoder.spec.feature_dim != predictor.spec.feature_dim:
            raise ValueError("autoencoder and predictor feature sizes differ")
        self.autoencoder = autoencoder
        self.predictor = predictor

    def predict_sequence(self, inputs: np.ndarray, chunk: int = 100) -> np.ndarray:
        """inputs: (T, H, W, 12) of one batch in time order -> predicted images (T, H, W, 3)."""
        feats = []
        state = None
        with ad.no_grad():
            for s in range(0, len(inputs), chunk):
                out, state = self.predictor.forward_sequence(inputs[None, s : s + chunk], state)
                feats.append(out.data[0])
        return self.autoencoder.decode(np.concatenate(feats))
