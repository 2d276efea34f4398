"""Evaluation procedures: error reports, input ablation, lag scans, distractor
filtering, latent-space segmentation and the two-architecture comparison."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import ShapeError, no_grad
from .datagen import Dataset, View, make_training_views
from .models import ModelConfig, Network, build_autoencoder, build_recurrent_predictor, build_scene_conditioned
from .render import LABEL_BACKGROUND, LABEL_DISTRACTOR, LABEL_FINGER, LABEL_OBJECT0, LABEL_OBSTACLE
from .train import RecurrentImageModel, TrainConfig, fit_autoencoder, fit_images, fit_recurrent

log = logging.getLogger(__name__)

ACTION_CHANNELS = (0, 1, 2)
TACTILE_CHANNELS = (3, 4, 5, 6, 7, 8)
INPUT_NAMES = ("x", "y", "theta", "s1", "s2", "s3", "s4", "s5", "s6")


class LagError(ValueError):
    pass


# ------------------------------------------------------------------ prediction


def iter_predictions(model, view: View, chunk: int = 64) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (row indices, predicted float images) covering every row of `view`.

    `model` is a feed-forward Network, a RecurrentImageModel, or any callable
    mapping (view, rows) to images.
    """
    if isinstance(model, RecurrentImageModel):
        for rows in view.sequences():
            yield rows, model.predict_sequence(view.inputs(rows))
        return
    if isinstance(model, Network):
        if model.spec.kind not in ("static_schema", "scene_conditioned"):
            raise ShapeError(f"{model.spec.kind} does not predict images from frames")
        if model.spec.output_shape != view.images.shape[1:]:
            raise ShapeError(
                f"model predicts {model.spec.output_shape}, dataset images are {view.images.shape[1:]}"
            )
        for s in range(0, len(view), chunk):
            rows = np.arange(s, min(s + chunk, len(view)))
            yield rows, model.predict(view.inputs(rows), batch_size=chunk)
        return
    for s in range(0, len(view), chunk):
        rows = np.arange(s, min(s + chunk, len(view)))
        yield rows, np.asarray(model(view, rows), dtype=np.float32)


def predict_view(model, view: View) -> np.ndarray:
    out = np.empty(view.images.shape, dtype=np.float32)
    for rows, pred in iter_predictions(model, view):
        out[rows] = pred
    return out


# ------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    per_frame: np.ndarray  # per-pixel MSE of each frame
    contact: np.ndarray  # bool mask of contact frames
    metadata: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_frame))

    @property
    def std(self) -> float:
        return float(np.std(self.per_frame))

    @property
    def contact_mse(self) -> float:
        return float(np.mean(self.per_frame[self.contact])) if np.any(self.contact) else float("nan")

    @property
    def n_contact(self) -> int:
        return int(np.sum(self.contact))

    def summary(self) -> dict:
        return {
            "mse_mean": self.mean,
            "mse_std": self.std,
            "contact_mse": self.contact_mse,
            "frames": int(len(self.per_frame)),
            "contact_frames": self.n_contact,
            **self.metadata,
        }

    def to_csv(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mse", "contact", *extra])
            for i, (m, c) in enumerate(zip(self.per_frame, self.contact)):
                w.writerow([i, f"{m:.8g}", int(c), *(v[i] for v in extra.values())])


def evaluate(model, view: View, metadata: dict | None = None) -> EvalReport:
    """Per-frame pixel MSE of `model` on `view` (images scaled to [0, 1])."""
    per_frame = np.empty(len(view), dtype=np.float64)
    for rows, pred in iter_predictions(model, view):
        if pred.shape[1:] != view.images.shape[1:]:
            raise ShapeError(f"prediction shape {pred.shape[1:]} vs images {view.images.shape[1:]}")
        diff = pred.astype(np.float64) - view.targets(rows)
        per_frame[rows] = np.mean(diff * diff, axis=(1, 2, 3))
    return EvalReport(per_frame, view.contact.copy(), dict(metadata or {}))


def constant_predictor(image: np.ndarray) -> Callable:
    """Model that outputs `image` (float, H x W x 3) for every frame."""
    image = np.asarray(image, dtype=np.float32)
    return lambda view, rows: np.broadcast_to(image, (len(rows),) + image.shape)


def conditioning_predictor() -> Callable:
    """Model that always outputs the conditioning (first) image of the frame's batch."""
    return lambda view, rows: np.stack([view.cond_images[int(b)] for b in view.batch_ids[rows]]).astype(
        np.float32
    ) / 255.0


# ------------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    baseline: float
    deltas: np.ndarray  # (9,) MSE increase per ablated input
    all_delta: float | None = None  # all nine replaced at once (diagnostic)

    def rows(self):
        for name, d in zip(INPUT_NAMES, self.deltas):
            yield name, float(d)


def ablate_inputs(model, view: View, diagnostic: bool = False) -> AblationReport:
    """Replace each input with its training-split mean and report the MSE increase."""
    base = evaluate(model, view).mean
    deltas = np.empty(len(INPUT_NAMES))
    for j in range(len(INPUT_NAMES)):
        v = view.vectors.copy()
        v[:, j] = view.channel_means[j]
        deltas[j] = evaluate(model, view.with_vectors(v)).mean - base
    all_delta = None
    if diagnostic:
        v = np.broadcast_to(view.channel_means, view.vectors.shape).copy()
        all_delta = evaluate(model, view.with_vectors(v)).mean - base
    return AblationReport(base, deltas, all_delta)


# ------------------------------------------------------------------- lag scan


def shifted_view(view: View, channels, lag: int) -> View:
    """Present `channels` delayed by `lag` frames; frames t < lag of each batch are dropped."""
    if lag < 0:
        raise LagError("lag must be non-negative")
    seqs = view.sequences()
    if lag >= min(len(s) for s in seqs):
        raise LagError(f"lag {lag} is not shorter than the shortest batch ({min(len(s) for s in seqs)} frames)")
    if lag == 0:
        return view
    v = view.vectors.copy()
    keep = []
    for rows in seqs:
        v[np.ix_(rows[lag:], channels)] = view.vectors[np.ix_(rows[:-lag], channels)]
        keep.append(rows[lag:])
    return view.with_vectors(v).subset(np.sort(np.concatenate(keep)))


def lag_scan(model, view: View, signal: str, lags) -> dict[int, float]:
    """Mean MSE per lag with the action or tactile inputs delayed."""
    channels = {"action": ACTION_CHANNELS, "tactile": TACTILE_CHANNELS}.get(signal)
    if channels is None:
        raise ValueError(f"signal must be 'action' or 'tactile', got {signal!r}")
    channels = list(channels)
    return {int(lag): evaluate(model, shifted_view(view, channels, int(lag))).mean for lag in lags}


# ---------------------------------------------------------------- noise filter


@dataclass
class NoiseFilterResult:
    ratio: float | None
    region_pixels: int
    pred_variance: float = float("nan")
    true_variance: float = float("nan")

    @property
    def has_distractor(self) -> bool:
        return self.ratio is not None

    def describe(self) -> str:
        return "no distractor" if self.ratio is None else f"ratio {self.ratio:.4f}"


def distractor_region(masks: np.ndarray) -> np.ndarray:
    """Pixels the distractor visits that never show the finger, an object or an obstacle."""
    hit = np.any(masks == LABEL_DISTRACTOR, axis=0)
    scene = np.any((masks != LABEL_BACKGROUND) & (masks != LABEL_DISTRACTOR), axis=0)
    return hit & ~scene


def noise_filter_check(model, view: View) -> NoiseFilterResult:
    """Temporal pixel variance of predictions vs ground truth inside the distractor region."""
    region = distractor_region(view.masks)
    if not region.any():
        return NoiseFilterResult(None, 0)
    n = 0
    s_pred = np.zeros(view.images.shape[1:])
    q_pred = np.zeros(view.images.shape[1:])
    for rows, pred in iter_predictions(model, view):
        p = pred.astype(np.float64)
        s_pred += p.sum(axis=0)
        q_pred += (p * p).sum(axis=0)
        n += len(rows)
    var_pred = q_pred / n - (s_pred / n) ** 2
    var_true = view.targets().astype(np.float64).var(axis=0)
    pv = float(var_pred[region].mean())
    tv = float(var_true[region].mean())
    return NoiseFilterResult(pv / tv if tv > 0 else None, int(region.sum()), pv, tv)


# -------------------------------------------------------------- segmentation

MASK_CLASSES = ("background", "finger", "object", "obstacle", "distractor")


def class_masks(mask: np.ndarray) -> dict[str, np.ndarray]:
    return {
        "background": mask == LABEL_BACKGROUND,
        "finger": mask == LABEL_FINGER,
        "object": (mask >= LABEL_OBJECT0) & (mask < LABEL_OBSTACLE),
        "obstacle": mask == LABEL_OBSTACLE,
        "distractor": mask == LABEL_DISTRACTOR,
    }


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 0 when both are empty."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def binarize(channel: np.ndarray) -> np.ndarray:
    """Min-max normalise and threshold at Otsu's level; flat channels give an empty mask."""
    from skimage.filters import threshold_otsu

    lo, hi = float(channel.min()), float(channel.max())
    if hi - lo <= 0:
        return np.zeros(channel.shape, bool)
    norm = (channel - lo) / (hi - lo)
    return norm > threshold_otsu(norm)


@dataclass
class SegmentationReport:
    layer: str
    maps: np.ndarray  # (C, H, W) activations, upsampled to image resolution
    binary: np.ndarray  # (C, H, W) bool
    iou: np.ndarray  # (C, n_classes)
    mask: np.ndarray  # (H, W) ground-truth labels
    classes: tuple[str, ...] = MASK_CLASSES

    def best_iou(self, cls: str) -> float:
        return float(self.iou[:, self.classes.index(cls)].max())

    def best_channel(self, cls: str) -> int:
        return int(np.argmax(self.iou[:, self.classes.index(cls)]))


def segmentation_from_maps(layer: str, maps: np.ndarray, mask: np.ndarray) -> SegmentationReport:
    """maps: (C, h, w) activations at any resolution dividing the mask's."""
    c, h, w = maps.shape
    H, W = mask.shape
    if H % h or W % w:
        raise ShapeError(f"activation {h}x{w} does not tile mask {H}x{W}")
    up = np.repeat(np.repeat(maps, H // h, axis=1), W // w, axis=2)
    binary = np.stack([binarize(ch) for ch in up])
    targets = class_masks(mask)
    table = np.array([[iou(b, targets[k]) for k in MASK_CLASSES] for b in binary]).reshape(c, len(MASK_CLASSES))
    return SegmentationReport(layer, up, binary, table, mask)


def latent_segmentation(model: Network, inputs: np.ndarray, mask: np.ndarray, layer_name: str) -> SegmentationReport:
    """Capture `layer_name` activations for one frame and score each channel against the mask."""
    model.spec.layer(layer_name)  # raises KeyError for unknown names
    capture: dict = {}
    with no_grad():
        model.forward(np.asarray(inputs, dtype=np.float32)[None], capture=capture)
    act = capture[layer_name].data[0]
    if act.ndim != 3:
        raise ShapeError(f"layer {layer_name} is not spatial (shape {act.shape})")
    return segmentation_from_maps(layer_name, np.moveaxis(act, -1, 0), mask)


def permutation_baseline(report: SegmentationReport, cls: str, draws: int = 100, seed: int = 0) -> np.ndarray:
    """Best-channel IoU after randomly permuting pixel positions, one value per draw."""
    rng = np.random.default_rng(seed)
    target = class_masks(report.mask)[cls]
    c = report.binary.shape[0]
    flat = report.binary.reshape(c, -1)
    t = target.reshape(-1)
    out = np.empty(draws)
    for d in range(draws):
        perm = rng.permutation(flat.shape[1])
        shuffled = flat[:, perm]
        inter = (shuffled & t).sum(axis=1)
        union = (shuffled | t).sum(axis=1)
        out[d] = np.max(np.where(union > 0, inter / np.maximum(union, 1), 0.0))
    return out


# -------------------------------------------------------- architecture compare


@dataclass
class CompareReport:
    static: EvalReport
    recurrent: EvalReport
    dataset_hash: str
    seconds: dict[str, float]
    histories: dict[str, list[float]]

    @property
    def static_better(self) -> bool:
        return self.static.mean < self.recurrent.mean

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "compare.csv", "png": out / "compare.png"}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mse_scene_conditioned", "mse_recurrent", "contact"])
            for i, (a, b, c) in enumerate(zip(self.static.per_frame, self.recurrent.per_frame, self.static.contact)):
                w.writerow([i, f"{a:.8g}", f"{b:.8g}", int(c)])
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(1, 2, figsize=(8, 3))
        ax[0].bar(
            ["scene-conditioned", "recurrent"],
            [self.static.mean, self.recurrent.mean],
            yerr=[self.static.std, self.recurrent.std],
            color=["tab:blue", "tab:orange"],
        )
        ax[0].set_ylabel("test MSE")
        ax[1].plot(self.static.per_frame, lw=0.8, label="scene-conditioned")
        ax[1].plot(self.recurrent.per_frame, lw=0.8, label="recurrent")
        ax[1].set_xlabel("test frame")
        ax[1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(paths["png"], dpi=100)
        plt.close(fig)
        return paths


def compare_architectures(
    ds: Dataset,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    ae_train_cfg: TrainConfig | None = None,
    rnn_train_cfg: TrainConfig | None = None,
    seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> tuple[CompareReport, dict[str, Network]]:
    """Train both architectures on the same split/seed and evaluate them on the test split."""
    model_cfg = model_cfg or ModelConfig(image_size=ds.image_size)
    train_cfg = train_cfg or TrainConfig(seed=seed)
    ae_train_cfg = ae_train_cfg or train_cfg
    rnn_train_cfg = rnn_train_cfg or train_cfg
    say = progress or (lambda msg: None)
    digest = ds.digest()
    seconds = {}

    train = make_training_views(ds, "scene_conditioned", "train")
    test = make_training_views(ds, "scene_conditioned", "test")

    t0 = time.perf_counter()
    arch1 = Network(build_scene_conditioned(model_cfg), seed=seed)
    h1 = fit_images(arch1, train, train_cfg, lambda m: say(f"scene-conditioned {m}"))
    seconds["scene_conditioned"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ae = Network(build_autoencoder(model_cfg), seed=seed)
    h2 = fit_autoencoder(ae, train.images, ae_train_cfg, lambda m: say(f"autoencoder {m}"))
    seconds["autoencoder"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rtrain = make_training_views(ds, "recurrent", "train", feature_fn=ae.encode)
    rnn = Network(build_recurrent_predictor(model_cfg), seed=seed)
    h3 = fit_recurrent(rnn, rtrain, rnn_train_cfg, lambda m: say(f"recurrent {m}"))
    seconds["recurrent"] = time.perf_counter() - t0

    meta = {"dataset": digest}
    report = CompareReport(
        static=evaluate(arch1, test, {**meta, "model": "scene_conditioned"}),
        recurrent=evaluate(RecurrentImageModel(ae, rnn), test, {**meta, "model": "recurrent"}),
        dataset_hash=digest,
        seconds=seconds,
        histories={"scene_conditioned": h1.epoch_loss, "autoencoder": h2.epoch_loss, "recurrent": h3.epoch_loss},
    )
    log.info(
        "architecture comparison: scene-conditioned %.5f, recurrent %.5f (static better: %s); runtime %s",
        report.static.mean,
        report.recurrent.mean,
        report.static_better,
        {k: round(v, 1) for k, v in seconds.items()},
    )
    return report, {"scene_conditioned": arch1, "autoencoder": ae, "recurrent_predictor": rnn}
