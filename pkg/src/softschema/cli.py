"""Command-line entry point: `softschema <command> [--config FILE] [--seed N] [--out DIR]`.

Every command writes its artifacts, a resolved config echo and a log into the
run directory, prints progress to stderr and one JSON summary line to stdout.
Failures print one JSON line to stderr and exit with 2 (config), 3 (I/O or
file format) or 4 (numeric divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import TOOL_VERSION, RunConfig, load_config
from .datagen import Dataset, generate_dataset, load_dataset, make_training_views, save_dataset
from .errors import ConfigError, DivergenceError, FormatError, ShapeError
from .models import BUILDERS, Checkpoint, Network, load_checkpoint, save_checkpoint
from .render import image_grid, save_png
from .train import RecurrentImageModel, fit_autoencoder, fit_images, fit_recurrent

COMMANDS = ("gen", "train", "eval", "ablate", "lagscan", "noise", "latent", "compare")
EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 2, 3, 4

log = logging.getLogger("softschema")


class Run:
    """A run directory with config echo, log file and progress reporting."""

    def __init__(self, out: Path, cfg: RunConfig, command: str, quiet: bool):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        cfg.dump(self.dir / "config.yaml", command)
        self._handlers = [logging.FileHandler(self.dir / "run.log", mode="w")]
        self._handlers[0].setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        if not quiet:
            err = logging.StreamHandler(sys.stderr)
            err.setFormatter(logging.Formatter("%(message)s"))
            self._handlers.append(err)
        root = logging.getLogger()
        root.setLevel(logging.INFO)
        for h in self._handlers:
            root.addHandler(h)
        log.info("softschema %s %s seed=%d out=%s", TOOL_VERSION, command, cfg.seed, self.dir)

    def progress(self, msg: str) -> None:
        log.info("%s: %s", self.command, msg)

    def path(self, name: str) -> Path:
        return self.dir / name

    def close(self) -> None:
        root = logging.getLogger()
        for h in self._handlers:
            root.removeHandler(h)
            h.close()


# ------------------------------------------------------------------ helpers


def _model_task(kind: str) -> str:
    return "static_schema" if kind == "static_schema" else "scene_conditioned"


def _load_model(path: Path):
    """Return (model, kind, image_size); recurrent predictors bring their autoencoder."""
    ckpt = load_checkpoint(path)
    kind = ckpt.spec.kind
    if kind == "recurrent_predictor":
        ae_name = ckpt.metadata.get("autoencoder")
        if not ae_name:
            raise FormatError(f"{path}: recurrent checkpoint does not name its autoencoder")
        ae = load_checkpoint(Path(path).parent / ae_name)
        return RecurrentImageModel(ae.network(), ckpt.network()), kind, ckpt.spec.image_size
    if kind == "autoencoder":
        raise ShapeError("autoencoder checkpoints do not predict from actions; use the recurrent predictor")
    return ckpt.network(), kind, ckpt.spec.image_size


def _model_and_view(args, cfg: RunConfig, split: str | None = None):
    if not args.checkpoint or not args.dataset:
        raise ConfigError(f"{args.command} needs --checkpoint and --dataset")
    model, kind, size = _load_model(Path(args.checkpoint))
    ds = load_dataset(args.dataset)
    if size != ds.image_size:
        raise ShapeError(f"checkpoint built for {size}px images, dataset has {ds.image_size}px")
    view = make_training_views(ds, _model_task(kind), split or cfg.analysis.split)
    return model, kind, ds, view


def _model_cfg(cfg: RunConfig, ds: Dataset):
    return replace(cfg.model.config, image_size=ds.image_size)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ----------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig, run: Run) -> dict:
    ds = generate_dataset(
        cfg.dataset,
        cfg.seed,
        cfg.sim,
        cfg.render,
        asdict(cfg.sensors),
        threads=args.threads,
        progress=run.progress,
    )
    ds.header["config"] = cfg.to_dict()
    ds.header["tool_version"] = TOOL_VERSION
    out = run.path("dataset.sbsd")
    save_dataset(out, ds)
    frames = sum(len(b) for b in ds.batches)
    contact = sum(int(b.contact.sum()) for b in ds.batches)
    return {"dataset": str(out), "digest": ds.digest(), "frames": frames, "contact_frames": contact}


def cmd_train(args, cfg: RunConfig, run: Run) -> dict:
    if not args.dataset:
        raise ConfigError("train needs --dataset")
    ds = load_dataset(args.dataset)
    mcfg = _model_cfg(cfg, ds)
    kind = cfg.model.kind
    meta = {"dataset": ds.digest(), "seed": cfg.seed, "train": asdict(cfg.train), "tool_version": TOOL_VERSION}
    tcfg = replace(cfg.train, seed=cfg.seed)
    train = make_training_views(ds, _model_task(kind), "train")
    out = run.path("model.sbsm")
    if kind in ("static_schema", "scene_conditioned"):
        net = Network(BUILDERS[kind](mcfg), seed=cfg.seed)
        hist = fit_images(net, train, tcfg, run.progress)
    else:
        ae = Network(BUILDERS["autoencoder"](mcfg), seed=cfg.seed)
        hist = fit_autoencoder(ae, train.images, tcfg, lambda m: run.progress(f"autoencoder {m}"))
        if kind == "autoencoder":
            net = ae
        else:
            ae_path = run.path("autoencoder.sbsm")
            save_checkpoint(ae_path, Checkpoint(ae.spec, ae.weights(), {**meta, "loss": hist.epoch_loss}))
            rtrain = make_training_views(ds, "recurrent", "train", feature_fn=ae.encode)
            net = Network(BUILDERS["recurrent_predictor"](mcfg), seed=cfg.seed)
            hist = fit_recurrent(net, rtrain, tcfg, lambda m: run.progress(f"recurrent {m}"))
            meta["autoencoder"] = ae_path.name
    save_checkpoint(out, Checkpoint(net.spec, net.weights(), {**meta, "loss": hist.epoch_loss}))
    return {"checkpoint": str(out), "kind": kind, "final_loss": hist.final_loss, "seconds": round(hist.seconds, 2)}


def _eval_figure(path: Path, report: an.EvalReport, title: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(report.per_frame, lw=0.8, label="per-frame MSE")
    idx = np.flatnonzero(report.contact)
    if len(idx):
        ax.scatter(idx, report.per_frame[idx], s=4, c="tab:red", label="contact")
    ax.set_xlabel("frame")
    ax.set_ylabel("MSE")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_eval(args, cfg: RunConfig, run: Run) -> dict:
    model, kind, ds, view = _model_and_view(args, cfg)
    report = an.evaluate(model, view, {"model": kind, "dataset": ds.digest(), "split": cfg.analysis.split})
    report.to_csv(run.path("eval.csv"), {"batch": view.batch_ids, "t": view.times})
    _eval_figure(run.path("eval.png"), report, f"{kind} on {cfg.analysis.split} split: mean {report.mean:.5f}")
    # a few ground-truth / prediction pairs
    rows = np.linspace(0, len(view) - 1, num=min(6, len(view))).astype(int)
    pred = an.predict_view(model, view)[rows]
    pairs = [list(view.images[rows]), list(np.clip(pred * 255.0 + 0.5, 0, 255).astype(np.uint8))]
    save_png(run.path("examples.png"), image_grid(pairs))
    return report.summary()


def cmd_ablate(args, cfg: RunConfig, run: Run) -> dict:
    model, kind, ds, view = _model_and_view(args, cfg)
    rep = an.ablate_inputs(model, view, diagnostic=cfg.analysis.diagnostic)
    _write_rows(run.path("ablation.csv"), ["input", "delta_mse"], [(n, f"{d:.8g}") for n, d in rep.rows()])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(an.INPUT_NAMES, rep.deltas)
    ax.set_ylabel("MSE increase")
    fig.tight_layout()
    fig.savefig(run.path("ablation.png"), dpi=100)
    plt.close(fig)
    out = {"baseline_mse": rep.baseline, "deltas": dict(rep.rows())}
    if rep.all_delta is not None:
        out["all_inputs_delta"] = rep.all_delta
    return out


def cmd_lagscan(args, cfg: RunConfig, run: Run) -> dict:
    model, kind, ds, view = _model_and_view(args, cfg)
    signals = ("action", "tactile") if cfg.analysis.lag_signal == "both" else (cfg.analysis.lag_signal,)
    lags = list(cfg.analysis.lags)
    curves = {}
    for sig in signals:
        with ThreadPoolExecutor(max(1, args.threads)) as pool:
            parts = list(pool.map(lambda lag: an.lag_scan(model, view, sig, [lag]), lags))
        curves[sig] = {k: v for p in parts for k, v in p.items()}
        run.progress(f"{sig} lag scan done")
    _write_rows(
        run.path("lagscan.csv"), ["lag", *signals], [(lag, *(f"{curves[s][lag]:.8g}" for s in signals)) for lag in lags]
    )
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3))
    for s in signals:
        ax.plot(lags, [curves[s][lag] for lag in lags], marker="o", ms=3, label=s)
    ax.set_xlabel("lag (frames)")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run.path("lagscan.png"), dpi=100)
    plt.close(fig)
    return {s: {"argmin": min(curves[s], key=curves[s].get), "mse": curves[s]} for s in signals}


def cmd_noise(args, cfg: RunConfig, run: Run) -> dict:
    model, kind, ds, view = _model_and_view(args, cfg)
    res = an.noise_filter_check(model, view)
    out = {"ratio": res.ratio, "region_pixels": res.region_pixels, "result": res.describe()}
    if res.has_distractor:
        out.update(pred_variance=res.pred_variance, true_variance=res.true_variance)
    return out


def cmd_latent(args, cfg: RunConfig, run: Run) -> dict:
    model, kind, ds, view = _model_and_view(args, cfg)
    if not isinstance(model, Network) or kind != "scene_conditioned":
        raise ShapeError("latent segmentation needs a scene-conditioned checkpoint")
    layer = cfg.analysis.layer or model.spec.transposed_layers()[-2]
    if cfg.analysis.frame is not None:
        row = int(cfg.analysis.frame)
        if not 0 <= row < len(view):
            raise ConfigError(f"analysis.frame {row} outside split of {len(view)} frames")
    else:
        hits = np.flatnonzero(view.object_contact)
        row = int(hits[0]) if len(hits) else len(view) - 1
    report = an.latent_segmentation(model, view.inputs([row])[0], view.masks[row], layer)
    _write_rows(
        run.path("latent_iou.csv"),
        ["channel", *report.classes],
        [(c, *(f"{v:.6f}" for v in r)) for c, r in enumerate(report.iou)],
    )
    summary = {"layer": layer, "frame": row, "best": {}}
    for cls in ("finger", "object"):
        if not an.class_masks(report.mask)[cls].any():
            continue
        base = an.permutation_baseline(report, cls, cfg.analysis.draws, cfg.seed)
        summary["best"][cls] = {
            "channel": report.best_channel(cls),
            "iou": report.best_iou(cls),
            "baseline_p95": float(np.percentile(base, 95)),
        }
    panels = [[view.images[row]]]
    for cls, info in summary["best"].items():
        m = report.maps[info["channel"]]
        m = (m - m.min()) / max(float(m.max() - m.min()), 1e-12)
        gray = (m * 255).astype(np.uint8)
        panels[0].append(np.repeat(gray[..., None], 3, axis=2))
        panels[0].append(np.repeat((report.binary[info["channel"]] * 255).astype(np.uint8)[..., None], 3, axis=2))
    save_png(run.path("latent.png"), image_grid(panels))
    return summary


def cmd_compare(args, cfg: RunConfig, run: Run) -> dict:
    if not args.dataset:
        raise ConfigError("compare needs --dataset")
    ds = load_dataset(args.dataset)
    tcfg = replace(cfg.train, seed=cfg.seed)
    ae_cfg = replace(tcfg, epochs=cfg.analysis.ae_epochs or tcfg.epochs)
    rnn_cfg = replace(tcfg, epochs=cfg.analysis.rnn_epochs or tcfg.epochs)
    report, nets = an.compare_architectures(ds, _model_cfg(cfg, ds), tcfg, ae_cfg, rnn_cfg, cfg.seed, run.progress)
    paths = report.write(run.dir)
    for name, net in nets.items():
        save_checkpoint(run.path(f"{name}.sbsm"), Checkpoint(net.spec, net.weights(), {"dataset": report.dataset_hash}))
    return {
        "scene_conditioned_mse": report.static.mean,
        "recurrent_mse": report.recurrent.mean,
        "static_better": report.static_better,
        "seconds": {k: round(v, 2) for k, v in report.seconds.items()},
        "reports": {k: str(v) for k, v in paths.items()},
    }


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "lagscan": cmd_lagscan,
    "noise": cmd_noise,
    "latent": cmd_latent,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softschema", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config; every field is optional")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="run directory (default runs/<command>-seed<seed>)")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")
    common.add_argument("--threads", type=int, default=1, help="worker threads for generation and sweeps")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a dataset file",
        "train": "train the configured model on a dataset",
        "eval": "per-frame test error report (CSV + PNG)",
        "ablate": "input-ablation report",
        "lagscan": "action / tactile lag scan",
        "noise": "distractor filtering check",
        "latent": "latent self-segmentation of one frame",
        "compare": "train and compare both scene architectures",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name != "gen":
            sp.add_argument("--dataset", help="dataset file (.sbsd)")
        if name not in ("gen", "train", "compare"):
            sp.add_argument("--checkpoint", help="checkpoint file (.sbsm)")
    return p


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(json.dumps({"status": "error", "error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(ConfigError("--threads must be >= 1"), EXIT_CONFIG)
    run = None
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out) if args.out else Path("runs") / f"{args.command}-seed{cfg.seed}"
        run = Run(out, cfg, args.command, args.quiet)
        summary = HANDLERS[args.command](args, cfg, run)
        summary = _clean({"status": "ok", "command": args.command, "out": str(run.dir), **summary})
        (run.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        print(json.dumps(summary, sort_keys=True))
        return 0
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (FormatError, ShapeError, OSError) as exc:
        return _fail(exc, EXIT_IO)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGENCE)
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
