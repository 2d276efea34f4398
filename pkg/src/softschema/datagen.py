"""Episode scripting, dataset assembly and the SBSD dataset file format."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceError, FormatError
from .render import (
    LABEL_DISTRACTOR,
    LABEL_FINGER,
    DistractorConfig,
    LabeledImage,
    RenderConfig,
    init_distractor,
    render,
)
from .sensors import SensorState, init_layout, read
from .sim import (
    Disc,
    MovableDisc,
    SceneSpec,
    SimParams,
    Workspace,
    build_scene,
    rest_chain,
    step,
    strain_profile,
)

N_INPUTS = 9


# eleven pushable objects: (radius m, mass kg); colour id = catalogue index
OBJECT_CATALOG = (
    (0.016, 0.03),
    (0.018, 0.04),
    (0.020, 0.05),
    (0.022, 0.05),
    (0.024, 0.06),
    (0.026, 0.07),
    (0.017, 0.03),
    (0.019, 0.04),
    (0.021, 0.05),
    (0.023, 0.06),
    (0.025, 0.07),
)


@dataclass(frozen=True)
class MotionConfig:
    """Ornstein-Uhlenbeck walk, smoothed by a first-order filter, clipped to the workspace."""

    mean_reversion: float = 0.5  # 1/s
    sigma: tuple[float, float, float] = (0.075, 0.075, 0.45)  # per axis, unit/sqrt(s)
    smoothing: float = 1.0  # s, time constant of the command filter; 0 disables it

    def __post_init__(self):
        if not self.mean_reversion > 0 or self.smoothing < 0:
            raise ValueError("mean_reversion must be positive and smoothing non-negative")


@dataclass(frozen=True)
class SceneRandomization:
    n_objects: int = 0
    n_obstacles: int = 0
    # placement region for shapes (xmin, xmax, ymin, ymax)
    region: tuple[float, float, float, float] = (-0.11, 0.11, -0.12, -0.05)
    fixed: bool = False  # one layout shared by every batch instead of a fresh one per batch


@dataclass(frozen=True)
class EpisodeConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    frames: int = 600
    dt: float = 1.0 / 33.0
    motion: MotionConfig = field(default_factory=MotionConfig)
    delay: int = 0  # actuation transport delay, frames
    distractor: bool = False
    motion_seed: int = 0
    sensor_seed: int = 0
    distractor_seed: int = 0
    layout_seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class Frame:
    action: np.ndarray
    sensors: np.ndarray
    image: LabeledImage
    t: int


@dataclass
class Episode:
    """Frame arrays of one batch plus simulator ground truth."""

    actions: np.ndarray  # (T, 3) float32
    sensors: np.ndarray  # (T, 6) float32
    images: np.ndarray  # (T, H, W, 3) uint8
    masks: np.ndarray  # (T, H, W) uint8
    contact: np.ndarray  # (T,) bool, any contact force during the step into this frame
    object_contact: np.ndarray  # (T,) bool, finger touched a movable object
    base_poses: np.ndarray  # (T, 3) realised base pose (not persisted)

    def __len__(self):
        return len(self.actions)

    def frames(self):
        for t in range(len(self)):
            yield Frame(self.actions[t], self.sensors[t], LabeledImage(self.images[t], self.masks[t]), t)


def random_scene(
    seed: int, randomization: SceneRandomization, workspace: Workspace | None = None, params: SimParams | None = None
) -> SceneSpec:
    """Draw an object subset and non-overlapping placements below the workspace."""
    params = params or SimParams()
    workspace = workspace or Workspace()
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = randomization.region
    placed: list[tuple[np.ndarray, float]] = []
    base = tuple(float(v) for v in workspace.center)
    # keep shapes clear of the finger's rest pose
    placed.extend((node, params.skin_radius) for node in rest_chain(base, params))

    def place(radius):
        for _ in range(500):
            c = rng.uniform([xmin + radius, ymin + radius], [xmax - radius, ymax - radius])
            if all(np.hypot(*(c - q)) > radius + r + 0.005 for q, r in placed):
                placed.append((c, radius))
                return c
        raise ValueError("could not place shape without overlap; region too small")

    ids = rng.choice(len(OBJECT_CATALOG), size=randomization.n_objects, replace=False)
    objects = []
    for cid in sorted(int(i) for i in ids):
        radius, mass = OBJECT_CATALOG[cid]
        c = place(radius)
        objects.append(MovableDisc((float(c[0]), float(c[1])), radius, mass, cid))
    obstacles = []
    for _ in range(randomization.n_obstacles):
        radius = float(rng.uniform(0.015, 0.025))
        c = place(radius)
        obstacles.append(Disc((float(c[0]), float(c[1])), radius))
    return SceneSpec(tuple(obstacles), tuple(objects), workspace, seed, base)


def ou_commands(cfg: EpisodeConfig, start: np.ndarray) -> np.ndarray:
    """Smoothed OU walk around the workspace centre, clipped to bounds.

    Both the OU state and the filter use their exact per-frame discretisation.
    """
    ws = cfg.scene.workspace
    rng = np.random.default_rng(cfg.motion_seed)
    theta = cfg.motion.mean_reversion
    sigma = np.asarray(cfg.motion.sigma, dtype=float)
    decay = math.exp(-theta * cfg.dt)
    noise_scale = sigma * math.sqrt((1 - decay**2) / (2 * theta))
    mu = ws.center
    blend = -math.expm1(-cfg.dt / cfg.motion.smoothing) if cfg.motion.smoothing > 0 else 1.0
    out = np.empty((cfg.frames, 3))
    walk = np.asarray(start, dtype=float)
    cur = walk.copy()
    out[0] = cur
    for t in range(1, cfg.frames):
        walk = np.clip(mu + (walk - mu) * decay + noise_scale * rng.standard_normal(3), ws.low, ws.high)
        cur = cur + (walk - cur) * blend
        out[t] = cur
    return out


def generate_episode(
    cfg: EpisodeConfig,
    sim_params: SimParams | None = None,
    render_cfg: RenderConfig | None = None,
    sensor_kwargs: dict | None = None,
) -> Episode:
    """Roll out one episode: frame 0 is the rest state, frame t >= 1 follows one sim step.

    The command emitted at frame t reaches the base at frame t + delay; the
    delay line starts filled with the initial pose.
    """
    sim_params = sim_params or SimParams()
    render_cfg = render_cfg or RenderConfig()
    render_cfg = replace(
        render_cfg,
        distractor=replace(render_cfg.distractor, enabled=cfg.distractor, seed=cfg.distractor_seed),
    )
    layout = init_layout(cfg.layout_seed, n_segments=sim_params.n_nodes - 1, **(sensor_kwargs or {}))
    state = build_scene(cfg.scene, cfg.scene.seed, sim_params)
    commands = ou_commands(cfg, state.base_pose)
    sensor_state = SensorState.initial(cfg.sensor_seed)
    distractor = init_distractor(render_cfg) if cfg.distractor else None

    T = cfg.frames
    h, w = render_cfg.height, render_cfg.width
    ep = Episode(
        actions=commands.astype(np.float32),
        sensors=np.empty((T, 6), np.float32),
        images=np.empty((T, h, w, 3), np.uint8),
        masks=np.empty((T, h, w), np.uint8),
        contact=np.zeros(T, bool),
        object_contact=np.zeros(T, bool),
        base_poses=np.empty((T, 3)),
    )
    initial = state.base_pose.copy()
    for t in range(T):
        if t > 0:
            applied = commands[t - cfg.delay] if t >= cfg.delay else initial
            try:
                state = step(state, applied, cfg.dt, cfg.scene, sim_params)
            except DivergenceError as exc:
                raise DivergenceError(f"frame {t}: {exc}", exc.node_index) from None
            ep.contact[t] = state.in_contact
            ep.object_contact[t] = bool(np.any(state.object_contact))
        readings, sensor_state = read(layout, sensor_state, strain_profile(state, sim_params), cfg.dt if t else 0.0)
        img, distractor = render(state, cfg.scene, render_cfg, distractor)
        ep.sensors[t] = readings
        ep.images[t] = img.rgb
        ep.masks[t] = img.mask
        ep.base_poses[t] = state.base_pose
    return ep


# -------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetConfig:
    n_batches: int = 12
    frames: int = 600
    dt: float = 1.0 / 33.0
    delay: int = 0
    distractor: bool = False
    test_batches: int = 1
    scene: SceneRandomization = field(default_factory=SceneRandomization)
    motion: MotionConfig = field(default_factory=MotionConfig)
    layout_seed: int = 0  # one physical finger: same sensor placement in every batch

    def validate(self) -> None:
        if self.n_batches < 1 or self.frames < 1:
            raise ValueError("need at least one batch of at least one frame")
        if not 0 <= self.test_batches < self.n_batches:
            raise ValueError("test_batches must leave at least one training batch")
        if self.delay < 0 or not self.dt > 0:
            raise ValueError("delay must be >= 0 and dt > 0")


FULL_SCALE = DatasetConfig(n_batches=77, frames=5000, test_batches=1)


@dataclass
class Dataset:
    header: dict
    batches: list[Episode]

    @property
    def image_size(self) -> int:
        return int(self.header["render"]["height"])

    @property
    def test_flags(self) -> list[bool]:
        return [b["test"] for b in self.header["batches"]]

    def split(self, which: str) -> list[int]:
        flags = self.test_flags
        if which == "train":
            return [i for i, f in enumerate(flags) if not f]
        if which == "test":
            return [i for i, f in enumerate(flags) if f]
        if which == "all":
            return list(range(len(flags)))
        raise ValueError(f"unknown split {which!r}")

    def digest(self) -> str:
        h = hashlib.sha256(_header_bytes(self.header))
        for ep in self.batches:
            for arr in (ep.actions, ep.sensors, ep.images, ep.masks):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _stats(batches: list[Episode], idx: list[int]) -> dict:
    x = np.concatenate([np.concatenate([batches[i].actions, batches[i].sensors], axis=1) for i in idx])
    x = x.astype(np.float64)
    return {"mean": x.mean(axis=0).tolist(), "std": x.std(axis=0).tolist()}


def generate_dataset(
    cfg: DatasetConfig,
    scene_seed: int,
    sim_params: SimParams | None = None,
    render_cfg: RenderConfig | None = None,
    sensor_kwargs: dict | None = None,
    threads: int = 1,
    progress=None,
) -> Dataset:
    """Generate `cfg.n_batches` episodes (fresh scene per batch unless `scene.fixed`); the last ones are test batches."""
    cfg.validate()
    sim_params = sim_params or SimParams()
    render_cfg = render_cfg or RenderConfig()
    seeds = np.random.SeedSequence(scene_seed).generate_state(4 * cfg.n_batches).reshape(cfg.n_batches, 4)

    def episode_cfg(b: int) -> EpisodeConfig:
        s = [int(v) for v in seeds[b]]
        scene = random_scene(int(seeds[0, 0]) if cfg.scene.fixed else s[0], cfg.scene, params=sim_params)
        return EpisodeConfig(
            scene=scene,
            frames=cfg.frames,
            dt=cfg.dt,
            motion=cfg.motion,
            delay=cfg.delay,
            distractor=cfg.distractor,
            motion_seed=s[1],
            sensor_seed=s[2],
            distractor_seed=s[3],
            layout_seed=cfg.layout_seed,
        )

    configs = [episode_cfg(b) for b in range(cfg.n_batches)]

    def run(b):
        ep = generate_episode(configs[b], sim_params, render_cfg, sensor_kwargs)
        if progress:
            progress(f"batch {b + 1}/{cfg.n_batches} done")
        return ep

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            batches = list(pool.map(run, range(cfg.n_batches)))
    else:
        batches = [run(b) for b in range(cfg.n_batches)]

    n_test = cfg.test_batches
    batch_meta = []
    for b, (ec, ep) in enumerate(zip(configs, batches)):
        batch_meta.append(
            {
                "index": b,
                "test": b >= cfg.n_batches - n_test,
                "frames": len(ep),
                "scene_seed": ec.scene.seed,
                "motion_seed": ec.motion_seed,
                "sensor_seed": ec.sensor_seed,
                "distractor_seed": ec.distractor_seed,
                "contact_frames": np.flatnonzero(ep.contact).tolist(),
                "object_contact_frames": np.flatnonzero(ep.object_contact).tolist(),
                "scene": jsonable(ec.scene),
            }
        )
    train_idx = [b for b in range(cfg.n_batches) if not batch_meta[b]["test"]]
    header = {
        "dataset": jsonable(cfg),
        "scene_seed": scene_seed,
        "sim": jsonable(sim_params),
        "render": jsonable(render_cfg),
        "sensors": jsonable(sensor_kwargs or {}),
        "normalization": _stats(batches, train_idx),
        "batches": batch_meta,
    }
    return Dataset(header, batches)


# ------------------------------------------------------------------ file format

DATASET_MAGIC = b"SBSD"
DATASET_VERSION = 1


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_dataset(path, ds: Dataset) -> None:
    blob = _header_bytes(ds.header)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(blob)))
        fh.write(blob)
        for ep in ds.batches:
            n = len(ep)
            h, w = ep.masks.shape[1:]
            rec = np.empty(
                n,
                dtype=[
                    ("action", "<f4", (3,)),
                    ("sensors", "<f4", (6,)),
                    ("rgb", "u1", (h, w, 3)),
                    ("mask", "u1", (h, w)),
                ],
            )
            rec["action"] = ep.actions
            rec["sensors"] = ep.sensors
            rec["rgb"] = ep.images
            rec["mask"] = ep.masks
            fh.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 10:
        raise FormatError("truncated dataset header", offset=len(buf))
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)", offset=0)
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    pos = 10
    if pos + n > len(buf):
        raise FormatError("truncated header blob", offset=len(buf))
    try:
        header = json.loads(buf[pos : pos + n].decode())
        h = int(header["render"]["height"])
        w = int(header["render"]["width"])
        metas = header["batches"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=pos) from None
    pos += n
    rec_t = np.dtype(
        [("action", "<f4", (3,)), ("sensors", "<f4", (6,)), ("rgb", "u1", (h, w, 3)), ("mask", "u1", (h, w))]
    )
    batches = []
    for meta in metas:
        t = int(meta["frames"])
        size = t * rec_t.itemsize
        if pos + size > len(buf):
            raise FormatError(f"truncated frame data in batch {meta['index']}", offset=len(buf))
        rec = np.frombuffer(buf, dtype=rec_t, count=t, offset=pos)
        pos += size
        contact = np.zeros(t, bool)
        contact[meta["contact_frames"]] = True
        ocontact = np.zeros(t, bool)
        ocontact[meta["object_contact_frames"]] = True
        batches.append(
            Episode(
                actions=rec["action"].astype(np.float32),
                sensors=rec["sensors"].astype(np.float32),
                images=rec["rgb"].copy(),
                masks=rec["mask"].copy(),
                contact=contact,
                object_contact=ocontact,
                base_poses=np.full((t, 3), np.nan),
            )
        )
    if pos != len(buf):
        raise FormatError("trailing bytes after last frame", offset=pos)
    return Dataset(header, batches)


# --------------------------------------------------------------- training views

TASKS = ("static_schema", "scene_conditioned", "recurrent")


@dataclass
class View:
    """Model inputs and targets for one split, assembled lazily per minibatch.

    `vectors` holds the normalised 9-channel action+tactile inputs. For the
    scene-conditioned task each frame is paired with the first image of its
    batch, broadcast with the vector into a 12-channel input.
    """

    task: str
    vectors: np.ndarray  # (n, 9) float32, normalised
    images: np.ndarray  # (n, H, W, 3) uint8 targets
    masks: np.ndarray  # (n, H, W) uint8
    batch_ids: np.ndarray  # (n,) dataset batch index
    times: np.ndarray  # (n,) frame index within its batch
    contact: np.ndarray  # (n,) bool
    object_contact: np.ndarray  # (n,) bool
    cond_images: dict[int, np.ndarray]  # batch index -> first frame (H, W, 3) uint8
    channel_means: np.ndarray  # (9,) training-split mean in normalised units
    features: np.ndarray | None = None  # recurrent targets, (n, F)

    def __len__(self):
        return len(self.vectors)

    def with_vectors(self, vectors: np.ndarray) -> "View":
        return replace(self, vectors=np.asarray(vectors, dtype=np.float32))

    def subset(self, idx) -> "View":
        idx = np.asarray(idx)
        return replace(
            self,
            vectors=self.vectors[idx],
            images=self.images[idx],
            masks=self.masks[idx],
            batch_ids=self.batch_ids[idx],
            times=self.times[idx],
            contact=self.contact[idx],
            object_contact=self.object_contact[idx],
            features=None if self.features is None else self.features[idx],
        )

    def targets(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return imgs.astype(np.float32) / 255.0

    def inputs(self, idx=None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        vec = self.vectors[idx]
        if self.task == "static_schema":
            return vec
        return scene_inputs(
            np.stack([self.cond_images[int(b)] for b in self.batch_ids[idx]]), vec
        )

    def sequences(self) -> list[np.ndarray]:
        """Row indices of each batch in time order."""
        out = []
        for b in np.unique(self.batch_ids):
            rows = np.flatnonzero(self.batch_ids == b)
            out.append(rows[np.argsort(self.times[rows], kind="stable")])
        return out


def scene_inputs(cond_rgb: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Concatenate scene images (uint8) with each 9-vector broadcast over the image plane."""
    n, h, w, _ = cond_rgb.shape
    out = np.empty((n, h, w, 3 + N_INPUTS), dtype=np.float32)
    out[..., :3] = cond_rgb.astype(np.float32) / 255.0
    out[..., 3:] = np.asarray(vectors, dtype=np.float32)[:, None, None, :]
    return out


def normalizer(header: dict, enabled: bool = True):
    mean = np.asarray(header["normalization"]["mean"])
    std = np.asarray(header["normalization"]["std"])
    std = np.where(std > 1e-12, std, 1.0)
    if not enabled:
        return lambda x: np.asarray(x, dtype=np.float32)
    return lambda x: ((np.asarray(x, dtype=np.float64) - mean) / std).astype(np.float32)


def make_training_views(
    ds: Dataset, task: str, split: str = "train", normalize: bool = True, feature_fn=None
) -> View:
    """Assemble inputs/targets of a split for `task`.

    For "recurrent", `feature_fn` maps uint8 images (n, H, W, 3) to autoencoder
    features used as targets.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    norm = normalizer(ds.header, normalize)
    idx = ds.split(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    eps = [ds.batches[i] for i in idx]
    raw = np.concatenate([np.concatenate([e.actions, e.sensors], axis=1) for e in eps])
    train_raw = np.concatenate(
        [np.concatenate([ds.batches[i].actions, ds.batches[i].sensors], axis=1) for i in ds.split("train")]
    )
    view = View(
        task=task,
        vectors=norm(raw),
        images=np.concatenate([e.images for e in eps]),
        masks=np.concatenate([e.masks for e in eps]),
        batch_ids=np.concatenate([np.full(len(e), i) for i, e in zip(idx, eps)]),
        times=np.concatenate([np.arange(len(e)) for e in eps]),
        contact=np.concatenate([e.contact for e in eps]),
        object_contact=np.concatenate([e.object_contact for e in eps]),
        cond_images={i: ds.batches[i].images[0] for i in idx},
        channel_means=norm(train_raw).astype(np.float64).mean(axis=0).astype(np.float32),
    )
    if task == "recurrent":
        if feature_fn is None:
            raise ValueError("recurrent views need feature_fn to build feature targets")
        view.features = np.asarray(feature_fn(view.images), dtype=np.float32)
    return view


def finger_pixels(masks: np.ndarray) -> np.ndarray:
    return masks == LABEL_FINGER


def distractor_pixels(masks: np.ndarray) -> np.ndarray:
    return masks == LABEL_DISTRACTOR


__all__ = [
    "DatasetConfig",
    "Dataset",
    "DistractorConfig",
    "Episode",
    "EpisodeConfig",
    "Frame",
    "MotionConfig",
    "OBJECT_CATALOG",
    "FULL_SCALE",
    "SceneRandomization",
    "View",
    "generate_dataset",
    "generate_episode",
    "load_dataset",
    "make_training_views",
    "random_scene",
    "save_dataset",
    "scene_inputs",
]
