"""Acceptance suite: one test, and one summary line, per criterion.

The learning criteria (4-10, 12) train real networks and take roughly twenty
minutes together on one CPU core. They use a fast actuator (tau = 10 ms) so the
realised pose is a function of the command history and the injected transport
delay alone; with the default 0.3 s base lag the pose is under-determined by a
single command and the static net plateaus well above the training-sanity bar.
"""

import math
import time

import numpy as np
import pytest

from softschema import autodiff as ad
from softschema.analysis import (
    INPUT_NAMES,
    TACTILE_CHANNELS,
    ablate_inputs,
    compare_architectures,
    conditioning_predictor,
    constant_predictor,
    evaluate,
    lag_scan,
    latent_segmentation,
    noise_filter_check,
    permutation_baseline,
)
from softschema.autodiff import ShapeError, Tensor
from softschema.datagen import (
    DatasetConfig,
    EpisodeConfig,
    MotionConfig,
    SceneRandomization,
    generate_dataset,
    generate_episode,
    load_dataset,
    make_training_views,
    ou_commands,
    save_dataset,
)
from softschema.errors import FormatError
from softschema.gradcheck import check
from softschema.models import (
    Checkpoint,
    ModelConfig,
    Network,
    build_scene_conditioned,
    build_static_schema,
    load_checkpoint,
    save_checkpoint,
)
from softschema.render import RenderConfig
from softschema.sensors import SensorState, init_layout, read
from softschema.sim import (
    MovableDisc,
    SceneSpec,
    SimParams,
    build_scene,
    kinetic_energy,
    potential_energy,
    step,
)
from softschema.train import TrainConfig, fit_images
from test_autodiff import GRAD_CASES, rnd, sq

pytestmark = pytest.mark.slow

DT = 1.0 / 33.0
FAST = SimParams(tau=0.01)
# obstacles drawn one grey level off the background: the static net cannot see
# the scene, so visible obstacles would only add unpredictable pixels
HIDDEN_OBSTACLES = RenderConfig(obstacle=(21, 20, 30))
# obstacles placed high enough that the finger presses into them
REACHABLE = (-0.11, 0.11, -0.10, -0.02)
M64 = ModelConfig(image_size=64)


def train_static(ds, epochs, view_fn=None):
    train = make_training_views(ds, "static_schema", "train")
    if view_fn:
        train = view_fn(train)
    net = Network(build_static_schema(M64), seed=0)
    fit_images(net, train, TrainConfig(epochs=epochs, seed=0))
    return net


def mean_ablated(view):
    v = view.vectors.copy()
    v[:, list(TACTILE_CHANNELS)] = view.channel_means[list(TACTILE_CHANNELS)]
    return view.with_vectors(v)


# ------------------------------------------------------------------ 1


def test_criterion_01_autodiff(criterion):
    t0 = time.perf_counter()
    errors = {}
    for name, (f, shapes) in GRAD_CASES.items():
        errors[name] = check(f, [rnd(i + 7, *s) for i, s in enumerate(shapes)])
    x = np.where(np.abs(rnd(5, 12)) < 0.05, 0.3, rnd(5, 12))
    errors["relu"] = check(lambda a: sq(ad.relu(a)), [x])

    u, d = 3, 2

    def lstm3(x, h0, c0, wi, wh, b):
        h, c = h0, c0
        for t in range(3):
            h, c = ad.lstm_step(x[t], h, c, wi, wh, b)
        return sq(h)

    errors["lstm_step"] = check(lstm3, [rnd(1, 3, d), rnd(2, u), rnd(3, u), rnd(4, d, 4 * u), rnd(5, u, 4 * u), rnd(6, 4 * u)])

    adjoint = 0.0
    for size, stride, padding in [(9, 1, 0), (9, 1, 1), (9, 2, 1), (9, 2, 0), (10, 3, 1), (11, 2, 1)]:
        rng = np.random.default_rng(size + stride + padding)
        k = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
        xs = rng.standard_normal((2, size, size, 2)).astype(np.float32)
        fwd = ad.conv2d(Tensor(xs), Tensor(k), stride=stride, padding=padding).data
        ys = rng.standard_normal(fwd.shape).astype(np.float32)
        back = ad.conv_transpose2d(Tensor(ys), Tensor(k), stride=stride, padding=padding).data
        lhs, rhs = float(np.sum(fwd * ys)), float(np.sum(xs * back))
        adjoint = max(adjoint, abs(lhs - rhs) / max(1.0, abs(lhs)))
    seconds = time.perf_counter() - t0

    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5 and adjoint < 1e-5 and seconds < 60
    criterion(ok, f"{len(errors)} ops, worst rel err {errors[worst]:.1e} ({worst}); adjoint {adjoint:.1e}; {seconds:.1f}s")


# ------------------------------------------------------------------ 2


def test_criterion_02_physics_invariants(criterion):
    t0 = time.perf_counter()
    pose = (0.0, 0.08, -math.pi / 2)
    sc = SceneSpec(
        movable_objects=(MovableDisc((0.03, -0.075), 0.02, 0.2, 0), MovableDisc((-0.1, -0.12), 0.015, 0.1, 1)),
        base_pose=pose,
    )
    cmds = ou_commands(EpisodeConfig(scene=sc, motion_seed=2, motion=MotionConfig(smoothing=0.3)), np.array(pose))[:200]

    def run():
        st, trace = build_scene(sc, 0), []
        for c in cmds[1:]:
            prev = st.object_positions.copy()
            st = step(st, c, DT, sc)
            trace.append((prev, st))
        return st, trace

    a, trace = run()
    b, _ = run()
    deterministic = (
        a.finger.node_positions.tobytes() == b.finger.node_positions.tobytes()
        and a.object_positions.tobytes() == b.object_positions.tobytes()
    )
    moved_free = max(
        (float(np.abs(s.object_positions[k] - prev[k]).max()) for prev, s in trace for k in range(2) if not s.object_contact[k]),
        default=0.0,
    )
    pushed = sum(bool(s.object_contact.any()) for _, s in trace)

    # zero commanded motion: hold the last pose, no contact
    free = SceneSpec(base_pose=pose)
    st = build_scene(free, 0)
    at_rest = 0.0
    for _ in range(30):
        st = step(st, pose, DT, free)
        at_rest = max(at_rest, kinetic_energy(st))
    for c in ou_commands(EpisodeConfig(scene=free, motion_seed=1, motion=MotionConfig(smoothing=0.3)), np.array(pose))[1:80]:
        st = step(st, c, DT, free)
    hold = st.base_pose.copy()
    st = step(st, hold, DT, free)
    prev, rises = kinetic_energy(st) + potential_energy(st), 0
    for _ in range(150):
        st = step(st, hold, DT, free)
        e = kinetic_energy(st) + potential_energy(st)
        rises += e > prev
        prev = e

    delays_ok = True
    for d in (3, 10):
        base = EpisodeConfig(scene=free, frames=80, motion_seed=5, motion=MotionConfig(smoothing=0.2))
        x = generate_episode(base)
        y = generate_episode(EpisodeConfig(**{**base.__dict__, "delay": d}))
        delays_ok &= np.array_equal(y.base_poses[d:], x.base_poses[:-d])
    seconds = time.perf_counter() - t0

    ok = deterministic and pushed > 0 and moved_free < 1e-9 and at_rest < 1e-25 and rises == 0 and delays_ok and seconds < 60
    criterion(
        ok,
        f"bit-identical {deterministic}; free-object drift {moved_free:.1e} m over {len(trace) - pushed} frames "
        f"({pushed} contact frames); KE at rest {at_rest:.1e}; energy rises after stop {rises}; "
        f"delay shift exact {delays_ok}; {seconds:.1f}s",
    )


# ------------------------------------------------------------------ 3


def test_criterion_03_hysteresis(criterion):
    t0 = time.perf_counter()

    def ys(layout, path, dt):
        state, out = SensorState.initial(0), []
        for s in path:
            _, state = read(layout, state, s, dt)
            out.append(state.play_memory.copy())
        return np.array(out)

    deadband = rate = memory = True
    for seed in range(20):
        layout = init_layout(seed).quiet()
        rng = np.random.default_rng(seed)
        n = layout.n_segments
        s0 = rng.uniform(0.02, 0.08, n)
        a0, w = layout.aggregate(s0), layout.play_width
        lo = max([1 - 2 * wi / ai for ai, wi in zip(a0, w) if ai > wi], default=0.0)
        wiggle = [s0 * u for u in rng.uniform(max(lo, 0.0), 1.0, 50)]
        y = ys(layout, [s0, *wiggle], DT)
        deadband &= bool(np.all(y[1:] == y[0]))

        path = list(rng.uniform(0, 0.1, (40, n)))
        rate &= np.array_equal(ys(layout, path, DT), ys(layout, path, 0.25))

        press = np.full(n, 4 * w.max() / 1.0)
        y = ys(layout, [np.zeros(n), press, np.zeros(n)], DT)
        memory &= bool(np.all(y[-1] != y[0]))
    seconds = time.perf_counter() - t0
    ok = deadband and rate and memory and seconds < 10
    criterion(ok, f"20 layouts: deadband {deadband}, rate independence {rate}, press-release memory {memory}; {seconds:.1f}s")


# ------------------------------------------------------------------ 4


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    ds = generate_dataset(DatasetConfig(n_batches=12, frames=600), 11, sim_params=FAST)
    net = train_static(ds, epochs=8)
    return ds, net, time.perf_counter() - t0


def test_criterion_04_training_sanity(criterion, desk_run):
    ds, net, seconds = desk_run
    test = make_training_views(ds, "static_schema", "test")
    train = make_training_views(ds, "static_schema", "train")
    mse = evaluate(net, test).mean
    baseline = evaluate(constant_predictor(train.targets().mean(axis=0)), test).mean
    ratio = mse / baseline
    ok = ratio <= 0.2 and seconds <= 30 * 60 and not ds.batches[0].contact.any()
    criterion(ok, f"test MSE {mse:.5f} = {ratio:.3f} x mean-image baseline {baseline:.5f} (bar 0.2); {seconds / 60:.1f} min")


# ------------------------------------------------------------------ 5 and 8


@pytest.fixture(scope="module")
def contact_run():
    cfg = DatasetConfig(n_batches=44, frames=165, test_batches=4, scene=SceneRandomization(n_obstacles=2, region=REACHABLE))
    ds = generate_dataset(cfg, 1, sim_params=FAST, render_cfg=HIDDEN_OBSTACLES)
    return ds, train_static(ds, 6), train_static(ds, 6, mean_ablated)


def test_criterion_05_tactile_necessity(criterion, contact_run):
    ds, tactile_net, ablated_net = contact_run
    test = make_training_views(ds, "static_schema", "test")
    with_tactile = evaluate(tactile_net, test).contact_mse
    without = evaluate(ablated_net, mean_ablated(test)).contact_mse
    ratio = with_tactile / without
    criterion(
        ratio <= 0.8,
        f"contact-frame MSE {with_tactile:.5f} with tactile vs {without:.5f} mean-ablated = {ratio:.3f} (bar 0.8); "
        f"{int(test.contact.sum())} contact frames",
    )


def test_criterion_08_ablation(criterion, contact_run):
    # golden run: the contact-rich tactile model, where every input carries information
    ds, net, _ = contact_run
    test = make_training_views(ds, "static_schema", "test")
    rep = ablate_inputs(net, test, diagnostic=True)
    v = test.vectors.copy()
    v[:, 5] = test.channel_means[5]
    flat = ablate_inputs(net, test.with_vectors(v))
    ok = (
        rep.deltas.shape == (9,)
        and flat.deltas[5] == 0.0
        and bool(np.all(rep.deltas >= -1e-6))
        and rep.all_delta >= rep.deltas.max()
    )
    deltas = ", ".join(f"{n} {d:.2e}" for n, d in zip(INPUT_NAMES, rep.deltas))
    criterion(ok, f"deltas [{deltas}]; constant channel {flat.deltas[5]}; all-at-once {rep.all_delta:.2e}")


# ------------------------------------------------------------------ 6


def test_criterion_06_noise_filtering(criterion):
    ds = generate_dataset(DatasetConfig(n_batches=12, frames=600, distractor=True), 5, sim_params=FAST)
    net = train_static(ds, 8)
    res = noise_filter_check(net, make_training_views(ds, "static_schema", "train"))
    ok = res.ratio is not None and res.ratio < 0.2
    criterion(ok, f"prediction / image variance in the distractor region = {res.ratio:.4f} over {res.region_pixels} px (bar 0.2)")


# ------------------------------------------------------------------ 7


def test_criterion_07_lag_recovery(criterion):
    cfg = DatasetConfig(n_batches=12, frames=600, delay=10, scene=SceneRandomization(n_obstacles=2))
    ds = generate_dataset(cfg, 1, sim_params=FAST, render_cfg=HIDDEN_OBSTACLES)
    net = train_static(ds, 8)
    test = make_training_views(ds, "static_schema", "test")
    action = lag_scan(net, test, "action", range(21))
    tactile = lag_scan(net, test, "tactile", [0, 20])
    best = min(action, key=action.get)
    ok = 8 <= best <= 12 and tactile[20] >= tactile[0]
    criterion(
        ok,
        f"action-lag argmin {best} (MSE {action[best]:.5f}, lag 0 {action[0]:.5f}); "
        f"tactile lag 20 {tactile[20]:.5f} vs lag 0 {tactile[0]:.5f}; {int(test.contact.sum())} contact frames",
    )


# ------------------------------------------------------------------ 9 and 10


@pytest.fixture(scope="module")
def scene_run():
    cfg = DatasetConfig(n_batches=12, frames=600, test_batches=2, scene=SceneRandomization(n_objects=2, region=REACHABLE))
    ds = generate_dataset(cfg, 4, sim_params=FAST)
    net = Network(build_scene_conditioned(M64), seed=0)
    fit_images(net, make_training_views(ds, "scene_conditioned", "train"), TrainConfig(epochs=4, seed=0))
    return ds, net, make_training_views(ds, "scene_conditioned", "test")


def test_criterion_09_scene_conditioned(criterion, scene_run):
    _, net, test = scene_run
    after = np.zeros(len(test), bool)
    for rows in test.sequences():
        hit = np.flatnonzero(test.object_contact[rows])
        if len(hit):
            after[rows[hit[0]:]] = True
    model = evaluate(net, test).per_frame[after].mean()
    cond = evaluate(conditioning_predictor(), test).per_frame[after].mean()
    ratio = model / cond
    criterion(
        after.any() and ratio <= 0.5,
        f"{int(after.sum())} held-out frames after first contact: MSE {model:.5f} = {ratio:.3f} x conditioning image {cond:.5f} (bar 0.5)",
    )


def test_criterion_10_segmentation(criterion, scene_run):
    _, net, test = scene_run
    layer = net.spec.transposed_layers()[-2]
    row = int(np.flatnonzero(test.object_contact)[0])
    rep = latent_segmentation(net, test.inputs([row])[0], test.masks[row], layer)
    p95 = float(np.percentile(permutation_baseline(rep, "object", draws=100, seed=0), 95))
    best = rep.best_iou("object")
    criterion(best > p95, f"layer {layer}, frame {row}: best object IoU {best:.3f} (channel {rep.best_channel('object')}) vs permutation p95 {p95:.3f}")


# ------------------------------------------------------------------ 11


def test_criterion_11_persistence(criterion, tmp_path):
    ds = generate_dataset(DatasetConfig(n_batches=3, frames=20, scene=SceneRandomization(n_objects=1, n_obstacles=1)), 2,
                          render_cfg=RenderConfig(width=32, height=32))
    path = tmp_path / "d.sbsd"
    save_dataset(path, ds)
    back = load_dataset(path)
    save_dataset(tmp_path / "again.sbsd", back)
    ds_ok = back.digest() == ds.digest() and (tmp_path / "again.sbsd").read_bytes() == path.read_bytes()

    spec = build_static_schema(ModelConfig(image_size=32))
    net = Network(spec, seed=4)
    save_checkpoint(tmp_path / "m.sbsm", Checkpoint(spec, net.weights(), {"k": 1}))
    ck = load_checkpoint(tmp_path / "m.sbsm")
    save_checkpoint(tmp_path / "m2.sbsm", ck)
    ck_ok = (tmp_path / "m2.sbsm").read_bytes() == (tmp_path / "m.sbsm").read_bytes() and all(
        ck.weights[k].tobytes() == w.tobytes() for k, w in net.weights().items()
    )

    rejected = []
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        try:
            load_dataset(path)
        except FormatError:
            rejected.append(True)
        else:
            rejected.append(False)
    raw = (tmp_path / "m.sbsm").read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-10]):
        (tmp_path / "bad.sbsm").write_bytes(bad)
        try:
            load_checkpoint(tmp_path / "bad.sbsm")
        except FormatError:
            rejected.append(True)
        else:
            rejected.append(False)
    try:
        ck.check_compatible(64)
        rejected.append(False)
    except ShapeError:
        rejected.append(True)
    ok = ds_ok and ck_ok and all(rejected)
    criterion(ok, f"dataset bit-exact {ds_ok}; checkpoint bit-exact {ck_ok}; {sum(rejected)}/{len(rejected)} corrupt inputs rejected")


# ------------------------------------------------------------------ 12


def test_criterion_12_architecture_comparison(criterion):
    cfg = DatasetConfig(n_batches=8, frames=150, scene=SceneRandomization(n_objects=1, region=REACHABLE))
    ds = generate_dataset(cfg, 6, sim_params=FAST, render_cfg=RenderConfig(width=32, height=32))
    t0 = time.perf_counter()
    report, _ = compare_architectures(ds, ModelConfig(image_size=32), TrainConfig(epochs=3, seed=0))
    seconds = time.perf_counter() - t0
    ok = (
        report.static.metadata["dataset"] == report.recurrent.metadata["dataset"] == ds.digest()
        and len(report.static.per_frame) == len(report.recurrent.per_frame) > 0
    )
    criterion(
        ok,
        f"scene-conditioned {report.static.mean:.5f}, recurrent {report.recurrent.mean:.5f}; "
        f"static better: {report.static_better} (observation only); {seconds:.0f}s",
    )
