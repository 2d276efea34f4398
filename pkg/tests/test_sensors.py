import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softschema.sensors import N_SENSORS, SensorContractError, SensorLayout, SensorState, init_layout, play, read

W = 0.1


def quiet_layout(width=W):
    """One single-segment sensor per segment 0..5, unit gain, no drift or noise."""
    return SensorLayout(
        windows=tuple((i, i) for i in range(N_SENSORS)),
        gain=np.ones(N_SENSORS),
        play_width=np.full(N_SENSORS, width),
        drift_sigma=np.zeros(N_SENSORS),
        noise_sigma=np.zeros(N_SENSORS),
        n_segments=7,
    )


def run(layout, seq, dt=0.03):
    state = SensorState.initial(0)
    out = []
    for a in seq:
        y, state = read(layout, state, np.full(layout.n_segments, a), dt)
        out.append(y[0])
    return np.array(out)


strain_seqs = st.lists(st.floats(0.0, 2.0, allow_nan=False), min_size=1, max_size=40)


def test_play_operator_example():
    assert play(0.5, 0.1, 0.0) == pytest.approx(0.4)
    assert play(0.2, 0.1, 0.4) == pytest.approx(0.3)
    assert play(0.35, 0.1, 0.3) == pytest.approx(0.3)  # inside the deadband


@given(strain_seqs)
def test_output_stays_within_the_deadband_of_the_input(seq):
    ys = run(quiet_layout(), seq)
    assert np.all(np.abs(ys - np.array(seq)) <= W + 1e-12)


@given(strain_seqs, st.floats(1e-3, 1.0))
def test_readings_do_not_depend_on_dt(seq, dt):
    np.testing.assert_array_equal(run(quiet_layout(), seq, 0.03), run(quiet_layout(), seq, dt))


@given(strain_seqs)
def test_readings_depend_on_the_ordered_values_only(seq):
    # repeating a value (holding still) never changes the output
    doubled = [a for a in seq for _ in range(2)]
    np.testing.assert_array_equal(run(quiet_layout(), seq), run(quiet_layout(), doubled)[1::2])


def test_press_release_memory():
    ys = run(quiet_layout(), [0.0, 0.5, 0.3, 0.45, 0.0])
    np.testing.assert_allclose(ys, [0.0, 0.4, 0.4, 0.4, 0.1])
    # the same strain reads differently on the way up and on the way down
    assert run(quiet_layout(), [0.0, 0.3])[-1] != run(quiet_layout(), [0.0, 0.6, 0.3])[-1]


def test_zero_width_play_is_the_identity():
    seq = [0.0, 0.3, 0.1, 0.7]
    np.testing.assert_allclose(run(quiet_layout(0.0), seq), seq)


def test_windows_sum_their_segment_strains():
    layout = init_layout(3)
    strains = np.arange(7) * 0.1
    for (lo, hi), a in zip(layout.windows, layout.aggregate(strains)):
        assert a == pytest.approx(strains[lo : hi + 1].sum())


@pytest.mark.parametrize("seed", range(20))
def test_layout_coverage_and_ranges(seed):
    layout = init_layout(seed)
    assert layout.coverage() >= 0.75
    assert np.all((layout.gain >= 0.7) & (layout.gain <= 1.3))
    assert np.all((layout.play_width >= 0.025) & (layout.play_width <= 0.075))


def test_quiet_readings_are_deterministic_and_noise_is_seeded():
    layout = init_layout(1)
    strains = np.full(7, 0.2)
    a, _ = read(layout.quiet(), SensorState.initial(0), strains, 0.03)
    b, _ = read(layout.quiet(), SensorState.initial(9), strains, 0.03)
    np.testing.assert_array_equal(a, b)
    n1, _ = read(layout, SensorState.initial(4), strains, 0.03)
    n2, _ = read(layout, SensorState.initial(4), strains, 0.03)
    np.testing.assert_array_equal(n1, n2)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_noise_statistics(seed):
    layout = SensorLayout(
        windows=tuple((i, i) for i in range(N_SENSORS)),
        gain=np.ones(N_SENSORS),
        play_width=np.zeros(N_SENSORS),
        drift_sigma=np.zeros(N_SENSORS),
        noise_sigma=np.full(N_SENSORS, 0.005),
        n_segments=7,
    )
    state = SensorState.initial(seed)
    ys = []
    for _ in range(400):
        y, state = read(layout, state, np.zeros(7), 0.03)
        ys.append(y)
    std = np.std(ys)
    assert 0.0045 < std < 0.0055


def test_read_does_not_mutate_its_input_state():
    state = SensorState.initial(0)
    before = state.rng.bit_generator.state
    read(init_layout(0), state, np.full(7, 0.3), 0.03)
    assert state.rng.bit_generator.state == before
    assert not state.play_memory.any()


@pytest.mark.parametrize(
    "strains", [np.full(6, 0.1), np.array([0.1, 0.0, 0.0, -0.01, 0.0, 0.0, 0.0]), np.full(7, np.nan)]
)
def test_contract_violations(strains):
    with pytest.raises(SensorContractError):
        read(init_layout(0), SensorState.initial(0), strains, 0.03)


def test_layout_validation():
    with pytest.raises(ValueError):
        SensorLayout(((0, 7),) * 6, np.ones(6), np.ones(6), np.zeros(6), np.zeros(6), 7)
    with pytest.raises(ValueError):
        SensorLayout(((0, 1),) * 6, np.ones(6), -np.ones(6), np.zeros(6), np.zeros(6), 7)
