"""Six soft strain sensors with play-operator hysteresis, baseline drift and noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_SENSORS = 6


class SensorContractError(ValueError):
    pass


@dataclass(frozen=True)
class SensorLayout:
    windows: tuple[tuple[int, int], ...]  # inclusive (first, last) segment index
    gain: np.ndarray
    play_width: np.ndarray
    drift_sigma: np.ndarray
    noise_sigma: np.ndarray
    n_segments: int

    def __post_init__(self):
        if len(self.windows) != N_SENSORS:
            raise ValueError(f"expected {N_SENSORS} sensor windows")
        for lo, hi in self.windows:
            if not 0 <= lo <= hi <= self.n_segments - 1:
                raise ValueError(f"window ({lo}, {hi}) outside [0, {self.n_segments - 1}]")
        for name in ("gain", "play_width", "drift_sigma", "noise_sigma"):
            arr = getattr(self, name)
            if arr.shape != (N_SENSORS,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be {N_SENSORS} finite values")
        if np.any(self.play_width < 0) or np.any(self.drift_sigma < 0) or np.any(self.noise_sigma < 0):
            raise ValueError("widths and sigmas must be non-negative")

    def coverage(self) -> float:
        covered = set()
        for lo, hi in self.windows:
            covered.update(range(lo, hi + 1))
        return len(covered) / self.n_segments

    def aggregate(self, strains: np.ndarray) -> np.ndarray:
        c = np.concatenate([[0.0], np.cumsum(strains)])
        return np.array([c[hi + 1] - c[lo] for lo, hi in self.windows])

    def quiet(self) -> "SensorLayout":
        """Copy of this layout with drift and noise switched off."""
        zero = np.zeros(N_SENSORS)
        return SensorLayout(self.windows, self.gain, self.play_width, zero, zero.copy(), self.n_segments)


@dataclass
class SensorState:
    play_memory: np.ndarray
    drift_offset: np.ndarray
    rng: np.random.Generator

    @classmethod
    def initial(cls, seed: int) -> "SensorState":
        return cls(np.zeros(N_SENSORS), np.zeros(N_SENSORS), np.random.default_rng(seed))

    def copy(self) -> "SensorState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return SensorState(self.play_memory.copy(), self.drift_offset.copy(), rng)


def init_layout(
    seed: int,
    n_segments: int = 7,
    gain: float = 1.0,
    play_width: float = 0.05,
    drift_sigma: float = 0.002,
    noise_sigma: float = 0.005,
    min_coverage: float = 0.75,
) -> SensorLayout:
    """Random sensor placement: windows of 1-3 segments, jittered gain and play width.

    Coverage is enforced constructively by stretching windows towards
    uncovered segments until at least `min_coverage` of the chain is sensed.
    """
    rng = np.random.default_rng(seed)
    windows = []
    for _ in range(N_SENSORS):
        length = int(rng.integers(1, min(3, n_segments) + 1))
        lo = int(rng.integers(0, n_segments - length + 1))
        windows.append([lo, lo + length - 1])

    def covered():
        s = set()
        for lo, hi in windows:
            s.update(range(lo, hi + 1))
        return s

    need = int(np.ceil(min_coverage * n_segments))
    for seg in rng.permutation(n_segments):
        if len(covered()) >= need:
            break
        if seg in covered():
            continue
        # stretch the window whose nearest edge is closest to the gap
        dist = [min(abs(seg - lo), abs(seg - hi)) for lo, hi in windows]
        k = int(np.argmin(dist))
        windows[k][0] = min(windows[k][0], int(seg))
        windows[k][1] = max(windows[k][1], int(seg))

    return SensorLayout(
        windows=tuple((lo, hi) for lo, hi in windows),
        gain=gain * rng.uniform(0.7, 1.3, N_SENSORS),
        play_width=play_width * rng.uniform(0.5, 1.5, N_SENSORS),
        drift_sigma=np.full(N_SENSORS, float(drift_sigma)),
        noise_sigma=np.full(N_SENSORS, float(noise_sigma)),
        n_segments=n_segments,
    )


def play(a, w, y_prev):
    """Backlash / play operator: y follows `a` only outside a deadband of half-width `w`."""
    return np.maximum(a - w, np.minimum(a + w, y_prev))


def read(
    layout: SensorLayout, state: SensorState, strains: np.ndarray, dt: float
) -> tuple[np.ndarray, SensorState]:
    strains = np.asarray(strains, dtype=float)
    if strains.shape != (layout.n_segments,):
        raise SensorContractError(f"expected {layout.n_segments} strains, got shape {strains.shape}")
    if not np.all(np.isfinite(strains)):
        raise SensorContractError("strains must be finite")
    if np.any(strains < 0):
        raise SensorContractError("strains must be non-negative")

    new = state.copy()
    a = layout.aggregate(strains)
    new.play_memory = play(a, layout.play_width, state.play_memory)
    # draws happen unconditionally so the stream does not depend on the sigmas
    drift_step = new.rng.standard_normal(N_SENSORS)
    noise = new.rng.standard_normal(N_SENSORS)
    new.drift_offset = state.drift_offset + layout.drift_sigma * np.sqrt(dt) * drift_step
    readings = layout.gain * new.play_memory + new.drift_offset + layout.noise_sigma * noise
    return readings, new
