"""Containers for solver output and sampled observations, with the CSV /
binary exchange formats used by every experiment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


def fmt(x: float) -> str:
    """Round-trip-safe decimal formatting for float64."""
    return format(float(x), ".17g")


def params_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Trajectory:
    """Time-stamped state rows of a 0D solve."""

    times: np.ndarray             # (n_t,), strictly increasing
    states: np.ndarray            # (n_t, n_channels)
    channels: tuple[str, ...]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape != (self.times.size, len(self.channels)):
            raise ValueError("state block does not match times/channels")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def channel(self, name: str) -> np.ndarray:
        return self.states[:, self.channels.index(name)]

    def at_times(self, ts: np.ndarray) -> np.ndarray:
        """States at the requested times, which must lie on the stored grid."""
        idx = np.searchsorted(self.times, ts)
        idx = np.clip(idx, 0, self.times.size - 1)
        left = np.clip(idx - 1, 0, self.times.size - 1)
        pick = np.where(np.abs(self.times[left] - ts) < np.abs(self.times[idx] - ts),
                        left, idx)
        if np.any(np.abs(self.times[pick] - ts) > 1e-9 * max(1.0, float(self.times[-1]))):
            raise ValueError("requested time outside the stored grid")
        return self.states[pick]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("t," + ",".join(self.channels) + "\n")
            for t, row in zip(self.times, self.states):
                f.write(fmt(t) + "," + ",".join(fmt(v) for v in row) + "\n")

    @staticmethod
    def from_csv(path) -> "Trajectory":
        with open(path) as f:
            header = f.readline().strip().split(",")
            data = np.loadtxt(f, delimiter=",", ndmin=2)
        return Trajectory(data[:, 0], data[:, 1:], tuple(header[1:]))


@dataclass
class SpaceTimeField:
    """Times x grid values for one or more channels of a 1D solve."""

    times: np.ndarray                    # (n_t,)
    xs: np.ndarray                       # (n_x,)
    values: dict[str, np.ndarray]        # channel -> (n_t, n_x)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        for name, arr in self.values.items():
            if arr.shape != (self.times.size, self.xs.size):
                raise ValueError(f"channel {name!r} has wrong shape")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.values.keys())

    def to_csv(self, path) -> None:
        names = self.channels
        with open(path, "w") as f:
            f.write("t,x," + ",".join(names) + "\n")
            for i, t in enumerate(self.times):
                for j, x in enumerate(self.xs):
                    vals = ",".join(fmt(self.values[c][i, j]) for c in names)
                    f.write(f"{fmt(t)},{fmt(x)},{vals}\n")

    @staticmethod
    def from_csv(path) -> "SpaceTimeField":
        with open(path) as f:
            header = f.readline().strip().split(",")
            data = np.loadtxt(f, delimiter=",", ndmin=2)
        names = header[2:]
        times = np.unique(data[:, 0])
        xs = np.unique(data[:, 1])
        values = {}
        for k, c in enumerate(names):
            values[c] = data[:, 2 + k].reshape(times.size, xs.size)
        return SpaceTimeField(times, xs, values)

    def to_binary(self, path_base, dt: float | None = None,
                  params: dict | None = None) -> None:
        """Raw 64-bit column-major blob + JSON sidecar {shape, dt, channels,
        params_hash}."""
        names = self.channels
        stack = np.stack([self.values[c] for c in names])  # (n_c, n_t, n_x)
        stack.ravel(order="F").tofile(str(path_base) + ".bin")
        sidecar = {
            "shape": list(stack.shape),
            "dt": dt if dt is not None else float(self.times[1] - self.times[0]),
            "channels": list(names),
            "params_hash": params_hash(params or {}),
            "times": [float(t) for t in self.times],
            "xs": [float(x) for x in self.xs],
        }
        with open(str(path_base) + ".json", "w") as f:
            json.dump(sidecar, f)

    @staticmethod
    def from_binary(path_base) -> "SpaceTimeField":
        with open(str(path_base) + ".json") as f:
            sidecar = json.load(f)
        shape = tuple(sidecar["shape"])
        raw = np.fromfile(str(path_base) + ".bin").reshape(shape, order="F")
        values = {c: raw[k] for k, c in enumerate(sidecar["channels"])}
        return SpaceTimeField(np.array(sidecar["times"]),
                              np.array(sidecar["xs"]), values)


@dataclass
class Dataset:
    """Observation tuples (t [, x], channel, value) plus the noise record
    and the sampling spec that generated them."""

    t: np.ndarray
    x: np.ndarray                 # nan where the observation has no location
    channel: np.ndarray           # array of channel names
    value: np.ndarray
    noise: dict | None = None     # {"sigma": float, "seed": int}; present iff sigma > 0
    sampling: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.channel = np.asarray(self.channel)
        self.value = np.asarray(self.value, dtype=float)
        if not (self.x.size == self.channel.size == self.value.size == n):
            raise ValueError("ragged observation columns")
        if not np.all(np.isfinite(self.value)):
            raise ValueError("non-finite observation values")
        if self.noise is not None and not self.noise.get("sigma", 0) > 0:
            raise ValueError("noise record present but sigma is not positive")

    def __len__(self) -> int:
        return self.t.size

    def channel_block(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.channel == name
        return self.t[mask], self.value[mask]

    def channel_block_xt(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.channel == name
        return self.t[mask], self.x[mask], self.value[mask]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("t,x,channel,value\n")
            for t, x, c, v in zip(self.t, self.x, self.channel, self.value):
                xs = "" if np.isnan(x) else fmt(x)
                f.write(f"{fmt(t)},{xs},{c},{fmt(v)}\n")
        if self.noise is not None or self.sampling:
            with open(str(path) + ".meta.json", "w") as f:
                json.dump({"noise": self.noise, "sampling": self.sampling}, f)

    @staticmethod
    def from_csv(path) -> "Dataset":
        ts, xs, cs, vs = [], [], [], []
        with open(path) as f:
            f.readline()
            for line in f:
                t, x, c, v = line.rstrip("\n").split(",")
                ts.append(float(t))
                xs.append(float(x) if x else np.nan)
                cs.append(c)
                vs.append(float(v))
        noise, sampling = None, {}
        meta_path = str(path) + ".meta.json"
        try:
            with open(meta_path) as f:
                meta = json.load(f)
            noise, sampling = meta.get("noise"), meta.get("sampling", {})
        except FileNotFoundError:
            pass
        return Dataset(np.array(ts), np.array(xs), np.array(cs, dtype=object),
                       np.array(vs), noise, sampling)
