"""Uniformly sampled trajectory container and its CSV representation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class TrajectoryError(ValueError):
    pass


@dataclass
class TrajectorySet:
    """A list of ``(n_samples, state_dim)`` arrays sharing one sampling interval.

    ``t0`` is the common start time of every trajectory; it matters only for
    forced systems where the phase of the excitation is tied to absolute time.
    """

    states: list[np.ndarray]
    dt: float
    labels: list[str] | None = None
    t0: float = 0.0

    def __post_init__(self):
        if isinstance(self.states, np.ndarray):
            self.states = [self.states]
        states = []
        for s in self.states:
            s = np.asarray(s, dtype=float)
            if s.ndim == 1:
                s = s[:, None]
            if s.ndim != 2:
                raise TrajectoryError(f"trajectory must be 2-D, got shape {s.shape}")
            states.append(s)
        self.states = states
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise TrajectoryError(f"dt must be positive and finite, got {self.dt}")
        if not states:
            raise TrajectoryError("empty trajectory set")
        dims = {s.shape[1] for s in states}
        if len(dims) != 1:
            raise TrajectoryError(f"inconsistent state dimensions {sorted(dims)}")
        for i, s in enumerate(states):
            if not np.all(np.isfinite(s)):
                raise TrajectoryError(f"trajectory {i} contains NaN or Inf")
        if self.labels is not None and len(self.labels) != len(states):
            raise TrajectoryError("labels must match the number of trajectories")

    @property
    def state_dim(self) -> int:
        return self.states[0].shape[1]

    @property
    def n_trajectories(self) -> int:
        return len(self.states)

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i) -> np.ndarray:
        return self.states[i]

    def times(self, i: int = 0) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states[i].shape[0])

    def stacked(self) -> np.ndarray:
        return np.vstack(self.states)

    def total_samples(self) -> int:
        return sum(s.shape[0] for s in self.states)

    def select(self, columns: int | Sequence[int]) -> "TrajectorySet":
        cols = [columns] if np.isscalar(columns) else list(columns)
        return TrajectorySet([s[:, cols] for s in self.states], self.dt, self.labels, self.t0)

    def drop_before(self, t: float) -> "TrajectorySet":
        """Discard the samples with time below ``t`` (transient removal)."""
        n = int(round((t - self.t0) / self.dt))
        n = max(n, 0)
        return TrajectorySet([s[n:] for s in self.states], self.dt, self.labels, self.t0 + n * self.dt)

    def map(self, fn) -> "TrajectorySet":
        return TrajectorySet([fn(s) for s in self.states], self.dt, self.labels, self.t0)


def write_csv(traj: TrajectorySet, path: str | Path, header_comments: Sequence[str] = ()) -> None:
    """Write one trajectory file per set; multiple trajectories are separated by a
    ``traj`` column so the file stays a single table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = traj.state_dim
    multi = traj.n_trajectories > 1
    cols = (["traj"] if multi else []) + ["t"] + [f"x{i + 1}" for i in range(n)]
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    buf.write(f"# dt={traj.dt!r} t0={traj.t0!r}\n")
    buf.write(",".join(cols) + "\n")
    for k, s in enumerate(traj.states):
        t = traj.times(k)[:, None]
        block = np.hstack([t, s])
        if multi:
            block = np.hstack([np.full((len(s), 1), k), block])
        np.savetxt(buf, block, fmt="%.17g", delimiter=",")
    path.write_text(buf.getvalue())


def read_csv(path: str | Path) -> TrajectorySet:
    path = Path(path)
    raw = path.read_text().splitlines()
    meta = {}
    for ln in raw:
        if ln.startswith("# dt="):
            meta = dict(kv.split("=", 1) for kv in ln[2:].split())
    lines = [ln for ln in raw if ln and not ln.startswith("#")]
    if not lines:
        raise TrajectoryError(f"{path}: no header")
    header = lines[0].split(",")
    if "t" not in header:
        raise TrajectoryError(f"{path}: header lacks a 't' column")
    data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    t_col = header.index("t")
    state_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    if "traj" in header:
        ids = data[:, header.index("traj")].astype(int)
        groups = [data[ids == k] for k in np.unique(ids)]
    else:
        groups = [data]
    t = groups[0][:, t_col]
    if len(t) < 2:
        raise TrajectoryError(f"{path}: need at least two samples to infer dt")
    if meta:
        dt, t0 = float(meta["dt"]), float(meta["t0"])
    else:
        dt, t0 = float(np.median(np.diff(t))), float(t[0])
    return TrajectorySet([g[:, state_cols] for g in groups], dt, t0=t0)
