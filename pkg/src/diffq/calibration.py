"""Calibration corpus drawn from the full-precision DDIM trajectory.

States are collected at a fixed stride along the sampler ladder, split into
train/validation per timestep and bucketed into contiguous timestep groups.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DenoiserModel, NoiseSchedule, ddim_sample
from .errors import CalibrationSetError, ConfigError, GroupingError, SplitError

MAGIC = b"QCAL"
VERSION = 1


@dataclass
class GroupSpec:
    """Contiguous timestep ranges; ``boundaries`` are the G+1 cut points."""
    G: int
    boundaries: list

    def __post_init__(self):
        b = list(self.boundaries)
        if len(b) != self.G + 1 or any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise GroupingError(f"boundaries {b} are not {self.G + 1} increasing cut points")

    def group_of(self, t: int) -> int:
        for g in range(self.G):
            if self.boundaries[g] <= t < self.boundaries[g + 1]:
                return g
        raise GroupingError(f"timestep {t} outside group boundaries {self.boundaries}")


@dataclass
class CalibrationSet:
    x: np.ndarray               # (N, d) states fed to the denoiser
    t: np.ndarray               # (N,) timestep of each state
    traj: np.ndarray            # (N,) trajectory index
    is_val: np.ndarray = None   # (N,) validation mask
    groups: GroupSpec | None = None
    T_steps: int = 0
    schedule_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.traj = np.asarray(self.traj, dtype=np.int64)
        if self.is_val is None:
            self.is_val = np.zeros(len(self.t), dtype=bool)
        self.is_val = np.asarray(self.is_val, dtype=bool)

    def __len__(self):
        return len(self.t)

    @property
    def timesteps(self) -> np.ndarray:
        return np.unique(self.t)

    @property
    def G(self) -> int:
        return 0 if self.groups is None else self.groups.G

    @property
    def group_ids(self) -> np.ndarray:
        if self.groups is None:
            raise CalibrationSetError("calibration set has no group assignment")
        return np.array([self.groups.group_of(int(t)) for t in self.t], dtype=np.int64)

    def group_map(self) -> dict:
        return {int(t): self.groups.group_of(int(t)) for t in self.timesteps}

    def indices(self, split: str = "train", group: int | None = None) -> np.ndarray:
        mask = self.is_val if split == "val" else ~self.is_val
        if split == "all":
            mask = np.ones(len(self), dtype=bool)
        if group is not None:
            mask = mask & (self.group_ids == group)
        return np.flatnonzero(mask)

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x[idx], self.t[idx]

    def validate(self):
        if self.groups is not None:
            self.group_ids  # raises on uncovered timesteps
        if self.is_val.any():
            counts = [int((self.is_val & (self.t == t)).sum()) for t in self.timesteps]
            if max(counts) - min(counts) > 1:
                raise CalibrationSetError(f"validation counts unbalanced across timesteps: {counts}")

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "version": VERSION,
            "n": len(self),
            "dim": int(self.x.shape[1]),
            "T_steps": self.T_steps,
            "schedule_digest": self.schedule_digest,
            "groups": None if self.groups is None else
            {"G": self.groups.G, "boundaries": self.groups.boundaries},
            "meta": self.meta,
        }

    def dumps(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        body = (self.x.astype("<f8").tobytes() + self.t.astype("<i8").tobytes()
                + self.traj.astype("<i8").tobytes() + self.is_val.astype("u1").tobytes())
        return MAGIC + struct.pack("<II", VERSION, len(head)) + head + body

    @classmethod
    def loads(cls, blob: bytes) -> "CalibrationSet":
        if blob[:4] != MAGIC:
            raise CalibrationSetError("not a calibration store")
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CalibrationSetError(f"unsupported calibration store version {version}")
        head = json.loads(blob[12:12 + hlen])
        n, d = head["n"], head["dim"]
        off = 12 + hlen
        x = np.frombuffer(blob, "<f8", n * d, off).reshape(n, d).astype(np.float64)
        off += 8 * n * d
        t = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
        traj = np.frombuffer(blob, "<i8", n, off + 8 * n).astype(np.int64)
        is_val = np.frombuffer(blob, "u1", n, off + 16 * n).astype(bool)
        g = head["groups"]
        groups = None if g is None else GroupSpec(g["G"], list(g["boundaries"]))
        return cls(x, t, traj, is_val, groups, head["T_steps"], head["schedule_digest"],
                   head["meta"])

    def save(self, path):
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        return cls.loads(Path(path).read_bytes())


def collection_steps(ladder, interval: int) -> list:
    if interval < 1 or len(ladder) % interval:
        raise ConfigError(f"interval {interval} does not divide the {len(ladder)}-step ladder")
    return [ladder[k] for k in range(0, len(ladder), interval)]


def generate_calibration(fp: DenoiserModel, schedule: NoiseSchedule, n_per_timestep: int,
                         interval: int = 2, seed: int = 0, ladder=None) -> CalibrationSet:
    """Run ``n_per_timestep`` DDIM trajectories from noise and keep the state
    entering every ``interval``-th ladder step."""
    if n_per_timestep <= 0:
        raise CalibrationSetError(f"n_per_timestep must be positive, got {n_per_timestep}")
    ladder = list(schedule.ladder() if ladder is None else ladder)
    keep = collection_steps(ladder, interval)
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal((n_per_timestep, fp.data_dim))
    _, states = ddim_sample(fp, schedule, x_T, ladder, keep_states=True)
    xs, ts, trajs = [], [], []
    for step, (t, x) in enumerate(states):
        if step % interval:
            continue
        xs.append(x)
        ts.append(np.full(n_per_timestep, t))
        trajs.append(np.arange(n_per_timestep))
    x, t, traj = np.concatenate(xs), np.concatenate(ts), np.concatenate(trajs)
    # canonical order: trajectory, then timestep
    order = np.lexsort((t, traj))
    cs = CalibrationSet(x[order], t[order], traj[order], T_steps=schedule.T_steps,
                        schedule_digest=schedule.digest(),
                        meta={"n_per_timestep": n_per_timestep, "interval": interval,
                              "seed": seed, "collected": [int(k) for k in keep]})
    return cs


def split_validation(cs: CalibrationSet, fraction: float, seed: int = 0) -> CalibrationSet:
    """Stratified train/validation split with equal validation counts per timestep."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    is_val = np.zeros(len(cs), dtype=bool)
    for t in cs.timesteps:
        idx = np.flatnonzero(cs.t == t)
        k = int(round(fraction * len(idx)))
        if k == 0 or k == len(idx):
            raise SplitError(int(t), fraction, len(idx))
        is_val[rng.permutation(idx)[:k]] = True
    out = CalibrationSet(cs.x, cs.t, cs.traj, is_val, cs.groups, cs.T_steps,
                         cs.schedule_digest, dict(cs.meta, val_fraction=fraction, split_seed=seed))
    out.validate()
    return out


def assign_groups(cs: CalibrationSet, G: int = 5) -> CalibrationSet:
    """Partition the collection timesteps into G contiguous near-equal ranges."""
    ts = np.sort(cs.timesteps)
    if G < 1 or G > len(ts):
        raise GroupingError(f"cannot form {G} groups from {len(ts)} distinct timesteps")
    parts = np.array_split(ts, G)
    # cut points sit at the low end of each range; the last one closes [0, T)
    bounds = [0] + [int(p[0]) for p in parts[1:]] + [max(cs.T_steps, int(ts[-1]) + 1)]
    spec = GroupSpec(G, bounds)
    return CalibrationSet(cs.x, cs.t, cs.traj, cs.is_val, spec, cs.T_steps, cs.schedule_digest,
                          dict(cs.meta, G=G))
