"""Trajectory container and JSON-lines persistence.

File layout: line 0 is a metadata object (robot, dt, control interval,
seed, scenario, state-layout version); every following line is
``{"t": step, "x": [...], "u": [...]}``.  Floats are written with 17
significant digits so load(save(traj)) round-trips bit-exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

LAYOUT_VERSION = 1


def _fmt(x):
    return float(f"{float(x):.17g}")


@dataclass
class Trajectory:
    """Uniformly sampled (state, control) sequence with provenance."""

    robot: str
    dt: float
    states: np.ndarray                 # (T+1, D)
    controls: np.ndarray               # (T, control_dim)
    seed: int = 0
    scenario: str = ""
    control_interval: int = 1          # steps per control update
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise FormatError("states/controls must be 2-D arrays")
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise FormatError(
                "need exactly one more state than controls "
                f"({self.states.shape[0]} vs {self.controls.shape[0]})")

    @property
    def n_steps(self):
        return self.controls.shape[0]

    def metadata(self):
        meta = {"robot": self.robot, "dt": self.dt,
                "control_interval": self.control_interval,
                "seed": self.seed, "scenario": self.scenario,
                "layout_version": LAYOUT_VERSION,
                "n_steps": int(self.n_steps)}
        meta.update(self.extra)
        return meta

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.metadata(), sort_keys=True))
            fh.write("\n")
            zero_u = [0.0] * self.controls.shape[1]
            for t in range(self.states.shape[0]):
                u = list(map(_fmt, self.controls[t])) \
                    if t < self.n_steps else zero_u
                row = {"t": t, "x": list(map(_fmt, self.states[t])),
                       "u": u}
                fh.write(json.dumps(row))
                fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty trajectory file")
        try:
            meta = json.loads(lines[0])
            rows = [json.loads(ln) for ln in lines[1:]]
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad JSON ({exc})") from exc
        if meta.get("layout_version") != LAYOUT_VERSION:
            raise FormatError(
                f"{path}: unsupported layout version "
                f"{meta.get('layout_version')}")
        if not rows:
            raise FormatError(f"{path}: no state rows")
        states = np.array([r["x"] for r in rows], dtype=float)
        controls = np.array([r["u"] for r in rows[:-1]], dtype=float)
        if controls.size == 0:
            controls = controls.reshape(0, len(rows[0]["u"]))
        known = {"robot", "dt", "control_interval", "seed", "scenario",
                 "layout_version", "n_steps"}
        extra = {k: v for k, v in meta.items() if k not in known}
        return cls(robot=meta["robot"], dt=meta["dt"], states=states,
                   controls=controls, seed=meta.get("seed", 0),
                   scenario=meta.get("scenario", ""),
                   control_interval=meta.get("control_interval", 1),
                   extra=extra)
