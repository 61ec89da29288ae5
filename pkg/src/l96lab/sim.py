"""Two-timescale Lorenz-96 dynamics with deterministic RK4 integration.

The system couples K slow ring variables X_k to J fast variables Y_{j,k}
per slow site, K + J*K equations in total:

    dX_k/dt = -X_{k-1} (X_{k-2} - X_{k+1}) - X_k + F - h c Ybar_k
    dY_m/dt = c ( -b Y_{m+1} (Y_{m+2} - Y_{m-1}) - Y_m + (h/J) X_{k(m)} )
    Ybar_k  = (1/J) sum_j Y_{j,k}

Slow indices are cyclic mod K. Fast variables live on a single flat ring
of length J*K with index m = k*J + j (j fastest), so the neighbour after
the last fast variable of slow site k is the first fast variable of site
k+1, wrapping cyclically. b scales the fast nonlinearity, c the fast/slow
timescale ratio, h the coupling strength, F the external forcing.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numba import njit

from .errors import ChecksumError, FormatError, IntegrationDiverged

TRAJECTORY_MAGIC = b"L96T"
TRAJECTORY_VERSION = 1
_TRAJECTORY_HEADER = struct.Struct("<4sIIIQd")  # magic, version, K, J, n_steps, dt


@dataclass(frozen=True)
class ModelParams:
    """Dynamical constants (b, c, h, F) plus ring shape (K, J)."""

    b: float
    c: float
    h: float
    F: float = 10.0
    K: int = 4
    J: int = 4

    def __post_init__(self):
        if self.K < 4 or self.J < 4:
            raise ValueError(
                f"K and J must both be >= 4 (quadratic terms reach indices +-2); got K={self.K}, J={self.J}"
            )
        if not (self.b > 0.0 and self.c > 0.0):
            raise ValueError(f"b and c must be strictly positive; got b={self.b}, c={self.c}")
        for name in ("b", "c", "h", "F"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"parameter {name} must be finite")

    @property
    def n_fast(self) -> int:
        return self.J * self.K

    @property
    def n_vars(self) -> int:
        return self.K + self.J * self.K

    def to_dict(self) -> dict:
        return {"b": self.b, "c": self.c, "h": self.h, "F": self.F, "K": self.K, "J": self.J}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(b=d["b"], c=d["c"], h=d["h"], F=d["F"], K=int(d["K"]), J=int(d["J"]))


@dataclass
class SimState:
    """Instantaneous state: x holds X_1..X_K, y the flat fast ring.

    y[m] = Y_{j,k} with m = k*J + j (0-based, j fastest).
    """

    x: np.ndarray
    y: np.ndarray

    def packed(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.x, dtype=np.float64),
                               np.asarray(self.y, dtype=np.float64)])

    def copy(self) -> "SimState":
        return SimState(np.array(self.x, dtype=np.float64), np.array(self.y, dtype=np.float64))


def check_state(state: SimState, params: ModelParams) -> None:
    """Raise if the state is inconsistent with params or non-finite."""
    x = np.asarray(state.x)
    y = np.asarray(state.y)
    if x.shape != (params.K,) or y.shape != (params.n_fast,):
        raise ValueError(
            f"state shape ({x.shape}, {y.shape}) inconsistent with K={params.K}, J={params.J}"
        )
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise IntegrationDiverged("state contains non-finite values")


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, recorded length, and discarded spin-up."""

    dt: float = 0.005
    n_steps: int = 50_000
    burn_in: int = 0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be > 0; got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1; got {self.n_steps}")
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be >= 0; got {self.burn_in}")

    def to_dict(self) -> dict:
        return {"dt": self.dt, "n_steps": self.n_steps, "burn_in": self.burn_in}


@dataclass
class Trajectory:
    """Recorded integration: row t of ``states`` is [x | y] after step t."""

    params: ModelParams
    states: np.ndarray  # (n_steps, K + J*K) float64
    dt: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != self.params.n_vars:
            raise ValueError(
                f"states must be (n_steps, {self.params.n_vars}); got {self.states.shape}"
            )
        if not np.isfinite(self.states).all():
            raise IntegrationDiverged("trajectory contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]


def default_init(params: ModelParams) -> SimState:
    """The fixed initial state shared by every simulation.

    X_k = 1.0 for all k except X_1 = 1.01 (a small asymmetry that seeds
    chaos deterministically); Y_{j,k} = 0.1 everywhere. Independent of
    (b, c, h, F).
    """
    x = np.ones(params.K, dtype=np.float64)
    x[0] = 1.01
    y = np.full(params.n_fast, 0.1, dtype=np.float64)
    return SimState(x, y)


def mean_fast(state: SimState, params: ModelParams) -> np.ndarray:
    """Ybar_k = (1/J) sum_j Y_{j,k} for each slow site k."""
    y = np.asarray(state.y, dtype=np.float64)
    return y.reshape(params.K, params.J).mean(axis=1)


@njit(cache=True)
def _tend(z, b, c, h, F, K, J):
    """Time derivatives of the packed state [x | y] (compiled hot path)."""
    n = J * K
    dz = np.empty(K + n)
    for k in range(K):
        s = 0.0
        for j in range(J):
            s += z[K + k * J + j]
        ybar = s / J
        xm1 = z[(k - 1) % K]
        xm2 = z[(k - 2) % K]
        xp1 = z[(k + 1) % K]
        dz[k] = -xm1 * (xm2 - xp1) - z[k] + F - h * c * ybar
    for m in range(n):
        ym1 = z[K + (m - 1) % n]
        yp1 = z[K + (m + 1) % n]
        yp2 = z[K + (m + 2) % n]
        dz[K + m] = c * (-b * yp1 * (yp2 - ym1) - z[K + m] + (h / J) * z[m // J])
    return dz


@njit(cache=True)
def _rk4_kernel(z, b, c, h, F, K, J, dt):
    k1 = _tend(z, b, c, h, F, K, J)
    k2 = _tend(z + 0.5 * dt * k1, b, c, h, F, K, J)
    k3 = _tend(z + 0.5 * dt * k2, b, c, h, F, K, J)
    k4 = _tend(z + dt * k3, b, c, h, F, K, J)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _integrate_kernel(z, b, c, h, F, K, J, dt, burn_in, n_steps):
    """Integrate and record; returns (rows, step_of_divergence or 0)."""
    rows = np.empty((n_steps, z.size))
    step = 0
    for _ in range(burn_in):
        z = _rk4_kernel(z, b, c, h, F, K, J, dt)
        step += 1
        if not np.all(np.isfinite(z)):
            return rows, step
    for t in range(n_steps):
        z = _rk4_kernel(z, b, c, h, F, K, J, dt)
        step += 1
        if not np.all(np.isfinite(z)):
            return rows, step
        rows[t] = z
    return rows, 0


def _tendencies_packed(z: np.ndarray, params: ModelParams) -> np.ndarray:
    """Time derivatives of the packed state [x | y]."""
    return _tend(
        np.ascontiguousarray(z, dtype=np.float64),
        params.b, params.c, params.h, params.F, params.K, params.J,
    )


def tendencies(state: SimState, params: ModelParams) -> SimState:
    """Evaluate (dX/dt, dY/dt) at ``state``; returned as a SimState-shaped container."""
    check_state(state, params)
    dz = _tendencies_packed(state.packed(), params)
    bad = np.flatnonzero(~np.isfinite(dz))
    if bad.size:
        raise IntegrationDiverged(
            f"non-finite tendency at packed index {int(bad[0])}", index=int(bad[0])
        )
    return SimState(dz[: params.K], dz[params.K :])


def rk4(f, z: np.ndarray, dt: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of dz/dt = f(z)."""
    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state: SimState, params: ModelParams, dt: float) -> SimState:
    """Advance the system one RK4 step of size ``dt``."""
    if not dt > 0.0:
        raise ValueError(f"dt must be > 0; got {dt}")
    check_state(state, params)
    z = _rk4_kernel(
        state.packed(), params.b, params.c, params.h, params.F, params.K, params.J, dt
    )
    if not np.isfinite(z).all():
        bad = int(np.flatnonzero(~np.isfinite(z))[0])
        raise IntegrationDiverged(f"non-finite value at packed index {bad} after RK4 step", index=bad)
    return SimState(z[: params.K], z[params.K :])


def simulate(params: ModelParams, init: SimState, config: IntegratorConfig) -> Trajectory:
    """Integrate burn_in discarded steps, then record n_steps rows.

    Deterministic: identical inputs give bit-identical trajectories. Raises
    IntegrationDiverged with the 1-based step index (counted over burn-in
    plus recorded steps) at which non-finite values first appeared.
    """
    check_state(init, params)
    rows, diverged = _integrate_kernel(
        init.packed(), params.b, params.c, params.h, params.F, params.K, params.J,
        config.dt, config.burn_in, config.n_steps,
    )
    if diverged:
        raise IntegrationDiverged(f"integration diverged at step {diverged}", step=diverged)
    return Trajectory(params=params, states=rows, dt=config.dt)


# ---------------------------------------------------------------------------
# Trajectory file format: 32-byte little-endian header + float64 payload,
# with a sibling JSON metadata file at <path>.json.
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_trajectory(
    traj: Trajectory,
    path: str | Path,
    init: SimState | None = None,
    config: IntegratorConfig | None = None,
) -> Path:
    """Write the binary trajectory file plus its JSON sidecar; returns the path."""
    path = Path(path)
    payload = np.ascontiguousarray(traj.states, dtype="<f8").tobytes()
    header = _TRAJECTORY_HEADER.pack(
        TRAJECTORY_MAGIC, TRAJECTORY_VERSION, traj.params.K, traj.params.J,
        traj.n_steps, traj.dt,
    )
    path.write_bytes(header + payload)
    meta = {
        "format": TRAJECTORY_MAGIC.decode(),
        "version": TRAJECTORY_VERSION,
        "params": traj.params.to_dict(),
        "n_steps": traj.n_steps,
        "dt": traj.dt,
        "payload_sha256": _sha256(payload),
    }
    if init is not None:
        meta["init"] = {"x": np.asarray(init.x).tolist(), "y": np.asarray(init.y).tolist()}
    if config is not None:
        meta["config"] = config.to_dict()
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_trajectory(path: str | Path) -> Trajectory:
    """Read a trajectory file; verifies magic, version, size, and digest."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _TRAJECTORY_HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, k, j, n_steps, dt = _TRAJECTORY_HEADER.unpack_from(raw)
    if magic != TRAJECTORY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TRAJECTORY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n_vars = k + j * k
    payload = raw[_TRAJECTORY_HEADER.size :]
    expected = n_steps * n_vars * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise FormatError(f"{path}: missing sidecar metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("payload_sha256") != _sha256(payload):
        raise ChecksumError(f"{path}: payload digest does not match sidecar")
    params = ModelParams.from_dict(meta["params"])
    states = np.frombuffer(payload, dtype="<f8").reshape(n_steps, n_vars).astype(np.float64)
    return Trajectory(params=params, states=states, dt=dt)
