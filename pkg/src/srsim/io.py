"""File formats: field snapshots, checkpoints and the flat dotted config."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .field import Grid
from .galerkin import ConfigError, ForcingSpec, RunConfig, SimState, Trajectory

FIELD_MAGIC = "SRFIELD1"
CHECKPOINT_MAGIC = b"SRCHKPT1"
TAG_CODES = {"general": "g", "symmetric": "s", "skew": "k", "divergence_free": "d", "vector": "v", "scalar": "c"}
TAG_NAMES = {v: k for k, v in TAG_CODES.items()}


class FormatError(IOError):
    pass


# ---------------------------------------------------------------------------
# field snapshots


def write_field(path, grid: Grid, values: np.ndarray, tag="general"):
    """64-byte ASCII header then little-endian float64 values in row-major order."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.shape[:3] != grid.shape:
        raise FormatError("field does not match grid")
    nc = int(np.prod(values.shape[3:])) if values.ndim > 3 else 1
    Ls = " ".join(f"{L:.9g}" for L in grid.lengths)
    head = f"{FIELD_MAGIC} {grid.shape[0]} {grid.shape[1]} {grid.shape[2]} {nc} {TAG_CODES[tag]} {Ls}"
    if len(head) > 63:
        raise FormatError("header does not fit in 64 bytes")
    with open(path, "wb") as fh:
        fh.write(head.ljust(63).encode("ascii") + b"\n")
        fh.write(values.tobytes())


def read_field(path):
    """Returns (grid, values, tag)."""
    with open(path, "rb") as fh:
        head = fh.read(64)
        body = fh.read()
    try:
        parts = head.decode("ascii").split()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: not a field snapshot") from None
    if len(parts) < 9 or parts[0] != FIELD_MAGIC:
        raise FormatError(f"{path}: bad header")
    shape = tuple(int(p) for p in parts[1:4])
    nc = int(parts[4])
    tag = TAG_NAMES.get(parts[5])
    if tag is None:
        raise FormatError(f"{path}: unknown tag {parts[5]!r}")
    grid = Grid(shape, [float(p) for p in parts[6:9]])
    vals = np.frombuffer(body, dtype="<f8")
    if vals.size != grid.n_nodes * nc:
        raise FormatError(f"{path}: expected {grid.n_nodes * nc} values, found {vals.size}")
    tail = {9: (3, 3), 3: (3,), 1: ()}.get(nc, (nc,))
    return grid, vals.reshape(shape + tail).astype(float), tag


def write_field_csv(path, values: np.ndarray):
    """One row per node: i,j,k then the component values."""
    shape = values.shape[:3]
    flat = values.reshape(int(np.prod(shape)), -1)
    nc = flat.shape[1]
    idx = np.indices(shape).reshape(3, -1).T
    with open(path, "w") as fh:
        fh.write("i,j,k," + ",".join(f"v{c}" for c in range(nc)) + "\n")
        for (i, j, k), row in zip(idx, flat):
            fh.write(f"{i},{j},{k}," + ",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# config


_FORCINGS = ("w_ext", "omega_ext", "f_ext")


def _floats(s, n=None):
    vals = [float(v) for v in s.replace(" ", "").split(",") if v]
    if n is not None and len(vals) == 1:
        vals = vals * n
    return tuple(vals)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        try:
            _apply(cfg, key, val)
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: {key}: {e}") from None
    return cfg.validate()


def _apply(cfg: RunConfig, key: str, val: str):
    simple = {
        "bc.dirichlet": ("dirichlet", str),
        "model.m": ("m", int),
        "model.alpha": ("alpha", float),
        "model.k": ("k", float),
        "model.lambda": ("lam", float),
        "model.eps_smooth": ("eps_smooth", float),
        "model.rotation_derivative": ("rotation_derivative", str),
        "time.t_end": ("t_end", float),
        "time.integrator": ("integrator", str),
        "exit.margin": ("exit_margin", float),
        "output.cadence": ("cadence", int),
        "seed": ("seed", int),
        "init.xdot": ("init_xdot", float),
        "init.ydot": ("init_ydot", float),
    }
    if key in simple:
        name, conv = simple[key]
        setattr(cfg, name, conv(val))
    elif key == "grid.n":
        cfg.n = tuple(int(v) for v in _floats(val, 3))
    elif key == "grid.lengths":
        cfg.lengths = _floats(val, 3)
    elif key == "time.dt":
        cfg.dt = None if val == "auto" else float(val)
    elif key.startswith("forcing."):
        parts = key.split(".")
        if len(parts) != 3 or parts[1] not in _FORCINGS or parts[2] not in ForcingSpec.__dataclass_fields__:
            raise ConfigError(f"unknown key {key}")
        spec = getattr(cfg, parts[1])
        ftype = ForcingSpec.__dataclass_fields__[parts[2]].type
        setattr(spec, parts[2], float(val) if ftype == "float" else val)
    else:
        raise ConfigError(f"unknown key {key}")


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; parse_config(dump_config(c)) reproduces c."""
    lines = [
        f"grid.n = {','.join(str(v) for v in cfg.n)}",
        f"grid.lengths = {','.join(repr(float(v)) for v in cfg.lengths)}",
        f"bc.dirichlet = {cfg.dirichlet}",
        f"model.m = {cfg.m}",
        f"model.alpha = {cfg.alpha!r}",
        f"model.k = {cfg.k!r}",
        f"model.lambda = {cfg.lam!r}",
        f"model.eps_smooth = {cfg.eps_smooth!r}",
        f"model.rotation_derivative = {cfg.rotation_derivative}",
        f"time.dt = {'auto' if cfg.dt is None else repr(cfg.dt)}",
        f"time.t_end = {cfg.t_end!r}",
        f"time.integrator = {cfg.integrator}",
        f"exit.margin = {cfg.exit_margin!r}",
        f"output.cadence = {cfg.cadence}",
        f"seed = {cfg.seed}",
        f"init.xdot = {cfg.init_xdot!r}",
        f"init.ydot = {cfg.init_ydot!r}",
    ]
    for name in _FORCINGS:
        spec = getattr(cfg, name)
        for fld in ForcingSpec.__dataclass_fields__:
            v = getattr(spec, fld)
            lines.append(f"forcing.{name}.{fld} = {v!r}" if isinstance(v, float) else f"forcing.{name}.{fld} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(dump_config(cfg).encode()).digest()


# ---------------------------------------------------------------------------
# checkpoints

_HEAD = struct.Struct("<8s32sQd4I")  # magic, config hash, step, t, three basis sizes, record count
TRAJ_KEYS = ("elastic", "barrier", "defect", "rotational", "kinetic", "total")


def _traj_rows(traj: Trajectory):
    rows = []
    for i in range(len(traj.t)):
        r = [traj.t[i], traj.E[i], traj.D[i], traj.d_actual[i], traj.p_ext[i]]
        r += [traj.terms[i][k] for k in TRAJ_KEYS]
        r += list(traj.margins[i]) + [traj.dev_inf[i]]
        r += list(traj.zddot[i]) + list(traj.z[i])
        rows.append(r)
    return np.array(rows, dtype="<f8")


def write_checkpoint(path, cfg: RunConfig, state: SimState, sizes, traj: Trajectory):
    rows = _traj_rows(traj)
    head = _HEAD.pack(CHECKPOINT_MAGIC, config_hash(cfg), state.step, state.t, *sizes, rows.shape[0])
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(state.vector(), dtype="<f8").tobytes())
        fh.write(rows.tobytes())


def read_checkpoint(path, cfg: RunConfig):
    """Returns (state, trajectory) after checking the config hash."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, h, step, t, nS, nA, nV, nrec = _HEAD.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if h != config_hash(cfg):
        raise ConfigError("checkpoint was written for a different config")
    nq = 2 * (nS + nA + nV)
    off = _HEAD.size
    q = np.frombuffer(blob, dtype="<f8", count=nq, offset=off).astype(float)
    off += 8 * nq
    width = 5 + len(TRAJ_KEYS) + 4 + 2 * nV
    rows = np.frombuffer(blob, dtype="<f8", count=nrec * width, offset=off).reshape(nrec, width)
    traj = Trajectory()
    for r in rows:
        traj.t.append(float(r[0]))
        traj.E.append(float(r[1]))
        traj.D.append(float(r[2]))
        traj.d_actual.append(float(r[3]))
        traj.p_ext.append(float(r[4]))
        traj.terms.append({k: float(v) for k, v in zip(TRAJ_KEYS, r[5:11])})
        traj.margins.append(tuple(float(v) for v in r[11:14]))
        traj.dev_inf.append(float(r[14]))
        traj.zddot.append(np.array(r[15 : 15 + nV]))
        traj.z.append(np.array(r[15 + nV : 15 + 2 * nV]))
    return SimState.from_vector(q, (nS, nA, nV), t, step), traj
