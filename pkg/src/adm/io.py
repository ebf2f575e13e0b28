"""
File formats: binary datasets, CSV import, run configs, model files and
tab-separated exports.

Binary dataset layout (all little-endian)::

    b"ADM1"  u16 version  u32 R  u32 D  u32 T  f64 bin_width
    u32 n_regions  u32 region_dims[n_regions]
    f64 payload[R * D * T]      # trial-major, channel-major, time-minor
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import AcrossGroup, AdmModel, FaParams, LatentLayout, TrialSet, WithinGroup

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

__all__ = [
    "FormatError",
    "BadMagicError",
    "VersionError",
    "TruncationError",
    "DimMismatchError",
    "ConfigError",
    "DATASET_MAGIC",
    "DATASET_VERSION",
    "MODEL_FORMAT_VERSION",
    "save_dataset",
    "load_dataset",
    "load_csv_trials",
    "save_csv_trials",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "split_trials",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "write_tsv",
    "write_trace",
    "network_edges",
    "write_network",
    "write_json",
]

DATASET_MAGIC = b"ADM1"
DATASET_VERSION = 1
MODEL_FORMAT_VERSION = 1

_HEAD = struct.Struct("<4sHIIIdI")


class FormatError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"{what}: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


class DimMismatchError(FormatError):
    pass


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------


def save_dataset(data: TrialSet, path) -> None:
    r, d, t = data.y.shape
    dims = data.region_dims
    head = _HEAD.pack(DATASET_MAGIC, DATASET_VERSION, r, d, t, float(data.bin_width), len(dims))
    body = struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(data.y, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(head + body + payload)


def load_dataset(path) -> TrialSet:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not an ADM dataset (magic {raw[:4]!r})")
    if len(raw) < _HEAD.size:
        raise TruncationError("header", _HEAD.size, len(raw))
    _, version, r, d, t, bin_width, n_reg = _HEAD.unpack_from(raw)
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    dims_end = _HEAD.size + 4 * n_reg
    if len(raw) < dims_end:
        raise TruncationError("region table", dims_end, len(raw))
    dims = struct.unpack_from(f"<{n_reg}I", raw, _HEAD.size)
    if sum(dims) != d or n_reg == 0:
        raise DimMismatchError(f"region dims {dims} do not sum to D={d}")
    expected = dims_end + 8 * r * d * t
    if len(raw) < expected:
        raise TruncationError("payload", expected, len(raw))
    if len(raw) > expected:
        raise DimMismatchError(
            f"{path}: {len(raw) - expected} trailing bytes after a {r}x{d}x{t} payload"
        )
    y = np.frombuffer(raw, dtype="<f8", count=r * d * t, offset=dims_end).reshape(r, d, t)
    return TrialSet(y.astype(float), bin_width, dims)


def load_csv_trials(paths, bin_width: float = 1.0, region_dims=()) -> TrialSet:
    """Read one CSV per trial, each with ``D`` rows and ``T`` columns."""
    trials = []
    for p in paths:
        try:
            arr = np.loadtxt(p, delimiter=",", ndmin=2, dtype=float)
        except ValueError as exc:
            raise FormatError(f"{p}: {exc}") from None
        if trials and arr.shape != trials[0].shape:
            raise DimMismatchError(f"{p}: shape {arr.shape} differs from {trials[0].shape}")
        trials.append(arr)
    if not trials:
        raise FormatError("no CSV files given")
    return TrialSet(np.stack(trials), bin_width, tuple(region_dims))


def save_csv_trials(data: TrialSet, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for r, trial in enumerate(data.y):
        p = directory / f"trial_{r:04d}.csv"
        np.savetxt(p, trial, delimiter=",", fmt="%.17g")
        paths.append(p)
    return paths


# ----------------------------------------------------------------------------
# run configuration
# ----------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Parsed TOML run configuration."""

    data_path: Path | None = None
    preset: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    n_trials: int = 120
    n_across: int = 2
    n_within: int = 1
    order: int = 5
    delay_bound: float | None = None
    smoothness: float = 0.0
    max_iters: int = 200
    loglik_rel_tol: float = 1e-5
    delay_step: float = 1.0
    log_length_step: float = 0.25
    e_step: str = "parallel"
    output_dir: Path = Path("adm-out")

    def fit_config(self, **overrides):
        from .learning import FitConfig

        kw = dict(
            n_across=self.n_across,
            n_within=self.n_within,
            order=self.order,
            delay_bound=self.delay_bound,
            smoothness=self.smoothness,
            max_iters=self.max_iters,
            loglik_rel_tol=self.loglik_rel_tol,
            delay_step=self.delay_step,
            log_length_step=self.log_length_step,
            e_step=self.e_step,
            seed=self.seed,
        )
        kw.update(overrides)
        try:
            return FitConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_SECTIONS = {
    "data": {"path", "preset", "split", "seed", "n_trials"},
    "model": {"m_a", "m_w", "P", "delay_bound", "lambda"},
    "optimize": {"iters", "loglik_rel_tol", "delay_step", "log_length_step", "e_step"},
    "outputs": {"directory"},
}


def load_config(path) -> RunConfig:
    """
    Read a TOML run config with sections ``data``, ``model``, ``optimize``
    and ``outputs``.  Relative paths resolve against the config's directory.
    """
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, base=path.parent)


def config_from_dict(doc: dict, base=Path(".")) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for name, allowed in _SECTIONS.items():
        extra = set(doc.get(name, {})) - allowed
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    data, model = doc.get("data", {}), doc.get("model", {})
    opt, out = doc.get("optimize", {}), doc.get("outputs", {})
    cfg = RunConfig()
    if "path" in data:
        p = Path(data["path"])
        cfg.data_path = p if p.is_absolute() else Path(base) / p
        if not cfg.data_path.exists():
            raise ConfigError(f"data path {cfg.data_path} does not exist")
    cfg.preset = data.get("preset")
    split = tuple(float(x) for x in data.get("split", cfg.split))
    if len(split) != 3 or min(split) < 0 or not math.isclose(sum(split), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    cfg.split = split
    try:
        cfg.seed = int(data.get("seed", cfg.seed))
        cfg.n_trials = int(data.get("n_trials", cfg.n_trials))
        cfg.n_across = int(model.get("m_a", cfg.n_across))
        cfg.n_within = int(model.get("m_w", cfg.n_within))
        cfg.order = int(model.get("P", cfg.order))
        db = model.get("delay_bound")
        cfg.delay_bound = None if db is None else float(db)
        cfg.smoothness = float(model.get("lambda", cfg.smoothness))
        cfg.max_iters = int(opt.get("iters", cfg.max_iters))
        cfg.loglik_rel_tol = float(opt.get("loglik_rel_tol", cfg.loglik_rel_tol))
        cfg.delay_step = float(opt.get("delay_step", cfg.delay_step))
        cfg.log_length_step = float(opt.get("log_length_step", cfg.log_length_step))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    cfg.e_step = str(opt.get("e_step", cfg.e_step))
    od = Path(out.get("directory", cfg.output_dir))
    cfg.output_dir = od if od.is_absolute() else Path(base) / od
    cfg.fit_config()  # validates the numeric fields
    return cfg


def split_trials(n_trials: int, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded split of trial indices into train / validation / test."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise ConfigError("split fractions must be three numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n_trials)
    n_tr = int(round(fractions[0] * n_trials))
    n_va = int(round(fractions[1] * n_trials))
    return np.sort(perm[:n_tr]), np.sort(perm[n_tr : n_tr + n_va]), np.sort(perm[n_tr + n_va :])


# ----------------------------------------------------------------------------
# model files
# ----------------------------------------------------------------------------


def _enc(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "hex": [float(v).hex() for v in a.reshape(-1)]}


def _dec(obj) -> np.ndarray:
    return np.array([float.fromhex(v) for v in obj["hex"]], dtype=float).reshape(obj["shape"])


def model_to_dict(model: AdmModel) -> dict:
    """JSON-ready description; floats are stored as hex strings so they round-trip exactly."""
    lay = model.layout
    return {
        "format": "adm-model",
        "version": MODEL_FORMAT_VERSION,
        "layout": asdict(lay),
        "jitter": float(model.jitter).hex(),
        "stabilizer": float(model.stabilizer).hex(),
        "across": [
            {"delays": _enc(g.delays), "length_scale": float(g.length_scale).hex()}
            for g in model.across
        ],
        "within": [{"length_scale": float(g.length_scale).hex()} for g in model.within],
        "fa": {
            "loading": _enc(model.fa.loading),
            "offset": _enc(model.fa.offset),
            "noise": _enc(model.fa.noise),
        },
    }


def model_from_dict(doc: dict) -> AdmModel:
    if doc.get("format") != "adm-model":
        raise FormatError("not an ADM model file")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise VersionError(f"unsupported model file version {doc.get('version')}")
    try:
        lay = doc["layout"]
        layout = LatentLayout(
            tuple(lay["region_dims"]), lay["n_across"], lay["n_within"], lay["order"], lay["n_steps"]
        )
        across = [
            AcrossGroup(_dec(g["delays"]), float.fromhex(g["length_scale"])) for g in doc["across"]
        ]
        within = [WithinGroup(float.fromhex(g["length_scale"])) for g in doc["within"]]
        fa = FaParams(_dec(doc["fa"]["loading"]), _dec(doc["fa"]["offset"]), _dec(doc["fa"]["noise"]))
        return AdmModel(
            layout,
            across,
            within,
            fa,
            jitter=float.fromhex(doc["jitter"]),
            stabilizer=float.fromhex(doc["stabilizer"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model file: missing or bad field {exc}") from None
    except ValueError as exc:
        raise DimMismatchError(f"inconsistent model file: {exc}") from None


def save_model(model: AdmModel, path) -> None:
    write_json(model_to_dict(model), path)


def load_model(path) -> AdmModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return model_from_dict(doc)


# ----------------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------------


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_tsv(rows, path, header=None, comments=()) -> None:
    """Write a list of rows (sequences or dicts) as tab-separated text."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        if rows and isinstance(rows[0], dict):
            header = header or list(rows[0])
            w = csv.DictWriter(fh, fieldnames=header, delimiter="\t", lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        else:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            if header:
                w.writerow(header)
            w.writerows(rows)


def write_trace(trace, path, timing: bool = False) -> None:
    """
    Per-iteration fit log.  Wall-clock seconds are left out unless
    ``timing`` is set, so that reruns with the same seed give identical files.
    """
    rows = []
    for r in trace.rows():
        if not timing:
            r.pop("seconds", None)
        rows.append({k: _fmt(v) for k, v in r.items()})
    write_tsv(rows, path)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def network_edges(model: AdmModel, timesteps) -> list[dict]:
    """
    Directed edges between regions at the requested bins.

    For every across group and ordered pair ``i != j`` the delay is
    ``theta_ij = d_j - d_i``; a positive value marks ``i -> j`` (``j`` lags
    ``i``), so ``direction`` is ``+1`` for ``i -> j``, ``-1`` for ``j -> i``
    and ``0`` when the delay is exactly zero (undefined direction).
    """
    n_steps = model.layout.n_steps
    steps = [int(t) for t in timesteps]
    bad = [t for t in steps if not 0 <= t < n_steps]
    if bad:
        raise IndexError(f"timesteps {bad} outside [0, {n_steps})")
    rows = []
    n = model.layout.n_regions
    for t in steps:
        for g, grp in enumerate(model.across):
            d = grp.delays[t]
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    theta = float(d[j] - d[i])
                    sign = int(np.sign(theta))
                    rows.append(
                        {
                            "t": t,
                            "group": g,
                            "region_i": i,
                            "region_j": j,
                            "delay": theta,
                            "direction": sign,
                            "undefined": int(sign == 0),
                        }
                    )
    return rows


def write_network(rows, path) -> None:
    write_tsv(
        [{k: _fmt(v) for k, v in r.items()} for r in rows],
        path,
        header=["t", "group", "region_i", "region_j", "delay", "direction", "undefined"],
        comments=[
            "delay = d_j - d_i in bins; positive delay means region_i leads (edge i -> j)",
            "direction: +1 i -> j, -1 j -> i, 0 undefined (zero delay)",
        ],
    )
