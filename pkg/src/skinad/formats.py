"""On-disk formats: delimited tables, dataset directories, model files and
YAML configuration with line-numbered errors.

Tables are comma-separated with a one-line header; floats are written with
17 significant digits so values survive a round trip bit for bit.  Every
file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import InputError
from .estimation import FitReport
from .kernels import KernelSpec
from .metamodel import Dataset, SkiParams

MODEL_FORMAT_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_table(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Header and raw string rows."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty table")
    return rows[0], rows[1:]


def read_numeric_table(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_table(path)
    try:
        arr = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return header, arr


def column(header, arr, name) -> np.ndarray:
    try:
        return arr[:, header.index(name)]
    except ValueError:
        raise InputError(f"missing column {name!r}; have {header}") from None


# ---------------------------------------------------------------- datasets

def write_dataset(directory, data: Dataset, counts=None, obs_replications=None) -> None:
    """design.csv, replications.csv and observations.csv under ``directory``."""
    d = Path(directory)
    write_table(d / "design.csv", [f"x{p + 1}" for p in range(data.d)], data.design)
    rows = []
    for i, reps in enumerate(data.replications):
        for j, y in enumerate(reps):
            c = counts[i][j] if counts is not None else ""
            rows.append((i, j, float(y), c))
    write_table(d / "replications.csv", ["point_index", "replication", "sojourn_mean", "count"], rows)
    n_obs = obs_replications if obs_replications is not None else [""] * data.ell
    write_table(d / "observations.csv", ["point_index", "z", "replications"],
                [(int(i), float(z), n) for i, z, n in zip(data.obs_index, data.z, n_obs)])


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    _, design = read_numeric_table(d / "design.csv")
    header, rows = read_table(d / "replications.csv")
    pi, ri, yi = (header.index(c) for c in ("point_index", "replication", "sojourn_mean"))
    reps: list[list[tuple[int, float]]] = [[] for _ in range(design.shape[0])]
    for r in rows:
        i = int(r[pi])
        if not 0 <= i < design.shape[0]:
            raise InputError(f"{d / 'replications.csv'}: point index {i} out of range")
        reps[i].append((int(r[ri]), float(r[yi])))
    replications = [np.array([y for _, y in sorted(rr)]) for rr in reps]
    header, rows = read_table(d / "observations.csv")
    oi, zi = header.index("point_index"), header.index("z")
    obs_index = [int(r[oi]) for r in rows]
    z = [float(r[zi]) for r in rows]
    return Dataset(design, replications, obs_index, z)


# ---------------------------------------------------------------- model files

def _kernel_dict(k: KernelSpec) -> dict:
    return {"spatial_variance": float(k.spatial_variance),
            "lengthscales": [float(v) for v in np.atleast_1d(k.lengthscales)],
            "family": k.family}


def _params_dict(p: SkiParams) -> dict:
    return {"rho": float(p.rho), "beta": [float(v) for v in p.beta], "gamma": [float(v) for v in p.gamma],
            "kernel_M": _kernel_dict(p.kernel_M), "kernel_W": _kernel_dict(p.kernel_W),
            "sigma_zeta_sq": float(p.sigma_zeta_sq)}


def _params_from(d: dict) -> SkiParams:
    def kern(k):
        return KernelSpec(k["spatial_variance"], k["lengthscales"], k.get("family", "squared_exponential"))
    return SkiParams(d["rho"], d["beta"], d["gamma"], kern(d["kernel_M"]), kern(d["kernel_W"]), d["sigma_zeta_sq"])


def report_to_dict(report: FitReport) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "package_version": __version__,
        "method": report.method,
        "basis": report.basis,
        "params": _params_dict(report.fitted),
        "sigma_eps_hat": [float(v) for v in report.sigma_eps_hat],
        "loglik": float(report.loglik),
        "converged": bool(report.converged),
        "iterations": int(report.iterations),
        "final_gradient_norm": float(report.final_gradient_norm),
        "restarts_used": int(report.restarts_used),
        "names": list(report.names),
        "estimates": report.estimates(),
    }


def report_from_dict(d: dict) -> FitReport:
    version = d.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise InputError(f"model file format version {version!r} is not supported "
                         f"(this build reads version {MODEL_FORMAT_VERSION})")
    return FitReport(d["method"], _params_from(d["params"]), np.asarray(d["sigma_eps_hat"], dtype=float),
                     d["loglik"], d["converged"], d["iterations"], d["final_gradient_norm"],
                     d["restarts_used"], d.get("basis", "constant"), list(d.get("names", [])))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_model(path, report: FitReport) -> None:
    write_json(path, report_to_dict(report))


def load_model(path) -> FitReport:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return report_from_dict(d)


# ---------------------------------------------------------------- configuration

class ConfigError(InputError):
    pass


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Mapping()
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


class _Mapping(dict):
    """dict that remembers the source line of itself and of each key."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.line = 0
        self.lines: dict = {}


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_config_text(text: str, source: str = "<config>") -> dict:
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"{source}: {where}: {getattr(exc, 'problem', None) or exc}") from None
    if data is None:
        data = _Mapping()
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: top level must be a mapping")
    return data


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return load_config_text(text, str(path))


class Section:
    """Typed access to a config mapping with line-numbered errors."""

    def __init__(self, mapping, source: str, path: str = ""):
        self.m = mapping if mapping is not None else _Mapping()
        self.source = source
        self.path = path

    def _line(self, key=None) -> int:
        if key is not None and key in getattr(self.m, "lines", {}):
            return self.m.lines[key]
        return getattr(self.m, "line", 0)

    def error(self, msg, key=None) -> ConfigError:
        name = f"{self.path}.{key}" if self.path and key else (key or self.path or "config")
        return ConfigError(f"{self.source}: line {self._line(key)}: {name}: {msg}")

    def section(self, key, required=False) -> "Section":
        if key not in self.m:
            if required:
                raise self.error("missing required section", key)
            return Section(None, self.source, f"{self.path}.{key}" if self.path else key)
        v = self.m[key]
        if not isinstance(v, dict):
            raise self.error("expected a mapping", key)
        return Section(v, self.source, f"{self.path}.{key}" if self.path else key)

    def get(self, key, kind, default=None, required=False, check=None, why=""):
        if key not in self.m:
            if required:
                raise self.error("missing required value", key)
            return default
        v = self.m[key]
        try:
            if kind is bool:
                if not isinstance(v, bool):
                    raise TypeError
                out = v
            elif kind is int:
                if isinstance(v, bool) or not (isinstance(v, int) or (isinstance(v, float) and v.is_integer())):
                    raise TypeError
                out = int(v)
            elif kind is float:
                if isinstance(v, bool):
                    raise TypeError
                out = float(v)
            elif kind is str:
                if not isinstance(v, str):
                    raise TypeError
                out = v
            else:
                out = kind(v)
        except (TypeError, ValueError):
            raise self.error(f"expected {getattr(kind, '__name__', kind)}, got {v!r}", key) from None
        if check is not None and not check(out):
            raise self.error(f"invalid value {v!r}" + (f" ({why})" if why else ""), key)
        return out

    def keys(self):
        return list(self.m.keys())

    def reject_unknown(self, allowed) -> None:
        for k in self.m:
            if k not in allowed:
                raise self.error(f"unknown key (allowed: {', '.join(sorted(allowed))})", k)
