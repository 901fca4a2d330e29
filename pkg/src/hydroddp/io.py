"""Network and price files, synthetic prices, CSV helpers."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .model import BASIN, K_H2O, ModelError, PriceSeries, ReservoirNetwork, build_network


class DataError(ValueError):
    """Malformed input file."""


# -- networks ----------------------------------------------------------------------
_RES_FIELDS = ("id", "capacity_m3", "level_max_m", "bottom_elevation_m", "initial_level_m")
_ARC_FIELDS = ("source", "dest", "power_mw", "efficiency", "mode")


def _node(v, where):
    if v in ("basin", None) or v == BASIN:
        return BASIN
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise DataError(f"{where}: node ids must be integers or 'basin', got {v!r}")
    return int(v)


def _number(d, key, where):
    if key not in d:
        raise DataError(f"{where}: missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DataError(f"{where}: field {key!r} must be a finite number, got {v!r}")
    return float(v)


def network_from_doc(doc: dict) -> ReservoirNetwork:
    if not isinstance(doc, dict):
        raise DataError("network document must be a JSON object")
    for key in ("reservoirs", "arcs"):
        if not isinstance(doc.get(key), list):
            raise DataError(f"field {key!r} must be a list")
    consts = doc.get("constants", {})
    if not isinstance(consts, dict):
        raise DataError("field 'constants' must be an object")
    k_h2o = _number(consts, "k_h2o", "constants") if "k_h2o" in consts else K_H2O
    drop = _number(consts, "basin_drop_m", "constants") if "basin_drop_m" in consts else 0.0
    res = []
    for i, r in enumerate(doc["reservoirs"]):
        where = f"reservoirs[{i}]"
        if not isinstance(r, dict):
            raise DataError(f"{where} must be an object")
        spec = dict(id=int(_number(r, "id", where)), capacity=_number(r, "capacity_m3", where),
                    level_min=_number(r, "level_min_m", where) if "level_min_m" in r else 0.0,
                    level_max=_number(r, "level_max_m", where),
                    bottom_elevation=_number(r, "bottom_elevation_m", where),
                    initial_level=_number(r, "initial_level_m", where), name=str(r.get("name", "")))
        if "gamma_m2" in r:
            spec["gamma"] = _number(r, "gamma_m2", where)
        res.append(spec)
    devices = []
    for i, a in enumerate(doc["arcs"]):
        where = f"arcs[{i}]"
        if not isinstance(a, dict):
            raise DataError(f"{where} must be an object")
        for key in ("source", "dest"):
            if key not in a:
                raise DataError(f"{where}: missing field {key!r}")
        mode = a.get("mode", "reversible")
        if mode not in ("reversible", "generate", "pump"):
            raise DataError(f"{where}: mode must be reversible, generate or pump, got {mode!r}")
        devices.append(dict(source=_node(a["source"], where), dest=_node(a["dest"], where),
                            power_kw=_number(a, "power_mw", where) * 1000.0,
                            efficiency=_number(a, "efficiency", where), mode=mode))
    ids = {r["id"] for r in res}
    for i, d in enumerate(devices):
        for key in ("source", "dest"):
            if d[key] != BASIN and d[key] not in ids:
                raise DataError(f"arcs[{i}]: unknown {key} reservoir {d[key]}")
    return build_network(res, devices, k_h2o=k_h2o, basin_drop=drop)


def load_network(path) -> ReservoirNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e})") from e
    return network_from_doc(doc)


def bundled_network_path(name: str) -> Path:
    return Path(str(resources.files("hydroddp") / "data" / f"{name}.json"))


def _mw(kw: float) -> float:
    """A float m with m * 1000 == kw, so reloading reproduces kw exactly."""
    m = kw / 1000.0
    for cand in (m, np.nextafter(m, math.inf), np.nextafter(m, -math.inf)):
        if float(cand) * 1000.0 == kw:
            return float(cand)
    return m


def network_to_doc(network: ReservoirNetwork) -> dict:
    res = []
    init = network.initial_levels
    for i, r in enumerate(network.reservoirs):
        d = {"id": r.id, "capacity_m3": r.capacity, "level_min_m": r.level_min, "level_max_m": r.level_max,
             "bottom_elevation_m": r.bottom_elevation, "initial_level_m": float(init[i])}
        if r.level_max > r.level_min and r.capacity / (r.level_max - r.level_min) != r.gamma:
            d["gamma_m2"] = r.gamma
        if r.name:
            d["name"] = r.name
        res.append(d)
    arcs = []
    for fwd, rev in sorted(network.reverse_pairs(), key=lambda p: min(k for k in p if k is not None)):
        first = fwd if rev is None else min(fwd, rev)
        a = network.arcs[first]
        mode = "reversible" if rev is not None else a.direction.value
        arcs.append({"source": "basin" if a.source == BASIN else a.source,
                     "dest": "basin" if a.dest == BASIN else a.dest,
                     "power_mw": _mw(a.power_rating), "efficiency": a.efficiency, "mode": mode})
    return {"reservoirs": res, "arcs": arcs,
            "constants": {"k_h2o": network.k_h2o, "basin_drop_m": network.basin_drop}}


def dump_network(network: ReservoirNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_doc(network), indent=2) + "\n")


# -- prices ------------------------------------------------------------------------------
def load_prices(path, T: int | None = None) -> PriceSeries:
    """Read ``timestamp_hour,price_per_kwh`` rows (``#`` lines are skipped).

    Timestamps must be consecutive integer hours.  With ``T`` the first T
    rows are used and a shorter file is an error.
    """
    stamps, values = [], []
    with open(path, newline="") as f:
        rows = csv.reader(line for line in f if not line.lstrip().startswith("#") and line.strip())
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["timestamp_hour", "price_per_kwh"]:
            raise DataError(f"{path}: expected header 'timestamp_hour,price_per_kwh'")
        for n, row in enumerate(rows, start=2):
            if len(row) != 2:
                raise DataError(f"{path}: row {n} has {len(row)} fields")
            try:
                ts, v = float(row[0]), float(row[1])
            except ValueError as e:
                raise DataError(f"{path}: row {n}: {e}") from e
            if ts != int(ts):
                raise DataError(f"{path}: row {n}: timestamp must be an integer hour")
            if not math.isfinite(v):
                raise DataError(f"{path}: row {n}: price is not finite")
            if stamps and ts != stamps[-1] + 1:
                raise DataError(f"{path}: row {n}: timestamps must increase by one hour")
            stamps.append(ts)
            values.append(v)
    if T is not None:
        if len(values) < T:
            raise DataError(f"{path}: {len(values)} prices, need {T}")
        values = values[:T]
    return PriceSeries(np.array(values))


def dump_prices(prices: PriceSeries, path, seed=None) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# seed={seed} version={__version__}\n")
        w = csv.writer(f)
        w.writerow(["timestamp_hour", "price_per_kwh"])
        for t, v in enumerate(prices.prices):
            w.writerow([t, repr(float(v))])


@dataclass(frozen=True)
class PriceParams:
    """Synthetic price shape in EUR/kWh: a daily and a weekly sinusoid plus
    Gaussian noise.  Noise comes from numpy's PCG64 generator seeded with the
    given integer, whose stream is fixed across platforms."""

    base: float = 0.05
    a_day: float = 0.02
    a_week: float = 0.01
    sigma: float = 0.005
    phase: float = 0.0


def generate_prices(seed: int, T: int, params: PriceParams = PriceParams()) -> PriceSeries:
    if T < 0:
        raise ValueError("T must be nonnegative")
    t = np.arange(T)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal(T) * params.sigma
    p = (params.base + params.a_day * np.sin(2 * np.pi * t / 24 + params.phase)
         + params.a_week * np.sin(2 * np.pi * t / 168) + noise)
    return PriceSeries(p)


def resolve_prices(spec: str, T: int, params: PriceParams = PriceParams()) -> tuple[PriceSeries, int | None]:
    """``seed:N`` generates prices; anything else is a CSV path."""
    if spec.startswith("seed:"):
        try:
            seed = int(spec[5:])
        except ValueError as e:
            raise DataError(f"bad price seed in {spec!r}") from e
        return generate_prices(seed, T, params), seed
    return load_prices(spec, T), None


# -- CSV helpers ---------------------------------------------------------------------------
def write_csv(path_or_stream, header, rows, seed=None) -> None:
    """CSV with the ``# seed=... version=...`` comment line first."""
    own = not hasattr(path_or_stream, "write")
    f = open(path_or_stream, "w", newline="") if own else path_or_stream
    try:
        f.write(f"# seed={seed} version={__version__}\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if own:
            f.close()


def read_csv(path) -> tuple[dict, list[dict]]:
    """Returns (comment key/values, rows as dicts)."""
    meta = {}
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    return meta, list(csv.DictReader(body))


def export_value_table(table, directory, seed=None) -> list[Path]:
    """One CSV per time slice: level coordinates then the value."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    from .dp import grid_states

    states = grid_states(table.axes)
    names = [f"level_{i}" for i in range(states.shape[1])]
    paths = []
    for k, v in enumerate(table.values):
        path = out / f"value_t{table.t_start + k:05d}.csv"
        write_csv(path, names + ["value"], [list(s) + [float(x)] for s, x in zip(states, v.ravel())], seed)
        paths.append(path)
    return paths


__all__ = ["DataError", "ModelError", "PriceParams", "bundled_network_path", "dump_network", "dump_prices",
           "export_value_table", "generate_prices", "load_network", "load_prices", "network_from_doc",
           "network_to_doc", "read_csv", "resolve_prices", "write_csv"]
