"""Scenario files, the four-zone crossing geometry and seeded random scenarios."""
from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .transcription import CzCrossing, Scenario, ScenarioError, Vehicle, default_crossing_order
from .vehicle_model import DEFAULT_PARAMS, VehicleParams

CZ_SIDE = 4.5
LANE_SPACING = 4.5
KMH = 1.0 / 3.6
DEFAULT_V_REF = 70.0 * KMH
MAX_REDRAWS = 100
SCHEMA_VERSION = 1

# zone ids of the four-zone box
NW, NE, SW, SE = 0, 1, 2, 3
LANE_NAMES = ("southbound", "northbound", "eastbound", "westbound")
LANE_ZONES = {
    "southbound": (NW, SW),
    "northbound": (SE, NE),
    "eastbound": (SW, SE),
    "westbound": (NE, NW),
}


def lane_crossings(name: str, d: float, cz_side: float = CZ_SIDE, lane_spacing: float = LANE_SPACING,
                   zones: tuple[int, ...] | None = None) -> tuple[CzCrossing, ...]:
    """Entry/exit positions of a vehicle centre for each zone along a straight lane.

    The first zone's near edge sits at position 0; the second zone starts
    one lane spacing further.  A vehicle occupies a zone from d/2 before the
    near edge until d/2 past the far edge.
    """
    out = []
    for m, cz in enumerate(LANE_ZONES[name]):
        if zones is not None and cz not in zones:
            continue
        near = m * lane_spacing
        out.append(CzCrossing(cz, near - d / 2.0, near + cz_side + d / 2.0))
    return tuple(out)


def layout_lanes(n_lanes: int) -> tuple[tuple[str, ...], tuple[int, ...] | None]:
    if n_lanes == 4:
        return LANE_NAMES, None
    if n_lanes == 2:
        return ("southbound", "eastbound"), (SW,)
    if n_lanes == 1:
        return ("southbound",), None
    raise ValueError("supported layouts have 1, 2 or 4 lanes")


def generate_random_scenario(seed: int, n_lanes: int = 4, vehicles_per_lane: int = 3,
                             distance_range: tuple[float, float] = (80.0, 120.0), v0: float = DEFAULT_V_REF,
                             K: int = 100, dt: float = 0.2, params: VehicleParams = DEFAULT_PARAMS) -> dict:
    """Scenario document with distances drawn uniformly per vehicle (PCG64 stream seeded by ``seed``).

    A lane whose draws violate the initial safety gap is redrawn, at most
    MAX_REDRAWS times.  The crossing order is first-come-first-served.
    """
    lo, hi = distance_range
    if not (0 < lo <= hi) or v0 <= 0:
        raise ValueError("distance range and speed must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    names, zones = layout_lanes(n_lanes)
    vehicles = []
    for l, name in enumerate(names):
        for attempt in range(MAX_REDRAWS + 1):
            dist = np.sort(rng.uniform(lo, hi, vehicles_per_lane))[::-1]  # rear first
            if np.all(dist[:-1] - dist[1:] >= params.delta):
                break
        else:
            raise ScenarioError(f"lane {name}: no overlap-free placement after {MAX_REDRAWS} redraws")
        for dd in dist:
            vehicles.append({"id": len(vehicles), "lane": l, "p0": float(-dd), "v0": float(v0)})
    doc = {
        "schema": SCHEMA_VERSION,
        "seed": int(seed),
        "generator": {"rng": "PCG64", "n_lanes": n_lanes, "vehicles_per_lane": vehicles_per_lane,
                      "distance_range": [float(lo), float(hi)], "v0": float(v0)},
        "grid": {"K": K, "dt": dt},
        "lanes": [{"id": l, "name": name,
                   "cz_crossings": [{"cz_id": c.cz, "p_in": c.p_in, "p_out": c.p_out}
                                    for c in lane_crossings(name, params.d, zones=zones)]}
                  for l, name in enumerate(names)],
        "params": _params_dict(params),
        "vehicles": vehicles,
        "order": "fcfs",
        "reference": {"v_r": float(v0)},
    }
    return doc


def _params_dict(p: VehicleParams) -> dict:
    return asdict(p)


def _params_from(doc_params: dict | None, base: VehicleParams) -> VehicleParams:
    if not doc_params:
        return base
    known = {f.name for f in fields(VehicleParams)}
    bad = set(doc_params) - known
    if bad:
        raise ScenarioError(f"unknown vehicle parameters {sorted(bad)}")
    return base.with_(**doc_params)


def scenario_from_dict(doc: dict) -> Scenario:
    """Validate a scenario document and build the immutable problem instance."""
    try:
        grid = doc["grid"]
        K, dt = int(grid["K"]), float(grid["dt"])
        base = _params_from(doc.get("params"), DEFAULT_PARAMS)
        v_r = float(doc.get("reference", {}).get("v_r", DEFAULT_V_REF))
        lane_ids = [ln["id"] for ln in doc["lanes"]]
        if len(set(lane_ids)) != len(lane_ids):
            raise ScenarioError("duplicate lane id")
        lane_index = {lid: n for n, lid in enumerate(lane_ids)}
        crossings = tuple(
            tuple(CzCrossing(int(c["cz_id"]), float(c["p_in"]), float(c["p_out"])) for c in ln["cz_crossings"])
            for ln in doc["lanes"])
        vdocs = doc["vehicles"]
        ids = [v["id"] for v in vdocs]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate vehicle id")
        id_index = {vid: n for n, vid in enumerate(ids)}
        vehicles = []
        for v in vdocs:
            if v["lane"] not in lane_index:
                raise ScenarioError(f"vehicle {v['id']} references unknown lane {v['lane']}")
            prm = _params_from(v.get("params"), base)
            if "delta" in v:
                prm = prm.with_(delta=float(v["delta"]))
            vehicles.append(Vehicle(lane_index[v["lane"]], float(v["p0"]), float(v["v0"]),
                                    float(v.get("v_r", v_r)), prm))
        lanes = []
        for l in range(len(lane_ids)):
            members = [n for n, veh in enumerate(vehicles) if veh.lane == l]
            lanes.append(tuple(sorted(members, key=lambda n: (vehicles[n].p0, n))))
        scn = Scenario(dt, K, tuple(vehicles), tuple(lanes), crossings, ())
        order = doc.get("order", "fcfs")
        if order == "fcfs":
            triples = default_crossing_order(scn)
        else:
            triples = tuple((id_index[a], id_index[b], int(r)) for a, b, r in order)
        return Scenario(dt, K, tuple(vehicles), tuple(lanes), crossings, triples)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario document: {exc}") from exc


def scenario_to_dict(scn: Scenario) -> dict:
    """Explicit document (inline parameters and triples) that loads back to an equal scenario."""
    return {
        "schema": SCHEMA_VERSION,
        "grid": {"K": scn.K, "dt": scn.dt},
        "lanes": [{"id": l, "cz_crossings": [{"cz_id": c.cz, "p_in": c.p_in, "p_out": c.p_out} for c in cr]}
                  for l, cr in enumerate(scn.crossings)],
        "vehicles": [{"id": i, "lane": v.lane, "p0": v.p0, "v0": v.v0, "v_r": v.v_ref,
                      "params": _params_dict(v.params)} for i, v in enumerate(scn.vehicles)],
        "order": [list(t) for t in scn.order],
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_scenario(doc_or_scn, path) -> None:
    doc = scenario_to_dict(doc_or_scn) if isinstance(doc_or_scn, Scenario) else doc_or_scn
    Path(path).write_text(dumps(doc))


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(doc)


def reference_scenario(seed: int = 0, K: int = 100) -> Scenario:
    """The 12-vehicle, four-lane example: starts in [80, 120] m, 70 km/h."""
    scn = scenario_from_dict(generate_random_scenario(seed, 4, 3, (80.0, 120.0), DEFAULT_V_REF, K=K))
    if len(scn.order) != 20:
        raise ScenarioError(f"reference layout produced {len(scn.order)} ordering rows, expected 20")
    return scn
