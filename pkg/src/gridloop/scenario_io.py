"""
Scenario files and results bundles
==================================

Scenarios are YAML documents validated against a JSON schema (unknown keys
are rejected).  Per-unit everywhere, angles in radians.  Results are a CSV
trajectory table and a JSON bundle carrying the certificate and metadata.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .controller import FeasibleSet, ObjectiveParams
from .grid import Branch, Bus, build_admittance
from .measurement import SensorSpec
from .simulation import Availability, LoadProcess, Scenario, Trajectory, compute_metrics

SCENARIO_SCHEMA_VERSION = "1.0"
RESULTS_SCHEMA_VERSION = "1.0"
OUTPUT_DIR_ENV = "GRIDLOOP_OUTPUT_DIR"
BASE_COLUMNS = ("t", "est_err_norm", "opt_err_norm", "norm_Sc_star", "norm_Sc_max",
                "penalty_g")


class ScenarioError(ValueError):
    """Parse, schema or physics violation in a scenario file."""


class ResultsError(ValueError):
    pass


_num = {"type": "number"}
_num_or_matrix = {"oneOf": [_num, {"type": "array", "items": {"type": "array", "items": _num}}]}
_num_or_list = {"oneOf": [_num, {"type": "array", "items": _num}]}
_nums = {"type": "array", "items": _num}
_names = {"type": "array", "items": {"type": ["string", "integer"]}}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "schema_version": {"type": "string"},
    "name": {"type": "string"},
    "grid": _obj({
        "slack_voltage": {"type": "array", "minItems": 1, "maxItems": 3,
                          "items": {"type": "array", "items": _num,
                                    "minItems": 2, "maxItems": 2}},
        "buses": {"type": "array", "minItems": 2, "items": _obj({
            "id": {"type": ["string", "integer"]},
            "role": {"enum": ["slack", "load", "controllable", "passive"]},
            "phases": {"type": "integer", "minimum": 1, "maximum": 3},
            "shunt": _obj({"g": _num_or_matrix, "b": _num_or_matrix}, ["g", "b"]),
        }, ["id", "role"])},
        "branches": {"type": "array", "minItems": 1, "items": _obj({
            "from": {"type": ["string", "integer"]},
            "to": {"type": ["string", "integer"]},
            "r": _num_or_matrix,
            "x": _num_or_matrix,
        }, ["from", "to", "r", "x"])},
    }, ["slack_voltage", "buses", "branches"]),
    "sensors": {"type": "array", "minItems": 1, "items": _obj({
        "kind": {"enum": ["voltage-phasor", "voltage-magnitude", "state-subset", "pseudo-load"]},
        "name": {"type": "string"},
        "buses": _names,
        "indices": {"type": "array", "items": {"type": "integer"}},
        "loads": {"oneOf": [{"const": "all"}, _names]},
        "std": {"type": "number", "exclusiveMinimum": 0},
        "nominal": _nums,
    }, ["kind", "std"])},
    "objective": _obj({
        "p_target": _nums,
        "rho": {"type": "number", "exclusiveMinimum": 0},
        "v_min": _num,
        "v_max": _num,
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "L_f": {"type": "number", "exclusiveMinimum": 0},
        "L_g": {"type": "number", "minimum": 0},
    }, ["p_target"]),
    "feasible_set": _obj({
        "p_min": _nums, "p_max": _nums, "q_min": _nums, "q_max": _nums,
        "projection": {"enum": ["static", "instantaneous"]},
        "availability": _obj({"steps": {"type": "array", "items": {"type": "integer"}},
                              "factors": _nums}, ["steps", "factors"]),
    }, ["p_min", "p_max", "q_min", "q_max"]),
    "loads": _obj({
        "base": {"type": "array", "items": _obj({
            "bus": {"type": ["string", "integer"]},
            "p": _num_or_list,
            "q": _num_or_list,
        }, ["bus", "p", "q"])},
        "increment_std": _obj({"p": {"type": "number", "minimum": 0},
                               "q": {"type": "number", "minimum": 0}}, ["p", "q"]),
        "sigma_l_floor": {"type": "number", "minimum": 0},
    }, ["base", "increment_std"]),
    "estimator": _obj({"p0": {"type": "number", "exclusiveMinimum": 0}}),
    "simulation": _obj({
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "plant": {"enum": ["linear", "nonlinear"]},
        "ensemble_size": {"type": "integer", "minimum": 1},
        "initial_control": _nums,
        "measurement_noise": {"type": "boolean"},
    }, ["epsilon", "horizon", "seed"]),
}, ["grid", "sensors", "objective", "feasible_set", "loads", "simulation"])

DEFAULTS = {
    "objective": {"rho": 100.0, "v_min": 0.94, "v_max": 1.06, "eta": 1.0, "L_f": 1.0},
    "feasible_set": {"projection": "instantaneous"},
    "loads": {"sigma_l_floor": 0.0},
    "estimator": {"p0": 1.0},
    "simulation": {"plant": "nonlinear", "ensemble_size": 100, "measurement_noise": True},
}


def _complex_block(re, im):
    return np.asarray(re, dtype=float) + 1j * np.asarray(im, dtype=float)


def _apply_defaults(doc):
    doc = copy.deepcopy(doc)
    doc.setdefault("schema_version", SCENARIO_SCHEMA_VERSION)
    doc.setdefault("name", "scenario")
    doc.setdefault("estimator", {})
    for section, values in DEFAULTS.items():
        for key, value in values.items():
            doc[section].setdefault(key, value)
    if "L_g" not in doc["objective"]:
        doc["objective"]["L_g"] = doc["objective"]["rho"]
    return doc


def _check_version(version, expected, what):
    if str(version).split(".")[0] != expected.split(".")[0]:
        raise ScenarioError(f"{what}: schema version {version} is incompatible with {expected}")


def scenario_from_document(doc, source="<document>") -> Scenario:
    """Validate a parsed document and build the :class:`Scenario`."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{source}: schema violation at {where}: {exc.message}") from None
    doc = _apply_defaults(doc)
    _check_version(doc["schema_version"], SCENARIO_SCHEMA_VERSION, source)

    g = doc["grid"]
    buses = []
    for b in g["buses"]:
        shunt = None
        if "shunt" in b:
            shunt = _complex_block(b["shunt"]["g"], b["shunt"]["b"])
        buses.append(Bus(str(b["id"]), b.get("phases", 1), b["role"], shunt))
    branches = []
    for br in g["branches"]:
        z = _complex_block(br["r"], br["x"])
        try:
            y = np.linalg.inv(np.atleast_2d(z))
        except np.linalg.LinAlgError:
            raise ScenarioError(f"{source}: branch {br['from']}-{br['to']} has singular "
                                "impedance") from None
        branches.append(Branch(str(br["from"]), str(br["to"]), y))
    u_pcc = np.array([m * np.exp(1j * a) for m, a in g["slack_voltage"]])
    try:
        grid = build_admittance(buses, branches, u_pcc)
    except ValueError as exc:
        raise ScenarioError(f"{source}: grid: {exc}") from None

    n = grid.n
    ctrl_buses = [b for b in grid.nonslack if b.role == "controllable"]
    load_buses = [b for b in grid.nonslack if b.role == "load"]
    n_c = sum(b.phases for b in ctrl_buses)
    n_l = sum(b.phases for b in load_buses)
    load_pos = {}
    pos = 0
    for b in load_buses:
        load_pos[b.id] = list(range(pos, pos + b.phases))
        pos += b.phases

    def node_indices(ids, kind):
        out = []
        for bid in ids:
            bid = str(bid)
            if bid not in grid.index:
                raise ScenarioError(f"{source}: sensor {kind}: unknown or slack bus {bid!r}")
            s = grid.index[bid]
            out.extend(range(s.start, s.stop))
        return out

    sensors = []
    for k, s in enumerate(doc["sensors"]):
        kind = s["kind"]
        if kind in ("voltage-phasor", "voltage-magnitude"):
            targets = node_indices(s.get("buses", []), kind)
        elif kind == "state-subset":
            targets = list(s.get("indices", []))
        else:
            sel = s.get("loads", "all")
            ids = [b.id for b in load_buses] if sel == "all" else [str(x) for x in sel]
            targets = []
            for bid in ids:
                if bid not in load_pos:
                    raise ScenarioError(f"{source}: pseudo-load sensor: {bid!r} is not a load bus")
                targets.extend(load_pos[bid])
            targets = targets + [n_l + i for i in targets]
        nominal = s.get("nominal")
        if nominal is not None and len(nominal) != len(targets):
            raise ScenarioError(f"{source}: sensors/{k}/nominal: expected {len(targets)} values")
        try:
            sensors.append(SensorSpec(kind, tuple(targets), float(s["std"]),
                                      None if nominal is None else tuple(nominal),
                                      s.get("name", f"{kind}-{k}")))
        except ValueError as exc:
            raise ScenarioError(f"{source}: sensors/{k}: {exc}") from None

    o = doc["objective"]
    if not o["v_min"] < o["v_max"]:
        raise ScenarioError(f"{source}: objective: v_min ({o['v_min']}) must be below "
                            f"v_max ({o['v_max']})")
    if len(o["p_target"]) != n_c:
        raise ScenarioError(f"{source}: objective/p_target: expected {n_c} values")
    try:
        params = ObjectiveParams(np.array(o["p_target"], dtype=float), o["rho"], o["v_min"],
                                 o["v_max"], o["eta"], o["L_f"], o["L_g"])
    except ValueError as exc:
        raise ScenarioError(f"{source}: objective: {exc}") from None

    fs = doc["feasible_set"]
    for key in ("p_min", "p_max", "q_min", "q_max"):
        if len(fs[key]) != n_c:
            raise ScenarioError(f"{source}: feasible_set/{key}: expected {n_c} values")
    try:
        feasible = FeasibleSet.from_limits(*(np.array(fs[k], dtype=float)
                                             for k in ("p_min", "p_max", "q_min", "q_max")))
    except ValueError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    availability = None
    if "availability" in fs:
        av = fs["availability"]
        if len(av["steps"]) != len(av["factors"]) or not av["steps"]:
            raise ScenarioError(f"{source}: feasible_set/availability: steps and factors "
                                "must be non-empty and of equal length")
        availability = Availability(np.array(av["steps"]), np.array(av["factors"], dtype=float))

    ld = doc["loads"]
    base_p = np.zeros(n_l)
    base_q = np.zeros(n_l)
    for entry in ld["base"]:
        bid = str(entry["bus"])
        if bid not in load_pos:
            raise ScenarioError(f"{source}: loads/base: {bid!r} is not a load bus")
        idx = load_pos[bid]
        base_p[idx] = np.broadcast_to(entry["p"], (len(idx),))
        base_q[idx] = np.broadcast_to(entry["q"], (len(idx),))
    inc = ld["increment_std"]
    sigma_delta = np.diag(np.concatenate([np.full(n_l, inc["p"] ** 2),
                                          np.full(n_l, inc["q"] ** 2)]))
    loads = LoadProcess(np.concatenate([base_p, base_q]), sigma_delta)

    sim = doc["simulation"]
    init = sim.get("initial_control")
    if init is None:
        init = list(params.p_target) + [0.0] * n_c
    if len(init) != 2 * n_c:
        raise ScenarioError(f"{source}: simulation/initial_control: expected {2 * n_c} values")

    scenario = Scenario(
        name=doc["name"], grid=grid, sensors=tuple(sensors), params=params,
        feasible=feasible, loads=loads, initial_control=np.array(init, dtype=float),
        eps=float(sim["epsilon"]), horizon=int(sim["horizon"]), seed=int(sim["seed"]),
        plant=sim["plant"], ensemble_size=int(sim["ensemble_size"]),
        p0=float(doc["estimator"]["p0"]), sigma_l_floor=float(ld["sigma_l_floor"]),
        measurement_noise=bool(sim["measurement_noise"]), availability=availability,
        projection=fs["projection"], document=doc,
    )
    try:
        scenario.system()
    except ValueError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    assert n == scenario.system().lin.B.shape[0] // 2
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ScenarioError(f"{path}: parse error at {where}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: parse error: {exc}") from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return scenario_from_document(doc, source=str(path))


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.document, sort_keys=False, default_flow_style=None)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(dump_scenario(scenario))


def reference_scenario_path() -> Path:
    return Path(__file__).parent / "data" / "reference_feeder.yaml"


def reference_scenario() -> Scenario:
    return load_scenario(reference_scenario_path())


# ---------------------------------------------------------------------------
# results


@dataclass
class ResultsBundle:
    trajectory: Trajectory | None
    certificate: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    schema_version: str = RESULTS_SCHEMA_VERSION

    def columns(self):
        labels = [] if self.trajectory is None else self.trajectory.labels
        return list(BASE_COLUMNS) + [f"v_{lab}" for lab in labels]

    def rows(self):
        tr = self.trajectory
        if tr is None or tr.T == 0:
            return []
        series, _ = compute_metrics(tr)
        cols = [np.arange(tr.T, dtype=float)] + [series[c] for c in BASE_COLUMNS[1:]]
        table = np.column_stack(cols + [tr.v_mag])
        return table.tolist()


def run_metadata(seed, wall_time=None, **extra) -> dict:
    meta = {"seed": seed, "gridloop": __version__, "numpy": np.__version__,
            "python": platform.python_version()}
    if wall_time is not None:
        meta["wall_time_s"] = wall_time
    meta.update(extra)
    return meta


def _fmt(value) -> str:
    return format(float(value), ".17g")


def results_csv(bundle: ResultsBundle) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(bundle.columns())
    for row in bundle.rows():
        writer.writerow([str(int(row[0]))] + [_fmt(v) for v in row[1:]])
    return buf.getvalue()


def results_json(bundle: ResultsBundle) -> str:
    doc = {
        "schema_version": bundle.schema_version,
        "metadata": bundle.metadata,
        "certificate": bundle.certificate,
        "columns": bundle.columns(),
        "rows": bundle.rows(),
    }
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def export_results(bundle: ResultsBundle, path, fmt="table-csv") -> None:
    """Write ``bundle`` as a CSV table or a JSON document."""
    if fmt == "table-csv":
        text = results_csv(bundle)
    elif fmt == "structured-json":
        text = results_json(bundle)
    else:
        raise ValueError(f"unknown results format {fmt!r}")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results: {exc.strerror}", str(path)) from None


def load_results(path) -> dict:
    """Read a JSON results bundle, refusing an incompatible schema major."""
    with open(path) as fh:
        doc = json.load(fh)
    version = str(doc.get("schema_version", ""))
    if version.split(".")[0] != RESULTS_SCHEMA_VERSION.split(".")[0]:
        raise ResultsError(f"{path}: results schema {version!r} is incompatible with "
                           f"{RESULTS_SCHEMA_VERSION}")
    return doc


def read_results_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "results"))
