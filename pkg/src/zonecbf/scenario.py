"""Scenario files: a commented YAML schema with strict validation,
documented defaults, canonical serialization, and a content hash that
makes every run artifact reproducible.

See docs/formats.md for the full schema and ranges.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import yaml

from .barrier import BarrierParams
from .controller import ControllerConfig
from .perception import PerceptionParams
from .world import ObstacleSpec, World


class ScenarioError(ValueError):
    """Schema violation carrying the offending key and source line."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"scenario key '{key}'{where}: {message}")


# (default, low, high, kind); bounds are inclusive unless noted in the check
_NUM = "num"
_INT = "int"

_SCHEMA = {
    "arena": {
        "x_min": (-1.0, None, None, _NUM),
        "x_max": (11.0, None, None, _NUM),
        "y_min": (-1.0, None, None, _NUM),
        "y_max": (11.0, None, None, _NUM),
    },
    "robot": {
        "start": ([0.0, 0.0, 0.0], None, None, "pose"),
        "radius": (0.15, 1e-6, 5.0, _NUM),
        "v_max": (0.5, 1e-6, 100.0, _NUM),
        "omega_max": (1.5, 1e-6, 100.0, _NUM),
    },
    "goals": {
        "points": (None, None, None, "points"),  # required
        "tolerance": (0.15, 1e-6, 10.0, _NUM),
    },
    "perception": {
        "d_p": (0.3, 1e-6, 100.0, _NUM),
        "n_min": (3, 1, 1000, _INT),
        "d_max": (1.0, 1e-6, 100.0, _NUM),
        "d_min": (0.03, 1e-9, 100.0, _NUM),
        "b_min": (0.05, 1e-6, 10.0, _NUM),
        "noise_std": (0.0, 0.0, 1.0, _NUM),
        "miss_limit": (5, 1, 1000, _INT),
        "revert_frames": (3, 1, 1000, _INT),
        "q_pos": (1e-3, 0.0, None, _NUM),
        "q_vel": (1e-2, 0.0, None, _NUM),
        "q_acc": (1e-1, 0.0, None, _NUM),
        "q_shape": (1e-3, 0.0, None, _NUM),
        "r_center": (0.02, 1e-9, None, _NUM),
        "r_axes": (0.05, 1e-9, None, _NUM),
        "r_angle": (0.05, 1e-9, None, _NUM),
    },
    "barrier": {
        "R_safe": (0.3, 1e-6, 10.0, _NUM),
        "c_k": (0.1, 0.0, 10.0, _NUM),
        "d_k": (0.2, 1e-6, 10.0, _NUM),
        "gamma": (1.0, 1e-6, 100.0, _NUM),
        "ramp": ("linear", None, None, "enum:linear,smoothstep"),
    },
    "controller": {
        "nominal_mode": ("mpc", None, None, "enum:clf,mpc"),
        "c1": (1.0, 1e-9, None, _NUM),
        "c2": (1.0, 1e-9, None, _NUM),
        "c3": (1.0, 1e-9, None, _NUM),
        "slack_weight": (100.0, 1e-9, None, _NUM),
        "omega_weight": (4.0, 1e-9, None, _NUM),
        "ell_d": (0.1, 1e-6, 1.0, _NUM),
        "d_bf": (0.1, 1e-6, 10.0, _NUM),
        "boundary_log_capacity": (64, 1, 100000, _INT),
        "mpc_horizon": (10, 1, 200, _INT),
        "mpc_dt": (0.1, 1e-4, 10.0, _NUM),
        "backup_horizon": (20, 1, 200, _INT),
        "backup_dt": (0.15, 1e-4, 10.0, _NUM),
        "w_pos": (1.0, 1e-9, None, _NUM),
        "w_heading": (0.1, 0.0, None, _NUM),
        "w_v": (0.1, 1e-9, None, _NUM),
        "w_omega": (0.05, 1e-9, None, _NUM),
        "terminal_scale": (10.0, 1e-9, None, _NUM),
    },
    "sim": {
        "dt": (0.05, 1e-4, 1.0, _NUM),
        "timeout_per_goal": (300.0, 1e-3, 100000.0, _NUM),
        "ray_count": (360, 8, 100000, _INT),
        "max_range": (5.0, 1e-3, 1000.0, _NUM),
    },
}

_OBSTACLE_KEYS = {
    "shape",
    "center",
    "radius",
    "a",
    "b",
    "angle",
    "width",
    "height",
    "motion",
    "velocity",
    "waypoints",
    "speed",
}


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    arena: dict = field(default_factory=dict)
    robot: dict = field(default_factory=dict)
    goals: dict = field(default_factory=dict)
    obstacles: list = field(default_factory=list)
    perception: dict = field(default_factory=dict)
    barrier: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    seed: int = 0

    # ---- typed views consumed by the engine ----

    def world(self) -> World:
        w = World(obstacles=[_obstacle_spec(ob) for ob in self.obstacles])
        w.validate_disjoint()
        return w

    def perception_params(self) -> PerceptionParams:
        p = {k: v for k, v in self.perception.items() if k != "noise_std"}
        return PerceptionParams(**p)

    def barrier_params(self, effective_radius: float | None = None) -> BarrierParams:
        r = self.robot["radius"] if effective_radius is None else effective_radius
        return BarrierParams(
            R_safe=self.barrier["R_safe"],
            r=r,
            c_k=self.barrier["c_k"],
            d_k=self.barrier["d_k"],
            gamma=self.barrier["gamma"],
            b_min=self.perception["b_min"],
            ramp=self.barrier["ramp"],
        )

    def controller_config(self) -> ControllerConfig:
        c = dict(self.controller)
        return ControllerConfig(
            goals=[tuple(p) for p in self.goals["points"]],
            goal_tolerance=self.goals["tolerance"],
            v_max=self.robot["v_max"],
            omega_max=self.robot["omega_max"],
            **c,
        )


def _obstacle_spec(ob: dict) -> ObstacleSpec:
    kw = dict(
        shape=ob["shape"],
        center=tuple(ob["center"]),
        motion=ob.get("motion", "static"),
    )
    for k in ("radius", "a", "b", "angle", "width", "height", "speed"):
        if k in ob:
            kw[k] = float(ob[k])
    if "velocity" in ob:
        kw["velocity"] = tuple(float(v) for v in ob["velocity"])
    if "waypoints" in ob:
        kw["waypoints"] = tuple(tuple(float(v) for v in p) for p in ob["waypoints"])
    return ObstacleSpec(**kw)


def _walk_lines(node, path: str, lines: dict) -> None:
    if node is None:
        return
    lines.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key_node, val_node in node.value:
            _walk_lines(val_node, f"{path}.{key_node.value}" if path else key_node.value, lines)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _walk_lines(item, f"{path}[{i}]", lines)


def _check_number(key, value, lo, hi, kind, lines):
    line = lines.get(key)
    if kind == _INT:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ScenarioError(key, f"expected integer, got {value!r}", line)
    else:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(key, f"expected number, got {value!r}", line)
        value = float(value)
        if not math.isfinite(value):
            raise ScenarioError(key, "must be finite", line)
    if lo is not None and value < lo:
        raise ScenarioError(key, f"{value} below minimum {lo}", line)
    if hi is not None and value > hi:
        raise ScenarioError(key, f"{value} above maximum {hi}", line)
    return value


def _check_point_list(key, value, lines, length=2):
    line = lines.get(key)
    if not isinstance(value, (list, tuple)) or not value:
        raise ScenarioError(key, "expected a non-empty list of points", line)
    out = []
    for i, p in enumerate(value):
        if not isinstance(p, (list, tuple)) or len(p) != length:
            raise ScenarioError(f"{key}[{i}]", f"expected [x, y] pair", lines.get(f"{key}[{i}]", line))
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in p):
            raise ScenarioError(f"{key}[{i}]", "coordinates must be finite numbers", lines.get(f"{key}[{i}]", line))
        out.append([float(v) for v in p])
    return out


def _validate_section(name: str, raw: dict, lines: dict) -> dict:
    schema = _SCHEMA[name]
    out = {}
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ScenarioError(name, "expected a mapping", lines.get(name))
    for key in raw:
        if key not in schema:
            raise ScenarioError(f"{name}.{key}", "unknown key", lines.get(f"{name}.{key}"))
    for key, (default, lo, hi, kind) in schema.items():
        path = f"{name}.{key}"
        if key not in raw:
            if default is None:
                raise ScenarioError(path, "required key missing", lines.get(name))
            out[key] = default if not isinstance(default, list) else list(default)
            continue
        value = raw[key]
        if kind in (_NUM, _INT):
            out[key] = _check_number(path, value, lo, hi, kind, lines)
        elif kind.startswith("enum:"):
            allowed = kind.split(":", 1)[1].split(",")
            if value not in allowed:
                raise ScenarioError(path, f"must be one of {allowed}", lines.get(path))
            out[key] = value
        elif kind == "pose":
            pts = _check_point_list(path, [value], lines, length=3)
            out[key] = pts[0]
        elif kind == "points":
            out[key] = _check_point_list(path, value, lines)
        else:  # pragma: no cover
            raise AssertionError(kind)
    return out


def _validate_obstacle(i: int, ob: dict, lines: dict) -> dict:
    base = f"obstacles[{i}]"
    if not isinstance(ob, dict):
        raise ScenarioError(base, "expected a mapping", lines.get(base))
    for key in ob:
        if key not in _OBSTACLE_KEYS:
            raise ScenarioError(f"{base}.{key}", "unknown key", lines.get(f"{base}.{key}"))
    shape = ob.get("shape")
    if shape not in ("circle", "ellipse", "rectangle"):
        raise ScenarioError(f"{base}.shape", "must be circle, ellipse, or rectangle", lines.get(f"{base}.shape", lines.get(base)))
    out: dict = {"shape": shape}
    motion = ob.get("motion", "static")
    if motion not in ("static", "constant_velocity", "waypoint_loop"):
        raise ScenarioError(f"{base}.motion", "must be static, constant_velocity, or waypoint_loop", lines.get(f"{base}.motion"))
    out["motion"] = motion

    required = {
        "circle": ["radius"],
        "ellipse": ["a", "b"],
        "rectangle": ["width", "height"],
    }[shape]
    for k in required:
        if k not in ob:
            raise ScenarioError(f"{base}.{k}", f"required for shape {shape}", lines.get(base))
        out[k] = _check_number(f"{base}.{k}", ob[k], 1e-6, 100.0, _NUM, lines)
    if shape in ("ellipse", "rectangle"):
        out["angle"] = _check_number(f"{base}.angle", ob.get("angle", 0.0), None, None, _NUM, lines)

    if motion == "waypoint_loop":
        if "waypoints" not in ob:
            raise ScenarioError(f"{base}.waypoints", "required for waypoint_loop", lines.get(base))
        out["waypoints"] = _check_point_list(f"{base}.waypoints", ob["waypoints"], lines)
        if len(out["waypoints"]) < 2:
            raise ScenarioError(f"{base}.waypoints", "need at least 2 waypoints", lines.get(f"{base}.waypoints"))
        out["speed"] = _check_number(f"{base}.speed", ob.get("speed"), 1e-6, 100.0, _NUM, lines)
        out["center"] = list(out["waypoints"][0])
    else:
        if "center" not in ob:
            raise ScenarioError(f"{base}.center", "required key missing", lines.get(base))
        out["center"] = _check_point_list(f"{base}.center", [ob["center"]], lines)[0]
    if motion == "constant_velocity":
        if "velocity" not in ob:
            raise ScenarioError(f"{base}.velocity", "required for constant_velocity", lines.get(base))
        out["velocity"] = _check_point_list(f"{base}.velocity", [ob["velocity"]], lines)[0]
    return out


def parse_scenario_text(text: str, name: str = "scenario") -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
        tree = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError("<document>", f"not valid YAML: {exc}", mark.line + 1 if mark else None)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ScenarioError("<document>", "top level must be a mapping")
    lines: dict = {}
    _walk_lines(tree, "", lines)

    known_top = set(_SCHEMA) | {"obstacles", "seed", "name"}
    for key in raw:
        if key not in known_top:
            raise ScenarioError(key, "unknown key", lines.get(key))

    cfg = ScenarioConfig(name=str(raw.get("name", name)))
    for section in _SCHEMA:
        setattr(cfg, section, _validate_section(section, raw.get(section), lines))
    obstacles = raw.get("obstacles", []) or []
    if not isinstance(obstacles, list):
        raise ScenarioError("obstacles", "expected a list", lines.get("obstacles"))
    cfg.obstacles = [_validate_obstacle(i, ob, lines) for i, ob in enumerate(obstacles)]
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ScenarioError("seed", "must be a non-negative integer", lines.get("seed"))
    cfg.seed = seed
    if cfg.perception["d_min"] >= cfg.perception["d_max"]:
        raise ScenarioError("perception.d_min", "must be below perception.d_max", lines.get("perception.d_min"))
    if cfg.controller["c1"] > cfg.controller["c2"]:
        raise ScenarioError("controller.c1", "must not exceed controller.c2", lines.get("controller.c1"))
    # surface the ground-truth disjointness violation at parse time
    try:
        cfg.world()
    except ValueError as exc:
        raise ScenarioError("obstacles", str(exc), lines.get("obstacles"))
    return cfg


def parse_scenario(path) -> ScenarioConfig:
    """Load and validate a scenario file; diagnostics carry the offending
    key, expected range, and line number."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError("<file>", f"cannot read {path}: {exc}")
    import os

    return parse_scenario_text(text, name=os.path.splitext(os.path.basename(str(path)))[0])


def serialize_scenario(cfg: ScenarioConfig) -> str:
    """Canonical YAML form; parse(serialize(parse(x))) is a fixed point."""
    doc = {
        "name": cfg.name,
        "arena": dict(cfg.arena),
        "robot": dict(cfg.robot),
        "goals": dict(cfg.goals),
        "obstacles": [dict(ob) for ob in cfg.obstacles],
        "perception": dict(cfg.perception),
        "barrier": dict(cfg.barrier),
        "controller": dict(cfg.controller),
        "sim": dict(cfg.sim),
        "seed": cfg.seed,
    }
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=None)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(serialize_scenario(cfg).encode()).hexdigest()[:16]
