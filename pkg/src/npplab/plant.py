"""Deterministic simulation of a simplified nuclear power plant.

Eight features (four continuous gauges, four rod banks), twelve operator
actions, fission preconditions, per-step drift, anomaly detection, and
energy accounting. Every numeric constant lives in a versioned YAML config
(see ``data/plant_default.yaml``); the code only enforces structure.

The simulation is pure value semantics: every operation maps an input
state to a fresh state, so independent episodes can run in parallel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import yaml

N_FEATURES = 8
N_ACTIONS = 12
STEP_SECONDS = 10.0    # nominal wall duration of one control step
ENERGY_DIVISOR = 360.0 # MW -> MWh-equivalent for a 10 s step

SG_WATER_RANGE = (0.0, 100.0)
POWER_RANGE = (0.0, 1000.0)

FEATURE_ORDER = (
    "temperature",
    "pressure",
    "sg_water",
    "power",
    "security_rods",
    "fuel_rods",
    "sustain_rods",
    "regulatory_rods",
)


class RodLevel(IntEnum):
    """Rod bank position. Two-level banks use only DOWN and UP."""

    DOWN = 0
    MEDIUM = 1
    UP = 2


TWO_LEVEL = (RodLevel.DOWN, RodLevel.UP)
THREE_LEVEL = (RodLevel.DOWN, RodLevel.MEDIUM, RodLevel.UP)

_LEVEL_NAMES = {RodLevel.DOWN: "down", RodLevel.MEDIUM: "medium", RodLevel.UP: "up"}
_LEVELS_BY_NAME = {v: k for k, v in _LEVEL_NAMES.items()}


class Action(IntEnum):
    """The twelve operator actions, in the fixed index order shared by
    leaf Q-arrays, the wire API, and session logs."""

    SECURITY_UP = 0
    SECURITY_DOWN = 1
    FUEL_UP = 2
    FUEL_DOWN = 3
    SUSTAIN_UP = 4
    SUSTAIN_DOWN = 5
    REGULATORY_UP = 6
    REGULATORY_DOWN = 7
    ADD_WATER_SMALL = 8
    ADD_WATER_MEDIUM = 9
    ADD_WATER_LARGE = 10
    SKIP = 11

    @property
    def wire_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "Action":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown action name: {name!r}") from None


ACTION_ORDER = tuple(a.wire_name for a in Action)

# rod moved by each rod action, and the direction of the move
_ROD_MOVES = {
    Action.SECURITY_UP: ("security_rods", +1),
    Action.SECURITY_DOWN: ("security_rods", -1),
    Action.FUEL_UP: ("fuel_rods", +1),
    Action.FUEL_DOWN: ("fuel_rods", -1),
    Action.SUSTAIN_UP: ("sustain_rods", +1),
    Action.SUSTAIN_DOWN: ("sustain_rods", -1),
    Action.REGULATORY_UP: ("regulatory_rods", +1),
    Action.REGULATORY_DOWN: ("regulatory_rods", -1),
}


class AnomalyKind(str, Enum):
    OVERHEAT = "overheat"
    OVERPRESSURE = "overpressure"
    DRYOUT = "dryout"


class ConfigError(ValueError):
    """Raised when a plant config file is malformed; message is path-qualified."""


@dataclass(frozen=True)
class PlantState:
    """The 8-feature plant state. Feature index order is FEATURE_ORDER."""

    temperature: float
    pressure: float
    sg_water: float
    power: float
    security_rods: RodLevel
    fuel_rods: RodLevel
    sustain_rods: RodLevel
    regulatory_rods: RodLevel

    def __post_init__(self) -> None:
        if self.security_rods == RodLevel.MEDIUM or self.fuel_rods == RodLevel.MEDIUM:
            raise ValueError("security and fuel rods are two-level banks (up/down)")


def state_vector(state: PlantState) -> list[float]:
    """Fixed-order numeric encoding of a state (rods as ordinals 0/1/2)."""
    return [
        state.temperature,
        state.pressure,
        state.sg_water,
        state.power,
        float(state.security_rods),
        float(state.fuel_rods),
        float(state.sustain_rods),
        float(state.regulatory_rods),
    ]


def state_from_vector(vec: Sequence[float]) -> PlantState:
    """Inverse of :func:`state_vector`. Rod ordinals must be exact levels."""
    if len(vec) != N_FEATURES:
        raise ValueError(f"state vector must have {N_FEATURES} entries, got {len(vec)}")
    return PlantState(
        temperature=float(vec[0]),
        pressure=float(vec[1]),
        sg_water=float(vec[2]),
        power=float(vec[3]),
        security_rods=RodLevel(int(vec[4])),
        fuel_rods=RodLevel(int(vec[5])),
        sustain_rods=RodLevel(int(vec[6])),
        regulatory_rods=RodLevel(int(vec[7])),
    )


@dataclass(frozen=True)
class Floors:
    ambient_temp: float
    atmos_pressure: float


@dataclass(frozen=True)
class AnomalyThresholds:
    temp_max: float
    pressure_max: float
    sg_water_min: float


@dataclass(frozen=True)
class FissionRates:
    temperature: float
    pressure: float
    sg_water: float
    power: float


@dataclass(frozen=True)
class CoolingRates:
    temperature: float
    pressure: float


@dataclass(frozen=True)
class RodMultipliers:
    temperature: float
    pressure: float
    sg_water: float
    power: float


@dataclass(frozen=True)
class PlantConfig:
    schema_version: str
    initial_state: PlantState
    action_effects: dict      # Action -> (d_temp, d_pressure, d_sg_water)
    fission_rates: FissionRates
    rod_dynamics: dict        # (sustain RodLevel, regulatory RodLevel) -> RodMultipliers
    cooling: CoolingRates
    anomaly_thresholds: AnomalyThresholds
    power_decay_per_step: float
    fission_min_sg_water: float
    floors: Floors


@dataclass(frozen=True)
class StepOutcome:
    """Result of one end-of-step update."""

    next_state: PlantState
    energy: float              # MWh-equivalent produced this step
    fission_active: bool       # whether fission ran during the step
    anomaly: Optional[AnomalyKind]
    is_critic_step: bool       # plant actively produced energy


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def fission_active(state: PlantState, config: PlantConfig) -> bool:
    """True iff security rods up, fuel rods down, and enough SG water."""
    return (
        state.security_rods == RodLevel.UP
        and state.fuel_rods == RodLevel.DOWN
        and state.sg_water > config.fission_min_sg_water
    )


def _move_rod(level: RodLevel, ladder: tuple, direction: int) -> RodLevel:
    idx = ladder.index(level)
    idx = max(0, min(len(ladder) - 1, idx + direction))
    return ladder[idx]


def apply_action(state: PlantState, action: Action, config: PlantConfig) -> PlantState:
    """Apply the operator action: rod move (clamped at boundaries, never an
    error) followed by the configured gauge deltas. No drift happens here;
    that is :func:`end_of_step`."""
    new = state
    move = _ROD_MOVES.get(action)
    if move is not None:
        field, direction = move
        ladder = TWO_LEVEL if field in ("security_rods", "fuel_rods") else THREE_LEVEL
        new = replace(new, **{field: _move_rod(getattr(new, field), ladder, direction)})
    d_temp, d_pressure, d_sg = config.action_effects[action]
    return replace(
        new,
        temperature=max(config.floors.ambient_temp, new.temperature + d_temp),
        pressure=max(config.floors.atmos_pressure, new.pressure + d_pressure),
        sg_water=_clamp(new.sg_water + d_sg, *SG_WATER_RANGE),
    )


def check_anomaly(
    state: PlantState, config: PlantConfig, fission: Optional[bool] = None
) -> Optional[AnomalyKind]:
    """First matching anomaly in the fixed order overheat > overpressure >
    dryout, or None. Dryout needs fission; callers that know whether fission
    ran this step pass it, otherwise the predicate is evaluated on `state`."""
    t = config.anomaly_thresholds
    if state.temperature > t.temp_max:
        return AnomalyKind.OVERHEAT
    if state.pressure > t.pressure_max:
        return AnomalyKind.OVERPRESSURE
    if fission is None:
        fission = fission_active(state, config)
    if fission and state.sg_water <= t.sg_water_min:
        return AnomalyKind.DRYOUT
    return None


def end_of_step(state: PlantState, config: PlantConfig) -> StepOutcome:
    """End-of-step drift, energy accounting, and anomaly check.

    `state` is the post-action state. While fission runs, temperature,
    pressure and power rise and SG water is consumed at rates scaled by the
    sustain/regulatory rod configuration; otherwise temperature and pressure
    decay toward their floors and the water level holds. Power always loses
    ``power_decay_per_step`` (rod de-potentiation). Energy for the step is
    the running power divided by 360 when fission ran, zero otherwise, and
    zero on an anomaly; an anomaly resets the plant to its initial state.
    """
    fission = fission_active(state, config)
    if fission:
        m = config.rod_dynamics[(state.sustain_rods, state.regulatory_rods)]
        r = config.fission_rates
        temperature = state.temperature + r.temperature * m.temperature
        pressure = state.pressure + r.pressure * m.pressure
        sg_water = state.sg_water - r.sg_water * m.sg_water
        power = state.power + r.power * m.power
    else:
        temperature = max(config.floors.ambient_temp, state.temperature - config.cooling.temperature)
        pressure = max(config.floors.atmos_pressure, state.pressure - config.cooling.pressure)
        sg_water = state.sg_water
        power = state.power
    power -= config.power_decay_per_step

    next_state = replace(
        state,
        temperature=max(config.floors.ambient_temp, temperature),
        pressure=max(config.floors.atmos_pressure, pressure),
        sg_water=_clamp(sg_water, *SG_WATER_RANGE),
        power=_clamp(power, *POWER_RANGE),
    )

    anomaly = check_anomaly(next_state, config, fission=fission)
    if anomaly is not None:
        return StepOutcome(config.initial_state, 0.0, fission, anomaly, False)

    energy = state.power / ENERGY_DIVISOR if fission else 0.0
    return StepOutcome(next_state, energy, fission, None, energy > 0.0)


def step(state: PlantState, action: Action, config: PlantConfig) -> StepOutcome:
    """Convenience: apply_action followed by end_of_step."""
    return end_of_step(apply_action(state, action, config), config)


# ---------------------------------------------------------------------------
# Config loading


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where}.{key}: missing")
    return mapping[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _rod_level(value, where: str) -> RodLevel:
    if value not in _LEVELS_BY_NAME:
        raise ConfigError(f"{where}: expected one of up/medium/down, got {value!r}")
    return _LEVELS_BY_NAME[value]


def plant_config_from_dict(doc: dict, where: str = "plant_config") -> PlantConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    version = _require(doc, "schema_version", where)
    if str(version) != "1":
        raise ConfigError(f"{where}.schema_version: unsupported version {version!r}")

    fl = _require(doc, "floors", where)
    floors = Floors(
        ambient_temp=_number(_require(fl, "ambient_temp", f"{where}.floors"), f"{where}.floors.ambient_temp"),
        atmos_pressure=_number(_require(fl, "atmos_pressure", f"{where}.floors"), f"{where}.floors.atmos_pressure"),
    )

    ini = _require(doc, "initial_state", where)
    w = f"{where}.initial_state"
    initial_state = PlantState(
        temperature=_number(_require(ini, "temperature", w), f"{w}.temperature"),
        pressure=_number(_require(ini, "pressure", w), f"{w}.pressure"),
        sg_water=_number(_require(ini, "sg_water", w), f"{w}.sg_water"),
        power=_number(_require(ini, "power", w), f"{w}.power"),
        security_rods=_rod_level(_require(ini, "security_rods", w), f"{w}.security_rods"),
        fuel_rods=_rod_level(_require(ini, "fuel_rods", w), f"{w}.fuel_rods"),
        sustain_rods=_rod_level(_require(ini, "sustain_rods", w), f"{w}.sustain_rods"),
        regulatory_rods=_rod_level(_require(ini, "regulatory_rods", w), f"{w}.regulatory_rods"),
    )

    th = _require(doc, "anomaly_thresholds", where)
    w = f"{where}.anomaly_thresholds"
    thresholds = AnomalyThresholds(
        temp_max=_number(_require(th, "temp_max", w), f"{w}.temp_max"),
        pressure_max=_number(_require(th, "pressure_max", w), f"{w}.pressure_max"),
        sg_water_min=_number(_require(th, "sg_water_min", w), f"{w}.sg_water_min"),
    )

    decay = _number(_require(doc, "power_decay_per_step", where), f"{where}.power_decay_per_step")
    if decay <= 0:
        raise ConfigError(f"{where}.power_decay_per_step: must be > 0")

    min_sg = _number(_require(doc, "fission_min_sg_water", where), f"{where}.fission_min_sg_water")

    co = _require(doc, "cooling", where)
    w = f"{where}.cooling"
    cooling = CoolingRates(
        temperature=_number(_require(co, "temperature", w), f"{w}.temperature"),
        pressure=_number(_require(co, "pressure", w), f"{w}.pressure"),
    )

    fr = _require(doc, "fission_rates", where)
    w = f"{where}.fission_rates"
    rates = FissionRates(
        temperature=_number(_require(fr, "temperature", w), f"{w}.temperature"),
        pressure=_number(_require(fr, "pressure", w), f"{w}.pressure"),
        sg_water=_number(_require(fr, "sg_water", w), f"{w}.sg_water"),
        power=_number(_require(fr, "power", w), f"{w}.power"),
    )

    rd = _require(doc, "rod_dynamics", where)
    rod_dynamics = {}
    for s_name in ("up", "medium", "down"):
        row = _require(rd, s_name, f"{where}.rod_dynamics")
        for r_name in ("up", "medium", "down"):
            cell = _require(row, r_name, f"{where}.rod_dynamics.{s_name}")
            w = f"{where}.rod_dynamics.{s_name}.{r_name}"
            if not isinstance(cell, list) or len(cell) != 4:
                raise ConfigError(f"{w}: expected 4 multipliers [temp, pressure, sg_water, power]")
            mult = RodMultipliers(*(_number(v, f"{w}[{i}]") for i, v in enumerate(cell)))
            rod_dynamics[(_LEVELS_BY_NAME[s_name], _LEVELS_BY_NAME[r_name])] = mult

    ae = _require(doc, "action_effects", where)
    w = f"{where}.action_effects"
    if not isinstance(ae, dict):
        raise ConfigError(f"{w}: expected a mapping")
    extra = set(ae) - set(ACTION_ORDER)
    missing = set(ACTION_ORDER) - set(ae)
    if extra:
        raise ConfigError(f"{w}: unknown actions {sorted(extra)}")
    if missing:
        raise ConfigError(f"{w}: missing actions {sorted(missing)}")
    action_effects = {}
    for name in ACTION_ORDER:
        cell = ae[name]
        if not isinstance(cell, list) or len(cell) != 3:
            raise ConfigError(f"{w}.{name}: expected 3 deltas [temp, pressure, sg_water]")
        action_effects[Action.from_wire(name)] = tuple(
            _number(v, f"{w}.{name}[{i}]") for i, v in enumerate(cell)
        )
    if action_effects[Action.SKIP] != (0.0, 0.0, 0.0):
        raise ConfigError(f"{w}.skip: must be [0, 0, 0]")

    return PlantConfig(
        schema_version=str(version),
        initial_state=initial_state,
        action_effects=action_effects,
        fission_rates=rates,
        rod_dynamics=rod_dynamics,
        cooling=cooling,
        anomaly_thresholds=thresholds,
        power_decay_per_step=decay,
        fission_min_sg_water=min_sg,
        floors=floors,
    )


def load_plant_config(path: Optional[str | Path] = None) -> PlantConfig:
    """Load a plant config YAML; with no path, the packaged defaults."""
    if path is None:
        text = resources.files("npplab.data").joinpath("plant_default.yaml").read_text()
        where = "plant_default.yaml"
    else:
        text = Path(path).read_text()
        where = str(path)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: invalid YAML: {exc}") from exc
    return plant_config_from_dict(doc, where=where)


_DEFAULT_CONFIG: Optional[PlantConfig] = None


def default_plant_config() -> PlantConfig:
    global _DEFAULT_CONFIG
    if _DEFAULT_CONFIG is None:
        _DEFAULT_CONFIG = load_plant_config(None)
    return _DEFAULT_CONFIG


# ---------------------------------------------------------------------------
# Episode rollouts and trace export


def rollout(
    config: PlantConfig,
    policy: Callable[[PlantState], Action],
    steps: int,
    initial: Optional[PlantState] = None,
) -> list[tuple[Action, StepOutcome]]:
    """Run `steps` steps from the initial state under a state->action policy."""
    state = initial if initial is not None else config.initial_state
    out = []
    for _ in range(steps):
        action = policy(state)
        outcome = step(state, action, config)
        out.append((action, outcome))
        state = outcome.next_state
    return out


def episode_energy(trace: Iterable[tuple[Action, StepOutcome]]) -> float:
    return sum(outcome.energy for _, outcome in trace)


def episode_anomalies(trace: Iterable[tuple[Action, StepOutcome]]) -> int:
    return sum(1 for _, outcome in trace if outcome.anomaly is not None)


def write_trace(path: str | Path, trace: Iterable[tuple[Action, StepOutcome]]) -> None:
    """Write one StepOutcome per line (JSONL)."""
    with open(path, "w") as fh:
        for i, (action, outcome) in enumerate(trace):
            fh.write(json.dumps({
                "step": i,
                "action": int(action),
                "action_name": action.wire_name,
                "state": state_vector(outcome.next_state),
                "energy": outcome.energy,
                "fission_active": outcome.fission_active,
                "anomaly": outcome.anomaly.value if outcome.anomaly else None,
                "is_critic_step": outcome.is_critic_step,
            }, sort_keys=True) + "\n")
