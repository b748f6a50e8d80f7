"""Plant simulation: fission predicate, action application, end-of-step
drift, anomaly handling, encoding, and config loading."""
import math
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npplab.plant import (
    Action,
    AnomalyKind,
    ConfigError,
    POWER_RANGE,
    RodLevel,
    SG_WATER_RANGE,
    apply_action,
    check_anomaly,
    default_plant_config,
    end_of_step,
    episode_energy,
    fission_active,
    load_plant_config,
    plant_config_from_dict,
    rollout,
    state_from_vector,
    state_vector,
    step,
    write_trace,
)

CFG = default_plant_config()
INITIAL = CFG.initial_state


def make_state(**overrides):
    return replace(INITIAL, **overrides)


class TestFissionActive:
    def test_security_down_halts_fission(self):
        state = make_state(security_rods=RodLevel.DOWN, fuel_rods=RodLevel.DOWN)
        assert not fission_active(state, CFG)

    def test_initial_state_is_inactive(self):
        # fuel rods start withdrawn
        assert not fission_active(INITIAL, CFG)

    def test_ready_state_is_active(self):
        state = make_state(fuel_rods=RodLevel.DOWN, sg_water=80.0)
        assert fission_active(state, CFG)

    def test_low_water_blocks_fission(self):
        state = make_state(fuel_rods=RodLevel.DOWN, sg_water=25.0)
        assert not fission_active(state, CFG)


class TestApplyAction:
    def test_skip_changes_nothing(self):
        assert apply_action(INITIAL, Action.SKIP, CFG) == INITIAL

    def test_add_water_medium_from_60(self):
        state = make_state(sg_water=60.0, temperature=100.0, pressure=200.0)
        out = apply_action(state, Action.ADD_WATER_MEDIUM, CFG)
        assert out.sg_water == 85.0

    def test_boundary_rod_move_is_noop_with_deltas(self):
        state = make_state(sustain_rods=RodLevel.UP, temperature=100.0, pressure=200.0)
        out = apply_action(state, Action.SUSTAIN_UP, CFG)
        assert out.sustain_rods == RodLevel.UP
        d_temp, d_pressure, _ = CFG.action_effects[Action.SUSTAIN_UP]
        assert out.temperature == 100.0 + d_temp
        assert out.pressure == 200.0 + d_pressure

    def test_three_level_rod_moves_one_level(self):
        state = make_state(sustain_rods=RodLevel.UP)
        out = apply_action(state, Action.SUSTAIN_DOWN, CFG)
        assert out.sustain_rods == RodLevel.MEDIUM
        out2 = apply_action(out, Action.SUSTAIN_DOWN, CFG)
        assert out2.sustain_rods == RodLevel.DOWN

    def test_two_level_rod_has_no_medium(self):
        state = make_state(fuel_rods=RodLevel.UP)
        out = apply_action(state, Action.FUEL_DOWN, CFG)
        assert out.fuel_rods == RodLevel.DOWN

    def test_water_clamped_at_100(self):
        state = make_state(sg_water=80.0)
        out = apply_action(state, Action.ADD_WATER_LARGE, CFG)
        assert out.sg_water == 100.0


class TestEndOfStep:
    def test_cold_shutdown_sits_at_floors(self):
        state = make_state(security_rods=RodLevel.DOWN)
        out = end_of_step(state, CFG)
        assert out.next_state.temperature == CFG.floors.ambient_temp
        assert out.next_state.pressure == CFG.floors.atmos_pressure
        assert out.next_state.sg_water == state.sg_water
        assert out.energy == 0.0
        assert not out.is_critic_step

    def test_fission_step_energy_from_running_power(self):
        state = make_state(fuel_rods=RodLevel.DOWN, sg_water=80.0, power=720.0,
                           temperature=100.0, pressure=200.0)
        out = end_of_step(state, CFG)
        assert out.anomaly is None
        assert out.energy == 2.0
        assert out.is_critic_step

    def test_regulatory_down_accelerates_all_rates(self):
        base = make_state(fuel_rods=RodLevel.DOWN, sg_water=80.0, power=300.0,
                          temperature=100.0, pressure=200.0)
        medium = end_of_step(replace(base, regulatory_rods=RodLevel.MEDIUM), CFG)
        down = end_of_step(replace(base, regulatory_rods=RodLevel.DOWN), CFG)

        def deltas(out):
            n = out.next_state
            return (abs(n.temperature - base.temperature),
                    abs(n.pressure - base.pressure),
                    abs(n.sg_water - base.sg_water),
                    n.power - base.power)

        for d_down, d_medium in zip(deltas(down), deltas(medium)):
            assert d_down > d_medium

    def test_power_decays_without_fission(self):
        state = make_state(security_rods=RodLevel.DOWN, power=40.0)
        out = end_of_step(state, CFG)
        assert out.next_state.power == 40.0 - CFG.power_decay_per_step
        assert out.energy == 0.0

    def test_anomaly_resets_to_initial_state(self):
        # still above temp_max after the cooling drift
        state = make_state(temperature=365.0)
        out = end_of_step(state, CFG)
        assert out.anomaly == AnomalyKind.OVERHEAT
        assert out.next_state == CFG.initial_state
        assert out.energy == 0.0
        assert not out.is_critic_step

    def test_dryout_when_fission_consumes_last_water(self):
        state = make_state(fuel_rods=RodLevel.DOWN, sg_water=26.0,
                           temperature=100.0, pressure=200.0)
        out = end_of_step(state, CFG)
        assert out.anomaly == AnomalyKind.DRYOUT
        assert out.next_state == CFG.initial_state


class TestCheckAnomaly:
    def test_initial_state_is_safe(self):
        assert check_anomaly(INITIAL, CFG) is None

    def test_overheat_just_above_threshold(self):
        state = make_state(temperature=CFG.anomaly_thresholds.temp_max + 1.0)
        assert check_anomaly(state, CFG) == AnomalyKind.OVERHEAT

    def test_no_dryout_without_fission(self):
        state = make_state(sg_water=0.0, security_rods=RodLevel.DOWN)
        assert check_anomaly(state, CFG) is None

    def test_fixed_precedence_when_all_trip(self):
        state = make_state(temperature=400.0, pressure=600.0, sg_water=0.0)
        assert check_anomaly(state, CFG, fission=True) == AnomalyKind.OVERHEAT
        state = make_state(pressure=600.0, sg_water=0.0)
        assert check_anomaly(state, CFG, fission=True) == AnomalyKind.OVERPRESSURE


class TestStateVector:
    def test_initial_encoding(self):
        assert state_vector(INITIAL) == [25.0, 100.0, 100.0, 0.0, 2.0, 2.0, 2.0, 2.0]

    def test_single_field_difference(self):
        vec = state_vector(make_state(fuel_rods=RodLevel.DOWN))
        expected = state_vector(INITIAL)
        expected[5] = 0.0
        assert vec == expected

    @given(st.builds(
        lambda t, p, w, pw, sec, fuel, sus, reg: make_state(
            temperature=t, pressure=p, sg_water=w, power=pw,
            security_rods=sec, fuel_rods=fuel, sustain_rods=sus, regulatory_rods=reg),
        st.floats(25, 500), st.floats(100, 600), st.floats(0, 100), st.floats(0, 1000),
        st.sampled_from([RodLevel.DOWN, RodLevel.UP]),
        st.sampled_from([RodLevel.DOWN, RodLevel.UP]),
        st.sampled_from(list(RodLevel)), st.sampled_from(list(RodLevel))))
    def test_roundtrip(self, state):
        assert state_from_vector(state_vector(state)) == state


class TestInvariants:
    def test_determinism(self):
        state = make_state(fuel_rods=RodLevel.DOWN, sg_water=70.0, power=100.0)
        outs = {step(state, Action.ADD_WATER_SMALL, CFG) for _ in range(5)}
        assert len(outs) == 1

    def test_monotone_decay_reaches_floors(self):
        state = make_state(security_rods=RodLevel.DOWN, temperature=300.0,
                           pressure=480.0, power=200.0)
        temps, pressures = [], []
        for _ in range(100):
            out = step(state, Action.SKIP, CFG)
            assert out.anomaly is None
            assert out.next_state.temperature <= state.temperature
            assert out.next_state.pressure <= state.pressure
            state = out.next_state
        assert state.temperature == CFG.floors.ambient_temp
        assert state.pressure == CFG.floors.atmos_pressure
        assert state.power == 0.0

    def test_clamps_over_random_trajectories(self):
        # >= 1e5 steps of uniformly random actions never leave the ranges
        rng = random.Random(7)
        state = INITIAL
        for _ in range(100_000):
            out = step(state, Action(rng.randrange(12)), CFG)
            s = out.next_state
            assert SG_WATER_RANGE[0] <= s.sg_water <= SG_WATER_RANGE[1]
            assert POWER_RANGE[0] <= s.power <= POWER_RANGE[1]
            assert s.temperature >= CFG.floors.ambient_temp
            assert s.pressure >= CFG.floors.atmos_pressure
            state = s

    def test_energy_accounting_matches_compensated_sum(self):
        rng = random.Random(3)
        state = INITIAL
        cumulative = 0.0
        fission_terms = []
        for _ in range(5000):
            action = Action(rng.randrange(12))
            prev_power = state.power
            out = step(state, action, CFG)
            cumulative += out.energy
            if out.fission_active and out.anomaly is None:
                fission_terms.append(prev_power / 360.0)
            state = out.next_state
        expected = math.fsum(fission_terms)
        assert expected > 0
        assert abs(cumulative - expected) <= 1e-9 * expected


class TestRollout:
    def test_trace_export_one_line_per_step(self, tmp_path):
        trace = rollout(CFG, lambda s: Action.SKIP, 10)
        path = tmp_path / "trace.jsonl"
        write_trace(path, trace)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 10
        assert episode_energy(trace) == 0.0


class TestConfigLoading:
    def test_default_config_loads(self):
        cfg = load_plant_config(None)
        assert cfg.schema_version == "1"
        assert len(cfg.action_effects) == 12

    def test_missing_action_is_reported_with_path(self):
        import yaml
        from importlib import resources
        doc = yaml.safe_load(resources.files("npplab.data")
                             .joinpath("plant_default.yaml").read_text())
        del doc["action_effects"]["skip"]
        with pytest.raises(ConfigError, match="action_effects.*skip"):
            plant_config_from_dict(doc)

    def test_nonzero_skip_rejected(self):
        import yaml
        from importlib import resources
        doc = yaml.safe_load(resources.files("npplab.data")
                             .joinpath("plant_default.yaml").read_text())
        doc["action_effects"]["skip"] = [1.0, 0.0, 0.0]
        with pytest.raises(ConfigError, match="skip"):
            plant_config_from_dict(doc)

    def test_bad_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            plant_config_from_dict({"schema_version": "99"})
