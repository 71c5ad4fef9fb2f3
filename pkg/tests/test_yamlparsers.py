from pathlib import Path
from unittest import TestCase

import pytest

from fsi_toolbox.classes import (
    ConfigError,
    FeedbackScheme,
    InitialCondition,
    ModeFamily,
)
from fsi_toolbox.yamlparsers import (
    ExperimentConfig,
    StabilizationConfig,
    merge,
    parse_sweep,
    sweep_overrides,
)

data_dir = Path(__file__).parent / "test_data"

MINIMAL = {
    "Geometry": {"Container Radius": 1.0, "Solid Radius": 0.3, "Viscosity": 0.1},
    "Discretization": {"Mesh Size": 0.1},
}


def with_section(section, values):
    document = {key: dict(value) for key, value in MINIMAL.items()}
    document.setdefault(section, {}).update(values)
    return document


class TestExperimentConfig(TestCase):
    def setUp(self):
        self.instance = ExperimentConfig.from_yaml_path(data_dir / "experiment.yaml")

    def test_valid_record(self):
        config = self.instance
        self.assertEqual(config.geometry.mesh_size, 0.1)
        self.assertEqual(config.geometry.viscosity, 0.1)
        self.assertIsNone(config.stabilization.decay_rate)
        self.assertEqual(config.stabilization.decay_rate_factor, 1.5)
        self.assertIs(config.stabilization.mode_family, ModeFamily.TRIGONOMETRIC)
        self.assertIs(config.stabilization.feedback, FeedbackScheme.LAGGED)
        self.assertIs(config.simulation.initial_condition, InitialCondition.RANDOM)
        self.assertEqual(config.deformation.snapshots, 3)
        self.assertEqual(config.outputs.formats, ("csv", "json", "mesh"))
        self.assertEqual(config.outputs.directory, Path("fsi_output"))
        self.assertEqual(config.seed, 0)

    def test_seeded_generators_repeat(self):
        first = self.instance.rng().standard_normal(3)
        second = self.instance.rng().standard_normal(3)
        self.assertEqual(list(first), list(second))

    def test_missing_mesh_size(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_path(data_dir / "missing_mesh_size.yaml")
        self.assertEqual(ex.exception.field, "Discretization.Mesh Size")

    def test_zero_decay_rate_names_its_line(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_path(data_dir / "zero_decay_rate.yaml")
        self.assertEqual(ex.exception.field, "Stabilization.Decay Rate")
        self.assertEqual(ex.exception.line, 10)
        self.assertIn("line 10", str(ex.exception))

    def test_unknown_section(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(with_section("Plots", {"Style": "dark"}))
        self.assertEqual(ex.exception.field, "Plots")

    def test_unknown_field(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(with_section("Geometry", {"Colour": 1}))
        self.assertEqual(ex.exception.field, "Geometry.Colour")

    def test_missing_geometry(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict({"Discretization": {"Mesh Size": 0.1}})
        self.assertEqual(ex.exception.field, "Geometry")

    def test_unknown_output_format(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(
                with_section("Outputs", {"Formats": ["csv", "pdf"]})
            )
        self.assertEqual(ex.exception.field, "Outputs.Formats")

    def test_single_snapshot(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(
                with_section("Deformation", {"Snapshots": 1})
            )
        self.assertEqual(ex.exception.field, "Deformation.Snapshots")

    def test_fractional_mode_count(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(
                with_section("Stabilization", {"Control Modes": 2.5})
            )
        self.assertEqual(ex.exception.field, "Stabilization.Control Modes")

    def test_unknown_riccati_method(self):
        with self.assertRaises(ConfigError) as ex:
            ExperimentConfig.from_yaml_dict(
                with_section("Stabilization", {"Riccati Method": "newton"})
            )
        self.assertEqual(ex.exception.field, "Stabilization.Riccati Method")

    def test_with_overrides(self):
        changed = self.instance.with_overrides({"Stabilization": {"Control Modes": 4}})
        self.assertEqual(changed.stabilization.control_modes, 4)
        self.assertEqual(self.instance.stabilization.control_modes, 6)
        self.assertEqual(changed.geometry, self.instance.geometry)


class TestSweeps(TestCase):
    def test_parse_mode_counts(self):
        self.assertEqual(parse_sweep("m=4,6"), ("m", [4, 6]))

    def test_parse_rates(self):
        key, values = parse_sweep("lambda = 1.5, 3")
        self.assertEqual(key, "lambda")
        self.assertEqual(values, [1.5, 3.0])

    def test_parse_errors(self):
        with self.assertRaises(ConfigError):
            parse_sweep("m")
        with self.assertRaises(ConfigError):
            parse_sweep("m=4,six")

    def test_overrides(self):
        self.assertEqual(
            sweep_overrides("h", 0.05), {"Discretization": {"Mesh Size": 0.05}}
        )
        self.assertEqual(
            sweep_overrides("lambda_factor", 2.0),
            {"Stabilization": {"Decay Rate Factor": 2.0, "Decay Rate": None}},
        )
        with self.assertRaises(ConfigError):
            sweep_overrides("rho", 2.0)

    def test_factor_override_drops_absolute_rate(self):
        config = ExperimentConfig.from_yaml_dict(
            with_section("Stabilization", {"Decay Rate": 4.0})
        )
        changed = config.with_overrides(sweep_overrides("lambda_factor", 2.0))
        self.assertIsNone(changed.stabilization.decay_rate)
        self.assertEqual(changed.stabilization.resolve_decay_rate(-3.0), 6.0)


@pytest.mark.parametrize(
    "lhs, rhs, expected",
    [
        ({"a": 1}, {"a": 2, "b": 3}, {"a": 1, "b": 3}),
        ({"a": {"x": 1}}, {"a": {"x": 2, "y": 3}}, {"a": {"x": 1, "y": 3}}),
        ({"a": None}, {"a": 2, "b": 3}, {"b": 3}),
        ({"a": [1, 2]}, {"a": {"x": 1}}, {"a": [1, 2]}),
    ],
)
def test_merge(lhs, rhs, expected):
    merge(lhs, rhs)
    assert rhs == expected


@pytest.mark.parametrize(
    "decay_rate, factor, leading, expected",
    [(None, 1.5, -2.0, 3.0), (5.0, 1.5, -2.0, 5.0), (None, 2.0, 0.5, 1.0)],
)
def test_resolve_decay_rate(decay_rate, factor, leading, expected):
    config = StabilizationConfig(decay_rate=decay_rate, decay_rate_factor=factor)
    assert config.resolve_decay_rate(leading) == pytest.approx(expected)
