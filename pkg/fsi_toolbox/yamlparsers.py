from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
from typing_extensions import Self

import numpy as np

from .classes import ConfigError, FeedbackScheme, InitialCondition, ModeFamily
from .geometry import GeometryConfig
from .importers import load_yaml, load_yaml_lines

SECTIONS = {
    "Geometry": (
        "Container Radius",
        "Solid Shape",
        "Solid Radius",
        "Solid Semi Axes",
        "Solid Center",
        "Solid Density",
        "Viscosity",
    ),
    "Discretization": ("Mesh Size", "Quality Floor", "Solver Tolerance"),
    "Stabilization": (
        "Decay Rate",
        "Decay Rate Factor",
        "Control Modes",
        "Mode Family",
        "Eigenpairs",
        "Feedback",
        "Riccati Method",
    ),
    "Simulation": (
        "Final Time",
        "Time Step",
        "Initial Condition",
        "Eigenmode Index",
        "Record Every",
    ),
    "Deformation": ("Snapshots", "Penalty"),
    "Outputs": ("Directory", "Formats"),
    "Configuration": ("Random Seed",),
}

OUTPUT_FORMATS = ("csv", "json", "mesh", "matrices")

# sweep parameter -> (section, key)
SWEEP_KEYS = {
    "lambda": ("Stabilization", "Decay Rate"),
    "lambda_factor": ("Stabilization", "Decay Rate Factor"),
    "h": ("Discretization", "Mesh Size"),
    "m": ("Stabilization", "Control Modes"),
    "nu": ("Geometry", "Viscosity"),
}


@dataclass(frozen=True)
class StabilizationConfig:
    decay_rate: Optional[float] = None
    decay_rate_factor: float = 1.5
    control_modes: int = 6
    mode_family: ModeFamily = ModeFamily.TRIGONOMETRIC
    eigenpairs: int = 12
    feedback: FeedbackScheme = FeedbackScheme.LAGGED
    riccati_method: str = "hamiltonian"

    def __post_init__(self):
        if isinstance(self.mode_family, str):
            object.__setattr__(
                self, "mode_family", ModeFamily.from_string(self.mode_family)
            )
        if isinstance(self.feedback, str):
            object.__setattr__(
                self, "feedback", FeedbackScheme.from_string(self.feedback)
            )
        if self.decay_rate is not None:
            _require_positive("Stabilization.Decay Rate", self.decay_rate)
        _require_positive("Stabilization.Decay Rate Factor", self.decay_rate_factor)
        _require_integer("Stabilization.Control Modes", self.control_modes, 1)
        _require_integer("Stabilization.Eigenpairs", self.eigenpairs, 1)
        if self.riccati_method not in ("hamiltonian", "schur"):
            raise ConfigError(
                "Stabilization.Riccati Method",
                f"expected hamiltonian or schur, got {self.riccati_method!r}",
            )

    def resolve_decay_rate(self, leading_eigenvalue: float) -> float:
        """λ, either given or a multiple of |λ₁|."""
        if self.decay_rate is not None:
            return float(self.decay_rate)
        return float(self.decay_rate_factor * abs(leading_eigenvalue))


@dataclass(frozen=True)
class SimulationConfig:
    final_time: Optional[float] = None
    time_step: Optional[float] = None
    initial_condition: InitialCondition = InitialCondition.RANDOM
    eigenmode_index: int = 0
    record_every: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.initial_condition, str):
            object.__setattr__(
                self,
                "initial_condition",
                InitialCondition.from_string(self.initial_condition),
            )
        if self.final_time is not None:
            _require_positive("Simulation.Final Time", self.final_time)
        if self.time_step is not None:
            _require_positive("Simulation.Time Step", self.time_step)
        _require_integer("Simulation.Eigenmode Index", self.eigenmode_index, 0)
        if self.record_every is not None:
            _require_integer("Simulation.Record Every", self.record_every, 1)


@dataclass(frozen=True)
class DeformationConfig:
    snapshots: int = 5
    penalty: Optional[float] = None

    def __post_init__(self):
        _require_integer("Deformation.Snapshots", self.snapshots, 2)
        if self.penalty is not None:
            _require_positive("Deformation.Penalty", self.penalty)


@dataclass(frozen=True)
class OutputConfig:
    directory: Path = Path("fsi_output")
    formats: Tuple[str, ...] = ("csv", "json", "mesh")

    def __post_init__(self):
        object.__setattr__(self, "directory", Path(self.directory))
        formats = (self.formats,) if isinstance(self.formats, str) else self.formats
        formats = tuple(str(f).lower() for f in formats)
        unknown = set(formats) - set(OUTPUT_FORMATS)
        if unknown:
            raise ConfigError(
                "Outputs.Formats", f"unknown formats {sorted(unknown)}"
            )
        object.__setattr__(self, "formats", formats)


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment record.

    Attributes
    ----------
    geometry : GeometryConfig
        Geometry section plus mesh size and quality floor.
    solver_tolerance : float
    stabilization : StabilizationConfig
    simulation : SimulationConfig
    deformation : DeformationConfig
    outputs : OutputConfig
    seed : Optional[int]
    document : Dict
        The raw YAML document, kept so sweeps can override single keys.

    Methods
    -------
    from_yaml_dict(document: Dict, lines: Optional[Dict[str, int]])
        Generates a class instance from a dictionary
    from_yaml_path(path: Union[Path, str])
        Generates a class instance from a path to a .yaml file.
    """

    geometry: GeometryConfig
    solver_tolerance: float = 1e-10
    stabilization: StabilizationConfig = field(default_factory=StabilizationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    seed: Optional[int] = None
    document: Dict = field(default_factory=dict, repr=False, compare=False)

    def rng(self) -> np.random.Generator:
        """A fresh generator; every run of the same record draws the same
        numbers."""
        return np.random.default_rng(self.seed)

    @classmethod
    def from_yaml_dict(
        cls, document: Dict, lines: Optional[Dict[str, int]] = None
    ) -> Self:
        """Validates an experiment record and returns an instance of this
        dataclass.

        Parameters
        ----------
        document : Dict
        lines : Optional[Dict[str, int]]
            Dotted key -> line number, used to locate validation errors.

        Returns
        -------
        ExperimentConfig

        Raises
        ------
        ConfigError
            Raised for unknown or missing fields and invalid values.
        """
        lines = lines or {}
        try:
            return cls._parse(document)
        except ConfigError as ex:
            if ex.line is None and ex.field in lines:
                raise ConfigError(ex.field, ex.reason, lines[ex.field]) from ex
            raise

    @classmethod
    def from_yaml_path(cls, path: Union[Path, str]) -> Self:
        """Parses the experiment record located at path.

        Parameters
        ----------
        path : Union[Path, str]

        Returns
        -------
        ExperimentConfig
        """
        document = load_yaml(path)
        return cls.from_yaml_dict(document, load_yaml_lines(path))

    @classmethod
    def _parse(cls, document: Dict) -> Self:
        if not isinstance(document, dict):
            raise ConfigError("<root>", "an experiment record must be a mapping")
        for section, value in document.items():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section")
            if not isinstance(value, dict):
                raise ConfigError(section, "expected a mapping")
            for key in value:
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{section}.{key}", "unknown field")

        if "Geometry" not in document:
            raise ConfigError("Geometry", "missing section")
        discretization = document.get("Discretization", {})
        if "Mesh Size" not in discretization:
            raise ConfigError("Discretization.Mesh Size", "missing field")

        geometry = _construct(
            "Geometry",
            document["Geometry"],
            GeometryConfig.from_yaml_dict,
            document["Geometry"],
            discretization,
        )
        tolerance = discretization.get("Solver Tolerance", 1e-10)
        _require_positive("Discretization.Solver Tolerance", tolerance)

        stabilization = _section(document, "Stabilization", StabilizationConfig)
        simulation = _section(document, "Simulation", SimulationConfig)
        deformation = _section(document, "Deformation", DeformationConfig)
        outputs = _section(document, "Outputs", OutputConfig)

        seed = document.get("Configuration", {}).get("Random Seed")
        if seed is not None:
            _require_integer("Configuration.Random Seed", seed, 0)

        return cls(
            geometry=geometry,
            solver_tolerance=float(tolerance),
            stabilization=stabilization,
            simulation=simulation,
            deformation=deformation,
            outputs=outputs,
            seed=seed,
            document=deepcopy(document),
        )

    def with_overrides(self, overrides: Dict) -> Self:
        """A new record with the nested overrides merged into the document."""
        document = deepcopy(self.document)
        merge(overrides, document)
        return type(self).from_yaml_dict(document)


def _key_name(key: str) -> str:
    return key.lower().replace(" ", "_")


def _construct(section: str, values: Dict, constructor, *args):
    """Calls constructor, turning plain ValueErrors into ConfigErrors that name
    the offending field of the section."""
    try:
        return constructor(*args)
    except ConfigError:
        raise
    except (TypeError, ValueError) as ex:
        culprit = next((k for k, v in values.items() if str(v) in str(ex)), None)
        name = f"{section}.{culprit}" if culprit else section
        raise ConfigError(name, str(ex)) from ex


def _section(document: Dict, section: str, cls):
    values = document.get(section, {})
    kwargs = {_key_name(key): value for key, value in values.items()}
    return _construct(section, values, lambda: cls(**kwargs))


def _require_positive(name: str, value: Any):
    if isinstance(value, bool):
        raise ConfigError(name, f"expected a number, got {value!r}")
    try:
        ok = float(value) > 0.0
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if not ok:
        raise ConfigError(name, f"must be positive, got {value}")


def _require_integer(name: str, value: Any, minimum: int):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(name, f"must be at least {minimum}, got {value}")


def sweep_overrides(key: str, value: Any) -> Dict:
    """Nested override dictionary of one sweep parameter.

    A factor-based decay rate replaces any absolute one, and vice versa.
    """
    if key not in SWEEP_KEYS:
        raise ConfigError(
            f"--param {key}", f"expected one of {', '.join(sorted(SWEEP_KEYS))}"
        )
    section, name = SWEEP_KEYS[key]
    overrides = {section: {name: value}}
    if key == "lambda_factor":
        overrides[section]["Decay Rate"] = None
    return overrides


def parse_sweep(text: str) -> Tuple[str, list]:
    """Parses ``key=v1,v2,...`` into the key and its numeric values."""
    if "=" not in text:
        raise ConfigError("--param", f"expected key=v1,v2,..., got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    values = []
    for item in raw.split(","):
        item = item.strip()
        try:
            number = float(item)
        except ValueError:
            raise ConfigError(f"--param {key}", f"{item!r} is not a number")
        values.append(int(number) if key == "m" and number.is_integer() else number)
    return key, values


def merge(lhs: Dict, rhs: Dict):
    """Merges left-hand dictionary into right-hand dictionary. Nested mappings
    are merged key by key; any other left-hand value replaces the right-hand
    one, and None removes the key.

    Parameters
    ----------
    lhs, rhs : Dict
        Dicts to be merged. lhs is merged into rhs
    """
    for key, value in lhs.items():
        if value is None:
            rhs.pop(key, None)
        elif isinstance(value, dict) and isinstance(rhs.get(key), dict):
            merge(value, rhs[key])
        else:
            rhs[key] = deepcopy(value)
