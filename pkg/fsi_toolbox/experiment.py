"""Experiment driver: mesh, operators, spectrum, feedback, simulation and
deformation, with every artifact written to one output directory."""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classes import (
    ConfigError,
    InitialCondition,
    StageContextFilter,
    StageError,
    StageFormatter,
)
from .coupled_operators import BlockSystem, assemble_block_system
from .deformation import (
    RESIDUAL_TOLERANCE,
    DeformationSolver,
    check_admissibility,
    integrate_deformation,
)
from .discretization import assemble_forms, build_spaces
from .exporters import write_json, write_yaml
from .geometry import build_geometry, generate_mesh, solid_moments
from .simulation import (
    CoupledIntegrator,
    CoupledState,
    default_final_time,
    default_time_step,
    eigenmode_state,
    energy_defect,
    random_compatible_state,
)
from .spectral import (
    dense_eigs,
    ensure_bracket,
    invariance_residuals,
    solve_eigs,
    split_spectrum,
)
from .stabilization import (
    assemble_B,
    build_control_basis,
    design_feedback,
    obstruction_basis,
    project_and_check_controllability,
    projected_input,
)
from .yamlparsers import ExperimentConfig, parse_sweep, sweep_overrides

logger = logging.getLogger(__name__)
stage_filter = StageContextFilter()

EXIT_OK = 0
EXIT_STAGE_ERROR = 1
EXIT_CONFIG_ERROR = 2

RATE_MARGIN = 0.05
OPEN_LOOP_MARGIN = 0.03
# below this many reduced unknowns verify also compares with the dense solve
DENSE_CHECK_LIMIT = 1500
# random draws per sampled property check
SAMPLES = 100


def configure_logging(level: int = logging.INFO):
    """Installs the stage-stamping handler on the package logger once."""
    package = logging.getLogger("fsi_toolbox")
    package.setLevel(level)
    for handler in package.handlers:
        if any(isinstance(f, StageContextFilter) for f in handler.filters):
            handler.setLevel(level)
            return
    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.addFilter(stage_filter)
    handler.setFormatter(StageFormatter())
    package.addHandler(handler)


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one property check, recorded as data."""

    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class ExperimentOutcome:
    status: int
    directory: Optional[Path]
    summary: Dict


class Experiment:
    """One experiment record taken through the whole pipeline.

    Stages run in order and keep their products as attributes, so later
    stages and the property checks can reach them.

    Parameters
    ----------
    config : ExperimentConfig
    directory : Optional[Path]
        Output directory; the record's Outputs.Directory by default.
    """

    def __init__(self, config: ExperimentConfig, directory: Optional[Path] = None):
        self.config = config
        self.directory = Path(directory or config.outputs.directory)
        self.rng = config.rng()
        self.timings: Dict[str, float] = {}
        self.checks: List[CheckResult] = []
        self.errors: Dict[str, str] = {}
        stage_filter.reset()

    @contextmanager
    def stage(self, name: str):
        stage_filter.curr_stage = name
        start = time.perf_counter()
        try:
            yield
        except (ConfigError, StageError):
            raise
        except Exception as ex:
            raise StageError(name, ex) from ex
        finally:
            self.timings[name] = time.perf_counter() - start
            stage_filter.curr_stage = "-"

    def check(
        self, name: str, value: float, threshold: float, passed: bool, detail=""
    ) -> CheckResult:
        result = CheckResult(name, bool(passed), float(value), float(threshold), detail)
        self.checks.append(result)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(
            level,
            "check %s: %s (%.3e vs %.3e)",
            name,
            "pass" if result.passed else "FAIL",
            result.value,
            result.threshold,
        )
        return result

    @property
    def h(self) -> float:
        return self.mesh.mesh_size

    def build_geometry(self):
        with self.stage("geometry"):
            geometry = build_geometry(self.config.geometry)
            self.mesh = generate_mesh(geometry)
            self.rigid = solid_moments(self.mesh, geometry.solid_density)

    def build_operators(self):
        with self.stage("discretization"):
            self.spaces = build_spaces(self.mesh, rng=self.rng)
            self.forms = assemble_forms(self.spaces, self.config.geometry.viscosity)
        with self.stage("operators"):
            self.blocks: BlockSystem = assemble_block_system(
                self.spaces, self.forms, self.rigid, tol=self.config.solver_tolerance
            )

    def analyze_spectrum(self):
        settings = self.config.stabilization
        with self.stage("spectrum"):
            count = min(settings.eigenpairs, self.blocks.n_free - 2)
            decomposition = solve_eigs(self.blocks, count, rng=self.rng)
            self.leading = float(decomposition.eigenvalues[0])
            self.decay_rate = settings.resolve_decay_rate(self.leading)
            if decomposition.eigenvalues[-1] >= -3.0 * self.decay_rate:
                decomposition = ensure_bracket(
                    self.blocks, self.decay_rate, 2 * count, rng=self.rng
                )
            self.decomposition = decomposition
            self.subspace = split_spectrum(
                decomposition, self.decay_rate, self.blocks.mass
            )

    def design_control(self):
        settings = self.config.stabilization
        with self.stage("stabilization"):
            self.basis = build_control_basis(
                self.blocks.operators, settings.control_modes, settings.mode_family
            )
            injection = assemble_B(self.basis, self.blocks, self.decay_rate)
            self.inputs = projected_input(
                self.subspace, injection, self.basis, self.blocks
            )
            self.controllability = project_and_check_controllability(
                self.subspace, self.inputs
            )
            self.gain = design_feedback(
                self.subspace, self.inputs, self.blocks, settings.riccati_method
            )

    def initial_state(self) -> CoupledState:
        settings = self.config.simulation
        if settings.initial_condition is InitialCondition.EIGENMODE:
            index = settings.eigenmode_index
            if index >= self.decomposition.count:
                raise ConfigError(
                    "Simulation.Eigenmode Index",
                    f"{index} is outside the {self.decomposition.count} computed "
                    "eigenpairs",
                )
            return eigenmode_state(self.decomposition, index)
        return random_compatible_state(self.blocks, self.rng)

    @property
    def fit_window(self) -> Tuple[float, float]:
        return (2.0 / self.decay_rate, min(8.0 / self.decay_rate, self.final_time))

    def simulate(self):
        settings = self.config.simulation
        self.time_step = settings.time_step or default_time_step(self.decay_rate)
        self.final_time = settings.final_time or default_final_time(self.decay_rate)
        initial = self.initial_state()
        with self.stage("simulation"):
            integrator = CoupledIntegrator(
                self.blocks,
                self.basis,
                dt=self.time_step,
                feedback=self.config.stabilization.feedback,
            )
            # the uncontrolled reference run decays along the leading eigenmode
            self.open_loop = integrator.run(
                eigenmode_state(self.decomposition, 0), self.final_time
            )
            self.closed_loop = integrator.run(
                initial,
                self.final_time,
                control=self.gain,
                record_every=settings.record_every,
            )
            self.open_rate = self.open_loop.measure_decay(self.fit_window)
            self.closed_rate = self.closed_loop.measure_decay(self.fit_window)
            logger.info(
                "decay rates: open loop %.4f, closed loop %.4f, target %.4f",
                self.open_rate,
                self.closed_rate,
                self.decay_rate,
            )

    def reconstruct_deformation(self):
        settings = self.config.deformation
        with self.stage("deformation"):
            self.deformer = DeformationSolver(
                self.spaces, self.forms, self.rigid, mu=settings.penalty
            )
            self.mode_fields = self.deformer.solve_modes(self.basis.values)

            samples = len(self.closed_loop.times) - 1
            stride = max(1, samples // (settings.snapshots - 1))
            indices = stride * np.arange(min(settings.snapshots, samples // stride + 1))
            times = self.closed_loop.times[indices]
            shifted = np.exp(self.decay_rate * times)[:, None]
            coefficients = shifted * self.closed_loop.controls[indices]
            self.solid_fields = np.array(
                [self.deformer.snapshot(self.mode_fields, c) for c in coefficients]
            )
            self.deformation = integrate_deformation(
                times,
                self.solid_fields,
                self.decay_rate,
                vertex_ids=self.spaces.solid.vertex_ids,
            )
            self.constraints = check_admissibility(
                self.deformer, list(self.mode_fields) + list(self.solid_fields)
            )

    def execute(self):
        self.build_geometry()
        self.build_operators()
        self.analyze_spectrum()
        self.design_control()
        self.simulate()
        self.reconstruct_deformation()

    def run_checks(self):
        """Acceptance checks of a completed run; failures are recorded."""
        lam = self.decay_rate
        madd = self.blocks.added_mass
        self.check(
            "added_mass_psd",
            np.linalg.eigvalsh(madd).min(),
            -1e-10,
            np.linalg.eigvalsh(madd).min() >= -1e-10,
        )
        gap = np.abs(self.blocks.added_mass_crosscheck() - madd).max()
        self.check(
            "added_mass_crosscheck",
            gap / np.abs(madd).max(),
            1e-6,
            gap <= 1e-6 * np.abs(madd).max(),
        )
        asymmetry = self.blocks.asymmetry(lam)
        self.check("self_adjoint", asymmetry, 1e-9, asymmetry <= 1e-9)
        decomposition = self.decomposition
        self.check(
            "spectrum_real",
            decomposition.max_imag,
            1e-10,
            decomposition.max_imag <= 1e-10,
        )
        self.check(
            "spectrum_negative",
            decomposition.eigenvalues.max(),
            0.0,
            decomposition.eigenvalues.max() < 0.0,
        )
        self.check(
            "eigen_residuals",
            decomposition.residuals.max(),
            1e-8,
            decomposition.residuals.max() <= 1e-8,
        )
        self.check(
            "kalman_rank",
            self.controllability.rank,
            self.controllability.dimension,
            self.controllability.controllable,
        )
        self.check(
            "riccati_residual",
            self.gain.riccati_residual,
            1e-8,
            self.gain.riccati_residual <= 1e-8,
        )
        slowest = (
            self.gain.closed_loop_poles.real.max() if self.gain.dimension else -np.inf
        )
        self.check("closed_loop_poles", slowest, -lam, slowest < -lam)
        self.check(
            "closed_loop_rate",
            self.closed_rate,
            (1.0 - RATE_MARGIN) * lam,
            self.closed_rate >= (1.0 - RATE_MARGIN) * lam,
        )
        leading = abs(self.leading)
        self.check(
            "open_loop_rate",
            abs(self.open_rate - leading) / leading,
            OPEN_LOOP_MARGIN,
            abs(self.open_rate - leading) <= OPEN_LOOP_MARGIN * leading,
        )
        self.check(
            "deformation_constraints",
            max(self.constraints.maxima.values()),
            float(self.constraints.tolerances.max(initial=0.0)),
            self.constraints.admissible,
        )

    def summary(self) -> Dict:
        """Headline numbers of a completed run."""
        return {
            "lambda": self.decay_rate,
            "leading_eigenvalue": self.leading,
            "N": self.subspace.dimension,
            "m": self.basis.dimension,
            "control_modes": self.basis.labels,
            "rank_report": self.controllability.to_dict(),
            "riccati_residual": self.gain.riccati_residual,
            "closed_loop_poles": [
                [p.real, p.imag] for p in self.gain.closed_loop_poles
            ],
            "measured_rate": self.closed_rate,
            "open_loop_rate": self.open_rate,
            "fit_window": self.fit_window,
            "time_step": self.time_step,
            "final_time": self.final_time,
            "inf_sup": self.spaces.inf_sup,
            "added_mass": self.blocks.added_mass,
            "mesh_size": self.h,
            "dimensions": self.blocks.dimensions,
            "constraint_maxima": self.constraints.maxima,
            "fixed_point_iterations": [f.iterations for f in self.mode_fields],
            "penalty": self.deformer.mu,
            "seed": self.config.seed,
            "timings": self.timings,
            "warnings": dict(stage_filter.warnings),
            "checks": {c.name: c.to_dict() for c in self.checks},
            "all_checks_passed": all(c.passed for c in self.checks),
        }

    def export(self):
        formats = self.config.outputs.formats
        directory = self.directory
        with self.stage("export"):
            write_yaml(directory / "config.yaml", self.config.document)
            if "mesh" in formats:
                self.mesh.save(directory / "mesh.mesh2d")
            if "matrices" in formats:
                self.forms.dump(directory / "matrices")
            if "csv" in formats:
                self.decomposition.to_csv(directory / "spectrum.csv")
                self.closed_loop.to_csv(directory / "trajectory.csv")
                self.open_loop.to_csv(directory / "open_loop.csv")
                self.deformation.to_csv(directory / "deformation")
            if "json" in formats:
                self.gain.to_json(directory / "gain.json")
                self.constraints.to_json(directory / "constraints.json")
                write_json(
                    directory / "run.json",
                    {
                        "mode": self.closed_loop.mode,
                        "feedback": self.config.stabilization.feedback,
                        "initial_condition": self.config.simulation.initial_condition,
                        "time_step": self.time_step,
                        "final_time": self.final_time,
                        "steps": len(self.closed_loop.times) - 1,
                        "seed": self.config.seed,
                    },
                )

    def verification_checks(self):
        """Property checks beyond the acceptance checks of a run."""
        blocks, rng, h = self.blocks, self.rng, self.h

        states = np.column_stack(
            [
                blocks.project_compatible(rng.standard_normal(blocks.n_reduced))
                for _ in range(SAMPLES)
            ]
        )
        pairing = blocks.shifted_pairing(states, self.decay_rate)
        asymmetry = np.abs(pairing - pairing.T).max() / np.abs(pairing).max()
        self.check("adjoint_pairing", asymmetry, 1e-9, asymmetry <= 1e-9)

        rigid = rng.standard_normal((SAMPLES, 3))
        energies = np.array([blocks.added_mass_energy(v) for v in rigid])
        quadratic = np.einsum("ij,ij->i", rigid, rigid @ blocks.added_mass)
        defect = np.abs(energies - quadratic).max() / np.abs(quadratic).max()
        self.check("added_mass_quadratic_form", defect, 1e-8, defect <= 1e-8)

        if self.subspace.dimension and self.basis.dimension > 1:
            obstruction = obstruction_basis(self.basis, self.inputs)
            blocked = projected_input(
                self.subspace,
                assemble_B(obstruction, blocks, self.decay_rate),
                obstruction,
                blocks,
            )
            rank = project_and_check_controllability(self.subspace, blocked).rank
            self.check(
                "obstruction_rank",
                rank,
                self.subspace.dimension,
                rank < self.subspace.dimension,
            )

        self.check(
            "orthonormality",
            self.decomposition.orthonormality_defect(blocks.mass),
            1e-8,
            self.decomposition.orthonormality_defect(blocks.mass) <= 1e-8,
        )
        invariance = invariance_residuals(self.decomposition, blocks).max()
        self.check("invariance", invariance, 1e-6, invariance <= 1e-6)
        if blocks.n_reduced <= DENSE_CHECK_LIMIT:
            dense = dense_eigs(blocks, self.decomposition.count)
            gap = np.abs(dense.eigenvalues - self.decomposition.eigenvalues)
            relative = (gap / np.abs(dense.eigenvalues)).max()
            self.check("dense_spectrum", relative, 1e-6, relative <= 1e-6)

        projector = self.subspace.idempotency_defect(states[:, 0])
        self.check("projector_idempotent", projector, 1e-10, projector <= 1e-10)

        mode = np.real(self.decomposition.eigenvectors[:, 0])
        slaving = blocks.gradient_part_defect(blocks.prolongation @ mode)
        self.check("gradient_slaving", slaving, 10.0 * h**2, slaving <= 10.0 * h**2)
        effective = blocks.effective_mass_defect(mode)
        self.check("effective_mass", effective, 10.0 * h**2, effective <= 10.0 * h**2)

        # smooth data keeps every component in the asymptotic regime of the step
        state = CoupledState(
            reduced=np.real(self.decomposition.eigenvectors[:, :3]).sum(axis=1)
        )
        defects = []
        for dt in (0.02, 0.01):
            after = CoupledIntegrator(blocks, dt=dt).step(state)
            defects.append(abs(energy_defect(blocks, state, after, dt)))
        order = np.log2(defects[0] / defects[1]) if defects[1] > 0 else np.inf
        self.check("energy_identity_order", order, 2.5, order >= 2.5)

        deformer = self.deformer
        inner = np.zeros(2 * self.spaces.n_solid)
        inner[deformer.interior] = rng.standard_normal(len(deformer.interior))
        korn = deformer.korn_gap(inner)
        scale = inner @ (self.forms.solid_vector_laplacian @ inner)
        self.check("korn", korn / scale, -1e-10, korn >= -1e-10 * scale)

        work = max(deformer.work_ratio(f) for f in self.mode_fields)
        limit = 10.0 * RESIDUAL_TOLERANCE
        self.check("zero_force_work", work, limit, work <= limit)

        agreement = 0.0
        for values, field in zip(self.basis.values, self.mode_fields):
            bordered = deformer.solve_bordered(values, mu=field.mu)
            gap = np.linalg.norm(bordered.phi - field.phi)
            agreement = max(agreement, gap / np.linalg.norm(bordered.phi))
        self.check("bordered_agreement", agreement, 1e-8, agreement <= 1e-8)

        if self.basis.dimension >= 2:
            first, second = self.basis.values[0], self.basis.values[1]
            combined = deformer.solve_bordered(first + second).phi
            parts = (
                deformer.solve_bordered(first).phi + deformer.solve_bordered(second).phi
            )
            linear = np.linalg.norm(combined - parts) / np.linalg.norm(combined)
            self.check("superposition", linear, 1e-9, linear <= 1e-9)


def _load(config: Union[ExperimentConfig, Path, str], overrides: Optional[Dict]):
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_yaml_path(config)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def cli_overrides(out=None, seed=None) -> Dict:
    overrides = {}
    if out is not None:
        overrides["Outputs"] = {"Directory": str(out)}
    if seed is not None:
        overrides["Configuration"] = {"Random Seed": int(seed)}
    return overrides


def run_experiment(
    config: Union[ExperimentConfig, Path, str],
    out: Optional[Union[Path, str]] = None,
    seed: Optional[int] = None,
) -> ExperimentOutcome:
    """Runs the full pipeline and writes every artifact.

    Parameters
    ----------
    config : Union[ExperimentConfig, Path, str]
        A parsed record or the path of a YAML record.
    out : Optional[Union[Path, str]]
        Overrides Outputs.Directory.
    seed : Optional[int]
        Overrides Configuration.Random Seed.

    Returns
    -------
    ExperimentOutcome
        Exit status 0 on success, 1 if a stage failed, 2 for an invalid
        record; summary.json is written whenever the directory is known.
    """
    try:
        config = _load(config, cli_overrides(out, seed))
    except (ConfigError, FileNotFoundError) as ex:
        logger.error("invalid experiment record: %s", ex)
        return ExperimentOutcome(EXIT_CONFIG_ERROR, None, {"error": str(ex)})

    experiment = Experiment(config)
    try:
        experiment.execute()
        experiment.run_checks()
        experiment.export()
    except ConfigError as ex:
        logger.error("invalid experiment record: %s", ex)
        summary = {"error": str(ex), "timings": experiment.timings}
        write_json(experiment.directory / "summary.json", summary)
        return ExperimentOutcome(EXIT_CONFIG_ERROR, experiment.directory, summary)
    except StageError as ex:
        logger.error("%s", ex)
        summary = {
            "error": str(ex),
            "stage": ex.stage,
            "timings": experiment.timings,
        }
        write_json(experiment.directory / "summary.json", summary)
        return ExperimentOutcome(EXIT_STAGE_ERROR, experiment.directory, summary)

    summary = experiment.summary()
    write_json(experiment.directory / "summary.json", summary)
    logger.info("artifacts written to %s", experiment.directory)
    return ExperimentOutcome(EXIT_OK, experiment.directory, summary)


def verify(
    config: Union[ExperimentConfig, Path, str],
    out: Optional[Union[Path, str]] = None,
    seed: Optional[int] = None,
) -> ExperimentOutcome:
    """Runs every property check and writes verify.json.

    Stage failures are reported as failed checks, not raised.

    Returns
    -------
    ExperimentOutcome
        Exit status 0 if every check passed, 1 otherwise, 2 for an invalid
        record.
    """
    try:
        config = _load(config, cli_overrides(out, seed))
    except (ConfigError, FileNotFoundError) as ex:
        logger.error("invalid experiment record: %s", ex)
        return ExperimentOutcome(EXIT_CONFIG_ERROR, None, {"error": str(ex)})

    experiment = Experiment(config)
    try:
        experiment.execute()
        experiment.run_checks()
        with experiment.stage("verify"):
            experiment.verification_checks()
    except (StageError, ConfigError) as ex:
        stage = getattr(ex, "stage", "config")
        cause = getattr(ex, "error", ex)
        experiment.errors[stage] = f"{type(cause).__name__}: {cause}"
        experiment.check(f"{stage}_stage", np.nan, np.nan, False, str(ex))

    report = {
        "checks": {c.name: c.to_dict() for c in experiment.checks},
        "errors": experiment.errors,
        "all_passed": all(c.passed for c in experiment.checks),
        "timings": experiment.timings,
    }
    if hasattr(experiment, "controllability"):
        report["rank_report"] = experiment.controllability.to_dict()
    write_json(experiment.directory / "verify.json", report)
    status = EXIT_OK if report["all_passed"] else EXIT_STAGE_ERROR
    return ExperimentOutcome(status, experiment.directory, report)


def _sweep_entry(args) -> Tuple[float, int, Dict]:
    config, key, value, directory = args
    entry = config.with_overrides(sweep_overrides(key, value))
    outcome = run_experiment(entry, out=directory)
    summary = outcome.summary
    headline = {
        name: summary.get(name)
        for name in ("lambda", "N", "m", "measured_rate", "open_loop_rate")
    }
    headline["all_checks_passed"] = summary.get("all_checks_passed", False)
    headline["error"] = summary.get("error")
    return value, outcome.status, headline


def sweep(
    config: Union[ExperimentConfig, Path, str],
    parameter: str,
    out: Optional[Union[Path, str]] = None,
    seed: Optional[int] = None,
    jobs: int = 1,
) -> ExperimentOutcome:
    """One experiment per value of ``key=v1,v2,...``.

    Entries run in a process pool of size jobs, each into
    ``<out>/<key>=<value>/``; the collected headlines go to sweep.json.
    """
    try:
        config = _load(config, cli_overrides(out, seed))
        key, values = parse_sweep(parameter)
        for value in values:
            config.with_overrides(sweep_overrides(key, value))
    except (ConfigError, FileNotFoundError) as ex:
        logger.error("invalid sweep: %s", ex)
        return ExperimentOutcome(EXIT_CONFIG_ERROR, None, {"error": str(ex)})

    root = config.outputs.directory
    tasks = [(config, key, v, root / f"{key}={v}") for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_entry, tasks))
    else:
        results = [_sweep_entry(task) for task in tasks]

    entries = [
        {"value": value, "status": status, **headline}
        for value, status, headline in results
    ]
    record = {"parameter": key, "entries": entries}
    write_json(root / "sweep.json", record)
    status = max((e["status"] for e in entries), default=EXIT_OK)
    return ExperimentOutcome(status, root, record)


def summarize_checks(checks: Sequence[CheckResult]) -> str:
    failed = [c.name for c in checks if not c.passed]
    if not failed:
        return f"all {len(checks)} checks passed"
    return f"{len(failed)} of {len(checks)} checks failed: {', '.join(failed)}"
