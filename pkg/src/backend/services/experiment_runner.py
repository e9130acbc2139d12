"""
Experiment orchestration.
Runs the composable stages (synth, measure, train, reconstruct, baseline,
select, report) of one ExperimentConfig into an artifact tree.  Every
stage reads what earlier stages wrote, so stages can run separately and
long trainings resume from checkpoints.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, Field, ValidationError

from src.backend.core.config import settings
from src.backend.core.exceptions import ArtifactFormatError, ArtifactNotFoundError, ConfigurationError
from src.backend.models.experiment_models import ExperimentConfig, ExperimentKind
from src.backend.models.generator_models import DeepDecoderConfig
from src.backend.models.measurement_models import ForwardModel, MeasurementKind
from src.backend.models.training_models import TrainConfig
from src.backend.services.baselines import dip_fit, tv_rml
from src.backend.services.datasets import load_pgm_directory, synth_dataset
from src.backend.services.deep_decoder import GeneratorParams, LatentIdentityGenerator, init_generator, weight_names
from src.backend.services.forward_operators import (
    MeasurementSet,
    add_noise,
    calibrate_sigma,
    clean_measurements,
    coverage_fraction,
    dirty_image,
    full_grid_coverage,
    low_pass_target,
    snr_db,
    synth_uv_coverage,
)
from src.backend.services.metrics import Ambiguity, average_psnr, psnr, registered_psnr
from src.backend.services.model_selection import model_selection
from src.backend.services.ring_profile import ring_angles, unwrap_ring
from src.backend.services.trainer import TrainingState, init_posteriors, joint_train, reconstruct
from src.backend.services.variational import GaussianVariational
from src.backend.utils.artifact_store import CONFIG_FILE, ArtifactStore

logger = structlog.get_logger()

# rng stream tags under the global seed
_NOISE, _RECONSTRUCT, _CASES, _CANDIDATES = 1, 2, 3, 4

PIPELINES: Dict[ExperimentKind, List[str]] = {
    ExperimentKind.DENOISE: ["synth", "measure", "train", "reconstruct", "baseline", "report"],
    ExperimentKind.CS_INTERFEROMETRY: ["synth", "measure", "train", "reconstruct", "baseline", "report"],
    ExperimentKind.PHASE_RETRIEVAL: ["synth", "measure", "train", "reconstruct", "baseline", "report"],
    ExperimentKind.BASELINE: ["synth", "measure", "baseline", "report"],
    ExperimentKind.MODEL_SELECT: ["select", "report"],
}


class RunSummary(BaseModel):
    """What a run produced"""
    name: str
    kind: ExperimentKind
    output_dir: str
    stages: List[str] = Field(default_factory=list)
    averages: Dict[str, Optional[float]] = Field(default_factory=dict, description="null where undefined or infinite")
    files: int = 0


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def state_to_arrays(state: TrainingState) -> Dict[str, np.ndarray]:
    """Checkpoint layout: generator weights, then per-measurement (mu, L), then optimizer moments"""
    arrays: Dict[str, np.ndarray] = {f"theta/{name}": t.data for name, t in state.generator.named_tensors().items()}
    for i, q in enumerate(state.posteriors):
        arrays[f"mu/{i}"] = q.mu.data
        arrays[f"l/{i}"] = q.l_factor.data
    arrays.update({f"opt/{name}": value for name, value in state.optimizer_state.items()})
    return arrays


def state_from_arrays(meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> TrainingState:
    config = DeepDecoderConfig.model_validate(meta["generator"])
    missing = [name for name in weight_names(config) if f"theta/{name}" not in arrays]
    if missing:
        raise ArtifactFormatError(f"Checkpoint lacks generator weights {missing}")
    generator = init_generator(config, seed=0).with_arrays({name: arrays[f"theta/{name}"] for name in weight_names(config)})
    posteriors = [
        GaussianVariational.from_arrays(arrays[f"mu/{i}"], arrays[f"l/{i}"]) for i in range(int(meta["count"]))
    ]
    optimizer_state = {name[len("opt/"):]: value for name, value in arrays.items() if name.startswith("opt/")}
    return TrainingState(int(meta["iteration"]), generator, posteriors, optimizer_state)


class ExperimentRunner:
    """Stages of one experiment over a shared artifact tree"""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[Path] = None,
                 seed: Optional[int] = None, threads: Optional[int] = None):
        updates: Dict[str, Any] = {}
        if seed is not None:
            updates["seed"] = seed
        if threads is not None:
            updates["threads"] = threads
        self.config = config.model_copy(update=updates) if updates else config
        root = output_dir or self.config.output_dir or Path(settings.RESULTS_ROOT) / self.config.name
        self.store = ArtifactStore(Path(root))
        self.log = logger.bind(experiment=self.config.name, kind=self.config.kind.value)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def train_config(self) -> TrainConfig:
        return self.config.train.model_copy(update={"seed": self.seed, "threads": self.config.threads})

    def _rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *stream])

    # ------------------------------------------------------------------ synth

    def _images(self, params: Optional[Dict[str, float]] = None, seed: Optional[int] = None,
                count: Optional[int] = None) -> List[np.ndarray]:
        dataset = self.config.dataset
        if dataset.input_dir is not None:
            return load_pgm_directory(dataset.input_dir, dataset.size, count or dataset.count)
        merged = {**dataset.params, **(params or {})}
        return synth_dataset(dataset.name, merged, self.seed if seed is None else seed, count or dataset.count, dataset.size)

    def synth(self) -> np.ndarray:
        images = np.stack(self._images())
        self.store.write_array("data/images.vtn", images)
        for i, image in enumerate(images):
            self.store.write_image("data", f"image_{i:03d}", image)
        return images

    # ---------------------------------------------------------------- measure

    def build_forward_model(self, images: np.ndarray) -> ForwardModel:
        """Operator for the dataset geometry, with sigma calibrated on the whole clean stack"""
        forward = self.config.forward
        geometry = tuple(self.config.dataset.size)
        fields: Dict[str, Any] = {"kind": forward.kind, "geometry": geometry}
        if forward.kind is MeasurementKind.INTERFEROMETRIC_CS:
            uv = forward.uv
            points = full_grid_coverage(geometry) if uv.full_grid else synth_uv_coverage(
                geometry, uv.num_tracks, uv.points_per_track, uv.max_radius or min(geometry) / 2.0, uv.seed)
            fields["uv_points"] = tuple(tuple(float(c) for c in p) for p in points)
        rows = forward.row_count(geometry)
        if rows is not None:
            fields.update(rows=rows, matrix_seed=forward.matrix_seed)

        if forward.sigma is not None:
            return ForwardModel(sigma=forward.sigma, **fields)
        unit_noise = ForwardModel(sigma=1.0, **fields)
        sigma = calibrate_sigma(clean_measurements(unit_noise, images), forward.target_snr_db)
        return ForwardModel(sigma=sigma, **fields)

    def measure(self) -> MeasurementSet:
        images = self.store.read_array("data/images.vtn")
        model = self.build_forward_model(images)
        clean = clean_measurements(model, images)
        rng = self._rng(_NOISE)
        observations = np.stack([add_noise(row, model.sigma, rng) for row in clean])
        measurements = MeasurementSet(observations=observations, model=model, ground_truth=images)

        self.store.write_text("measurements/forward_model.json", model.model_dump_json(indent=2) + "\n")
        self.store.write_array("measurements/observations.vtn", observations)
        self.store.write_array("measurements/clean.vtn", clean)
        info = {"sigma": model.sigma, "snr_db": snr_db(clean, model.sigma), "measurement_dim": model.measurement_dim}
        if model.uv_points:
            info["coverage_fraction"] = coverage_fraction(np.asarray(model.uv_points), model.geometry)
        self.store.write_json("measurements/info.json", info)

        if model.kind is MeasurementKind.INTERFEROMETRIC_CS:
            for i, y in enumerate(observations):
                self.store.write_image("dirty", f"dirty_{i:03d}", dirty_image(model, y))
        self.log.info("Measurements written", count=len(observations), **info)
        return measurements

    def load_measurements(self) -> MeasurementSet:
        model = ForwardModel.model_validate_json(self.store.require("measurements/forward_model.json").read_text())
        return MeasurementSet(
            observations=self.store.read_array("measurements/observations.vtn"),
            model=model,
            ground_truth=self.store.read_array("data/images.vtn"),
        )

    # ------------------------------------------------------------------ train

    def _checkpoint_meta(self, count: int) -> Dict[str, Any]:
        return {
            "experiment": self.config.name,
            "seed": self.seed,
            "count": count,
            "generator": self.config.generator.model_dump(mode="json"),
        }

    def _save_state(self, state: TrainingState) -> None:
        self.store.write_checkpoint(state.iteration, state_to_arrays(state), self._checkpoint_meta(len(state.posteriors)))

    def load_state(self, path: Optional[Path] = None) -> TrainingState:
        meta, arrays = self.store.read_checkpoint(path)
        return state_from_arrays(meta, arrays)

    def initial_state(self, count: int) -> Tuple[GeneratorParams, List[GaussianVariational]]:
        generator = init_generator(self.config.generator, self.seed)
        return generator, init_posteriors(count, generator.latent_dim, self.seed)

    def train(self, resume: Optional[Path] = None) -> TrainingState:
        measurements = self.load_measurements()
        cfg = self.train_config
        generator, posteriors = self.initial_state(len(measurements))
        resume_state = self.load_state(resume) if resume is not None else None
        if resume_state is None:
            self.store.clear_checkpoints()

        generator, posteriors, report = joint_train(generator, posteriors, measurements, cfg,
                                                    checkpoint=self._save_state, resume=resume_state)
        frame = report.to_frame()
        if resume_state is not None and self.store.exists("train_report.csv"):
            earlier = self.store.read_csv("train_report.csv")
            frame = pd.concat([earlier[earlier["iteration"] < resume_state.iteration], frame], ignore_index=True)
        self.store.write_csv("train_report.csv", frame)
        if cfg.iterations == 0:
            self._save_state(TrainingState(0, generator, posteriors, {}))
        return TrainingState(cfg.iterations, generator, posteriors, {})

    # ------------------------------------------------------------ reconstruct

    def reconstruct(self) -> np.ndarray:
        state = self.load_state(self.store.require_checkpoint(self.train_config.iterations))
        recon = self.config.reconstruction
        means = []
        for i, q in enumerate(state.posteriors):
            result = reconstruct(state.generator, q, recon.n_samples, rng=self._rng(_RECONSTRUCT, i))
            self.store.write_image("reconstructions", f"mean_{i:03d}", result.mean)
            self.store.write_image("reconstructions", f"std_{i:03d}", result.std)
            for s in range(min(recon.saved_samples, recon.n_samples)):
                self.store.write_image("reconstructions", f"sample_{i:03d}_{s:02d}", result.samples[s])
            means.append(result.mean)
        stack = np.stack(means)
        self.store.write_array("reconstructions/means.vtn", stack)
        self.log.info("Reconstructions written", count=len(means), samples=recon.n_samples)
        return stack

    # --------------------------------------------------------------- baseline

    def baseline(self) -> pd.DataFrame:
        plan = self.config.baseline
        if plan is None:
            return pd.DataFrame()
        measurements = self.load_measurements()
        model = measurements.model
        indices = plan.indices if plan.indices is not None else list(range(len(measurements)))
        reference = self._reference_images(measurements)
        rows = []
        for i in indices:
            y = measurements.observations[i]
            truth = measurements.ground_truth[i]
            for k, lam in enumerate(plan.tv_lambdas):
                result = tv_rml(model, y, lam, plan.tv_iters, plan.tv_step)
                self.store.write_image("baselines", f"tv_{k}_{i:03d}", result.image)
                rows.append({"index": i, "method": "tv_rml", "lam": lam, "iteration": result.iterations,
                             "psnr": self._score(result.image, truth), "psnr_reference": self._score(result.image, reference[i])})
            if plan.dip_iters > 0:
                fit = dip_fit(model, y, self.config.generator, plan.dip_iters, plan.dip_checkpoint_interval,
                              plan.dip_lr, seed=self.seed + i)
                for iteration, image in fit.checkpoints:
                    self.store.write_image("baselines", f"dip_{i:03d}_{iteration:06d}", image)
                    rows.append({"index": i, "method": "dip", "lam": 0.0, "iteration": iteration,
                                 "psnr": self._score(image, truth), "psnr_reference": self._score(image, reference[i])})
        frame = pd.DataFrame(rows, columns=["index", "method", "lam", "iteration", "psnr", "psnr_reference"])
        self.store.write_csv("baselines/metrics.csv", frame)
        return frame

    # ----------------------------------------------------------------- select

    def select(self) -> pd.DataFrame:
        selection = self.config.selection
        if selection is None:
            raise ConfigurationError("select needs a selection section", field_errors={"selection": "missing"})
        cfg = self.train_config
        labels = selection.labels()

        training_sets = [
            np.stack(self._images(params, seed=self.seed + c)) for c, params in enumerate(selection.candidate_params)
        ]
        model = self.build_forward_model(np.concatenate(training_sets))
        candidates = []
        for c, images in enumerate(training_sets):
            rng = self._rng(_CANDIDATES, c)
            observations = np.stack([add_noise(row, model.sigma, rng) for row in clean_measurements(model, images)])
            measurements = MeasurementSet(observations=observations, model=model, ground_truth=images)
            generator = init_generator(self.config.generator, self.seed + c)
            posteriors = init_posteriors(len(images), generator.latent_dim, self.seed + c)
            generator, _, report = joint_train(generator, posteriors, measurements, cfg)
            self.store.write_csv(f"candidates/train_report_{labels[c]}.csv", report.to_frame())
            candidates.append(generator)
        if selection.include_identity:
            candidates.append(LatentIdentityGenerator(tuple(self.config.dataset.size)))
            labels = labels + ["gaussian"]

        cases, case_labels, expected = [], [], []
        for c, params in enumerate(selection.candidate_params):
            images = self._images(params, seed=self.seed + selection.case_seed_offset + c, count=selection.cases_per_candidate)
            rng = self._rng(_CASES, c)
            for j, image in enumerate(images):
                y = add_noise(clean_measurements(model, image[None])[0], model.sigma, rng)
                cases.append((model, y))
                case_labels.append(f"{labels[c]}_{j:03d}")
                expected.append(c)

        matrix = model_selection(candidates, cases, selection.fit_iters, cfg, selection.eval_samples, self.seed,
                                 candidate_labels=labels, case_labels=case_labels, threads=self.config.threads)
        frame = matrix.to_frame()
        frame.insert(1, "expected", [labels[c] for c in expected])
        self.store.write_csv("scores.csv", frame)
        accuracy = matrix.accuracy(expected)
        self.store.write_json("selection.json", {"accuracy": accuracy, "cases": len(cases), "candidates": labels})
        self.log.info("Model selection written", accuracy=accuracy)
        return frame

    # ----------------------------------------------------------------- report

    def _score(self, image: np.ndarray, reference: np.ndarray) -> float:
        kind = self.config.forward.kind
        if kind is MeasurementKind.FOURIER_PHASE_RETRIEVAL:
            return registered_psnr(image, reference, [Ambiguity.SHIFTS, Ambiguity.FLIPS, Ambiguity.SIGN])
        if kind is MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL:
            return registered_psnr(image, reference, [Ambiguity.SIGN])
        return psnr(image, reference)

    def _reference_images(self, measurements: MeasurementSet) -> np.ndarray:
        """Low-pass targets for interferometric runs, ground truth otherwise"""
        model = measurements.model
        if model.kind is not MeasurementKind.INTERFEROMETRIC_CS:
            return measurements.ground_truth
        radius = self.config.forward.low_pass_radius
        if radius is None:
            radius = float(np.max(np.hypot(*np.asarray(model.uv_points).T)))
        return np.stack([low_pass_target(x, radius) for x in measurements.ground_truth])

    def _initial_images(self, count: int) -> np.ndarray:
        generator, posteriors = self.initial_state(count)
        n = self.config.reconstruction.n_samples
        return np.stack([reconstruct(generator, q, n, rng=self._rng(_RECONSTRUCT, i)).mean
                         for i, q in enumerate(posteriors)])

    def report(self) -> pd.DataFrame:
        if self.config.kind is ExperimentKind.MODEL_SELECT:
            return self.store.read_csv("scores.csv")
        measurements = self.load_measurements()
        model = measurements.model
        truth = measurements.ground_truth
        reference = self._reference_images(measurements)
        frame = pd.DataFrame({"index": np.arange(len(measurements))})

        if model.kind is MeasurementKind.DENOISE:
            noisy = measurements.observations.reshape(truth.shape)
            frame["psnr_input"] = [psnr(noisy[i], truth[i]) for i in range(len(truth))]
        if model.kind is MeasurementKind.INTERFEROMETRIC_CS:
            dirty = [dirty_image(model, y) for y in measurements.observations]
            frame["psnr_dirty"] = [psnr(dirty[i], truth[i]) for i in range(len(truth))]
            frame["psnr_dirty_lowpass"] = [psnr(dirty[i], reference[i]) for i in range(len(truth))]

        has_means = self.store.exists("reconstructions/means.vtn")
        means = self.store.read_array("reconstructions/means.vtn") if has_means else None
        if means is not None:
            frame["psnr_mean"] = [self._score(means[i], truth[i]) for i in range(len(truth))]
            if model.kind is MeasurementKind.INTERFEROMETRIC_CS:
                frame["psnr_mean_lowpass"] = [psnr(means[i], reference[i]) for i in range(len(truth))]
            if model.kind in (MeasurementKind.FOURIER_PHASE_RETRIEVAL, MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL):
                initial = self._initial_images(len(truth))
                frame["psnr_init"] = [self._score(initial[i], truth[i]) for i in range(len(truth))]

        self.store.write_csv("metrics.csv", frame)
        if self.config.ring is not None:
            self._write_ring_profile(truth, means, measurements)

        averages = {column: _finite_or_none(average_psnr(frame[column])) for column in frame.columns if column != "index"}
        self.store.write_json("summary.json", {"name": self.config.name, "kind": self.config.kind.value,
                                               "averages": averages})
        self.log.info("Report written", **averages)
        return frame

    def _write_ring_profile(self, truth: np.ndarray, means: Optional[np.ndarray], measurements: MeasurementSet) -> None:
        ring = self.config.ring
        n = ring.n_angles
        angles = ring_angles(n)
        columns = {
            "frame": np.repeat(np.arange(len(truth)), n),
            "angle_index": np.tile(np.arange(n), len(truth)),
            "angle": np.tile(angles, len(truth)),
            "ground_truth": unwrap_ring(truth, ring.center, ring.radius, n).ravel(),
        }
        if means is not None:
            columns["reconstruction"] = unwrap_ring(means, ring.center, ring.radius, n).ravel()
        if measurements.model.kind is MeasurementKind.INTERFEROMETRIC_CS:
            dirty = [dirty_image(measurements.model, y) for y in measurements.observations]
            columns["dirty"] = unwrap_ring(dirty, ring.center, ring.radius, n).ravel()
        self.store.write_csv("ring_profile.csv", pd.DataFrame(columns))

    # -------------------------------------------------------------------- run

    def run_stage(self, stage: str, resume: Optional[Path] = None) -> Any:
        self.log.info("Stage started", stage=stage)
        if stage == "train":
            return self.train(resume)
        return getattr(self, stage)()

    def run(self, resume: Optional[Path] = None) -> RunSummary:
        """Full pipeline of the experiment kind"""
        self.store.ensure()
        self.store.write_text(CONFIG_FILE, self.config.model_dump_json(indent=2) + "\n")
        stages = [s for s in PIPELINES[self.config.kind] if s != "baseline" or self.config.baseline is not None]
        for stage in stages:
            self.run_stage(stage, resume if stage == "train" else None)

        summary = self.store.read_json("summary.json") if self.store.exists("summary.json") else {}
        if self.config.kind is ExperimentKind.MODEL_SELECT:
            summary = {"averages": {"accuracy": self.store.read_json("selection.json")["accuracy"]}}
        result = RunSummary(
            name=self.config.name,
            kind=self.config.kind,
            output_dir=str(self.store.root),
            stages=stages,
            averages=summary.get("averages", {}),
            files=len(self.store.listing()),
        )
        self.log.info("Experiment finished", stages=stages, files=result.files)
        return result


def load_config(path: Path) -> ExperimentConfig:
    """Parse and validate an experiment JSON file"""
    path = Path(path)
    if not path.is_file():
        raise ArtifactNotFoundError(f"Config file not found: {path}", path=str(path))
    try:
        return ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        field_errors = {".".join(str(p) for p in err["loc"]) or "config": err["msg"] for err in e.errors()}
        logger.error("Invalid experiment config", path=str(path), errors=field_errors)
        raise ConfigurationError(f"Invalid experiment config {path}", field_errors=field_errors) from e


def run_experiment(config: ExperimentConfig, output_dir: Optional[Path] = None, seed: Optional[int] = None,
                   threads: Optional[int] = None, resume: Optional[Path] = None) -> RunSummary:
    return ExperimentRunner(config, output_dir, seed, threads).run(resume)
