"""
Tests for experiment orchestration and the command-line surface
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.backend.cli import EXIT_CONFIG, EXIT_OK, main
from src.backend.core.exceptions import ArtifactNotFoundError, ConfigurationError
from src.backend.models.experiment_models import ExperimentConfig
from src.backend.services.experiment_runner import (
    ExperimentRunner,
    load_config,
    run_experiment,
    state_from_arrays,
    state_to_arrays,
)
from src.backend.services.metrics import psnr

CONFIG_DIR = Path(__file__).resolve().parents[3] / "configs"


def tiny_config(kind: str = "denoise", **overrides) -> dict:
    config = {
        "name": "tiny",
        "kind": kind,
        "seed": 5,
        "dataset": {"name": "random-blobs", "count": 3, "size": [8, 8]},
        "forward": {"kind": "denoise", "target_snr_db": 15.0},
        "generator": {"num_layers": 2, "channels": 8, "latent_dim": 4, "output_size": [8, 8],
                      "seed_spatial_size": [2, 2], "dropout_rate": 0.0},
        "train": {"iterations": 3, "log_every": 1},
        "reconstruction": {"n_samples": 3, "saved_samples": 1},
    }
    config.update(overrides)
    return config


def write_config(tmp_path, payload: dict):
    path = tmp_path / f"{payload['name']}.json"
    path.write_text(json.dumps(payload))
    return path


class TestExperimentRunner:
    """Full pipelines into an artifact tree"""

    def test_denoise_tree(self, tmp_path):
        """Test a denoising run writes every stage's artifacts"""
        config = ExperimentConfig.model_validate(tiny_config())
        summary = run_experiment(config, tmp_path / "run")
        assert summary.stages == ["synth", "measure", "train", "reconstruct", "report"]

        root = tmp_path / "run"
        for relative in ["config.json", "data/images.vtn", "data/image_000.pgm", "measurements/observations.vtn",
                         "measurements/forward_model.json", "measurements/info.json", "train_report.csv",
                         "checkpoints/train_0000003.ckpt", "reconstructions/means.vtn",
                         "reconstructions/mean_000.pgm", "reconstructions/std_002.vtn",
                         "reconstructions/sample_001_00.pgm", "metrics.csv", "summary.json"]:
            assert (root / relative).exists(), relative
        assert summary.files == len([p for p in root.rglob("*") if p.is_file()])

        info = json.loads((root / "measurements/info.json").read_text())
        assert info["snr_db"] == pytest.approx(15.0, abs=1e-9)
        assert len(pd.read_csv(root / "train_report.csv")) == 3

    def test_input_psnr_column(self, tmp_path):
        """Test psnr_input scores the noisy observation itself"""
        runner = ExperimentRunner(ExperimentConfig.model_validate(tiny_config()), tmp_path)
        runner.run()
        measurements = runner.load_measurements()
        frame = pd.read_csv(tmp_path / "metrics.csv")
        noisy = measurements.observations[1].reshape(8, 8)
        assert frame.loc[1, "psnr_input"] == pytest.approx(psnr(noisy, measurements.ground_truth[1]), rel=1e-9)
        assert "psnr_mean" in frame.columns

    def test_reruns_are_byte_identical(self, tmp_path):
        """Test the same config and seed reproduce the CSV outputs"""
        config = ExperimentConfig.model_validate(tiny_config())
        run_experiment(config, tmp_path / "a")
        run_experiment(config, tmp_path / "b")
        for relative in ["train_report.csv", "metrics.csv"]:
            assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()

    def test_seed_override(self, tmp_path):
        """Test the seed argument replaces the config seed"""
        config = ExperimentConfig.model_validate(tiny_config())
        first = ExperimentRunner(config, tmp_path / "a", seed=1)
        second = ExperimentRunner(config, tmp_path / "b", seed=2)
        assert not np.array_equal(first.synth(), second.synth())

    def test_zero_iterations_still_checkpoints(self, tmp_path):
        """Test an untrained state is saved and reported"""
        config = ExperimentConfig.model_validate(tiny_config(train={"iterations": 0}))
        run_experiment(config, tmp_path)
        assert (tmp_path / "checkpoints/train_0000000.ckpt").exists()
        assert pd.read_csv(tmp_path / "train_report.csv").empty
        assert "psnr_input" in pd.read_csv(tmp_path / "metrics.csv").columns

    def test_interferometric_run(self, tmp_path):
        """Test full-coverage interferometry writes dirty images and low-pass scores"""
        config = ExperimentConfig.model_validate(tiny_config(
            "cs-interferometry",
            forward={"kind": "interferometric_cs", "sigma": 0.05, "uv": {"full_grid": True}},
        ))
        run_experiment(config, tmp_path)
        assert (tmp_path / "dirty/dirty_000.pgm").exists()
        frame = pd.read_csv(tmp_path / "metrics.csv")
        for column in ["psnr_dirty", "psnr_dirty_lowpass", "psnr_mean", "psnr_mean_lowpass"]:
            assert column in frame.columns
        assert json.loads((tmp_path / "measurements/info.json").read_text())["coverage_fraction"] == pytest.approx(1.0)

    def test_phase_retrieval_run(self, tmp_path):
        """Test phase retrieval reports registered and untrained scores"""
        config = ExperimentConfig.model_validate(tiny_config(
            "phase-retrieval",
            forward={"kind": "gaussian_phase_retrieval", "sigma": 0.05, "rows_per_pixel": 2.0},
        ))
        run_experiment(config, tmp_path)
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert {"psnr_mean", "psnr_init"} <= set(frame.columns)
        model = json.loads((tmp_path / "measurements/forward_model.json").read_text())
        assert model["rows"] == 128

    def test_baseline_run(self, tmp_path):
        """Test TV-RML and DIP rows for the selected indices"""
        config = ExperimentConfig.model_validate(tiny_config(
            "baseline",
            baseline={"tv_lambdas": [0.0, 0.1], "tv_iters": 5, "dip_iters": 4,
                      "dip_checkpoint_interval": 2, "indices": [0]},
        ))
        summary = run_experiment(config, tmp_path)
        assert summary.stages == ["synth", "measure", "baseline", "report"]
        frame = pd.read_csv(tmp_path / "baselines/metrics.csv")
        assert frame["method"].tolist() == ["tv_rml", "tv_rml", "dip", "dip"]
        assert frame["iteration"].tolist()[2:] == [2, 4]
        assert (tmp_path / "baselines/dip_000_000004.pgm").exists()

    def test_model_select_run(self, tmp_path):
        """Test the score matrix has one column per candidate"""
        config = ExperimentConfig.model_validate(tiny_config(
            "model-select",
            dataset={"name": "two-class-digits", "count": 2, "size": [8, 8]},
            train={"iterations": 2},
            selection={"candidate_params": [{"class": 0}, {"class": 1}], "cases_per_candidate": 1,
                       "fit_iters": 3, "eval_samples": 4, "include_identity": True},
        ))
        summary = run_experiment(config, tmp_path)
        frame = pd.read_csv(tmp_path / "scores.csv")
        assert list(frame.columns) == ["case", "expected", "class_0", "class_1", "gaussian", "selected"]
        assert len(frame) == 2
        assert 0.0 <= summary.averages["accuracy"] <= 1.0
        assert (tmp_path / "candidates/train_report_class_1.csv").exists()

    def test_ring_profile(self, tmp_path):
        """Test the unwrapped ring is written per frame and angle"""
        config = ExperimentConfig.model_validate(tiny_config(ring={"center": [3.5, 3.5], "radius": 2.0, "n_angles": 8}))
        run_experiment(config, tmp_path)
        frame = pd.read_csv(tmp_path / "ring_profile.csv")
        assert len(frame) == 3 * 8
        assert {"frame", "angle", "ground_truth", "reconstruction"} <= set(frame.columns)

    def test_resume_reproduces_report(self, tmp_path):
        """Test resuming from a mid-run checkpoint gives the uninterrupted report"""
        config = ExperimentConfig.model_validate(tiny_config(
            generator={"num_layers": 2, "channels": 8, "latent_dim": 4, "output_size": [8, 8],
                       "seed_spatial_size": [2, 2], "dropout_rate": 0.1},
            train={"iterations": 4, "checkpoint_every": 2},
        ))
        runner = ExperimentRunner(config, tmp_path)
        runner.synth()
        runner.measure()
        runner.train()
        full_report = (tmp_path / "train_report.csv").read_bytes()
        _, full_arrays = runner.store.read_checkpoint()

        runner.train(resume=runner.store.checkpoint_path(2))
        assert (tmp_path / "train_report.csv").read_bytes() == full_report
        _, resumed_arrays = runner.store.read_checkpoint()
        for name, value in full_arrays.items():
            np.testing.assert_array_equal(resumed_arrays[name], value)

    def test_checkpoint_state_round_trip(self, tmp_path):
        """Test a training state survives the checkpoint layout"""
        runner = ExperimentRunner(ExperimentConfig.model_validate(tiny_config()), tmp_path)
        runner.synth()
        runner.measure()
        state = runner.train()
        restored = state_from_arrays({"generator": runner.config.generator.model_dump(mode="json"),
                                      "count": 3, "iteration": 3}, state_to_arrays(state))
        assert restored.iteration == 3
        np.testing.assert_array_equal(restored.generator.weights["projection"].data,
                                      state.generator.weights["projection"].data)
        np.testing.assert_array_equal(restored.posteriors[2].l_factor.data, state.posteriors[2].l_factor.data)

    def test_stage_needs_earlier_artifacts(self, tmp_path):
        """Test a stage without its inputs reports the missing file"""
        runner = ExperimentRunner(ExperimentConfig.model_validate(tiny_config()), tmp_path)
        with pytest.raises(ArtifactNotFoundError):
            runner.measure()

    def test_select_needs_section(self, tmp_path):
        """Test the select stage requires a selection section"""
        runner = ExperimentRunner(ExperimentConfig.model_validate(tiny_config()), tmp_path)
        with pytest.raises(ConfigurationError):
            runner.select()


class TestRunIsolation:
    """Runs into reused directories and echoed configs"""

    def test_rerun_into_used_directory(self, tmp_path):
        """Test a shorter run over an older tree matches a run into a fresh directory"""
        long_run = ExperimentConfig.model_validate(tiny_config(train={"iterations": 6}))
        short_run = ExperimentConfig.model_validate(tiny_config(train={"iterations": 2}))
        run_experiment(long_run, tmp_path / "shared")
        run_experiment(short_run, tmp_path / "shared")
        run_experiment(short_run, tmp_path / "fresh")

        checkpoints = sorted(p.name for p in (tmp_path / "shared/checkpoints").iterdir())
        assert checkpoints == ["train_0000002.ckpt"]
        for relative in ["reconstructions/means.vtn", "metrics.csv", "train_report.csv"]:
            assert (tmp_path / "shared" / relative).read_bytes() == (tmp_path / "fresh" / relative).read_bytes()

    def test_reconstruct_needs_final_checkpoint(self, tmp_path):
        """Test reconstruction refuses a tree trained for a different iteration count"""
        run_experiment(ExperimentConfig.model_validate(tiny_config(train={"iterations": 3})), tmp_path)
        runner = ExperimentRunner(ExperimentConfig.model_validate(tiny_config(train={"iterations": 5})), tmp_path)
        with pytest.raises(ArtifactNotFoundError):
            runner.reconstruct()

    def test_echoed_config_reproduces_run(self, tmp_path):
        """Test reloading config.json gives the same config and the same metrics"""
        config = ExperimentConfig.model_validate(tiny_config(train={"iterations": 2}))
        run_experiment(config, tmp_path / "first", seed=9)
        echoed = load_config(tmp_path / "first/config.json")
        assert echoed == config.model_copy(update={"seed": 9})

        run_experiment(echoed, tmp_path / "second")
        for relative in ["metrics.csv", "train_report.csv"]:
            assert (tmp_path / "first" / relative).read_bytes() == (tmp_path / "second" / relative).read_bytes()


class TestPhaseRetrievalRuns:
    """Fourier phase retrieval and phase-retrieval model selection"""

    def test_fourier_phase_retrieval_run(self, tmp_path):
        """Test Fourier magnitudes are scored with shift, flip and sign registration"""
        config = ExperimentConfig.model_validate(tiny_config(
            "phase-retrieval",
            forward={"kind": "fourier_phase_retrieval", "sigma": 0.05},
        ))
        runner = ExperimentRunner(config, tmp_path)
        runner.run()
        measurements = runner.load_measurements()
        assert measurements.observations.shape == (3, 4 * 64)

        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert {"psnr_mean", "psnr_init"} <= set(frame.columns)
        means = runner.store.read_array("reconstructions/means.vtn")
        for i in range(3):
            assert frame.loc[i, "psnr_mean"] >= psnr(means[i], measurements.ground_truth[i]) - 1e-9

    def test_phase_retrieval_model_selection(self, tmp_path):
        """Test candidates are scored on Gaussian phase-retrieval cases"""
        config = ExperimentConfig.model_validate(tiny_config(
            "model-select",
            dataset={"name": "two-class-digits", "count": 2, "size": [8, 8]},
            forward={"kind": "gaussian_phase_retrieval", "sigma": 0.2236, "rows_per_pixel": 2.0},
            train={"iterations": 2},
            selection={"candidate_params": [{"class": 0}, {"class": 1}], "cases_per_candidate": 2,
                       "fit_iters": 3, "eval_samples": 4},
        ))
        summary = run_experiment(config, tmp_path)
        frame = pd.read_csv(tmp_path / "scores.csv")
        assert list(frame.columns) == ["case", "expected", "class_0", "class_1", "selected"]
        assert len(frame) == 4
        assert np.isfinite(frame[["class_0", "class_1"]].to_numpy()).all()
        assert 0.0 <= summary.averages["accuracy"] <= 1.0


class TestBundledConfigs:
    """Configs shipped under configs/"""

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_config_loads(self, path):
        """Test every bundled config validates"""
        config = load_config(path)
        assert config.name == path.stem

    def test_phase_retrieval_variants_present(self):
        """Test both phase-retrieval operators and phase-retrieval selection are bundled"""
        kinds = {load_config(path).forward.kind.value for path in CONFIG_DIR.glob("*.json")}
        assert {"fourier_phase_retrieval", "gaussian_phase_retrieval"} <= kinds
        selection = load_config(CONFIG_DIR / "model-select-phase-retrieval.json")
        assert selection.forward.kind.value == "gaussian_phase_retrieval"

    def test_tv_weights_on_likelihood_scale(self):
        """Test the TV grids are comparable to the 1/σ² weight of the data term"""
        for name in ["denoise", "baseline"]:
            lambdas = load_config(CONFIG_DIR / f"{name}.json").baseline.tv_lambdas
            assert max(lambdas) >= 10.0


class TestConfigValidation:
    """Experiment config parsing"""

    def test_generator_must_match_dataset(self):
        """Test the generator output size equals the image size"""
        payload = tiny_config(dataset={"name": "random-blobs", "count": 2, "size": [16, 16]})
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate(payload)

    def test_forward_kind_must_match(self):
        """Test a denoise experiment cannot use visibilities"""
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate(tiny_config(forward={"kind": "interferometric_cs", "sigma": 0.1}))

    def test_noise_given_once(self):
        """Test sigma and target SNR are exclusive"""
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate(tiny_config(forward={"kind": "denoise", "sigma": 0.1, "target_snr_db": 10}))

    def test_seed_is_required(self):
        """Test configs without a seed are rejected"""
        payload = tiny_config()
        del payload["seed"]
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate(payload)

    def test_load_config_reports_fields(self, tmp_path):
        """Test file validation errors become configuration errors"""
        path = write_config(tmp_path, tiny_config(seed=-1))
        with pytest.raises(ConfigurationError) as excinfo:
            load_config(path)
        assert "seed" in excinfo.value.details["field_errors"]

    def test_load_config_missing_file(self, tmp_path):
        """Test a missing config file is reported"""
        with pytest.raises(ArtifactNotFoundError):
            load_config(tmp_path / "absent.json")


class TestCli:
    """Command-line entry point"""

    def test_run_command(self, tmp_path, capsys):
        """Test the run command prints a JSON summary"""
        path = write_config(tmp_path, tiny_config())
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["name"] == "tiny"
        assert (tmp_path / "out/metrics.csv").exists()

    def test_staged_commands(self, tmp_path):
        """Test stages run one at a time over the same directory"""
        path = write_config(tmp_path, tiny_config())
        out = str(tmp_path / "out")
        for stage in ["synth", "measure", "train", "reconstruct", "report"]:
            assert main([stage, "--config", str(path), "--out", out, "--threads", "2"]) == EXIT_OK, stage
        assert (tmp_path / "out/summary.json").exists()

    def test_missing_artifact_exit_code(self, tmp_path):
        """Test running a stage out of order exits with the configuration code"""
        path = write_config(tmp_path, tiny_config())
        assert main(["reconstruct", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG

    def test_invalid_config_exit_code(self, tmp_path):
        """Test an invalid config exits with the configuration code"""
        path = write_config(tmp_path, tiny_config(kind="not-a-kind"))
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_invalid_seed_rejected(self, tmp_path):
        """Test seeds outside the unsigned 64-bit range are a usage error"""
        path = write_config(tmp_path, tiny_config())
        with pytest.raises(SystemExit):
            main(["run", "--config", str(path), "--seed", "-3"])
