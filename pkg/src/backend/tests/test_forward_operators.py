"""
Tests for measurement operators and the noise model
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.backend.core.exceptions import ForwardModelError, ShapeMismatchError
from src.backend.core.logging_config import configure_logging
from src.backend.models.measurement_models import ForwardModel, MeasurementKind
from src.backend.services.autodiff import Tensor, gradcheck, square
from src.backend.services.forward_operators import (
    MeasurementSet,
    add_noise,
    apply,
    calibrate_sigma,
    coverage_fraction,
    dirty_image,
    full_grid_coverage,
    low_pass_target,
    measure,
    operator_for,
    snr_db,
    synth_uv_coverage,
)


def uv_tuple(points: np.ndarray):
    return tuple(tuple(p) for p in np.asarray(points).tolist())


@pytest.fixture
def image():
    """Random 4×6 image in (0, 1)"""
    return np.random.default_rng(0).uniform(0.1, 0.9, size=(4, 6))


class TestOperators:
    """Noiseless forward maps"""

    def test_denoise_flattens(self, image):
        """Test denoising is the identity on the flattened image"""
        model = ForwardModel(kind=MeasurementKind.DENOISE, sigma=0.1, geometry=(4, 6))
        np.testing.assert_array_equal(apply(model, image).data, image.ravel())
        assert model.measurement_dim == 24

    def test_visibility_matches_fft(self, image):
        """Test one visibility against the unitary 2-D DFT"""
        model = ForwardModel(kind=MeasurementKind.INTERFEROMETRIC_CS, sigma=0.1, geometry=(4, 6),
                             uv_points=((1.0, 2.0), (-1.0, 0.0)))
        y = apply(model, image).data
        spectrum = np.fft.fft2(image, norm="ortho")
        np.testing.assert_allclose(y[:2], [spectrum[1, 2].real, spectrum[1, 2].imag], atol=1e-12)
        np.testing.assert_allclose(y[2:], [spectrum[-1, 0].real, spectrum[-1, 0].imag], atol=1e-12)

    def test_full_coverage_dirty_image_is_exact(self, image):
        """Test the dirty image of full noiseless coverage reproduces the image"""
        model = ForwardModel(kind=MeasurementKind.INTERFEROMETRIC_CS, sigma=0.1, geometry=(4, 6),
                             uv_points=uv_tuple(full_grid_coverage((4, 6))))
        np.testing.assert_allclose(dirty_image(model, apply(model, image).data), image, atol=1e-8)

    def test_dirty_image_needs_interferometry(self, image):
        """Test dirty images are rejected for other kinds"""
        model = ForwardModel(kind=MeasurementKind.DENOISE, sigma=0.1, geometry=(4, 6))
        with pytest.raises(ForwardModelError):
            dirty_image(model, image.ravel())

    def test_uv_outside_nyquist_rejected(self):
        """Test uv points beyond half the grid are rejected"""
        with pytest.raises(ValidationError):
            ForwardModel(kind=MeasurementKind.INTERFEROMETRIC_CS, sigma=0.1, geometry=(4, 4),
                         uv_points=((3.0, 0.0),))

    def test_gaussian_kinds_need_matrix(self):
        """Test Gaussian kinds require a seed and a row count"""
        with pytest.raises(ValidationError):
            ForwardModel(kind=MeasurementKind.GAUSSIAN_CS, sigma=0.1, geometry=(4, 4))

    def test_gaussian_matrix_is_seeded(self):
        """Test the sensing matrix depends only on its seed and size"""
        model = ForwardModel(kind=MeasurementKind.GAUSSIAN_CS, sigma=0.1, geometry=(8, 8), matrix_seed=3, rows=40)
        other = model.model_copy(update={"sigma": 0.2})
        np.testing.assert_array_equal(operator_for(model).stacked_matrix, operator_for(other).stacked_matrix)
        stacked = operator_for(model).stacked_matrix
        assert stacked.shape == (80, 64)
        assert stacked.var() == pytest.approx(1.0 / 80.0, rel=0.1)

    def test_fourier_phase_retrieval_is_padded_modulus(self, image):
        """Test |DFT| of the image zero-padded to twice its size"""
        model = ForwardModel(kind=MeasurementKind.FOURIER_PHASE_RETRIEVAL, sigma=0.1, geometry=(4, 6))
        padded = np.zeros((8, 12))
        padded[:4, :6] = image
        expected = np.abs(np.fft.fft2(padded, norm="ortho")).ravel()
        np.testing.assert_allclose(apply(model, image).data, expected, atol=1e-7)
        assert model.measurement_dim == 96

    def test_gaussian_phase_retrieval_is_modulus(self, image):
        """Test |Ax| of the complex sensing matrix"""
        model = ForwardModel(kind=MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL, sigma=0.1, geometry=(4, 6),
                             matrix_seed=1, rows=30)
        stacked = operator_for(model).stacked_matrix
        complex_matrix = stacked[0::2] + 1j * stacked[1::2]
        np.testing.assert_allclose(apply(model, image).data, np.abs(complex_matrix @ image.ravel()), atol=1e-7)

    def test_modulus_is_differentiable_at_zero(self):
        """Test the smoothed modulus has a finite gradient at x = 0"""
        model = ForwardModel(kind=MeasurementKind.FOURIER_PHASE_RETRIEVAL, sigma=0.1, geometry=(2, 2))
        assert gradcheck(lambda x: apply(model, x).sum(), [np.zeros((2, 2))]) < 1e-3

    @pytest.mark.parametrize("kind,extra", [
        (MeasurementKind.DENOISE, {}),
        (MeasurementKind.INTERFEROMETRIC_CS, {"uv_points": ((1.0, 1.0), (0.0, 2.0), (-2.0, 1.0))}),
        (MeasurementKind.GAUSSIAN_CS, {"matrix_seed": 0, "rows": 6}),
        (MeasurementKind.FOURIER_PHASE_RETRIEVAL, {}),
        (MeasurementKind.GAUSSIAN_PHASE_RETRIEVAL, {"matrix_seed": 0, "rows": 10}),
    ])
    def test_operator_gradients(self, image, kind, extra):
        """Test every operator differentiates correctly"""
        model = ForwardModel(kind=kind, sigma=0.1, geometry=(4, 6), **extra)
        weights = np.random.default_rng(2).standard_normal(model.measurement_dim)
        fn = lambda x: (apply(model, x) * Tensor(weights)).sum() + square(apply(model, x)).sum()
        assert gradcheck(fn, [image]) < 1e-4

    def test_adjoint_identity(self, image):
        """Test ⟨Ax, y⟩ = ⟨x, Re(Aᴴy)⟩ for real images"""
        model = ForwardModel(kind=MeasurementKind.GAUSSIAN_CS, sigma=0.1, geometry=(4, 6), matrix_seed=4, rows=9)
        y = np.random.default_rng(5).standard_normal(model.measurement_dim)
        real, _ = operator_for(model).adjoint(y)
        assert apply(model, image).data @ y == pytest.approx(np.sum(image * real), rel=1e-10)

    def test_symmetric_coverage_dirty_image_is_real(self):
        """Test mirrored UV tracks give a dirty image with no imaginary part"""
        uv = synth_uv_coverage((8, 8), num_tracks=3, points_per_track=5, max_radius=4.0, seed=1)
        model = ForwardModel(kind=MeasurementKind.INTERFEROMETRIC_CS, sigma=0.1, geometry=(8, 8), uv_points=uv_tuple(uv))
        x = np.random.default_rng(12).uniform(size=(8, 8))
        real, imag = operator_for(model).adjoint(apply(model, x).data)
        assert np.abs(imag).max() < 1e-8
        np.testing.assert_array_equal(dirty_image(model, apply(model, x).data), real)

    def test_adjoint_needs_linear_operator(self):
        """Test phase retrieval has no adjoint"""
        model = ForwardModel(kind=MeasurementKind.FOURIER_PHASE_RETRIEVAL, sigma=0.1, geometry=(2, 2))
        with pytest.raises(ForwardModelError):
            operator_for(model).adjoint(np.zeros(16))

    def test_geometry_mismatch(self):
        """Test images of the wrong size are rejected"""
        model = ForwardModel(kind=MeasurementKind.DENOISE, sigma=0.1, geometry=(4, 6))
        with pytest.raises(ForwardModelError):
            apply(model, np.zeros((6, 4)))


class TestNoise:
    """SNR calibration and noisy measurement"""

    def test_calibrate_inverts_snr(self):
        """Test calibrate_sigma is the inverse of snr_db"""
        clean = np.random.default_rng(0).uniform(size=50)
        assert snr_db(clean, calibrate_sigma(clean, 15.0)) == pytest.approx(15.0, abs=1e-10)

    def test_snr_convention(self):
        """Test a unit-RMS signal with σ = 0.1 is at 20 dB"""
        assert snr_db(np.ones(16), 0.1) == pytest.approx(20.0)

    def test_zero_signal_rejected(self):
        """Test SNR of an all-zero signal is undefined"""
        with pytest.raises(ForwardModelError):
            calibrate_sigma(np.zeros(4), 10.0)

    def test_add_noise_is_seeded(self):
        """Test identical rngs give identical noise"""
        a = add_noise(np.zeros(10), 0.5, np.random.default_rng(1))
        b = add_noise(np.zeros(10), 0.5, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)
        with pytest.raises(ForwardModelError):
            add_noise(np.zeros(10), 0.0, np.random.default_rng(1))

    def test_rejections_are_logged(self, caplog):
        """Test invalid noise requests log an error before raising"""
        configure_logging(level="INFO", fmt="json")
        with pytest.raises(ForwardModelError):
            add_noise(np.zeros(4), -1.0, np.random.default_rng(0))
        with pytest.raises(ForwardModelError):
            calibrate_sigma(np.zeros(4), 10.0)
        assert "Invalid noise level" in caplog.text
        assert "Noise calibration on a zero signal" in caplog.text

    def test_measure_builds_set(self, image):
        """Test measurements carry the model and the ground truth"""
        model = ForwardModel(kind=MeasurementKind.DENOISE, sigma=0.05, geometry=(4, 6))
        measurements = measure(model, np.stack([image, image]), np.random.default_rng(0))
        assert len(measurements) == 2
        assert measurements.observations.shape == (2, 24)
        np.testing.assert_array_equal(measurements.ground_truth[0], image)

    def test_measurement_set_shape_check(self):
        """Test observation rows must match the model"""
        model = ForwardModel(kind=MeasurementKind.DENOISE, sigma=0.05, geometry=(2, 2))
        with pytest.raises(ShapeMismatchError):
            MeasurementSet(observations=np.zeros((3, 5)), model=model)


class TestCoverage:
    """UV coverage synthesis and low-pass targets"""

    def test_coverage_is_hermitian_and_bounded(self):
        """Test mirrored points within the requested radius"""
        uv = synth_uv_coverage((32, 32), num_tracks=6, points_per_track=10, max_radius=12.0, seed=0)
        assert uv.shape == (120, 2)
        np.testing.assert_array_equal(uv[60:], -uv[:60])
        assert np.max(np.hypot(uv[:, 0], uv[:, 1])) <= 12.0 + 1e-9
        assert 0.0 < coverage_fraction(uv, (32, 32)) <= 1.0

    def test_coverage_beyond_nyquist_rejected(self):
        """Test max_radius is limited by the grid"""
        with pytest.raises(ForwardModelError):
            synth_uv_coverage((16, 16), 2, 4, max_radius=9.0, seed=0)

    def test_full_grid_fraction(self):
        """Test full coverage touches every cell"""
        assert coverage_fraction(full_grid_coverage((4, 6)), (4, 6)) == pytest.approx(1.0)

    def test_low_pass_limits(self, image):
        """Test radius 0 keeps the mean and a large radius keeps everything"""
        np.testing.assert_allclose(low_pass_target(image, 0.0), np.full(image.shape, image.mean()), atol=1e-12)
        np.testing.assert_allclose(low_pass_target(image, 100.0), image, atol=1e-12)
