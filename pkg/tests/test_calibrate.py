"""Calibration methods: affine and convolutional logit calibrators, MC dropout."""

import numpy as np
import pytest

from segcalib.calibrate import (
    AuxConvParams,
    CalibrationFitConfig,
    CalibrationSettings,
    DegenerateLabelsWarning,
    McConfig,
    McDropoutPredictor,
    NetworkPredictor,
    PlattCalibrator,
    PlattParams,
    apply_aux_conv,
    apply_platt,
    attach_logits,
    calibrate_pipeline,
    calibration_objective,
    fit_aux_conv,
    fit_platt,
    mc_predict,
    platt_to_aux_conv,
)
from segcalib.exceptions import ConfigError, DataError, ParameterError
from segcalib.grids import stable_sigmoid
from segcalib.network import DECODER_SITES, DropoutConfig, forward, init_params, train, TrainConfig
from segcalib.synth import gaussian_blur, generate_subjects

from conftest import small_synth_config
from test_layers import conv_oracle


def clamped_logit(q, eps=1e-6):
    q = np.clip(q, eps, 1.0 - eps)
    return np.log(q / (1.0 - q))


@pytest.fixture(scope="module")
def posterior_subjects():
    """Default-scale subjects whose logits encode a known miscalibration."""
    from segcalib.synth import SynthConfig

    return generate_subjects(SynthConfig(seed=42), 20)


class TestApplyPlatt:
    def test_identity(self):
        z = np.zeros((2, 2))
        assert np.all(apply_platt(PlattParams(1.0, 0.0), z) == 0.5)

    def test_degenerate_scale_is_constant(self):
        z = np.random.default_rng(0).normal(size=(3, 3))
        out = apply_platt(PlattParams(0.0, 1.3), z)
        np.testing.assert_allclose(out, stable_sigmoid(np.full((3, 3), 1.3)), atol=1e-15)

    def test_positive_scale_preserves_ordering(self):
        rng = np.random.default_rng(1)
        z = rng.normal(scale=4, size=(6, 6))
        order = np.argsort(z.ravel())
        out = apply_platt(PlattParams(0.37, -0.8), z)
        assert np.array_equal(np.argsort(out.ravel()), order)


class TestApplyAuxConv:
    def test_identity_kernel(self):
        z = np.random.default_rng(2).normal(size=(7, 7))
        kernel = np.zeros((5, 5))
        kernel[2, 2] = 1.0
        out = apply_aux_conv(AuxConvParams(kernel=kernel, bias=0.0), z)
        np.testing.assert_allclose(out, stable_sigmoid(z), atol=1e-15)

    def test_zero_kernel_constant(self):
        z = np.random.default_rng(3).normal(size=(4, 4))
        out = apply_aux_conv(AuxConvParams(kernel=np.zeros((3, 3)), bias=0.7), z)
        np.testing.assert_allclose(out, stable_sigmoid(np.full((4, 4), 0.7)), atol=1e-15)

    def test_matches_loop_convolution_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(8, 8))
        kernel = rng.normal(size=(5, 5))
        bias = 0.3
        got = apply_aux_conv(AuxConvParams(kernel=kernel, bias=bias), z)
        expected = stable_sigmoid(
            conv_oracle(z[np.newaxis], kernel[np.newaxis, np.newaxis], np.array([bias]), 2)[0]
        )
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_kernel_validation(self):
        with pytest.raises(ParameterError):
            AuxConvParams(kernel=np.zeros((2, 2)), bias=0.0)
        with pytest.raises(ParameterError):
            AuxConvParams(kernel=np.zeros((3, 4)), bias=0.0)


def test_platt_to_aux_conv_equivalence():
    params = PlattParams(0.42, -0.37)
    widened = platt_to_aux_conv(params)
    assert widened.k == 1
    z = np.random.default_rng(5).normal(size=(5, 5))
    np.testing.assert_allclose(apply_platt(params, z), apply_aux_conv(widened, z), atol=1e-15)


class TestFitPlatt:
    def test_recovers_half_scale(self, posterior_subjects):
        subs = [s.with_logits(2.0 * clamped_logit(s.reference_posterior))
                for s in posterior_subjects]
        fitted = fit_platt(subs[:15], subs[15:], CalibrationFitConfig(seed=1))
        # grid-search oracle over the fitting objective puts the optimum
        # near (0.5, 0); the fit must land in the stated window
        assert 0.45 <= fitted.a <= 0.55
        assert abs(fitted.b) <= 0.05

    def test_recovers_unit_offset(self, posterior_subjects):
        subs = [s.with_logits(clamped_logit(s.reference_posterior) + 1.0)
                for s in posterior_subjects]
        fitted = fit_platt(subs[:15], subs[15:], CalibrationFitConfig(seed=1))
        assert 0.95 <= fitted.a <= 1.05
        assert -1.1 <= fitted.b <= -0.9

    def test_grid_search_oracle_agrees(self, posterior_subjects):
        # Independent coarse search over (a, b) confirms the optimum the
        # fit converges to.
        subs = [s.with_logits(2.0 * clamped_logit(s.reference_posterior))
                for s in posterior_subjects]
        fit_split = subs[:15]

        def pooled_ce(a, b):
            total = 0.0
            for s in fit_split:
                zt = a * s.logits + b
                total += float(((np.logaddexp(0.0, zt) - s.labels * zt) * s.eval_mask).sum()
                               / s.eval_mask.sum())
            return total / len(fit_split)

        grid = [(pooled_ce(a, b), a, b)
                for a in np.linspace(0.2, 1.2, 26) for b in np.linspace(-0.5, 0.5, 11)]
        _, best_a, best_b = min(grid)
        assert abs(best_a - 0.5) <= 0.05
        assert abs(best_b) <= 0.05

    def test_missing_logits_raises(self, posterior_subjects):
        with pytest.raises(DataError):
            fit_platt(posterior_subjects[:2], posterior_subjects[2:4])

    def test_degenerate_labels_warn(self, posterior_subjects):
        import dataclasses

        subs = []
        for s in posterior_subjects[:4]:
            all_zero = dataclasses.replace(s, labels=np.zeros(s.shape))
            subs.append(all_zero.with_logits(np.array(s.image)))
        with pytest.warns(DegenerateLabelsWarning):
            fit_platt(subs[:3], subs[3:], CalibrationFitConfig(max_epochs=2, seed=0))

    def test_determinism(self, posterior_subjects):
        subs = [s.with_logits(2.0 * clamped_logit(s.reference_posterior))
                for s in posterior_subjects]
        a = fit_platt(subs[:15], subs[15:], CalibrationFitConfig(seed=3))
        b = fit_platt(subs[:15], subs[15:], CalibrationFitConfig(seed=3))
        assert a == b


class TestFitAuxConv:
    def test_identity_initialisation_reproduces_base(self, posterior_subjects):
        subs = [s.with_logits(clamped_logit(s.reference_posterior))
                for s in posterior_subjects[:3]]
        fitted = fit_aux_conv(subs[:2], subs[2:], 5, CalibrationFitConfig(max_epochs=0, seed=0))
        for s in subs:
            np.testing.assert_allclose(
                apply_aux_conv(fitted, s.logits), stable_sigmoid(s.logits), atol=1e-15
            )

    def test_k1_coincides_with_platt(self, posterior_subjects):
        subs = [s.with_logits(2.0 * clamped_logit(s.reference_posterior))
                for s in posterior_subjects]
        config = CalibrationFitConfig(seed=1)
        platt = fit_platt(subs[:15], subs[15:], config)
        aux = fit_aux_conv(subs[:15], subs[15:], 1, config)
        assert abs(float(aux.kernel[0, 0]) - platt.a) <= 1e-6
        assert abs(aux.bias - platt.b) <= 1e-6

    def test_nested_model_not_worse_on_correlated_miscalibration(self, posterior_subjects):
        rng = np.random.default_rng(3)
        subs = [
            s.with_logits(
                clamped_logit(s.reference_posterior)
                + gaussian_blur(rng.normal(0.0, 4.0, s.shape), 2.0)
            )
            for s in posterior_subjects
        ]
        config = CalibrationFitConfig(seed=1)
        platt = fit_platt(subs[:15], subs[15:], config)
        aux = fit_aux_conv(subs[:15], subs[15:], 5, config)
        ce_platt = calibration_objective(subs[:15], lambda z: apply_platt(platt, z))
        ce_aux = calibration_objective(subs[:15], lambda z: apply_aux_conv(aux, z))
        assert ce_aux <= ce_platt + 1e-3

    def test_kernel_size_validation(self, posterior_subjects):
        from segcalib.grids import Subject

        subs = [s.with_logits(np.array(s.image)) for s in posterior_subjects[:4]]
        with pytest.raises(ParameterError):
            fit_aux_conv(subs[:2], subs[2:], 4)
        rng = np.random.default_rng(0)
        small = [
            Subject(
                id=f"tiny-{i}", image=rng.normal(size=(8, 8)),
                labels=(rng.random((8, 8)) < 0.5).astype(float),
                eval_mask=np.ones((8, 8)),
            ).with_logits(rng.normal(size=(8, 8)))
            for i in range(2)
        ]
        with pytest.raises(ParameterError):
            fit_aux_conv(small[:1], small[1:], 9)


@pytest.fixture(scope="module")
def trained_small_net():
    subjects = generate_subjects(small_synth_config(seed=13), 8)
    params, _ = train(
        init_params(2), subjects[:6], subjects[6:],
        TrainConfig(loss="cross_entropy", max_epochs=10, seed=1),
    )
    return params, subjects


class TestMcPredict:
    def test_rate_zero_matches_deterministic_bitwise(self, trained_small_net):
        params, subjects = trained_small_net
        logits, _ = forward(params, subjects[0].image)
        expected = stable_sigmoid(logits)
        mean, std = mc_predict(
            params, subjects[0].image,
            McConfig(n_samples=20, dropout=DropoutConfig(sites=DECODER_SITES, rate=0.0), seed=0),
        )
        assert np.array_equal(mean, expected)
        assert np.all(std == 0.0)

    def test_single_sample_is_the_sample(self, trained_small_net):
        params, subjects = trained_small_net
        config = McConfig(n_samples=1,
                          dropout=DropoutConfig(sites=DECODER_SITES, rate=0.3), seed=5)
        mean, std = mc_predict(params, subjects[0].image, config)
        assert np.all(std == 0.0)
        mean2, _ = mc_predict(params, subjects[0].image, config)
        assert np.array_equal(mean, mean2)

    def test_outputs_in_range(self, trained_small_net):
        params, subjects = trained_small_net
        mean, std = mc_predict(
            params, subjects[0].image,
            McConfig(n_samples=30, dropout=DropoutConfig(sites=DECODER_SITES, rate=0.5), seed=2),
        )
        assert mean.min() >= 0.0 and mean.max() <= 1.0
        assert std.min() >= 0.0 and std.max() <= 0.5

    def test_thread_count_does_not_change_result(self, trained_small_net):
        params, subjects = trained_small_net
        config = McConfig(n_samples=16,
                          dropout=DropoutConfig(sites=DECODER_SITES, rate=0.4), seed=9)
        sequential = mc_predict(params, subjects[0].image, config, threads=1)
        threaded = mc_predict(params, subjects[0].image, config, threads=4)
        assert np.array_equal(sequential[0], threaded[0])
        assert np.array_equal(sequential[1], threaded[1])

    def test_predictor_is_order_independent(self, trained_small_net):
        params, subjects = trained_small_net
        config = McConfig(n_samples=8,
                          dropout=DropoutConfig(sites=DECODER_SITES, rate=0.3), seed=1)
        predictor = McDropoutPredictor(params, config)
        forward_order = [predictor.predict_proba(s) for s in subjects[:3]]
        reverse_order = [predictor.predict_proba(s) for s in reversed(subjects[:3])]
        for a, b in zip(forward_order, reversed(reverse_order)):
            assert np.array_equal(a, b)


class TestCalibratePipeline:
    def test_base_is_passthrough(self, trained_small_net):
        params, subjects = trained_small_net
        predictor, info = calibrate_pipeline(
            "base", params, "ce", subjects[:4], subjects[4:6],
        )
        logits, _ = forward(params, subjects[0].image)
        np.testing.assert_array_equal(predictor.predict_proba(subjects[0]), stable_sigmoid(logits))
        assert info == {}

    def test_unknown_method_rejected(self, trained_small_net):
        params, subjects = trained_small_net
        with pytest.raises(ConfigError):
            calibrate_pipeline("temperature", params, "ce", subjects[:4], subjects[4:6])
        with pytest.raises(ConfigError):
            calibrate_pipeline("platt", params, "warm", subjects[:4], subjects[4:6])

    def test_platt_does_not_hurt_in_sample_ece(self, trained_small_net):
        from segcalib.metrics import subject_ece

        params, subjects = trained_small_net
        settings = CalibrationSettings(max_epochs=30, seed=4)
        predictor, _ = calibrate_pipeline("platt", params, "ce", subjects[:6], subjects[6:], settings)
        base = NetworkPredictor(params)

        def mean_ece(p):
            return float(np.mean([
                subject_ece(p.predict_proba(s), s.labels, s.eval_mask) for s in subjects[:6]
            ]))

        assert mean_ece(predictor) <= mean_ece(base) + 1e-3

    def test_finetune_changes_only_last_layer(self, trained_small_net):
        params, subjects = trained_small_net
        settings = CalibrationSettings(max_epochs=5, seed=2)
        predictor, info = calibrate_pipeline(
            "finetune", params, "sd", subjects[:4], subjects[4:6], settings
        )
        assert info["finetune_lr"] == settings.finetune_lr_sd
        for layer in range(3):
            assert np.array_equal(predictor.params.weights[layer], params.weights[layer])

    def test_mc_methods_report_choice(self, trained_small_net):
        params, subjects = trained_small_net
        settings = CalibrationSettings(
            max_epochs=3, mc_samples=4, mc_lr_candidates=(1e-3, 1e-4), seed=6
        )
        predictor, info = calibrate_pipeline(
            "mc_center", params, "ce", subjects[:4], subjects[4:6], settings
        )
        assert info["mc_lr"] in settings.mc_lr_candidates
        assert info["sites"] == ("before_L2", "before_L3")
        probs = predictor.predict_proba(subjects[0])
        assert probs.shape == subjects[0].shape


class TestEstimatorWrappers:
    def test_platt_calibrator(self, posterior_subjects):
        subs = [s.with_logits(2.0 * clamped_logit(s.reference_posterior))
                for s in posterior_subjects]
        calibrator = PlattCalibrator(max_epochs=20, seed=0)
        out = calibrator.fit(subs[:15], subs[15:])
        assert out is calibrator
        probs = calibrator.transform(subs[0].logits)
        assert probs.shape == subs[0].shape
        assert calibrator.a_ == calibrator.params_.a

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            PlattCalibrator().transform(np.zeros((4, 4)))
