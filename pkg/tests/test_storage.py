"""Binary container round trips and corruption handling."""

import struct

import numpy as np
import pytest

from segcalib.calibrate import AuxConvParams, PlattParams, platt_to_aux_conv
from segcalib.exceptions import CompatibilityError, FormatError
from segcalib.network import (
    DECODER_SITES,
    DropoutConfig,
    forward,
    init_params,
)
from segcalib.storage import (
    checkpoint_kind,
    load_aux_checkpoint,
    load_dataset,
    load_network_checkpoint,
    load_platt_checkpoint,
    load_predictions,
    load_subject,
    read_grid_file,
    save_aux_checkpoint,
    save_dataset,
    save_network_checkpoint,
    save_platt_checkpoint,
    save_predictions,
    save_subject,
    write_grid_file,
)
from segcalib.synth import generate_subjects

from conftest import small_synth_config


@pytest.fixture()
def subjects():
    return generate_subjects(small_synth_config(seed=17), 4)


class TestSubjectFiles:
    def test_round_trip_bit_exact(self, subjects, tmp_path):
        paths = save_dataset(subjects, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(paths) == len(loaded) == len(subjects)
        for original, restored in zip(subjects, loaded):
            assert original.id == restored.id
            assert np.array_equal(original.image, restored.image)
            assert np.array_equal(original.labels, restored.labels)
            assert np.array_equal(original.eval_mask, restored.eval_mask)
            assert np.array_equal(original.reference_posterior, restored.reference_posterior)

    def test_optional_grids_round_trip(self, subjects, tmp_path):
        with_logits = subjects[0].with_logits(np.random.default_rng(0).normal(size=subjects[0].shape))
        path = save_subject(with_logits, tmp_path)
        restored = load_subject(path)
        assert np.array_equal(with_logits.logits, restored.logits)

    def test_truncated_payload_rejected(self, subjects, tmp_path):
        path = save_subject(subjects[0], tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 11])
        with pytest.raises(FormatError, match=str(path.name)):
            load_subject(path)

    def test_bad_magic_rejected(self, subjects, tmp_path):
        path = save_subject(subjects[0], tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_subject(path)

    def test_unknown_version_rejected(self, subjects, tmp_path):
        path = save_subject(subjects[0], tmp_path)
        data = bytearray(path.read_bytes())
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="unsupported version"):
            load_subject(path)

    def test_trailing_bytes_rejected(self, subjects, tmp_path):
        path = save_subject(subjects[0], tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_subject(path)

    def test_missing_required_grid_rejected(self, tmp_path):
        path = tmp_path / "incomplete.scv1"
        write_grid_file(path, {"probabilities": np.full((2, 2), 0.5)})
        with pytest.raises(FormatError, match="image"):
            load_subject(path)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_unknown_slot_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_grid_file(tmp_path / "x.scv1", {"mystery": np.zeros((2, 2))})


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        probs = rng.random((6, 6))
        std = rng.random((6, 6)) * 0.3
        path = tmp_path / "pred.scv1"
        save_predictions(path, probs, std)
        loaded = load_predictions(path)
        assert np.array_equal(loaded["probabilities"], probs)
        assert np.array_equal(loaded["sample_std"], std)

    def test_probabilities_required(self, tmp_path):
        path = tmp_path / "pred.scv1"
        write_grid_file(path, {"image": np.zeros((2, 2))})
        with pytest.raises(FormatError, match="probabilities"):
            load_predictions(path)


class TestNetworkCheckpoints:
    def test_round_trip_preserves_forward_outputs(self, subjects, tmp_path):
        params = init_params(3)
        path = tmp_path / "net.scw1"
        dropout = DropoutConfig(sites=DECODER_SITES, rate=0.25)
        save_network_checkpoint(path, params, regime="sd", dropout=dropout)
        restored, regime, restored_dropout = load_network_checkpoint(path)
        assert regime == "sd"
        assert restored_dropout == dropout
        image = subjects[0].image
        original_logits, _ = forward(params, image)
        restored_logits, _ = forward(restored, image)
        assert np.array_equal(original_logits, restored_logits)

    def test_frozen_flags_round_trip(self, tmp_path):
        params = init_params(0).with_frozen((True, False, True, False))
        path = tmp_path / "net.scw1"
        save_network_checkpoint(path, params)
        restored, _, _ = load_network_checkpoint(path)
        assert restored.frozen == (True, False, True, False)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        params = init_params(0)
        path = tmp_path / "net.scw1"
        save_network_checkpoint(path, params)
        data = bytearray(path.read_bytes())
        # corrupt the first fingerprint character (after magic+version+kind+len)
        offset = 4 + 1 + 1 + 2
        data[offset] = ord("x")
        path.write_bytes(bytes(data))
        with pytest.raises(CompatibilityError, match="fingerprint"):
            load_network_checkpoint(path)

    def test_corrupt_payload_length_rejected(self, tmp_path):
        params = init_params(0)
        path = tmp_path / "net.scw1"
        save_network_checkpoint(path, params)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_network_checkpoint(path)


class TestCalibratorCheckpoints:
    def test_platt_round_trip(self, tmp_path):
        params = PlattParams(a=0.372, b=-1.25)
        path = tmp_path / "platt.scw1"
        save_platt_checkpoint(path, params)
        assert load_platt_checkpoint(path) == params
        assert checkpoint_kind(path) == "platt"

    def test_aux_round_trip(self, tmp_path):
        kernel = np.random.default_rng(0).normal(size=(5, 5))
        params = AuxConvParams(kernel=kernel, bias=0.125)
        path = tmp_path / "aux.scw1"
        save_aux_checkpoint(path, params)
        restored = load_aux_checkpoint(path)
        assert np.array_equal(restored.kernel, params.kernel)
        assert restored.bias == params.bias

    def test_kind_mismatch_requires_explicit_conversion(self, tmp_path):
        platt = PlattParams(a=1.5, b=0.25)
        path = tmp_path / "platt.scw1"
        save_platt_checkpoint(path, platt)
        # direct load as the convolutional kind is a type error
        with pytest.raises(CompatibilityError):
            load_aux_checkpoint(path)
        with pytest.raises(CompatibilityError):
            load_network_checkpoint(path)
        # the explicit widening is the supported route
        widened = platt_to_aux_conv(load_platt_checkpoint(path))
        assert widened.k == 1
        assert float(widened.kernel[0, 0]) == platt.a

    def test_network_not_loadable_as_platt(self, tmp_path):
        path = tmp_path / "net.scw1"
        save_network_checkpoint(path, init_params(0))
        with pytest.raises(CompatibilityError):
            load_platt_checkpoint(path)


def test_read_grid_file_shape_guard(tmp_path):
    path = tmp_path / "zero.scv1"
    blob = b"SCV1" + struct.pack("<B", 1) + struct.pack("<II", 0, 4) + struct.pack("<B", 1)
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="shape"):
        read_grid_file(path)
