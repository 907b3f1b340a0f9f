"""Tests for error rendering and attributes."""

import math

from pepsnet.exceptions import PepsCapacityError, PepsError, PepsFormatError, PepsTrainingError


def test_training_error_box():
    error = PepsTrainingError("Non-finite loss", epoch=2, batch=7, max_grad=math.inf, details={"loss": "nan"})
    text = str(error)
    lines = text.splitlines()
    assert lines[0] == lines[-1] == "━" * 51
    assert "  ✗ Non-finite loss" in lines
    assert "  Epoch: 2" in lines
    assert "  Batch: 7" in lines
    assert "  Max |grad|: inf" in lines
    assert "  loss: nan" in lines
    assert any(line.startswith("  → ") for line in lines)
    assert repr(error) == "PepsTrainingError(epoch=2, batch=7, message='Non-finite loss')"


def test_format_error_offset():
    error = PepsFormatError("bad magic number 0x00000000", offset=0)
    assert error.offset == 0
    assert str(error).endswith("(at byte offset 0)")


def test_capacity_error_with_sample():
    error = PepsCapacityError("state would hold 2^40 entries").with_sample(5)
    assert error.sample_index == 5
    assert str(error).startswith("sample 5: ")
    assert isinstance(error, PepsError)
