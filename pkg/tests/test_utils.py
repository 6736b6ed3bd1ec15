"""
Tests for shared helpers.
"""

import logging
from unittest.mock import patch

import numpy as np
import pytest

from firecast.utils import (
    derive_seed,
    format_count,
    limit_threads,
    log_array_summary,
    log_config,
)


class TestUtils:
    """Test cases for formatting, seeding and thread limits."""

    @pytest.mark.parametrize("value,expected", [
        (254_145, "254.1k"),
        (12.3e6, "12.3M"),
        (2.5e9, "2.5G"),
        (64, "64"),
    ])
    def test_format_count(self, value, expected):
        """Test cost-table formatting."""
        assert format_count(value) == expected

    def test_derive_seed(self):
        """Test that derived seeds are stable and key dependent."""
        assert derive_seed(0, 3) == derive_seed(0, 3)
        assert derive_seed(0, 3) != derive_seed(0, 4)
        assert derive_seed(1, 3) != derive_seed(0, 3)
        assert 0 <= derive_seed(-1, 0) < 2 ** 64

    def test_limit_threads_none_is_noop(self):
        """Test that no limit leaves thread pools alone."""
        with patch("firecast.utils.threadpool_limits") as limits:
            with limit_threads(None):
                pass
        limits.assert_not_called()

    def test_limit_threads(self):
        """Test that a limit is passed to threadpoolctl."""
        with patch("firecast.utils.threadpool_limits") as limits:
            with limit_threads(1):
                pass
        limits.assert_called_once_with(limits=1)

    def test_log_config(self, caplog):
        """Test that configs are logged as YAML at debug level."""
        with caplog.at_level(logging.DEBUG, logger="firecast.utils"):
            log_config("train", {"lr": 0.5, "epochs": 2})
        assert "train:" in caplog.text
        assert "epochs: 2" in caplog.text

    def test_log_array_summary(self, caplog):
        """Test that arrays are logged by shape and range, not payload."""
        with caplog.at_level(logging.DEBUG, logger="firecast.utils"):
            log_array_summary("scores", np.array([[0.25, 0.75]]))
            log_array_summary("none", np.zeros((0, 3)))
        assert "shape=(1, 2)" in caplog.text
        assert "min=0.25 max=0.75" in caplog.text
        assert "(empty)" in caplog.text
