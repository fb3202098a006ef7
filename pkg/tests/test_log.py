"""Tests for utivad.log — logging setup."""

import logging
import os
from logging.handlers import TimedRotatingFileHandler

from utivad.log import LOG_FILE, setup_logging


class TestSetupLogging:
    """Tests for setup_logging()."""

    def test_creates_log_dir(self, tmp_path):
        log_dir = str(tmp_path / "new_logs")
        setup_logging(log_dir)
        assert os.path.isdir(log_dir)

    def test_returns_logger(self, tmp_path):
        logger = setup_logging(str(tmp_path))
        assert isinstance(logger, logging.Logger)
        assert logger.name == "utivad"

    def test_has_file_handler(self, tmp_path):
        logger = setup_logging(str(tmp_path))
        handler_types = [type(h) for h in logger.handlers]
        assert TimedRotatingFileHandler in handler_types

    def test_has_stream_handler(self, tmp_path):
        logger = setup_logging(str(tmp_path))
        handler_types = [type(h) for h in logger.handlers]
        assert logging.StreamHandler in handler_types

    def test_log_file_created(self, tmp_path):
        setup_logging(str(tmp_path))
        assert (tmp_path / LOG_FILE).exists()
        assert LOG_FILE == "utivad.log"

    def test_logger_level_debug(self, tmp_path):
        logger = setup_logging(str(tmp_path))
        assert logger.level == logging.DEBUG

    def test_backups_follow_max_hours(self, tmp_path):
        logger = setup_logging(str(tmp_path), max_hours=6)
        fh = next(h for h in logger.handlers if isinstance(h, TimedRotatingFileHandler))
        assert fh.backupCount == 6

    def test_second_call_replaces_handlers(self, tmp_path):
        setup_logging(str(tmp_path))
        logger = setup_logging(str(tmp_path))
        assert len(logger.handlers) == 2

    def test_module_loggers_reach_file(self, tmp_path):
        logger = setup_logging(str(tmp_path))
        logging.getLogger("utivad.vad").debug("vad: 10 frames")
        for h in logger.handlers:
            h.flush()
        assert "vad: 10 frames" in (tmp_path / LOG_FILE).read_text(encoding="utf-8")

    def setup_method(self):
        """Clean up logger handlers before each test to avoid accumulation."""
        logger = logging.getLogger("utivad")
        for h in list(logger.handlers):
            logger.removeHandler(h)
            h.close()

    teardown_method = setup_method
