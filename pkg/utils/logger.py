import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from core.config import LogConfig

try:
    from colorama import Fore, Style, init
    init(autoreset=True)
    COLORAMA_AVAILABLE = True
except ImportError:
    COLORAMA_AVAILABLE = False


FORMATS = {
    "simple": "%(asctime)s - %(levelname)s - %(message)s",
    "detailed": "%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s",
    "json": '{"time": "%(asctime)s", "level": "%(levelname)s", "logger": "%(name)s", "msg": "%(message)s"}',
}


class ColoredFormatter(logging.Formatter):
    """Formatter that colors the level name using colorama."""

    LEVEL_COLORS = {
        'DEBUG': 'CYAN',
        'INFO': 'GREEN',
        'WARNING': 'YELLOW',
        'ERROR': 'RED',
        'CRITICAL': 'MAGENTA',
    }

    def __init__(self, fmt=None, datefmt=None, use_colors=True):
        super().__init__(fmt, datefmt)
        self.use_colors = use_colors and COLORAMA_AVAILABLE

    def format(self, record):
        if not self.use_colors:
            return super().format(record)

        original_levelname = record.levelname
        color = self.LEVEL_COLORS.get(record.levelname)
        if color:
            record.levelname = f"{getattr(Fore, color)}{Style.BRIGHT}{record.levelname}{Style.RESET_ALL}"

        formatted = super().format(record)

        # Other handlers see the plain level name
        record.levelname = original_levelname
        return formatted


def create_console_handler(log_config: LogConfig) -> logging.Handler:
    """Colored stderr handler; stdout stays free for command output."""
    console_handler = logging.StreamHandler(stream=sys.stderr)
    formatter = ColoredFormatter(
        fmt=FORMATS.get(log_config.format, FORMATS["simple"]),
        use_colors=log_config.use_colors and sys.stderr.isatty(),
    )
    console_handler.setFormatter(formatter)
    return console_handler


def create_file_handler(app_name: str, log_config: LogConfig) -> logging.Handler:
    """Rotating file handler under `log_config.dir`."""
    log_dir = Path(log_config.dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    file_handler = RotatingFileHandler(
        filename=log_dir / f"{app_name}.log",
        maxBytes=log_config.max_bytes,
        backupCount=log_config.backup_count,
        encoding='utf-8',
    )
    # no colors in files
    file_handler.setFormatter(logging.Formatter(FORMATS.get(log_config.format, FORMATS["simple"])))
    return file_handler


def setup_logging(app_name: str = "sams-vae", log_config: Optional[LogConfig] = None) -> logging.Logger:
    """Configure the root logger from a LogConfig (environment overrides applied by default)."""
    log_config = log_config or LogConfig.from_env()
    level = getattr(logging, log_config.level.upper(), logging.INFO)

    handlers = []
    if log_config.to_console:
        handlers.append(create_console_handler(log_config))
    if log_config.to_file:
        handlers.append(create_file_handler(app_name, log_config))
    if not handlers:
        handlers.append(logging.NullHandler())

    logging.basicConfig(level=level, handlers=handlers, force=True)

    logger = logging.getLogger(app_name)
    logger.debug(f"Logging initialized: level={log_config.level}, file={log_config.to_file}, "
                 f"console={log_config.to_console}, colors={COLORAMA_AVAILABLE and log_config.use_colors}")
    return logger


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


class EnhancedLogger:
    """Wrapper around logger with tagged helpers for run milestones."""

    TAGS = {
        "success": "[OK]",
        "failure": "[FAILED]",
        "performance": "[PERF]",
    }

    def __init__(self, name: str):
        self.logger = get_logger(name)

    def _format_message(self, kind: str, msg: str) -> str:
        return f"{self.TAGS[kind]} {msg}"

    def success(self, msg: str, *args, **kwargs):
        self.logger.info(self._format_message("success", msg), *args, **kwargs)

    def failure(self, msg: str, *args, **kwargs):
        self.logger.error(self._format_message("failure", msg), *args, **kwargs)

    def performance(self, msg: str, *args, **kwargs):
        """Timing and throughput figures."""
        self.logger.info(self._format_message("performance", msg), *args, **kwargs)

    def warning(self, msg: str, *args, **kwargs):
        self.logger.warning(msg, *args, **kwargs)

    def info(self, msg: str, *args, **kwargs):
        self.logger.info(msg, *args, **kwargs)

    def debug(self, msg: str, *args, **kwargs):
        self.logger.debug(msg, *args, **kwargs)

    def isEnabledFor(self, level: int) -> bool:
        return self.logger.isEnabledFor(level)


def get_enhanced_logger(name: str) -> EnhancedLogger:
    """Get an enhanced logger."""
    return EnhancedLogger(name)
