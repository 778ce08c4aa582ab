import logging
import logging.config
import os
from typing import Any, Dict, MutableMapping, Optional, Tuple

LOG_FORMAT = "[%(asctime)s] [%(name)s] [%(levelname)s] %(message)s"

# read from the environment directly: settings import this module
LOG_LEVEL_ENV = "PENKF_LOG_LEVEL"
LOG_FILE_ENV = "PENKF_LOG_FILE"


def logging_config(level: str = "INFO", log_file: Optional[str] = "penkf.log") -> Dict[str, Any]:
    """
    dictConfig for the `penkf` logger tree on the console, warnings of every logger to `log_file`.

    `log_file=None` leaves the file handler out.
    """
    handlers: Dict[str, Dict[str, Any]] = {
        "console": {"formatter": "basic", "class": "logging.StreamHandler"},
    }
    root_handlers = []
    if log_file:
        handlers["rotate_file"] = {
            "formatter": "basic",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": log_file,
            "encoding": "utf8",
            "maxBytes": 1000000,
            "backupCount": 2,
        }
        root_handlers.append("rotate_file")

    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"basic": {"format": LOG_FORMAT, "datefmt": "%Y-%m-%d %H:%M:%S"}},
        "handlers": handlers,
        "loggers": {
            "": {"level": "WARNING", "handlers": root_handlers},
            "penkf": {"level": level.upper(), "handlers": ["console"]},
            # worker start/stop chatter
            "dramatiq": {"level": "WARNING"},
        },
    }


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    level = level or os.environ.get(LOG_LEVEL_ENV, "INFO")
    if log_file is None:
        log_file = os.environ.get(LOG_FILE_ENV, "penkf.log")
    logging.config.dictConfig(logging_config(level, log_file or None))


def get_logger(module, name: str = None):
    logger_name = module
    if name is not None:
        logger_name += "." + name
    return logging.getLogger(logger_name)


class TrialLogger(logging.LoggerAdapter):
    """
    Prefixes every record with the trial index and method name, `[trial 3/penkf] ...`.
    """

    def __init__(self, logger: logging.Logger, trial: int, method: str):
        super().__init__(logger, {"trial": trial, "method": method})

    def process(self, msg: Any, kwargs: MutableMapping[str, Any]) -> Tuple[Any, MutableMapping[str, Any]]:
        return f"[trial {self.extra['trial']}/{self.extra['method']}] {msg}", kwargs
