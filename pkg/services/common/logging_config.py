"""
Logging configuration for xview
"""

import json
import logging
import logging.config
from contextvars import ContextVar
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from services.common.config import Settings, get_settings

run_id_var: ContextVar[str] = ContextVar("run_id", default="no-run")

_STANDARD_ATTRS = {
    "name", "msg", "args", "created", "filename", "funcName", "levelname",
    "levelno", "lineno", "module", "msecs", "pathname", "process",
    "processName", "relativeCreated", "thread", "threadName", "exc_info",
    "exc_text", "stack_info", "taskName", "run_id", "getMessage", "message",
}


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging"""

    def format(self, record: logging.LogRecord) -> str:
        log_obj: Dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        if hasattr(record, "run_id"):
            log_obj["run_id"] = record.run_id

        if record.exc_info:
            log_obj["exception"] = self.formatException(record.exc_info)

        for key, value in record.__dict__.items():
            if key not in _STANDARD_ATTRS:
                log_obj[key] = value

        return json.dumps(log_obj, default=str)


class RunContextFilter(logging.Filter):
    """Add the active run id to log records"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = run_id_var.get()
        return True


def setup_logging(settings: Optional[Settings] = None) -> None:
    """Configure logging for the process"""
    settings = settings or get_settings()
    use_json = settings.log_format == "json" or settings.environment == "production"
    formatter = "json" if use_json else "detailed"

    handlers: Dict[str, Dict[str, Any]] = {
        "console": {
            "class": "logging.StreamHandler",
            "level": settings.log_level,
            "formatter": formatter,
            "filters": ["run_context"],
            # stdout is reserved for command output
            "stream": "ext://sys.stderr",
        }
    }
    if settings.log_dir:
        Path(settings.log_dir).mkdir(parents=True, exist_ok=True)
        handlers["app_file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": "INFO",
            "formatter": "json" if use_json else "standard",
            "filters": ["run_context"],
            "filename": str(Path(settings.log_dir) / "xview.log"),
            "maxBytes": 10485760,  # 10MB
            "backupCount": 5,
        }

    config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "json": {"()": JSONFormatter},
            "standard": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
            },
            "detailed": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - [%(run_id)s] - %(message)s"
            },
        },
        "filters": {"run_context": {"()": RunContextFilter}},
        "handlers": handlers,
        "loggers": {
            "services": {
                "level": settings.log_level,
                "handlers": list(handlers),
                "propagate": False,
            },
            "workers": {
                "level": settings.log_level,
                "handlers": list(handlers),
                "propagate": False,
            },
        },
        "root": {"level": "WARNING", "handlers": ["console"]},
    }

    logging.config.dictConfig(config)

    logging.getLogger(__name__).debug(
        "Logging configured",
        extra={
            "environment": settings.environment,
            "log_level": settings.log_level,
            "format": "json" if use_json else "text",
        },
    )

