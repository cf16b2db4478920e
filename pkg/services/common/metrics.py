"""
Prometheus metrics for training and verification runs

Metrics are registered on a private CollectorRegistry under the
`XVIEW_METRICS_NAMESPACE` prefix (default "xview"); nothing is exported
unless `start_metrics_server` is called (train --metrics-port).
"""

import logging

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, start_http_server

from services.common.config import get_settings

logger = logging.getLogger(__name__)

NAMESPACE = get_settings().metrics_namespace
REGISTRY = CollectorRegistry(auto_describe=True)

train_steps_total = Counter(
    "train_steps_total",
    "Total optimisation steps (one D step + one G step each)",
    ["variant"],
    namespace=NAMESPACE,
    registry=REGISTRY,
)

train_loss = Gauge(
    "train_loss",
    "Most recent value of each training loss component",
    ["component"],
    namespace=NAMESPACE,
    registry=REGISTRY,
)

train_step_seconds = Histogram(
    "train_step_seconds",
    "Wall time of one alternating D/G step",
    buckets=[0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0],
    namespace=NAMESPACE,
    registry=REGISTRY,
)

checkpoints_total = Counter(
    "checkpoints_total",
    "Checkpoints written",
    namespace=NAMESPACE,
    registry=REGISTRY,
)

gradcheck_max_error = Gauge(
    "gradcheck_max_error",
    "Max relative error of the last gradient check per probe",
    ["probe"],
    namespace=NAMESPACE,
    registry=REGISTRY,
)


def record_losses(components: dict) -> None:
    """Publish a step's loss components"""
    for name, value in components.items():
        train_loss.labels(component=name).set(float(value))


def start_metrics_server(port: int) -> None:
    """Expose REGISTRY over HTTP on the given port"""
    start_http_server(port, registry=REGISTRY)
    logger.info(f"Metrics server listening on :{port}")
