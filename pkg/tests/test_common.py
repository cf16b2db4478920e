"""
Test logging, metrics and the exception hierarchy
"""

import json
import logging

import pytest
from pydantic import ValidationError

from services.common import metrics
from services.common.config import Settings, get_settings
from services.common.exceptions import (
    ConfigError,
    DatasetError,
    DimensionError,
    FormatError,
    NonFiniteError,
    XViewError,
)
from services.common.logging_config import JSONFormatter, RunContextFilter, run_id_var


def make_record(**extra) -> logging.LogRecord:
    record = logging.LogRecord("workers.trainer", logging.INFO, __file__, 10, "step %d", (3,), None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


def test_json_formatter_includes_extra_fields():
    record = make_record(step=3, l1=0.25)
    RunContextFilter().filter(record)
    payload = json.loads(JSONFormatter().format(record))
    assert payload["message"] == "step 3"
    assert payload["level"] == "INFO"
    assert payload["step"] == 3
    assert payload["l1"] == 0.25
    assert payload["run_id"] == "no-run"


def test_run_context_filter_reads_context_var():
    token = run_id_var.set("F-seed2")
    try:
        record = make_record()
        RunContextFilter().filter(record)
        assert record.run_id == "F-seed2"
    finally:
        run_id_var.reset(token)


def test_record_losses_sets_gauges():
    metrics.record_losses({"l1": 0.5, "tv": 0.125})
    value = metrics.REGISTRY.get_sample_value(f"{metrics.NAMESPACE}_train_loss", {"component": "tv"})
    assert value == pytest.approx(0.125)


def test_metric_names_carry_the_configured_namespace():
    assert metrics.NAMESPACE == get_settings().metrics_namespace
    names = [m.name for m in metrics.REGISTRY.collect()]
    assert names
    assert all(name.startswith(f"{metrics.NAMESPACE}_") for name in names)


def test_metrics_namespace_from_environment(monkeypatch):
    monkeypatch.setenv("XVIEW_METRICS_NAMESPACE", "desk_runs")
    assert Settings().metrics_namespace == "desk_runs"
    monkeypatch.setenv("XVIEW_METRICS_NAMESPACE", "9bad")
    with pytest.raises(ValidationError):
        Settings()


@pytest.mark.parametrize(
    "exc, code",
    [
        (DimensionError("bad", expected=3, actual=4, level="L2"), "DIMENSION_ERROR"),
        (ConfigError("bad", field="c_l1"), "CONFIG_ERROR"),
        (NonFiniteError("bad", op="log", index=[0, 1]), "NON_FINITE"),
        (FormatError("bad", offset=12), "FORMAT_ERROR"),
        (DatasetError("bad", sample_id="00001"), "DATASET_ERROR"),
    ],
)
def test_errors_share_the_base(exc, code):
    assert isinstance(exc, XViewError)
    assert exc.error_code == code
    assert exc.to_dict()["code"] == code


def test_error_details():
    assert DimensionError("x", expected=3, actual=4, level="L2").details == {
        "expected": 3, "actual": 4, "level": "L2",
    }
    assert NonFiniteError("x", op="log", index=[0, 1]).details == {"op": "log", "index": [0, 1]}
    assert DatasetError("x", sample_id="00001").details == {"id": "00001"}
