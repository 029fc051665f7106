"""Python access to the simulation core.

Scenarios, templates, records and metric specs are plain dicts and lists in
the same JSON shapes the manager's HTTP API uses.
"""

import json

from . import _core
from ._core import AsaError, derive_seed, engine_invocations

__all__ = [
    "AsaError",
    "aggregate",
    "canonical_log",
    "compute_metric",
    "decode_frame",
    "derive_seed",
    "encode_message",
    "engine_invocations",
    "estimate_wez_max_range",
    "expand_batch",
    "full_factorial",
    "latin_hypercube",
    "read_records",
    "resolve",
    "run_scenario",
    "runs_csv",
    "summarize",
    "summary_csv",
    "validate_scenario",
]


def _dump(value):
    return json.dumps(value, separators=(",", ":"))


def validate_scenario(scenario, extension_dirs=()):
    """List of {code, path, message} violations; empty when valid."""
    return json.loads(_core.validate_scenario(_dump(scenario), list(extension_dirs)))


def run_scenario(scenario, seed=None, run_id="run", extension_dirs=()):
    """Run to completion unpaced. Returns {status, reason, last_step, records, ...}."""
    return json.loads(_core.run_scenario(_dump(scenario), seed, run_id, list(extension_dirs)))


def canonical_log(records):
    return _core.canonical_log(_dump(records))


def resolve(template, binding):
    return json.loads(_core.resolve(_dump(template), _dump(binding)))


def full_factorial(factors):
    return json.loads(_core.full_factorial(_dump(factors)))


def latin_hypercube(n, ranges, seed):
    return json.loads(_core.latin_hypercube(n, _dump(ranges), seed))


def expand_batch(template, bindings, batch_seed, batch_id):
    return json.loads(_core.expand_batch(_dump(template), _dump(bindings), batch_seed, batch_id))


def read_records(data_root, run_id, attempt=None, from_step=0, to_step=2**64 - 1, tags=()):
    """Stored records of one run, read straight from a manager data root."""
    return json.loads(_core.read_records(str(data_root), run_id, attempt, from_step, to_step, set(tags)))


def compute_metric(records, spec):
    return json.loads(_core.compute_metric(_dump(records), _dump(spec)))


def summarize(values):
    return json.loads(_core.summarize(list(values)))


def aggregate(batch_id, rows):
    return json.loads(_core.aggregate(batch_id, _dump(rows)))


def runs_csv(batch_id, rows):
    return _core.runs_csv(batch_id, _dump(rows))


def summary_csv(batch_id, rows):
    return _core.summary_csv(batch_id, _dump(rows))


def estimate_wez_max_range(target_speed, aspect, **weapon):
    return _core.estimate_wez_max_range(target_speed, aspect, **weapon)


def encode_message(type_name, body):
    return _core.encode_message(type_name, _dump(body))


def decode_frame(data):
    """(status, (type, body) or None, consumed, detail)."""
    status, message, consumed, detail = _core.decode_frame(bytes(data))
    if message is not None:
        message = (message[0], json.loads(message[1]))
    return status, message, consumed, detail
