import json
import pathlib

import jsonschema
import pytest
from referencing import Registry, Resource

ROOT = pathlib.Path(__file__).resolve().parents[2]
SCHEMAS = {p.name: json.loads(p.read_text()) for p in (ROOT / "docs" / "schemas").glob("*.schema.json")}
REGISTRY = Registry().with_resources(
    (s["$id"], Resource.from_contents(s)) for s in SCHEMAS.values()
)


def check(schema, doc):
    jsonschema.Draft202012Validator(SCHEMAS[schema], registry=REGISTRY).validate(doc)


def fixture(name):
    return json.loads((ROOT / "tests" / "fixtures" / name).read_text())


@pytest.mark.parametrize("name", ["three_agent.json", "reference_2v1.json"])
def test_fixture_scenarios_match(name):
    check("scenario.schema.json", fixture(name))


def test_template_and_batch_forms_match():
    check("template.schema.json", fixture("sweep_template.json"))
    check("batch.schema.json", {"template_id": "t", "bindings": [{"a": 1, "b": "x"}], "batch_seed": 3})
    check("batch.schema.json", {"template_id": "t", "factorial": {"a": [1, 2]}})
    check("batch.schema.json", {"template_id": "t", "lhs": {"n": 4, "ranges": {"a": [0, 1]}, "seed": 9}})
    check("metrics.schema.json", [
        {"name": "hits", "reducer": "count_by_tag", "tag": "hit"},
        {"name": "v", "reducer": "final_value", "agent_id": "bravo", "key": "speed"},
        {"name": "alive", "reducer": "survival_count", "side": "BLUE"},
    ])


def test_schemas_reject_what_the_parser_rejects():
    with pytest.raises(jsonschema.ValidationError):
        check("scenario.schema.json", {"name": "x", "sim": {"max_steps": 0}})
    with pytest.raises(jsonschema.ValidationError):
        check("batch.schema.json", {"template_id": "t", "bindings": [], "factorial": {"a": [1]}})
    with pytest.raises(jsonschema.ValidationError):
        check("metrics.schema.json", [{"name": "m", "reducer": "final_value", "tag": "x"}])
