#!/usr/bin/env python3
"""Validate the shipped configs against the published JSON schemas."""
import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource

root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".").resolve()
schema_dir = root / "configs" / "schema"
schemas = {p.name: json.loads(p.read_text()) for p in schema_dir.glob("*.schema.json")}
registry = Registry().with_resources((name, Resource.from_contents(s)) for name, s in schemas.items())

failures = 0
for path in sorted((root / "configs").glob("*.json")):
    doc = json.loads(path.read_text())
    name = "plan.schema.json" if "stages" in doc else "runconfig.schema.json"
    validator = jsonschema.Draft202012Validator(schemas[name], registry=registry)
    errors = list(validator.iter_errors(doc))
    for e in errors:
        print(f"{path.name}: /{'/'.join(map(str, e.absolute_path))}: {e.message}")
    failures += bool(errors)
    print(f"{path.name}: {'ok' if not errors else 'INVALID'} ({name})")
sys.exit(1 if failures else 0)
