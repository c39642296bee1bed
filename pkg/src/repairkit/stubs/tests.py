"""Declarative method tests for fixture repositories.

Reads ``repairkit-tests.json`` from the working directory: a list of
``{"name", "file", "method", "require": [...], "forbid": [...]}``. A test
passes when the named method exists in the file and its whitespace-collapsed
text contains every ``require`` fragment and no ``forbid`` fragment.
Optionally writes a JUnit XML report (``--junit PATH``).
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

from .. import languages as lang
from ..errors import ParseError

SPEC_FILE = "repairkit-tests.json"


def _squash(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def run_case(root: Path, case: dict) -> str | None:
    """None when the case passes, otherwise a failure message."""
    path = root / case["file"]
    if not path.is_file():
        return f"missing file {case['file']}"
    try:
        src = lang.parse(path.read_text(encoding="utf-8"), lang.language_for_path(path))
    except ParseError as e:
        return str(e)
    bodies = [_squash(src.node_text(m)) for m in lang.methods(src.root, src.language) if lang.name_of(m, src) == case["method"]]
    if not bodies:
        return f"method {case['method']} not found"
    body = bodies[0]
    for frag in case.get("require", []):
        if _squash(frag) not in body:
            return f"expected {frag!r}"
    for frag in case.get("forbid", []):
        if _squash(frag) in body:
            return f"unexpected {frag!r}"
    return None


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="repairkit.stubs.tests")
    parser.add_argument("--spec", type=Path, default=Path(SPEC_FILE))
    parser.add_argument("--junit", type=Path)
    args = parser.parse_args(argv)
    root = Path.cwd()
    cases = json.loads(args.spec.read_text(encoding="utf-8")) if args.spec.exists() else []
    suite = ET.Element("testsuite", name="repairkit", tests=str(len(cases)))
    failures = 0
    for case in cases:
        msg = run_case(root, case)
        tc = ET.SubElement(suite, "testcase", name=case["name"], classname=case["file"])
        if msg is None:
            print(f"PASS {case['name']}")
        else:
            failures += 1
            print(f"FAIL {case['name']}: {msg}")
            ET.SubElement(tc, "failure", message=msg)
    suite.set("failures", str(failures))
    if args.junit:
        args.junit.parent.mkdir(parents=True, exist_ok=True)
        ET.ElementTree(suite).write(args.junit, encoding="utf-8", xml_declaration=True)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
