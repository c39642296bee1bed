"""Syntax-only build: parse every Java/C# source under the working directory.

Exits 1 and names the offending file when any source has a syntax error.
"""

from __future__ import annotations

import sys
from pathlib import Path

from .. import languages as lang
from ..errors import ParseError


def main(argv: list[str] | None = None) -> int:
    root = Path(argv[0]) if argv else Path.cwd()
    failed = 0
    for path in sorted(root.rglob("*")):
        rel = path.relative_to(root)
        if any(p.startswith(".") for p in rel.parts) or not path.is_file() or path.suffix not in lang.EXTENSIONS:
            continue
        try:
            lang.parse(path.read_text(encoding="utf-8"), lang.language_for_path(path))
        except ParseError as e:
            print(f"error: {rel}: {e}", file=sys.stderr)
            failed += 1
    print(f"build: {'FAILED' if failed else 'ok'}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
