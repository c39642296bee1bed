"""Pattern-based stand-in for the Infer command line.

    python -m repairkit.stubs.infer capture --results-dir DIR -- BUILD...
    python -m repairkit.stubs.infer analyze --results-dir DIR --changed-files-index FILE

``capture`` runs the build and snapshots the Java/C# sources into ``DIR``;
``analyze`` checks the snapshot of each listed file and writes
``DIR/report.json`` in Infer's schema. The checks are deliberately narrow:

* NULL_DEREFERENCE: a local assigned from an in-file method that can
  ``return null`` and then dereferenced with no null comparison in between,
  or a direct call chain on such a method.
* RESOURCE_LEAK: a local bound to ``new`` of a known closeable type that is
  not closed, or that escapes through a ``return`` before it is closed.
* THREAD_SAFETY_VIOLATION: in a class marked ``ThreadSafe``, a non-private,
  unsynchronized method writing a field.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
from pathlib import Path

from tree_sitter import Node

from .. import languages as lang
from ..analyzer import (
    NULL_DEREFERENCE,
    RESOURCE_LEAK,
    THREAD_SAFETY_VIOLATION,
    BugReport,
    TraceStep,
)

RESOURCE_TYPES = frozenset(
    """
    FileInputStream FileOutputStream FileReader FileWriter BufferedReader BufferedWriter
    InputStreamReader OutputStreamWriter PrintWriter Scanner Socket ServerSocket ZipFile
    RandomAccessFile JarFile StreamReader StreamWriter FileStream BinaryReader BinaryWriter
    TcpClient
    """.split()
)
RELEASE_METHODS = frozenset({"close", "Close", "Dispose", "closeQuietly"})
CAPTURE_DIR = "captured"

_INVOCATION = {"method_invocation", "invocation_expression"}
_MEMBER = {"field_access", "member_access_expression"}
_ASSIGN_DECL = {"variable_declarator"}


class _File:
    def __init__(self, rel: str, text: str):
        self.rel = rel
        self.language = lang.language_for_path(rel)
        self.src = lang.parse(text, self.language, strict=False)
        self.package = self._package()

    def text(self, node: Node) -> str:
        return self.src.node_text(node)

    def _package(self) -> str:
        for n in self.src.root.children:
            if n.type in ("package_declaration", "namespace_declaration", "file_scoped_namespace_declaration"):
                for c in n.children:
                    if c.type in ("scoped_identifier", "identifier", "qualified_name"):
                        return self.text(c)
        return ""

    def procedure(self, method: Node) -> str:
        classes = [lang.name_of(c, self.src) for c in lang.enclosing_classes(method, self.language)]
        params = method.child_by_field_name("parameters")
        types = []
        if params is not None:
            for p in params.named_children:
                t = p.child_by_field_name("type")
                if t is not None:
                    types.append(self.text(t))
        owner = ".".join(x for x in [self.package, *classes] if x)
        return f"{owner}.{lang.name_of(method, self.src)}({','.join(types)})"


def _line(node: Node) -> int:
    return node.start_point[0] + 1


def _own_nodes(method: Node, language: str):
    """Nodes of ``method`` excluding nested method declarations."""
    stack = list(reversed(method.children))
    while stack:
        n = stack.pop()
        if lang.is_method(n, language):
            continue
        yield n
        stack.extend(reversed(n.children))


def _callee(node: Node, f: _File) -> tuple[str, Node | None]:
    """(method name, receiver) of an invocation node."""
    if node.type == "method_invocation":
        name = node.child_by_field_name("name")
        return (f.text(name) if name else ""), node.child_by_field_name("object")
    fn = node.child_by_field_name("function")
    if fn is None:
        return "", None
    if fn.type == "member_access_expression":
        name = fn.child_by_field_name("name")
        return (f.text(name) if name else ""), fn.child_by_field_name("expression")
    return f.text(fn), None


def _receiver(node: Node) -> Node | None:
    if node.type == "method_invocation":
        return node.child_by_field_name("object")
    if node.type == "field_access":
        return node.child_by_field_name("object")
    if node.type == "member_access_expression":
        return node.child_by_field_name("expression")
    return None


def _is_null(node: Node) -> bool:
    return node.type == "null_literal" or (node.type == "literal" and node.text == b"null")


def _nullable_methods(f: _File) -> dict[str, int]:
    out = {}
    for m in lang.methods(f.src.root, f.language):
        for n in _own_nodes(m, f.language):
            if n.type == "return_statement" and any(_is_null(c) for c in n.named_children):
                out.setdefault(lang.name_of(m, f.src), _line(n))
                break
    return out


def _assigned_call(n: Node, f: _File) -> tuple[str, Node] | None:
    """For ``v = call(...)`` declarations/assignments: (variable name, call node)."""
    if n.type == "variable_declarator":
        name = n.child_by_field_name("name")
        value = n.child_by_field_name("value")
        if value is None:
            value = next((c for c in n.named_children if name is not None and c.start_byte > name.start_byte), None)
        if name is not None and value is not None:
            return f.text(name), value
    if n.type == "assignment_expression":
        left, right = n.child_by_field_name("left"), n.child_by_field_name("right")
        if left is not None and right is not None and left.type == "identifier":
            return f.text(left), right
    return None


def _null_checked(method: Node, f: _File, var: str, lo: int, hi: int) -> bool:
    for n in _own_nodes(method, f.language):
        if n.type == "binary_expression" and lo <= n.start_byte < hi:
            kids = n.named_children
            op = n.child_by_field_name("operator")
            op_text = f.text(op) if op is not None else f.text(n)
            if any(_is_null(k) for k in kids) and any(k.type == "identifier" and f.text(k) == var for k in kids):
                if "==" in op_text or "!=" in op_text:
                    return True
    return False


def _null_dereferences(f: _File) -> list[BugReport]:
    nullable = _nullable_methods(f)
    bugs = []
    for m in lang.methods(f.src.root, f.language):
        if m.child_by_field_name("body") is None:
            continue
        proc = f.procedure(m)
        nodes = list(_own_nodes(m, f.language))
        reported: set[str] = set()
        for n in nodes:
            bound = _assigned_call(n, f)
            if bound is not None:
                var, value = bound
                if value.type not in _INVOCATION:
                    continue
                callee, recv = _callee(value, f)
                if callee not in nullable or (recv is not None and recv.type not in ("this",)):
                    continue
                for d in nodes:
                    if d.start_byte <= value.end_byte or d.type not in _INVOCATION | _MEMBER:
                        continue
                    r = _receiver(d)
                    if r is None or r.type != "identifier" or f.text(r) != var or var in reported:
                        continue
                    if _null_checked(m, f, var, value.end_byte, d.start_byte):
                        break
                    reported.add(var)
                    a, line = _line(value), _line(d)
                    bugs.append(
                        BugReport(
                            bug_type=NULL_DEREFERENCE,
                            file=f.rel,
                            line=line,
                            procedure=proc,
                            qualifier=f"object `{var}` last assigned on line {a} could be null "
                            f"and is dereferenced at line {line}.",
                            bug_trace=(
                                TraceStep(f.rel, a, callee, f"start of procedure {callee}(...)"),
                                TraceStep(f.rel, nullable[callee], callee, "return null"),
                                TraceStep(f.rel, line, lang.name_of(m, f.src), f"dereference of `{var}`"),
                            ),
                        )
                    )
                    break
            elif n.type in _INVOCATION | _MEMBER:
                r = _receiver(n)
                if r is None or r.type not in _INVOCATION:
                    continue
                callee, recv = _callee(r, f)
                if callee in nullable and (recv is None or recv.type == "this") and callee not in reported:
                    reported.add(callee)
                    line = _line(n)
                    bugs.append(
                        BugReport(
                            bug_type=NULL_DEREFERENCE,
                            file=f.rel,
                            line=line,
                            procedure=proc,
                            qualifier=f"object returned by `{callee}(...)` could be null "
                            f"and is dereferenced at line {line}.",
                            bug_trace=(
                                TraceStep(f.rel, line, callee, f"start of procedure {callee}(...)"),
                                TraceStep(f.rel, nullable[callee], callee, "return null"),
                            ),
                        )
                    )
    return bugs


def _block_of(node: Node) -> Node | None:
    p = node.parent
    while p is not None and p.type != "block":
        p = p.parent
    return p


def _is_ancestor(a: Node, b: Node) -> bool:
    p = b
    while p is not None:
        if p.start_byte == a.start_byte and p.end_byte == a.end_byte and p.type == a.type:
            return True
        p = p.parent
    return False


def _in_finally(node: Node) -> bool:
    p = node.parent
    while p is not None:
        if p.type == "finally_clause":
            return True
        p = p.parent
    return False


def _managed(n: Node) -> bool:
    """Allocation owned by try-with-resources / using."""
    p = n.parent
    while p is not None:
        if p.type in ("resource", "resource_specification", "using_statement"):
            return True
        if p.type == "local_declaration_statement" and any(c.type == "using" for c in p.children):
            return True
        if p.type in ("block", "method_declaration"):
            return False
        p = p.parent
    return False


def _resource_leaks(f: _File) -> list[BugReport]:
    bugs = []
    for m in lang.methods(f.src.root, f.language):
        if m.child_by_field_name("body") is None:
            continue
        nodes = list(_own_nodes(m, f.language))
        for n in nodes:
            bound = _assigned_call(n, f)
            if bound is None:
                continue
            var, value = bound
            if value.type != "object_creation_expression" or _managed(n):
                continue
            t = value.child_by_field_name("type")
            type_name = f.text(t).split("<")[0].split(".")[-1] if t is not None else ""
            if type_name not in RESOURCE_TYPES:
                continue
            releases, returns = [], []
            for d in nodes:
                if d.start_byte <= value.end_byte:
                    continue
                if d.type in _INVOCATION:
                    callee, recv = _callee(d, f)
                    args = d.child_by_field_name("arguments")
                    arg_vars = {f.text(a) for a in (args.named_children if args else [])}
                    arg_vars |= {f.text(c) for a in (args.named_children if args else []) for c in a.named_children}
                    if callee in RELEASE_METHODS and (
                        (recv is not None and f.text(recv) == var) or var in arg_vars
                    ):
                        releases.append(d)
                if d.type == "return_statement":
                    if any(c.type == "identifier" and f.text(c) == var for c in d.named_children):
                        releases.append(d)
                    else:
                        returns.append(d)
            escape = None
            if not releases:
                escape = m.end_point[0] + 1
            elif not any(_in_finally(r) for r in releases):
                for r in returns:
                    safe = any(
                        rel.start_byte < r.start_byte and (blk := _block_of(rel)) is not None and _is_ancestor(blk, r)
                        for rel in releases
                    )
                    if not safe:
                        escape = _line(r)
                        break
            if escape is None:
                continue
            a = _line(value)
            bugs.append(
                BugReport(
                    bug_type=RESOURCE_LEAK,
                    file=f.rel,
                    line=a,
                    procedure=f.procedure(m),
                    qualifier=f"resource of type `{type_name}` acquired by call to `new()` at line {a} "
                    f"is not released after line {escape}.",
                    bug_trace=(TraceStep(f.rel, a, lang.name_of(m, f.src), f"allocation of `{type_name}`"),),
                )
            )
    return bugs


def _modifiers_text(method: Node, f: _File) -> str:
    return " ".join(f.text(c) for c in method.children if c.type in ("modifiers", "modifier"))


def _thread_safety(f: _File) -> list[BugReport]:
    bugs = []
    for cls in lang.walk(f.src.root):
        if not lang.is_class(cls, f.language):
            continue
        head = f.src.data[cls.start_byte : cls.child_by_field_name("name").start_byte].decode()
        if "ThreadSafe" not in head:
            continue
        body = lang.body_of(cls)
        if body is None:
            continue
        fields: set[str] = set()
        for member in body.children:
            if member.type == "field_declaration":
                for d in lang.walk(member):
                    if d.type == "variable_declarator":
                        name = d.child_by_field_name("name")
                        if name is not None:
                            fields.add(f.text(name))
        cname = lang.name_of(cls, f.src)
        for member in body.children:
            if member.type != "method_declaration":
                continue
            mods = _modifiers_text(member, f)
            if "synchronized" in mods.split() or "private" in mods.split():
                continue
            for n in _own_nodes(member, f.language):
                if n.type != "assignment_expression":
                    continue
                left = n.child_by_field_name("left")
                if left is None:
                    continue
                if left.type in _MEMBER:
                    target = left.child_by_field_name("field") or left.child_by_field_name("name")
                    recv = _receiver(left)
                    if recv is not None and recv.type != "this":
                        continue
                else:
                    target = left if left.type == "identifier" else None
                if target is None or f.text(target) not in fields:
                    continue
                p, guarded = n.parent, False
                while p is not None and p != member:
                    if p.type in ("synchronized_statement", "lock_statement"):
                        guarded = True
                        break
                    p = p.parent
                if guarded:
                    continue
                mname = lang.name_of(member, f.src)
                field_name = f.text(target)
                bugs.append(
                    BugReport(
                        bug_type=THREAD_SAFETY_VIOLATION,
                        file=f.rel,
                        line=_line(n),
                        procedure=f.procedure(member),
                        qualifier=f"Unprotected write. Non-private method `{cname}.{mname}(...)` writes to field "
                        f"`this.{field_name}` outside of synchronization. Reporting because the current class "
                        f"is annotated `@ThreadSafe`.",
                        bug_trace=(TraceStep(f.rel, _line(n), mname, f"access to `this.{field_name}`"),),
                    )
                )
                break
    return bugs


def analyze_source(rel: str, text: str) -> list[BugReport]:
    f = _File(rel, text)
    bugs = _null_dereferences(f) + _resource_leaks(f) + _thread_safety(f)
    return sorted(bugs, key=lambda b: (b.line, b.bug_type))


def _sources(root: Path) -> list[Path]:
    out = []
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if any(part.startswith(".") for part in rel.parts):
            continue
        if p.is_file() and p.suffix in lang.EXTENSIONS:
            out.append(p)
    return out


def cmd_capture(results: Path, build: list[str]) -> int:
    if build:
        try:
            code = subprocess.run(build).returncode
        except FileNotFoundError:
            print(f"capture: cannot execute build command {build[0]!r}", file=sys.stderr)
            return 127
        if code != 0:
            print(f"capture: build command failed with exit code {code}", file=sys.stderr)
            return code
    snap = results / CAPTURE_DIR
    if snap.exists():
        shutil.rmtree(snap)
    root = Path.cwd()
    for p in _sources(root):
        dest = snap / p.relative_to(root)
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(p, dest)
    with open(results / "captures.log", "a", encoding="utf-8") as fh:
        fh.write(f"{root}\n")
    return 0


def cmd_analyze(results: Path, index_file: Path) -> int:
    snap = results / CAPTURE_DIR
    if not snap.is_dir():
        print("analyze: nothing captured", file=sys.stderr)
        return 1
    files = [ln.strip() for ln in index_file.read_text(encoding="utf-8").splitlines() if ln.strip()]
    bugs: list[BugReport] = []
    for rel in files:
        path = snap / rel
        if path.is_file() and path.suffix in lang.EXTENSIONS:
            bugs.extend(analyze_source(rel, path.read_text(encoding="utf-8")))
    (results / "report.json").write_text(
        json.dumps([b.to_json() for b in bugs], indent=2, ensure_ascii=False), encoding="utf-8"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    build: list[str] = []
    if "--" in argv:
        i = argv.index("--")
        argv, build = argv[:i], argv[i + 1 :]
    parser = argparse.ArgumentParser(prog="repairkit.stubs.infer")
    sub = parser.add_subparsers(dest="command", required=True)
    cap = sub.add_parser("capture")
    cap.add_argument("--results-dir", type=Path, default=Path("infer-out"))
    an = sub.add_parser("analyze")
    an.add_argument("--results-dir", type=Path, default=Path("infer-out"))
    an.add_argument("--changed-files-index", type=Path, required=True)
    args = parser.parse_args(argv)
    args.results_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "capture":
        return cmd_capture(args.results_dir, build)
    return cmd_analyze(args.results_dir, args.changed_files_index)


if __name__ == "__main__":
    sys.exit(main())
