"""Buggy-method extraction, sentinel markers, focal methods and eWASH-style file context."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from tree_sitter import Node

from . import languages as lang
from .errors import EmptyDiff, NoEnclosingMethod, ParseError, SpanOutOfRange

START_BUG = "<START_BUG>"
END_BUG = "<END_BUG>"

FOCAL_METHOD = "focal_method"
CLASS_SIGNATURE = "class_signature"
CLASS_FIELD = "class_field"
IMPORT = "import"
DOCSTRING = "docstring"
PEER_METHOD_SIGNATURE = "peer_method_signature"
GLOBAL_EXPRESSION = "global_expression"
PEER_METHOD_FULL = "peer_method_full"

# lower keeps first
KIND_RANK = {
    FOCAL_METHOD: 1,
    CLASS_SIGNATURE: 2,
    CLASS_FIELD: 3,
    IMPORT: 4,
    DOCSTRING: 5,
    PEER_METHOD_SIGNATURE: 6,
    GLOBAL_EXPRESSION: 7,
    PEER_METHOD_FULL: 8,
}

_IMPORT_TYPES = frozenset({"import_declaration", "using_directive"})
_FIELD_TYPES = frozenset(
    {"field_declaration", "constant_declaration", "property_declaration", "event_field_declaration"}
)
_GLOBAL_TYPES = frozenset({"static_initializer", "block", "global_statement"})


@dataclass(frozen=True)
class MethodSpan:
    """A method declaration located in a source file.

    ``body_text`` is the exact file slice ``file_text[start_offset:end_offset]``; it
    starts at the beginning of the declaration's first line when only indentation
    precedes the declaration. Lines are 1-based file lines.
    """

    name: str
    signature_text: str
    body_text: str
    start_line: int
    end_line: int
    enclosing_class_name: str
    start_offset: int
    end_offset: int
    docstring: str | None = None
    docstring_offset: int | None = None

    def contains_line(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line

    def method_line(self, file_line: int) -> int:
        """Map a file line number into 1-based method coordinates."""
        return file_line - self.start_line + 1

    def full_text(self, file_text: str) -> str:
        """Docstring through end of body, as it appears in the file."""
        start = self.docstring_offset if self.docstring_offset is not None else self.start_offset
        return file_text[start : self.end_offset]


@dataclass(frozen=True)
class MarkedMethod:
    text_with_markers: str
    marked_span: tuple[int, int]
    marker_open: str = START_BUG
    marker_close: str = END_BUG

    def strip(self) -> str:
        return strip_markers(self.text_with_markers)


@dataclass(frozen=True)
class ContextElement:
    kind: str
    text: str
    priority_rank: int
    offset: int

    @property
    def kind_rank(self) -> int:
        return KIND_RANK[self.kind]


# -- method location ---------------------------------------------------------


def _line_start(text: str, offset: int) -> int:
    return text.rfind("\n", 0, offset) + 1


def _doc_comment(src: lang.Source, node: Node) -> tuple[str, int] | None:
    """Doc comment directly preceding ``node`` as (text, char offset)."""
    docs: list[Node] = []
    anchor = node
    sib = node.prev_sibling
    while sib is not None and sib.type in lang.COMMENT_TYPES:
        if src.data[sib.end_byte : anchor.start_byte].strip():
            break
        body = src.node_text(sib)
        if src.language == lang.JAVA:
            if body.startswith("/**"):
                docs.append(sib)
            break
        if not body.startswith("///"):
            break
        docs.append(sib)
        anchor = sib
        sib = sib.prev_sibling
    if not docs:
        return None
    start = src.char_offset(docs[-1].start_byte)
    end = src.char_offset(docs[0].end_byte)
    return src.text[start:end], start


def _span(src: lang.Source, node: Node) -> MethodSpan:
    text = src.text
    node_start = src.char_offset(node.start_byte)
    end = src.char_offset(node.end_byte)
    ls = _line_start(text, node_start)
    start = ls if not text[ls:node_start].strip() else node_start
    body = lang.body_of(node)
    if body is not None:
        signature = text[node_start : src.char_offset(body.start_byte)].rstrip()
    else:
        signature = text[node_start:end].rstrip().rstrip(";").rstrip()
    classes = lang.enclosing_classes(node, src.language)
    doc = _doc_comment(src, node)
    return MethodSpan(
        name=lang.name_of(node, src),
        signature_text=signature,
        body_text=text[start:end],
        start_line=node.start_point[0] + 1,
        end_line=node.end_point[0] + 1,
        enclosing_class_name=lang.name_of(classes[-1], src) if classes else "",
        start_offset=start,
        end_offset=end,
        docstring=doc[0] if doc else None,
        docstring_offset=doc[1] if doc else None,
    )


def list_methods(file_text: str, language: str = lang.JAVA) -> list[MethodSpan]:
    src = lang.parse(file_text, language)
    return [_span(src, n) for n in lang.methods(src.root, language)]


def _method_node_at(src: lang.Source, line: int) -> Node:
    best = None
    for n in lang.methods(src.root, src.language):
        if n.start_point[0] + 1 <= line <= n.end_point[0] + 1:
            if best is None or n.end_byte - n.start_byte < best.end_byte - best.start_byte:
                best = n
    if best is None:
        raise NoEnclosingMethod(f"line {line} is not inside any method")
    return best


def locate_buggy_method(file_text: str, bug_line: int, language: str = lang.JAVA) -> MethodSpan:
    """Innermost method declaration whose line span contains ``bug_line``."""
    src = lang.parse(file_text, language)
    return _span(src, _method_node_at(src, bug_line))


_SIGNATURE_LINE = re.compile(
    r"^\s*(?:[@\w<>\[\],.?]+\s+)+(?P<name>[A-Za-z_$][\w$]*)\s*\([^;]*$"
)


def locate_method_heuristic(file_text: str, bug_line: int) -> MethodSpan:
    """Line-based fallback for files the grammar rejects.

    Scans upward from ``bug_line`` for a declaration-shaped line and matches
    braces forward from it. Used by the miner only.
    """
    lines = file_text.splitlines(keepends=True)
    if not 1 <= bug_line <= len(lines):
        raise NoEnclosingMethod(f"line {bug_line} is outside the file")
    starts = [0]
    for ln in lines:
        starts.append(starts[-1] + len(ln))
    for first in range(bug_line - 1, -1, -1):
        m = _SIGNATURE_LINE.match(lines[first])
        if not m or m.group("name") in {"if", "for", "while", "switch", "catch", "return", "new"}:
            continue
        depth, opened = 0, False
        for last in range(first, len(lines)):
            code = re.sub(r'"(?:\\.|[^"\\])*"', '""', lines[last])
            depth += code.count("{") - code.count("}")
            opened = opened or "{" in code
            if opened and depth <= 0:
                break
        else:
            continue
        if last + 1 < bug_line:
            continue
        body = "".join(lines[first : last + 1]).rstrip("\n")
        brace = body.find("{")
        return MethodSpan(
            name=m.group("name"),
            signature_text=body[:brace].strip(),
            body_text=body,
            start_line=first + 1,
            end_line=last + 1,
            enclosing_class_name="",
            start_offset=starts[first],
            end_offset=starts[first] + len(body),
        )
    raise NoEnclosingMethod(f"line {bug_line} is not inside any method")


# -- bug span and markers ----------------------------------------------------


def diff_hunks(a_text: str, b_text: str) -> list[tuple[str, int, int, int, int]]:
    """Non-equal line opcodes between two texts (0-based, half-open ranges)."""
    a = a_text.splitlines()
    b = b_text.splitlines()
    sm = difflib.SequenceMatcher(a=a, b=b, autojunk=False)
    return [op for op in sm.get_opcodes() if op[0] != "equal"]


def refine_bug_span(buggy_method_text: str, fixed_method_text: str) -> tuple[int, int]:
    """Smallest 1-based line range of the buggy text covering every diff hunk.

    A pure insertion between lines k and k+1 covers both neighbours.
    """
    hunks = diff_hunks(buggy_method_text, fixed_method_text)
    if not hunks:
        raise EmptyDiff("buggy and fixed method texts are identical")
    n = max(1, len(buggy_method_text.splitlines()))
    lo, hi = n, 1
    for _, i1, i2, _, _ in hunks:
        if i1 == i2:
            first, last = i1, i1 + 1
        else:
            first, last = i1 + 1, i2
        lo = min(lo, max(1, first))
        hi = max(hi, min(n, last))
    return lo, hi


def insert_markers(method: MethodSpan | str, span: tuple[int, int]) -> MarkedMethod:
    """Put ``<START_BUG>``/``<END_BUG>`` on their own lines around method lines ``span``."""
    text = method.body_text if isinstance(method, MethodSpan) else method
    first, last = span
    lines = text.splitlines(keepends=True)
    if not 1 <= first <= last <= len(lines):
        raise SpanOutOfRange(f"span {span} outside method lines 1..{len(lines)}")
    if START_BUG in text or END_BUG in text:
        raise ValueError("method text already contains bug markers")
    indent = re.match(r"[ \t]*", lines[first - 1]).group(0)
    out = lines[: first - 1] + [f"{indent}{START_BUG}\n"] + lines[first - 1 : last]
    if out[-1].endswith(("\n", "\r")):
        out.append(f"{indent}{END_BUG}\n")
    else:
        out[-1] += "\n"
        out.append(f"{indent}{END_BUG}")
    out.extend(lines[last:])
    return MarkedMethod(text_with_markers="".join(out), marked_span=(first, last))


def strip_markers(text: str | MarkedMethod) -> str:
    """Remove sentinel marker lines (and any inline leftovers)."""
    if isinstance(text, MarkedMethod):
        text = text.text_with_markers
    lines = text.splitlines(keepends=True)
    out: list[str] = []
    for i, line in enumerate(lines):
        if line.strip() in (START_BUG, END_BUG):
            if i == len(lines) - 1 and not line.endswith(("\n", "\r")) and out:
                out[-1] = out[-1][:-1] if out[-1].endswith("\n") else out[-1]
            continue
        out.append(line)
    return "".join(out).replace(START_BUG, "").replace(END_BUG, "")


# -- focal methods and file context ------------------------------------------


def resolve_focal_methods(
    bug_trace: Iterable,
    file_text: str,
    buggy: MethodSpan | None = None,
    language: str = lang.JAVA,
    file: str | None = None,
) -> list[MethodSpan]:
    """In-file methods named by trace steps, in trace order, without duplicates.

    Steps whose ``file`` differs from ``file`` (when given) are skipped, as is
    the buggy method itself.
    """
    spans = list_methods(file_text, language)
    by_name: dict[str, MethodSpan] = {}
    for s in spans:
        by_name.setdefault(s.name, s)
    out: list[MethodSpan] = []
    seen: set[int] = set()
    for step in bug_trace:
        if file is not None and getattr(step, "file", file) not in (file, ""):
            continue
        name = _simple_name(step.procedure)
        span = by_name.get(name)
        if span is None or span.start_offset in seen:
            continue
        if buggy is not None and span.start_offset == buggy.start_offset:
            continue
        seen.add(span.start_offset)
        out.append(span)
    return out


def _simple_name(procedure: str) -> str:
    head = procedure.split("(", 1)[0]
    return re.split(r"[.:]", head)[-1].strip() if head else ""


def _find_method_node(src: lang.Source, span: MethodSpan) -> Node:
    for n in lang.methods(src.root, src.language):
        if src.char_offset(n.end_byte) == span.end_offset and span.start_line == n.start_point[0] + 1:
            return n
    raise NoEnclosingMethod(f"method {span.name!r} not found in file")


def extract_ewash_context(
    file_text: str,
    buggy: MethodSpan,
    focal: Sequence[MethodSpan] = (),
    language: str = lang.JAVA,
) -> list[ContextElement]:
    """Syntactic context around the buggy method, ordered by keep-priority.

    Elements are sorted by kind (see ``KIND_RANK``) and then file position;
    ``priority_rank`` is the 1-based position in that order.
    """
    src = lang.parse(file_text, language)
    text = src.text
    node = _find_method_node(src, buggy)
    classes = lang.enclosing_classes(node, language)
    focal_starts = {f.start_offset for f in focal}
    raw: list[tuple[str, str, int]] = []

    def add(kind: str, n: Node) -> None:
        start = src.char_offset(n.start_byte)
        raw.append((kind, text[start : src.char_offset(n.end_byte)], start))

    for n in lang.walk(src.root):
        if n.type in _IMPORT_TYPES:
            add(IMPORT, n)
    for n in src.root.children:
        if n.type == "global_statement" and not any(lang.is_method(c, language) for c in n.children):
            add(GLOBAL_EXPRESSION, n)

    for cls in classes:
        body = lang.body_of(cls)
        start = src.char_offset(cls.start_byte)
        end = src.char_offset(body.start_byte) if body is not None else src.char_offset(cls.end_byte)
        raw.append((CLASS_SIGNATURE, text[start:end].rstrip(), start))
        doc = _doc_comment(src, cls)
        if doc:
            raw.append((DOCSTRING, doc[0], doc[1]))
        if body is None:
            continue
        for member in body.children:
            if member.type in _FIELD_TYPES:
                add(CLASS_FIELD, member)
            elif member.type in _GLOBAL_TYPES and member.type != "global_statement":
                add(GLOBAL_EXPRESSION, member)
            elif lang.is_method(member, language):
                span = _span(src, member)
                if span.start_offset == buggy.start_offset or span.start_offset in focal_starts:
                    continue
                raw.append((PEER_METHOD_SIGNATURE, span.signature_text, src.char_offset(member.start_byte)))
                contains_buggy = member.start_byte <= node.start_byte and node.end_byte <= member.end_byte
                if not contains_buggy:
                    add(PEER_METHOD_FULL, member)

    for f in focal:
        start = f.docstring_offset if f.docstring_offset is not None else f.start_offset
        raw.append((FOCAL_METHOD, f.full_text(text), start))

    raw.sort(key=lambda r: (KIND_RANK[r[0]], r[2]))
    return [ContextElement(kind=k, text=t, priority_rank=i + 1, offset=o) for i, (k, t, o) in enumerate(raw)]


__all__ = [
    "START_BUG",
    "END_BUG",
    "KIND_RANK",
    "MethodSpan",
    "MarkedMethod",
    "ContextElement",
    "ParseError",
    "list_methods",
    "locate_buggy_method",
    "locate_method_heuristic",
    "refine_bug_span",
    "insert_markers",
    "strip_markers",
    "resolve_focal_methods",
    "extract_ewash_context",
    "diff_hunks",
]
