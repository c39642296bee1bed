"""Tree-sitter grammars and small syntax-tree helpers for Java and C#."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import PurePath
from typing import Iterator

import tree_sitter_c_sharp
import tree_sitter_java
from tree_sitter import Language, Node, Parser, Tree

from .errors import ParseError

JAVA = "java"
CSHARP = "csharp"

EXTENSIONS = {".java": JAVA, ".cs": CSHARP}
DISPLAY_NAMES = {JAVA: "Java", CSHARP: "C#"}

METHOD_TYPES = {
    JAVA: frozenset({"method_declaration", "constructor_declaration"}),
    CSHARP: frozenset(
        {"method_declaration", "constructor_declaration", "local_function_statement"}
    ),
}
CLASS_TYPES = {
    JAVA: frozenset(
        {
            "class_declaration",
            "interface_declaration",
            "enum_declaration",
            "record_declaration",
            "annotation_type_declaration",
        }
    ),
    CSHARP: frozenset(
        {
            "class_declaration",
            "interface_declaration",
            "struct_declaration",
            "enum_declaration",
            "record_declaration",
        }
    ),
}
COMMENT_TYPES = frozenset({"comment", "line_comment", "block_comment"})


@lru_cache(maxsize=None)
def _language(name: str) -> Language:
    if name == JAVA:
        return Language(tree_sitter_java.language())
    if name == CSHARP:
        return Language(tree_sitter_c_sharp.language())
    raise ValueError(f"unsupported language: {name!r}")


def language_for_path(path: str | PurePath, default: str = JAVA) -> str:
    return EXTENSIONS.get(PurePath(path).suffix.lower(), default)


def display_name(language: str) -> str:
    return DISPLAY_NAMES.get(language, language)


@dataclass
class Source:
    """Source text with its parsed tree and byte/char offset conversion."""

    text: str
    data: bytes
    tree: Tree
    language: str

    @property
    def root(self) -> Node:
        return self.tree.root_node

    def node_text(self, node: Node) -> str:
        return self.data[node.start_byte : node.end_byte].decode("utf-8")

    def char_offset(self, byte_offset: int) -> int:
        if len(self.data) == len(self.text):
            return byte_offset
        return len(self.data[:byte_offset].decode("utf-8"))


def parse(text: str, language: str = JAVA, *, strict: bool = True) -> Source:
    """Parse ``text``; with ``strict`` a tree containing error nodes raises ParseError."""
    data = text.encode("utf-8")
    # one parser per call; tree-sitter parsers are not thread safe
    tree = Parser(_language(language)).parse(data)
    if strict and tree.root_node.has_error:
        line = _first_error_line(tree.root_node)
        raise ParseError(f"{display_name(language)} source does not parse (near line {line})")
    return Source(text=text, data=data, tree=tree, language=language)


def _first_error_line(node: Node) -> int:
    for n in walk(node):
        if n.type == "ERROR" or n.is_missing:
            return n.start_point[0] + 1
    return node.start_point[0] + 1


def walk(node: Node) -> Iterator[Node]:
    """Pre-order traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


def walk_with_fields(node: Node, field: str | None = None) -> Iterator[tuple[Node, str | None]]:
    """Pre-order traversal yielding each node with the field name it occupies in its parent."""
    stack: list[tuple[Node, str | None]] = [(node, field)]
    while stack:
        n, f = stack.pop()
        yield n, f
        kids = [(c, n.field_name_for_child(i)) for i, c in enumerate(n.children)]
        stack.extend(reversed(kids))


def is_method(node: Node, language: str) -> bool:
    return node.type in METHOD_TYPES[language]


def is_class(node: Node, language: str) -> bool:
    return node.type in CLASS_TYPES[language]


def methods(root: Node, language: str) -> list[Node]:
    return [n for n in walk(root) if is_method(n, language)]


def name_of(node: Node, src: Source) -> str:
    name = node.child_by_field_name("name")
    return src.node_text(name) if name is not None else ""


def enclosing_classes(node: Node, language: str) -> list[Node]:
    """Class-like ancestors of ``node``, outermost first."""
    out = []
    p = node.parent
    while p is not None:
        if is_class(p, language):
            out.append(p)
        p = p.parent
    return out[::-1]


def body_of(node: Node) -> Node | None:
    return node.child_by_field_name("body")
