"""Mask class, method and variable names with numbered placeholders.

Names are numbered per category in order of first occurrence, so snippets that
differ only by a consistent renaming obfuscate to the same text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from tree_sitter import Node

from . import languages as lang
from .errors import ParseError

CLASS = "CLASS"
METHOD = "METHOD"
VAR = "VAR"
KEEP = "KEEP"

PLACEHOLDER = re.compile(r"^(CLASS|METHOD|VAR)_\d+$")

# standard-library type names left as-is
STDLIB_TYPES = frozenset(
    """
    Object String StringBuilder StringBuffer Integer Long Short Byte Double Float Boolean
    Character Number Math System Thread Runnable Iterable Iterator Comparable Class Void
    Exception RuntimeException Error Throwable IllegalArgumentException IllegalStateException
    NullPointerException IndexOutOfBoundsException UnsupportedOperationException
    InterruptedException IOException FileNotFoundException UncheckedIOException
    List ArrayList LinkedList Map HashMap LinkedHashMap TreeMap Set HashSet LinkedHashSet TreeSet
    Collection Collections Arrays Optional Objects Queue Deque ArrayDeque Stream Collectors
    File Files Path Paths InputStream OutputStream Reader Writer BufferedReader BufferedWriter
    FileReader FileWriter FileInputStream FileOutputStream InputStreamReader OutputStreamWriter
    PrintStream PrintWriter Scanner Closeable AutoCloseable Socket URL URI
    Override Deprecated SuppressWarnings FunctionalInterface
    Console Environment Convert DateTime TimeSpan Guid Task Action Func IEnumerable IEnumerator
    IList IDictionary Dictionary ICollection IDisposable Stream StreamReader StreamWriter
    FileStream TextReader TextWriter StringComparison ArgumentException
    ArgumentNullException InvalidOperationException NotImplementedException NotSupportedException
    ObjectDisposedException KeyNotFoundException NullReferenceException Array Enumerable Lazy
    CancellationToken Monitor Interlocked
    """.split()
)

_DECL_CLASS = {
    "class_declaration", "interface_declaration", "enum_declaration", "record_declaration",
    "annotation_type_declaration", "struct_declaration", "constructor_declaration",
    "destructor_declaration",
}
_DECL_METHOD = {"method_declaration", "local_function_statement"}
_DECL_VAR = {
    "variable_declarator", "formal_parameter", "spread_parameter", "catch_formal_parameter",
    "enhanced_for_statement", "resource", "parameter", "foreach_statement", "catch_declaration",
    "inferred_parameters", "lambda_expression", "enum_constant", "declaration_expression",
    "labeled_statement",
}
_KEEP_CONTEXT = {
    "import_declaration", "package_declaration", "using_directive", "namespace_declaration",
    "file_scoped_namespace_declaration", "annotation", "marker_annotation", "attribute",
    "extern_alias_directive",
}
_TYPE_FIELDS = {"type", "returns", "superclass", "interfaces"}
_TYPE_PARENTS = {
    "base_list", "type_argument_list", "type_arguments", "array_type", "nullable_type",
    "pointer_type", "type_list", "super_interfaces", "superclass", "type_parameter",
    "type_parameter_constraints_clause", "typeof_expression", "cast_expression",
    "is_pattern_expression", "array_creation_expression", "qualified_name",
    "scoped_type_identifier", "generic_type", "instanceof_expression", "throws",
}
_ATOMIC_SUFFIXES = ("literal",)
_ATOMIC_TYPES = {"interpolated_string_expression", "text_block", "string_literal", "verbatim_string_literal"}

_WRAPPERS = {
    lang.JAVA: ("class __Wrap__ {\n", "\n}", "class __Wrap__ { void __wrap__() {\n", "\n} }"),
    lang.CSHARP: ("class __Wrap__ {\n", "\n}", "class __Wrap__ { void __wrap__() {\n", "\n} }"),
}


@dataclass
class ObfuscationMap:
    """Ordered original-name -> placeholder bindings per category."""

    classes: dict[str, str] = field(default_factory=dict)
    methods: dict[str, str] = field(default_factory=dict)
    variables: dict[str, str] = field(default_factory=dict)

    def table(self, category: str) -> dict[str, str]:
        return {CLASS: self.classes, METHOD: self.methods, VAR: self.variables}[category]

    def bind(self, category: str, name: str) -> str:
        table = self.table(category)
        if name not in table:
            table[name] = f"{category}_{len(table)}"
        return table[name]

    def bindings(self) -> list[tuple[str, str]]:
        return [*self.classes.items(), *self.methods.items(), *self.variables.items()]


def _parse_fragment(snippet: str, language: str) -> tuple[lang.Source, int, int]:
    """Parse ``snippet`` as a compilation unit, class member, or statements.

    Returns the parsed source and the byte range of the original snippet in it.
    """
    attempts = [("", "")]
    w = _WRAPPERS[language]
    attempts += [(w[0], w[1]), (w[2], w[3])]
    for prefix, suffix in attempts:
        src = lang.parse(prefix + snippet + suffix, language, strict=False)
        if not src.root.has_error:
            start = len(prefix.encode("utf-8"))
            return src, start, start + len(snippet.encode("utf-8"))
    raise ParseError(f"snippet does not parse as {lang.display_name(language)} code")


def _leaves(node: Node, lo: int, hi: int):
    """Tokens inside [lo, hi) with their field name and parent; comments skipped."""
    stack: list[tuple[Node, str | None]] = [(node, None)]
    while stack:
        n, f = stack.pop()
        if n.end_byte <= lo or n.start_byte >= hi or n.type in lang.COMMENT_TYPES:
            continue
        atomic = n.type in _ATOMIC_TYPES or n.type.endswith(_ATOMIC_SUFFIXES)
        if n.child_count == 0 or atomic:
            yield n, f
            continue
        kids = [(c, n.field_name_for_child(i)) for i, c in enumerate(n.children)]
        stack.extend(reversed(kids))


def _is_declaration(node: Node, fname: str | None) -> bool:
    if node.type == "implicit_parameter":
        return True
    parent = node.parent
    if node.type != "identifier" or parent is None:
        return False
    if fname == "name" and parent.type in _DECL_VAR:
        return True
    if parent.type == "lambda_expression" and fname == "parameters":
        return True
    if parent.type == "foreach_statement" and fname == "left":
        return True
    return parent.type == "inferred_parameters"


def _declared_variables(src: lang.Source, lo: int, hi: int) -> set[str]:
    out = set()
    for n, f in lang.walk_with_fields(src.root):
        if lo <= n.start_byte < hi and _is_declaration(n, f):
            out.add(src.node_text(n))
    return out


def _in_keep_context(node: Node) -> bool:
    p = node.parent
    while p is not None:
        if p.type in _KEEP_CONTEXT:
            return True
        p = p.parent
    return False


def _type_rule(name: str) -> str:
    m = PLACEHOLDER.match(name)
    if m:
        return m.group(1)
    return KEEP if name in STDLIB_TYPES else CLASS


def _looks_like_type(name: str) -> bool:
    return name[:1].isupper() and any(c.islower() for c in name)


def _classify(node: Node, fname: str | None, src: lang.Source, declared: set[str]) -> str:
    name = src.node_text(node)
    parent = node.parent
    ptype = parent.type if parent is not None else ""

    if node.type in {"type_identifier", "predefined_type"}:
        if node.type == "predefined_type":
            return KEEP
        # package qualifier inside a scoped type: java.util.List
        if ptype == "scoped_type_identifier" and parent.child(parent.child_count - 1) != node:
            return KEEP
        return _type_rule(name)
    if _is_declaration(node, fname):
        return VAR
    if node.type != "identifier":
        return KEEP
    if _in_keep_context(node):
        return KEEP

    # C# generic_name wraps the identifier of generic types and generic calls
    eff, eff_field = node, fname
    if ptype == "generic_name":
        eff = parent
        gp = parent.parent
        eff_field = None
        if gp is not None:
            for i, c in enumerate(gp.children):
                if c == parent:
                    eff_field = gp.field_name_for_child(i)
        parent = eff.parent
        ptype = parent.type if parent is not None else ""

    placeholder = PLACEHOLDER.match(name)
    if eff_field == "name" and ptype in _DECL_CLASS:
        return CLASS
    if eff_field == "name" and ptype in _DECL_METHOD:
        return METHOD
    if ptype == "method_invocation" and eff_field == "name":
        return METHOD
    if ptype == "method_reference" and eff is parent.child(parent.child_count - 1):
        return METHOD
    if ptype == "invocation_expression" and eff_field == "function":
        return METHOD
    if ptype == "member_access_expression" and eff_field == "name":
        gp = parent.parent
        if gp is not None and gp.type == "invocation_expression" and gp.child_by_field_name("function") == parent:
            return METHOD
        if placeholder:
            return placeholder.group(1)
        return VAR if name in declared else METHOD
    if ptype == "field_access" and eff_field == "field":
        if placeholder:
            return placeholder.group(1)
        return VAR if name in declared else METHOD
    if eff_field in _TYPE_FIELDS or ptype in _TYPE_PARENTS:
        return _type_rule(name)
    if placeholder:
        return placeholder.group(1)
    if name in declared:
        return VAR
    if name in STDLIB_TYPES:
        return KEEP
    if _looks_like_type(name):
        return CLASS
    return VAR


def obfuscate(snippet: str, language: str = lang.JAVA) -> tuple[str, ObfuscationMap]:
    """Return the whitespace-normalized, comment-free snippet with names masked.

    Raises ParseError when the snippet is not a compilation unit, class member
    or statement sequence of ``language``.
    """
    src, lo, hi = _parse_fragment(snippet, language)
    declared = _declared_variables(src, lo, hi)
    mapping = ObfuscationMap()
    out: list[str] = []
    prev_end = None
    for node, fname in _leaves(src.root, lo, hi):
        start, end = max(node.start_byte, lo), min(node.end_byte, hi)
        if prev_end is not None:
            if start > prev_end:
                out.append(" ")
        token = src.data[start:end].decode("utf-8")
        category = _classify(node, fname, src, declared)
        if category != KEEP:
            token = mapping.bind(category, token)
        out.append(token)
        prev_end = end
    return "".join(out).strip(), mapping


def canonical_equal(a: str, b: str, language: str = lang.JAVA) -> bool:
    """Alpha-equivalence: equal after obfuscation, ignoring whitespace between tokens."""
    ta, _ = obfuscate(a, language)
    tb, _ = obfuscate(b, language)
    return ta.split() == tb.split()
