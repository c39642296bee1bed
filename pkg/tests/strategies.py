"""Hypothesis strategies shared by the property tests."""

from __future__ import annotations

from hypothesis import strategies as st

from repairkit.analyzer import BugReport, TraceStep

BUG_TYPES = ["NULL_DEREFERENCE", "RESOURCE_LEAK", "THREAD_SAFETY_VIOLATION", "DEAD_STORE"]
FILES = ["A.java", "src/B.java", "C.cs"]
PROCEDURES = ["a.A.f(int)", "a.A.g()", "B.h(String)", "C.K()"]
QUALIFIERS = [
    "object `x` last assigned on line 3 could be null and is dereferenced at line 5.",
    "object `y` last assigned on line 9 could be null and is dereferenced at line 12.",
    "resource of type `FileReader` acquired by call to `new()` at line 4 is not released after line 7.",
    "Unprotected write. Non-private method `A.f(...)` writes to field `this.n`.",
]

trace_steps = st.builds(
    TraceStep,
    file=st.sampled_from(FILES),
    line=st.integers(1, 400),
    procedure=st.sampled_from(["f", "g", "h", ""]),
    description=st.sampled_from(["start of procedure f(...)", "return null", "deref"]),
)

bug_reports = st.builds(
    BugReport,
    bug_type=st.sampled_from(BUG_TYPES),
    file=st.sampled_from(FILES),
    line=st.integers(1, 500),
    procedure=st.sampled_from(PROCEDURES),
    qualifier=st.sampled_from(QUALIFIERS),
    bug_trace=st.lists(trace_steps, max_size=3).map(tuple),
    raw_hash=st.one_of(st.none(), st.sampled_from(["h1", "h2", "h3"])),
)

reports = st.lists(bug_reports, max_size=8)
