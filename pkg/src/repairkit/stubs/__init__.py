"""Stand-ins for external tools, used on machines without Infer or a JVM/.NET toolchain.

``repairkit.stubs.infer`` mimics ``infer capture``/``infer analyze`` with
pattern-based checks for the three target bug types; ``repairkit.stubs.build``
syntax-checks sources; ``repairkit.stubs.tests`` runs declarative method checks.
"""
