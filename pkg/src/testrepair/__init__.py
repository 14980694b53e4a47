"""Agentic repair of failing tests.

A tool-using repair loop over an isolated workspace, three patch formats
with strict apply semantics, an oracle-guided validation pipeline with a
model-based acceptability judge, rule-based failure triage with bisection,
and a benchmark harness for the whole stack.
"""

__version__ = "0.1.0"
