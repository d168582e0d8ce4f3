"""reprosvc: a self-hosted reproducibility service.

For every commit of a registered project the service performs a de novo
sandboxed build from a declarative manifest, runs developer sanity tests and a
community-curated benchmark matrix, records every outcome in an append-only
per-project ledger keyed by commit id, and derives a GREEN/AMBER/RED
reproducibility grade.
"""

__version__ = "0.1.0"
