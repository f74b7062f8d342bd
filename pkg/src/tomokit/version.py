"""
Package version, kept in its own module.

Nothing here imports from the rest of tomokit, so `__init__`, the CLI and
the run manifests can all read the version without import cycles. Checkpoint
and container format versions live in `container`.
"""

__version__ = '0.3.0'
