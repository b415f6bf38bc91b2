"""
Run directory persistence
"""
from .run_directory import (
    METRIC_COLUMNS,
    MetricsWriter,
    RunDirectory,
    describe_version,
    open_run_directory,
    read_csv,
    runs_root,
    write_csv,
)

__all__ = [
    "METRIC_COLUMNS",
    "MetricsWriter",
    "RunDirectory",
    "describe_version",
    "open_run_directory",
    "read_csv",
    "runs_root",
    "write_csv",
]
