"""File formats: config, scan paths, VTU snapshots, metrics tables."""

from .config import GeometrySpec, parse_config, serialize_config
from .metrics import RunMetrics, build_metrics, parallel_efficiency, report_metrics
from .scanpath import parse_scanpath, serialize_scanpath
from .vtu import read_vtu, write_vtu

__all__ = [
    "GeometrySpec",
    "parse_config",
    "serialize_config",
    "parse_scanpath",
    "serialize_scanpath",
    "write_vtu",
    "read_vtu",
    "RunMetrics",
    "build_metrics",
    "report_metrics",
    "parallel_efficiency",
]
