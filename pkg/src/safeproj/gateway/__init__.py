from __future__ import annotations

from .audit import AuditWriter, read_audit
from .config import BackendSpec, ServiceConfig, build_deps

__all__ = ["AuditWriter", "BackendSpec", "ServiceConfig", "build_deps", "read_audit"]
