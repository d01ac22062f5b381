"""replicat: a desk-scale, rule-driven distributed data management system."""

__version__ = "0.1.0"

from .system import System, SystemConfig, NamingSchema  # noqa: F401
