"""Database models and utilities for the run ledger."""

from .models import (
    Base,
    CaseResult,
    EpochMetric,
    Run,
    create_db_engine,
    get_db_path,
    get_db_session,
)

__all__ = [
    "Base",
    "CaseResult",
    "EpochMetric",
    "Run",
    "create_db_engine",
    "get_db_path",
    "get_db_session",
]
