"""SQLAlchemy models for the run ledger (one SQLite file per output root)."""

from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import (
    JSON,
    Column,
    DateTime,
    Float,
    ForeignKey,
    Integer,
    String,
    Text,
    create_engine,
)
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()

DB_FILENAME = "runs.db"


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class Run(Base):
    """One execution of a CLI stage."""

    __tablename__ = "runs"

    id = Column(Integer, primary_key=True)
    stage = Column(String(32), nullable=False)  # synth, pretrain, adapt, eval, plot-data
    method = Column(String(32))
    seed = Column(Integer)
    config_hash = Column(String(64))
    config = Column(JSON)
    status = Column(String(16), nullable=False, default="running")  # running, success, failed
    message = Column(Text)
    started_at = Column(DateTime(timezone=True), default=_utcnow)
    finished_at = Column(DateTime(timezone=True))

    epochs = relationship("EpochMetric", back_populates="run", cascade="all, delete-orphan")
    case_results = relationship(
        "CaseResult", back_populates="run", cascade="all, delete-orphan"
    )


class EpochMetric(Base):
    """Mean losses and acceptance rate of one training epoch."""

    __tablename__ = "epoch_metrics"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    phase = Column(String(16), nullable=False)
    epoch = Column(Integer, nullable=False)
    steps = Column(Integer)
    aborted = Column(Integer)
    l_sup = Column(Float)
    l_con = Column(Float)
    l_syn = Column(Float)
    l_chamfer = Column(Float)
    total = Column(Float)
    acceptance_rate = Column(Float)

    run = relationship("Run", back_populates="epochs")


class CaseResult(Base):
    """Evaluation metrics of one case."""

    __tablename__ = "case_results"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    case_id = Column(String(128), nullable=False)
    tre_mean_mm = Column(Float)
    initial_tre_mm = Column(Float)
    sdlogj = Column(Float)
    folding_fraction = Column(Float)

    run = relationship("Run", back_populates="case_results")


def get_db_path(root) -> Path:
    """Ledger file inside an output root (created if missing)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return root / DB_FILENAME


def create_db_engine(root):
    """Create SQLAlchemy engine for the ledger under ``root``."""
    engine = create_engine(f"sqlite:///{get_db_path(root)}", echo=False)
    Base.metadata.create_all(engine)
    return engine


def get_db_session(root):
    """Get a database session for the ledger under ``root``."""
    session_factory = sessionmaker(bind=create_db_engine(root))
    return session_factory()
