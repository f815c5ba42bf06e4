"""Run ledger manager: records stage runs, epoch metrics and per-case results."""

from datetime import datetime, timezone
from typing import Optional

from sqlalchemy.orm import Session

from ..database.models import CaseResult, EpochMetric, Run, get_db_session


class RunRegistry:
    """Context manager for ledger operations under one output root."""

    def __init__(self, root):
        self.root = root
        self.session: Optional[Session] = None

    def __enter__(self):
        self.session = get_db_session(self.root)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.session:
            if exc_type is None:
                self.session.commit()
            else:
                self.session.rollback()
            self.session.close()

    def start_run(
        self,
        stage: str,
        method: Optional[str] = None,
        seed: Optional[int] = None,
        config_hash: Optional[str] = None,
        config: Optional[dict] = None,
    ) -> int:
        """Insert a run in status 'running' and return its id."""
        run = Run(
            stage=stage,
            method=method,
            seed=seed,
            config_hash=config_hash,
            config=config,
            status="running",
        )
        self.session.add(run)
        self.session.flush()  # Get the ID
        return run.id

    def finish_run(self, run_id: int, success: bool, message: str = "") -> None:
        run = self.session.query(Run).filter_by(id=run_id).first()
        if run is None:
            raise ValueError(f"Run {run_id} not found")
        run.status = "success" if success else "failed"
        run.message = message
        run.finished_at = datetime.now(timezone.utc)

    def add_epoch(self, run_id: int, summary) -> None:
        """Record an EpochSummary."""
        self.session.add(
            EpochMetric(
                run_id=run_id,
                phase=summary.phase,
                epoch=summary.epoch,
                steps=summary.steps,
                aborted=summary.aborted,
                l_sup=summary.l_sup,
                l_con=summary.l_con,
                l_syn=summary.l_syn,
                l_chamfer=summary.l_chamfer,
                total=summary.total,
                acceptance_rate=summary.acceptance_rate,
            )
        )

    def add_case_results(self, run_id: int, reports: list) -> None:
        """Record per-case evaluation reports."""
        for r in reports:
            self.session.add(
                CaseResult(
                    run_id=run_id,
                    case_id=r.case_id,
                    tre_mean_mm=r.tre_mean_mm,
                    initial_tre_mm=r.initial_tre_mm,
                    sdlogj=r.sdlogj,
                    folding_fraction=r.folding_fraction,
                )
            )

    def get_runs(self, stage: Optional[str] = None) -> list[dict]:
        """Runs ordered by id, optionally filtered by stage."""
        query = self.session.query(Run)
        if stage is not None:
            query = query.filter_by(stage=stage)
        return [self._run_to_dict(r) for r in query.order_by(Run.id).all()]

    def get_epochs(self, run_id: int) -> list[dict]:
        rows = (
            self.session.query(EpochMetric)
            .filter_by(run_id=run_id)
            .order_by(EpochMetric.id)
            .all()
        )
        return [
            {
                "phase": e.phase,
                "epoch": e.epoch,
                "l_sup": e.l_sup,
                "l_con": e.l_con,
                "l_syn": e.l_syn,
                "acceptance_rate": e.acceptance_rate,
            }
            for e in rows
        ]

    def get_case_results(self, run_id: int) -> list[dict]:
        rows = self.session.query(CaseResult).filter_by(run_id=run_id).order_by(CaseResult.id).all()
        return [
            {
                "case_id": c.case_id,
                "tre_mean_mm": c.tre_mean_mm,
                "initial_tre_mm": c.initial_tre_mm,
                "sdlogj": c.sdlogj,
                "folding_fraction": c.folding_fraction,
            }
            for c in rows
        ]

    @staticmethod
    def _run_to_dict(run: Run) -> dict:
        return {
            "id": run.id,
            "stage": run.stage,
            "method": run.method,
            "seed": run.seed,
            "config_hash": run.config_hash,
            "status": run.status,
            "message": run.message,
            "started_at": run.started_at.isoformat() if run.started_at else None,
            "finished_at": run.finished_at.isoformat() if run.finished_at else None,
        }
