"""
Experiment stages behind the ``reg`` command.

IMPORTANT FOR DEVELOPERS:
- One handler class per stage; BaseStageHandler.execute() converts every
  exception into a failed StageResult and records the run in ``<out>/runs.db``
- Artifacts live under the output root:
    dataset/manifest.json, dataset/<case>/*.xyz        (synth)
    checkpoints/pretrain.ckpt, metrics/pretrain*.csv   (pretrain)
    checkpoints/adapt.ckpt, metrics/adapt*.csv         (adapt, rewritten every epoch)
    eval/report.json, eval/predictions/<case>.uvw      (eval)
    plots/<case>.tsv, plots/<case>.png                 (plot-data)
- Moving clouds are pre-aligned when a dataset is loaded, never on disk
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .services.adapt import (
    AdaptationData,
    EpochSummary,
    TrainState,
    run_adaptation,
    run_pretraining,
)
from .services.checkpoint import load_checkpoint, save_checkpoint
from .services.cloud_io import (
    SPLITS,
    DatasetManifest,
    load_case,
    load_displacement,
    load_manifest,
    save_case,
    save_displacement,
    save_manifest,
)
from .services.evaluator import (
    EvalReport,
    EvaluationWeights,
    evaluate_predictions,
    landmark_displacements,
)
from .services.export_formatter import EPOCH_FIELDS, ExportFormatter
from .services.model import predict
from .services.run_registry import RunRegistry
from .services.synth import make_toy_dataset, pre_align
from .services.visualizer import Visualizer

logger = logging.getLogger(__name__)

# Stream id mixed into the master seed for dataset generation
SYNTH_STREAM = 7


class StageOrderError(RuntimeError):
    """A stage was run before the stage producing its inputs."""


@dataclass
class StageResult:
    stage: str
    success: bool
    message: str = ""
    artifacts: list = field(default_factory=list)


class BaseStageHandler:
    """Shared paths, dataset loading and error handling of all stages."""

    name = ""

    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.dataset_dir = self.out / "dataset"
        self.checkpoint_dir = self.out / "checkpoints"
        self.metrics_dir = self.out / "metrics"
        self.eval_dir = self.out / "eval"
        self.plot_dir = self.out / "plots"

    def execute(self) -> StageResult:
        """Run the stage; failures are logged and returned, never raised."""
        self.out.mkdir(parents=True, exist_ok=True)
        torch.use_deterministic_algorithms(True)
        with RunRegistry(self.out) as registry:
            run_id = registry.start_run(
                stage=self.name,
                method=self.cfg.method.value,
                seed=self.cfg.seed,
                config_hash=self.cfg.digest(),
                config=self.cfg.to_dict(),
            )
        try:
            artifacts = self.run(run_id)
        except Exception as e:
            logger.exception("Stage '%s' failed", self.name)
            with RunRegistry(self.out) as registry:
                registry.finish_run(run_id, success=False, message=str(e))
            return StageResult(stage=self.name, success=False, message=str(e))

        message = f"{self.name}: wrote {len(artifacts)} artifact(s) under {self.out}"
        with RunRegistry(self.out) as registry:
            registry.finish_run(run_id, success=True, message=message)
        logger.info(message)
        return StageResult(stage=self.name, success=True, message=message, artifacts=artifacts)

    def run(self, run_id: int) -> list:
        raise NotImplementedError

    # --- helpers -----------------------------------------------------------

    def manifest_path(self) -> Path:
        if self.cfg.dataset.manifest:
            return Path(self.cfg.dataset.manifest)
        return self.dataset_dir / "manifest.json"

    def load_dataset(self) -> dict:
        """Pre-aligned cases of every split, keyed by split name."""
        path = self.manifest_path()
        if not path.exists():
            raise StageOrderError(f"No dataset manifest at {path}; run 'reg synth' first")
        manifest = load_manifest(path)
        return {
            split: [pre_align(load_case(manifest, entry)) for entry in manifest.split(split)]
            for split in SPLITS
        }

    def adaptation_data(self, splits: dict) -> AdaptationData:
        train = splits["train"]
        if not train:
            raise ValueError("The dataset has no training cases")
        return AdaptationData(
            target_cases=train,
            source_clouds=[case.fixed for case in train],
            source_spec=self.cfg.source_deformation,
        )

    def record_epoch(self, run_id: int, summary: EpochSummary) -> None:
        with RunRegistry(self.out) as registry:
            registry.add_epoch(run_id, summary)

    def write_text(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path


class SynthStage(BaseStageHandler):
    """Generate the toy branching-curve dataset."""

    name = "synth"

    def run(self, run_id: int) -> list:
        ds = self.cfg.dataset
        if ds.manifest:
            logger.warning(
                "dataset.manifest is set to %s; synth still writes the toy dataset to %s",
                ds.manifest,
                self.dataset_dir,
            )
        rng = np.random.default_rng([self.cfg.seed, SYNTH_STREAM])
        cases = make_toy_dataset(
            ds.n_cases,
            rng,
            ds.target_deformation,
            n_points=ds.n_points,
            n_points_highres=ds.n_points_highres,
            n_landmarks=ds.n_landmarks,
            initial_offset_mm=ds.initial_offset_mm,
        )
        n_train, n_val, _ = ds.split
        splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (len(cases) - n_train - n_val)
        entries = [save_case(self.dataset_dir, case, split) for case, split in zip(cases, splits)]
        manifest = DatasetManifest(root=self.dataset_dir, entries=entries)
        path = save_manifest(manifest)
        logger.info("Generated %d toy cases (%d/%d/%d)", len(cases), *ds.split)
        return [path]


class _TrainingStage(BaseStageHandler):
    """Keeps the step and epoch logs of a training phase on disk."""

    phase = ""

    def __init__(self, cfg: ExperimentConfig, out):
        super().__init__(cfg, out)
        self.records = []
        self.summaries = []

    @property
    def metrics_path(self) -> Path:
        return self.metrics_dir / f"{self.phase}.csv"

    @property
    def epochs_path(self) -> Path:
        return self.metrics_dir / f"{self.phase}_epochs.csv"

    def on_step(self, record) -> None:
        self.records.append(record)

    def flush_metrics(self) -> list:
        return [
            self.write_text(self.metrics_path, ExportFormatter.metrics_csv(self.records)),
            self.write_text(self.epochs_path, ExportFormatter.epochs_csv(self.summaries)),
        ]


class PretrainStage(_TrainingStage):
    """Supervised pretraining on synthesized source pairs."""

    name = "pretrain"
    phase = "pretrain"

    def run(self, run_id: int) -> list:
        data = self.adaptation_data(self.load_dataset())

        def on_epoch_end(_state: TrainState, summary: EpochSummary) -> None:
            self.summaries.append(summary)
            self.flush_metrics()
            self.record_epoch(run_id, summary)

        state = run_pretraining(
            data, self.cfg.training_config(), self.cfg.model, self.on_step, on_epoch_end
        )
        ckpt = save_checkpoint(self.checkpoint_dir / "pretrain.ckpt", state)
        return [ckpt, *self.flush_metrics()]


class AdaptStage(_TrainingStage):
    """Joint adaptation starting from the pretrained checkpoint."""

    name = "adapt"
    phase = "adapt"

    def run(self, run_id: int) -> list:
        pretrained = self.checkpoint_dir / "pretrain.ckpt"
        if not pretrained.exists():
            raise StageOrderError(f"adapt needs {pretrained}; run 'reg pretrain' first")
        state = load_checkpoint(pretrained, self.cfg.model)
        data = self.adaptation_data(self.load_dataset())
        target = self.checkpoint_dir / "adapt.ckpt"

        def on_epoch_end(epoch_state: TrainState, summary: EpochSummary) -> None:
            self.summaries.append(summary)
            save_checkpoint(target, epoch_state)
            self.flush_metrics()
            self.record_epoch(run_id, summary)

        state = run_adaptation(
            data, state, self.cfg.training_config(), self.on_step, on_epoch_end
        )
        ckpt = save_checkpoint(target, state)
        return [ckpt, *self.flush_metrics()]


class EvalStage(BaseStageHandler):
    """Predict on the test split and compute TRE / SDlogJ."""

    name = "eval"

    def latest_checkpoint(self) -> Path:
        for name in ("adapt.ckpt", "pretrain.ckpt"):
            path = self.checkpoint_dir / name
            if path.exists():
                return path
        raise StageOrderError(f"No checkpoint in {self.checkpoint_dir}; run 'reg pretrain' first")

    def run(self, run_id: int) -> list:
        ckpt = self.latest_checkpoint()
        state = load_checkpoint(ckpt, self.cfg.model)
        params = state.teacher if self.cfg.evaluation.weights is EvaluationWeights.TEACHER else state.student
        cases = self.load_dataset()["test"]
        if not cases:
            raise ValueError("The dataset has no test cases")
        logger.info("Evaluating %s weights of %s on %d cases", self.cfg.evaluation.weights.value, ckpt, len(cases))

        artifacts = []
        predictions = {}
        for case in cases:
            phi = predict(params, case.moving, case.fixed, self.cfg.model)
            predictions[case.case_id] = phi
            artifacts.append(
                save_displacement(self.eval_dir / "predictions" / f"{case.case_id}.uvw", phi)
            )

        report = evaluate_predictions(cases, predictions, self.cfg.evaluation)
        artifacts.append(self.write_text(self.eval_dir / "report.json", ExportFormatter.report_json(report)))
        with RunRegistry(self.out) as registry:
            registry.add_case_results(run_id, report.per_case)
        return artifacts


def read_epoch_summaries(path: Path) -> list:
    """Parse an epochs CSV written by ExportFormatter.epochs_csv."""
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    summaries = []
    for row in rows:
        values = {name: row[name] for name in EPOCH_FIELDS}
        summaries.append(
            EpochSummary(
                phase=values["phase"],
                epoch=int(values["epoch"]),
                steps=int(values["steps"]),
                aborted=int(values["aborted"]),
                **{name: float(values[name]) for name in EPOCH_FIELDS[4:]},
            )
        )
    return summaries


class PlotDataStage(BaseStageHandler):
    """Per-case landmark tables (xyz, flow, TRE) and figures from eval artifacts."""

    name = "plot-data"

    def run(self, run_id: int) -> list:
        report_path = self.eval_dir / "report.json"
        if not report_path.exists():
            raise StageOrderError(f"No evaluation report at {report_path}; run 'reg eval' first")
        report = EvalReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))
        if not report.per_case:
            raise ValueError(f"{report_path} contains no cases")

        cases = {c.case_id: c for split in self.load_dataset().values() for c in split}
        visualizer = Visualizer()
        artifacts = []
        for case_report in report.per_case:
            case = cases.get(case_report.case_id)
            if case is None:
                raise ValueError(f"Case '{case_report.case_id}' is not in the dataset")
            pred_path = self.eval_dir / "predictions" / f"{case.case_id}.uvw"
            if not pred_path.exists():
                raise StageOrderError(f"Missing prediction {pred_path}; re-run 'reg eval'")
            phi = load_displacement(pred_path)
            flow = landmark_displacements(case, phi, self.cfg.evaluation.tre_sigma_mm)
            landmarks = case.landmarks.moving.points
            errors = case_report.landmark_errors_mm

            artifacts.append(
                self.write_text(
                    self.plot_dir / f"{case.case_id}.tsv",
                    ExportFormatter.plot_tsv(landmarks, flow.vectors, errors),
                )
            )
            png = visualizer.create_tre_plot(
                landmarks, flow.vectors, errors, fixed_points=case.fixed.points, title=case.case_id
            )
            png_path = self.plot_dir / f"{case.case_id}.png"
            png_path.write_bytes(png)
            artifacts.append(png_path)

        for phase in ("pretrain", "adapt"):
            epochs_path = self.metrics_dir / f"{phase}_epochs.csv"
            if epochs_path.exists():
                summaries = read_epoch_summaries(epochs_path)
                if summaries:
                    curve = self.plot_dir / f"{phase}_curve.png"
                    curve.write_bytes(
                        visualizer.create_training_curve(summaries, title=f"{phase} losses")
                    )
                    artifacts.append(curve)
        return artifacts


STAGES = {
    handler.name: handler
    for handler in (SynthStage, PretrainStage, AdaptStage, EvalStage, PlotDataStage)
}


def run_stage(name: str, cfg: ExperimentConfig, out) -> StageResult:
    """Execute the stage called ``name`` with artifacts under ``out``."""
    if name not in STAGES:
        raise ValueError(f"Unknown stage '{name}' (choose from {', '.join(STAGES)})")
    return STAGES[name](cfg, out).execute()
