"""Export formatters for training metrics, evaluation reports and plot tables."""

import csv
import io
import json

import numpy as np

METRICS_FIELDS = ["step", "epoch", "l_sup", "l_con", "l_syn", "l_chamfer", "indicator_rate", "total"]
EPOCH_FIELDS = [
    "phase",
    "epoch",
    "steps",
    "aborted",
    "l_sup",
    "l_con",
    "l_syn",
    "l_chamfer",
    "total",
    "acceptance_rate",
]
PLOT_FIELDS = ["x", "y", "z", "u", "v", "w", "tre_mm"]


def format_float(value: float) -> str:
    """Shortest decimal form that reads back to the same float (as json.dumps writes it)."""
    return repr(float(value))


class ExportFormatter:
    """Format run artifacts as CSV, JSON or TSV text."""

    @staticmethod
    def metrics_csv(records: list) -> str:
        """
        Format per-step loss records as CSV.

        Args:
            records: LossRecord objects in step order

        Returns:
            CSV string with one row per optimizer step
        """
        output = io.StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.step,
                    r.epoch,
                    format_float(r.l_sup),
                    format_float(r.l_con),
                    format_float(r.l_syn),
                    format_float(r.l_chamfer),
                    format_float(r.indicator_rate),
                    format_float(r.total),
                ]
            )
        return output.getvalue()

    @staticmethod
    def epochs_csv(summaries: list) -> str:
        """Format EpochSummary objects as CSV."""
        output = io.StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(EPOCH_FIELDS)
        for s in summaries:
            writer.writerow(
                [
                    s.phase,
                    s.epoch,
                    s.steps,
                    s.aborted,
                    *(format_float(getattr(s, name)) for name in EPOCH_FIELDS[4:]),
                ]
            )
        return output.getvalue()

    @staticmethod
    def report_json(report) -> str:
        """Format an EvalReport as indented JSON."""
        return json.dumps(report.to_dict(), indent=2) + "\n"

    @staticmethod
    def plot_tsv(landmarks: np.ndarray, flow: np.ndarray, errors) -> str:
        """
        Format landmark positions, their interpolated flow and TRE as TSV.

        Args:
            landmarks: (L, 3) moving landmark coordinates
            flow: (L, 3) displacement at each landmark
            errors: L per-landmark TRE values (mm)

        Returns:
            Tab-separated table with header x y z u v w tre_mm
        """
        if not len(landmarks) == len(flow) == len(errors):
            raise ValueError("Landmarks, flow and errors must have equal length")
        lines = ["\t".join(PLOT_FIELDS)]
        for point, vector, error in zip(landmarks, flow, errors):
            values = [*point, *vector, error]
            lines.append("\t".join(format_float(v) for v in values))
        return "\n".join(lines) + "\n"
