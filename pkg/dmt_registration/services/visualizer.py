"""
Registration plots using matplotlib.

IMPORTANT FOR DEVELOPERS:
- Uses 'Agg' backend (non-interactive); runs in headless training jobs
- Always close figures (plt.close()) to free memory
- Landmark colors encode TRE, clamped at TRE_COLOR_LIMIT_MM
"""

import matplotlib

# CRITICAL: Set backend BEFORE importing pyplot
matplotlib.use("Agg")
import io
import logging

import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

TRE_COLOR_LIMIT_MM = 12.0


def _to_png(fig, dpi: int) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", dpi=dpi)
    plt.close(fig)  # CRITICAL: Free matplotlib memory
    data = buf.getvalue()
    buf.close()
    return data


class Visualizer:
    """Renders landmark TRE scatter plots and training curves as PNG bytes."""

    def create_tre_plot(
        self,
        landmarks: np.ndarray,
        flow: np.ndarray,
        errors,
        fixed_points: np.ndarray = None,
        title: str = "Landmark TRE",
        figsize: tuple = (8, 8),
        dpi: int = 100,
    ) -> bytes:
        """
        3-D scatter of moving landmarks colored by TRE, with flow arrows.

        Args:
            landmarks: (L, 3) moving landmark coordinates
            flow: (L, 3) predicted displacement at each landmark
            errors: L per-landmark TRE values (mm)
            fixed_points: optional fixed cloud drawn as light context
            title: Plot title
            figsize: Figure size (width, height) in inches
            dpi: Resolution in dots per inch

        Returns:
            PNG image bytes
        """
        landmarks = np.asarray(landmarks, dtype=float)
        flow = np.asarray(flow, dtype=float)
        errors = np.asarray(errors, dtype=float)

        fig = plt.figure(figsize=figsize, dpi=dpi)
        ax = fig.add_subplot(projection="3d")
        if fixed_points is not None:
            pts = np.asarray(fixed_points)
            ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=1, color="lightgray", alpha=0.3)
        sc = ax.scatter(
            landmarks[:, 0],
            landmarks[:, 1],
            landmarks[:, 2],
            c=np.clip(errors, 0.0, TRE_COLOR_LIMIT_MM),
            cmap="viridis",
            vmin=0.0,
            vmax=TRE_COLOR_LIMIT_MM,
            s=25,
        )
        ax.quiver(
            landmarks[:, 0],
            landmarks[:, 1],
            landmarks[:, 2],
            flow[:, 0],
            flow[:, 1],
            flow[:, 2],
            color="black",
            linewidth=0.6,
        )
        fig.colorbar(sc, ax=ax, shrink=0.6, label=f"TRE (mm, clamped at {TRE_COLOR_LIMIT_MM:g})")
        ax.set_xlabel("x (mm)")
        ax.set_ylabel("y (mm)")
        ax.set_zlabel("z (mm)")
        ax.set_title(f"{title}: mean {errors.mean():.2f} mm", fontsize=12, fontweight="bold")
        return _to_png(fig, dpi)

    def create_training_curve(
        self,
        summaries: list,
        title: str = "Training losses",
        figsize: tuple = (10, 5),
        dpi: int = 100,
    ) -> bytes:
        """Per-epoch loss terms (log scale) and indicator acceptance rate."""
        fig, (ax_loss, ax_rate) = plt.subplots(1, 2, figsize=figsize, dpi=dpi)
        x = np.arange(1, len(summaries) + 1)
        for name, label in (
            ("l_sup", "supervised"),
            ("l_con", "consistency"),
            ("l_syn", "synthesized"),
            ("l_chamfer", "Chamfer"),
        ):
            values = np.array([getattr(s, name) for s in summaries], dtype=float)
            if np.any(values > 0):
                ax_loss.plot(x, values, label=label)
        ax_loss.set_yscale("symlog", linthresh=1e-3)
        ax_loss.set_xlabel("Epoch")
        ax_loss.set_ylabel("Loss")
        ax_loss.grid(True, alpha=0.3)
        if ax_loss.lines:
            ax_loss.legend(fontsize=9)

        ax_rate.plot(x, [s.acceptance_rate for s in summaries], color="steelblue")
        ax_rate.set_ylim(0.0, 1.0)
        ax_rate.set_xlabel("Epoch")
        ax_rate.set_ylabel("Pseudo-label acceptance rate")
        ax_rate.grid(True, alpha=0.3)

        fig.suptitle(title, fontsize=12, fontweight="bold")
        plt.tight_layout()
        return _to_png(fig, dpi)
