"""Denoised Mean Teacher domain adaptation for point-cloud registration."""

from pathlib import Path

try:
    from ._version import __version__
except ImportError:
    import warnings

    warnings.warn(
        "Importing 'dmt_registration' outside a proper installation.",
        stacklevel=2,
    )
    __version__ = "dev"

# Optional .env in the project root (e.g. DMT_OUTPUT_ROOT)
try:
    from dotenv import load_dotenv

    _env_path = Path(__file__).parent.parent / ".env"
    if _env_path.exists():
        load_dotenv(_env_path)
except ImportError:
    pass
