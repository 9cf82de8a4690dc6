"""Dependency-guided parallel unmasking over exactly computable sequence models."""

try:
    from importlib.metadata import version, PackageNotFoundError

    __version__ = version("depdecode")
except PackageNotFoundError:
    # Package is not installed, fallback to development version
    __version__ = "0.0.0-dev"

__all__ = ["__version__"]
