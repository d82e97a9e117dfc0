"""Temporal classical shadows and process-tensor tomography."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("procshadow")
except PackageNotFoundError:
    __version__ = "0.0.0"
