from .api import ensure_body_model

try:
    from ._version import version as __version__
except ImportError:
    from importlib.metadata import version

    __version__ = version("diffpose")
