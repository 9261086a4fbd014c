"""Reference serving implementation of the d2af_wire_v1 protocol.

The pipeline package and this service share nothing but the wire schema
and conformance-vector files; this package reads them by path and never
imports the pipeline.
"""

__version__ = "0.1.0"

from .service import create_app

__all__ = ["create_app", "__version__"]
