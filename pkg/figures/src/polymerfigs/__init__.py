"""Figure rendering for polymerlab run directories.

Reads only the documented CSV and snapshot schemas; no in-memory coupling to
the simulation package, so either side can be rebuilt independently.
"""

__version__ = "0.1.0"

from .render import FIGURE_KINDS, RenderError, render  # noqa: F401
