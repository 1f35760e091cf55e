"""Physics-informed estimation of Windkessel outlet parameters on a 2D bifurcating channel."""

__version__ = "0.1.0"
