"""B3 option ingestion, Black-Scholes pricing and a residual network pricer."""

__version__ = "0.1.0"
