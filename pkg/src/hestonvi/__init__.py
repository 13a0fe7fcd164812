"""American and European option pricing under Heston via a penalized
variational inequality in weighted Sobolev spaces."""

__version__ = "0.1.0"
