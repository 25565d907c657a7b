"""Three-way catalyst cold-start modelling toolkit."""

__version__ = "0.1.0"
