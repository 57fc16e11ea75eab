"""Spatiotemporal epidemic modelling with penalized splines over triangulations."""

from importlib import resources

__version__ = "0.1.0"


def toy_config():
    """Path to the config file of the small simulated dataset shipped with the package."""
    return str(resources.files(__name__).joinpath("data", "toy", "toy.cfg"))
