"""Interventional video grounding with dual contrastive learning, at desk scale."""
from importlib.resources import files

__version__ = "0.1.0"


def default_spec_path():
    """Path of the shipped biased synthetic-data spec."""
    return files(__name__) / "data" / "biased_default.json"
