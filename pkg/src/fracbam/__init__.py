"""Attention-augmented CNN classifier for bone-fracture radiographs."""

__all__ = ["BamInceptionClassifier"]


def __getattr__(name):
    # lazy so the CLI does not pay for the sklearn import
    if name == "BamInceptionClassifier":
        from .estimator import BamInceptionClassifier
        return BamInceptionClassifier
    raise AttributeError(f"module 'fracbam' has no attribute {name!r}")
