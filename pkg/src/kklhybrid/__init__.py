"""Hybrid KKL-observer / recurrent dynamics models trained with a small numpy autodiff."""
__version__ = "0.1.0"
