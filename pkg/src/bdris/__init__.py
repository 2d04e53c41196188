"""Two-phase channel estimation for beyond-diagonal RIS with a numpy autodiff core."""

__version__ = "0.1.0"
