"""Safe and stable learning of robust tube MPC parameters."""

__version__ = "0.1.0"
