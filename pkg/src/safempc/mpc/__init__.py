"""Robust MPC controllers: the scalar projection controller and the tube controller."""

from safempc.mpc.scalar import ScalarMpc, ScalarMpcParameters, ScalarSetting

__all__ = ["ScalarMpc", "ScalarMpcParameters", "ScalarSetting"]
