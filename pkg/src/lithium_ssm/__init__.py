"""Selective state space regression for lithium-ion battery RUL, SOH and SOC."""

__version__ = "0.1.0"
