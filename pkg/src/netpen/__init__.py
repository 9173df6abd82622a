"""Simulated net-pen inspection: synthetic scenes, rope-based visual servoing,
defect detection and a vehicle/topside link."""

__version__ = "0.1.0"
