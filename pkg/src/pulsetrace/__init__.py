"""Vessel diameter regression from ultrasound sequences.

A per-frame convolutional encoder feeds a convolutional GRU whose state is
regressed to a diameter in mm. Training adds a periodicity penalty over the
cardiac cycle. Everything is plain numpy with hand-written backward passes.
"""
from .model import DiameterNet, StreamingPredictor, get_profile

__all__ = ["DiameterNet", "StreamingPredictor", "get_profile"]
__version__ = "0.1.0"
