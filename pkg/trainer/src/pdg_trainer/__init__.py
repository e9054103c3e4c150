"""Offline training of the tight-set and solution prediction networks.

Reads the training CSV exported by the guidance package, trains the
single-token transformer encoders with torch, and writes TSCX weights
files plus parity fixtures that pin the forward pass across the
trainer/inference boundary.
"""

from .model import SingleTokenEncoder
from .tscx import load_tensors, save_tensors
from .train import TrainConfig, emit_parity_fixture, train

__all__ = ["SingleTokenEncoder", "TrainConfig", "train",
           "emit_parity_fixture", "save_tensors", "load_tensors"]
