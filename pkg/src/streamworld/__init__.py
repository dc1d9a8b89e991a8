"""Desk-scale interactive world model.

A chunk-wise autoregressive flow-matching transformer over a procedurally
generated navigable grid world, with dual action conditioning, reconstituted
context memory, few-step distillation, and a live streaming server.
"""

__version__ = "0.1.0"
