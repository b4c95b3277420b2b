"""Permissioned proof-of-authority blockchain with capability-token access
control, tamper-evident hashed indexing, a security microservice suite, and a
stage-timing benchmark harness."""

__version__ = "0.1.0"
