"""Desk-scale point-to-point QKD link stack.

Subpackages and modules:

* :mod:`qkdlink.optics` — COW-4 quantum-channel Monte Carlo
* :mod:`qkdlink.security` — secret-fraction and key-rate model
* :mod:`qkdlink.channel` / :mod:`qkdlink.distillation` — authenticated
  classical channel and key distillation
* :mod:`qkdlink.kms` — key management entity with an ETSI-014-style REST
  surface
* :mod:`qkdlink.qvpn` — key-consuming encrypted tunnel
* :mod:`qkdlink.harness` — calibration, campaigns and reporting
"""

__version__ = "0.1.0"
