"""Carotid artery analysis workbench.

Library + CLI for centerline-perpendicular cross-section contouring,
curved multiplanar review, vessel-wall-thickness surface mapping,
hemodynamic biomarkers, and mask-gated pathline tracing from 4D-flow data.
"""

__version__ = "0.1.0"
