"""Incremental 3-D reconstruction from posed depth/image sequences with sparse TSDF volumes.

Submodules are imported on demand (``from fragrecon import pipeline``) so that thread-pool
settings chosen on the command line take effect before numerical libraries load.
"""
__version__ = "0.1.0"
