"""Sparse field reconstruction on unstructured point sets.

The main entry points are :class:`fieldrecon.rformer.RFormerReconstructor`
and the baselines in :mod:`fieldrecon.baselines`; all of them share the
``fit`` / ``predict`` / ``reconstruct`` interface of
:class:`fieldrecon.base.BaseReconstructor`.
"""

__version__ = "0.1.0"
