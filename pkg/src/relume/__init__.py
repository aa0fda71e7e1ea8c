"""Joint geometry, material and lighting estimation from posed images.

Four neural fields (signed distance, BRDF, incident light, outgoing radiance)
are trained in three stages; see :mod:`relume.trainer`.
"""

__version__ = "0.1.0"
