"""Fog vs cloud remote-monitoring testbed.

Subpackages: ``domain`` (types and wire codec), ``dsp`` (log-mel features),
``nn`` (network engine), ``kws`` (keyword spotting), ``filtering`` (consent
gate), ``nodes`` (runnable device/fog/cloud processes), ``bench``
(latency/throughput experiments).
"""

from . import bench, domain, dsp, filtering, kws, nn, nodes

__all__ = ["bench", "domain", "dsp", "filtering", "kws", "nn", "nodes"]
__version__ = "0.1.0"
