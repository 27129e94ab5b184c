"""rxsplat - Receiver-conditioned Gaussian splatting for RF data synthesis"""

from rxsplat.version import __version__

__all__ = ["__version__"]
