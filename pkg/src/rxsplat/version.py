"""Version information for rxsplat."""

__version__ = "0.3.0"

# Bumped whenever a file format or config schema changes shape
CHECKPOINT_VERSION = 1
CONFIG_SCHEMA_VERSION = 1


def get_current_version():
    """Get the current installed version."""
    return __version__
