"""QKeyMesh: multi-site QKD key management simulator"""

__version__ = "0.1.0"
