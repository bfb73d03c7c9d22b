"""SO(3)-equivariant voxel CNN with local polynomial activations in rotation space."""

from .network import EquiLoPONet, NetworkSpec, PlainCNN
from .signal import SO3Signal
from .so3_math import Rotation

__all__ = ["EquiLoPONet", "NetworkSpec", "PlainCNN", "Rotation", "SO3Signal"]
__version__ = "0.1.0"
