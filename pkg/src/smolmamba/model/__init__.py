"""Network definition, layers and checkpoint I/O."""
from .layers import BatchNorm, Linear, Module, firing_rate, masked_batchnorm, mgap, reverse_index, reverser
from .network import (Diagnostics, LayerTrace, ModelConfig, SmolMambaBlock, VisionSmolMamba,
                      patch_embed_sps_lite, relative_position_embedding, smlp, smolmamba_block)

__all__ = [
    "BatchNorm", "Diagnostics", "LayerTrace", "Linear", "ModelConfig", "Module", "SmolMambaBlock",
    "VisionSmolMamba", "firing_rate", "masked_batchnorm", "mgap", "patch_embed_sps_lite",
    "relative_position_embedding", "reverse_index", "reverser", "smlp", "smolmamba_block",
]
