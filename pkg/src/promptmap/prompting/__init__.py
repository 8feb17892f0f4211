from .adapter import PromptAdapter, ScalingVector, fuse_prompted, inter_layer_fuse, prompt_adapter_apply
from .attention import cross_attend_token, global_cross_attention, spatially_aligned_cross_attention
from .baselines import LinearProbeModel, SequentialPrompt, SequentialPromptModel, sequential_baseline_forward
from .maps import PromptMap, init_prompt_map, pool_positions
from .model import DualPathwayModel, PromptConfig, default_prompt_layers, dual_pathway_forward
from .windows import WindowSpec, extract_window, window, window_table

__all__ = [
    "PromptAdapter", "ScalingVector", "fuse_prompted", "inter_layer_fuse", "prompt_adapter_apply",
    "cross_attend_token", "global_cross_attention", "spatially_aligned_cross_attention",
    "LinearProbeModel", "SequentialPrompt", "SequentialPromptModel", "sequential_baseline_forward",
    "PromptMap", "init_prompt_map", "pool_positions",
    "DualPathwayModel", "PromptConfig", "default_prompt_layers", "dual_pathway_forward",
    "WindowSpec", "extract_window", "window", "window_table",
]
