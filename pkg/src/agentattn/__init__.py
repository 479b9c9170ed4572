"""Agent attention: two chained softmax attentions through a small set of agent tokens."""

from .agent_bias import AgentBiasParams, init_bias_params, materialize_b1, materialize_b2, resize_bias_for
from .agent_module import (
    AgentModuleParams,
    ModuleOutput,
    agent_attention_training_free,
    forward,
    init_agent_module,
    training_free,
    training_free_inputs,
)
from .attention import (
    AttentionInputs,
    agent_attention_backward,
    agent_attention_pure,
    equivalent_phi,
    linear_attention,
    softmax_attention,
)
from .bench import BenchRow, FlopModel, flop_count, flops_model_forward, run_scaling
from .errors import (
    AgentAttnError,
    ConfigError,
    DimensionError,
    DTypeError,
    NumericDomainError,
    ResourceError,
)
from .model_zoo import ModelPreset, ParamReport, build, count_params, forward_logits, load_preset
from .tensor_core import count_macs, matmul, row_softmax
from .verify import CheckReport, composed_matrix_oracle, gradient_check, property_suite

__version__ = "0.1.0"
