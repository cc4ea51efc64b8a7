from .checkpoint import (CheckpointError, CheckpointMagicError, CheckpointShapeError,
                         CheckpointTruncatedError, CheckpointVersionError, load_checkpoint, save_checkpoint)
from .network import (AGGREGATORS, GraphBatch, Gradients, NetConfig, NetworkParams, aggregate, attention_weights,
                      backward, backward_batch, forward, forward_batch, init_params, pack_arrays, pack_graph)
from .optim import AdamState, adam_step, clip_gradient, global_norm, polyak_update
