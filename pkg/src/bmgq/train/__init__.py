from .loop import (CURVE_FIELDS, METRIC_FIELDS, VARIANTS, TrainConfig, TrainResult, config_fingerprint,
                   epsilon_decay, evaluate, evaluate_checkpoint, make_policy, td_targets, train, train_step)
from .replay import Batch, ReplayMemory
