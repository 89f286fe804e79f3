"""dlab: a desk-scale lab for selective tuning and forgetting in a tiny multimodal decoder."""

__version__ = "0.1.0"

from dlab.autograd import ContractError, Tape, finite_diff_check, reverse_grad, silu, softmax_rows
from dlab.checkpoint import FormatError, load_checkpoint, save_checkpoint
from dlab.curriculum import (AccuracyMatrix, SequenceMetrics, compute_metrics, evaluate, paired_t_test,
                             pretrain_base, run_sequence)
from dlab.groups import GROUP_NAMES, ConfigError, FreezeMask, ParamGroup, resolve_group
from dlab.mitigation import (LoraAdapter, lora_forward, lora_merge, moe_forward, moe_wrap,
                             wise_ft_interpolate)
from dlab.model import (ForwardTrace, ModelConfig, TinyLmm, attention_sublayer, forward_trace, greedy_decode,
                        init_model, mlp_sublayer)
from dlab.objectives import DistillConfig, TaskBatch, combined_loss, distill_loss, task_loss
from dlab.probes import AttributionReport, NumericTokenSet, ProbeBatch, layer_attribution, ntb
from dlab.tasks import SyntheticTaskSpec, generate_task
