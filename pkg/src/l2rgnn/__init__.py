"""Learning-to-reweight graph classification under spurious motif bias."""

from .bilevel import (QueueState, RunMetrics, TrainConfig, TrainResult,
                      Trainer, evaluate, momentum_update, outer_step_theta,
                      second_order_correction, train)
from .checkpoint import load_checkpoint, save_checkpoint
from .decorrelation import (ClusterAssignment, CorrelationProfile, RFFBank,
                            cluster_variables, decor_loss, dis,
                            partial_cross_cov, pearson_corr, update_profile,
                            weight_map, weight_values)
from .errors import (DatasetParseError, InvalidArgumentError, NumericalError,
                     SchemaError, ShapeError)
from .gnn import (ModelConfig, RepresentationBatch, batch_embed, forward,
                  forward_batch, gradcheck, init_params, sgd_step,
                  weighted_loss)
from .graphs import (Graph, GraphDataset, SyntheticSpec, generate_motif,
                     generate_synthetic_dataset, load_dataset, save_dataset)

__version__ = "0.1.0"
