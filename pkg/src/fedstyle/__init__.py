"""Desk-scale federated domain-generalization simulator with style screening."""

from .config import (ABLATION_PRESETS, ExperimentConfig, apply_preset,
                     parse_config, parse_config_text, render_config)
from .data import (Batch, DomainDataset, DomainSpec, QueryGallerySplit,
                   StyleTransformConfig, export_dataset_csv, generate_domain,
                   import_dataset_csv, make_identity_latents,
                   make_query_gallery_split, sample_pk_batch, style_transform)
from .errors import (ConfigError, DegenerateInputError, EvalError, FedstyleError,
                     InitError, SamplingError, ShapeError, SplitError, StateError)
from .evaluation import (MetricsReport, RankingResult, compute_cmc, compute_map,
                         evaluate_plan, evaluate_split, rank_gallery)
from .federation import (ClientState, ExperimentResult, RoundRecord, ServerState,
                         aggregate, build_domain, build_domain_specs, client_round,
                         distribute, iterations_per_epoch, run_experiment,
                         screen_and_update, screening_decision, screening_rank1,
                         setup_experiment)
from .memory import (StyleMemory, initialize_memory, load_memory, memory_digest,
                     momentum_update, prototype_matrix, save_memory)
from .nn import (Classifier, Encoder, LossConfig, SgdState, backward_encoder,
                 cross_entropy_loss, forward_encoder, forward_encoder_cached,
                 init_classifier, init_encoder, l2_normalize,
                 l2_normalize_backward, load_encoder, recognition_loss,
                 save_encoder, sgd_for, sgd_step, triplet_loss, update_lr)

__version__ = "0.1.0"
