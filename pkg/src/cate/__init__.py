"""Concept anchor-guided task-specific feature enhancement for multiple instance learning."""
from .bags import Bag, read_store, write_store
from .cfi import SnnLayer, enhance, interference, similarity_vector
from .cib import PimConfig, StochasticEncoder, encode, infonce_estimate, pim_loss, sim_loss
from .concepts import ConceptBank, build_anchor, load_concept_bank, load_concept_file, select_representative
from .errors import CateError, ValidationError
from .evalkit import EvalReport, SplitPlan, ablate, auc, make_splits, parse_site, run_experiment
from .kernels import BACKEND
from .mil import AttentionHead, classification_loss
from .synth import WorldSpec, gaussian_mi_oracle, generate_world, linear_gaussian_channel_mi
from .trainer import MODES, TrainConfig, load_checkpoint, save_checkpoint, total_loss, train

__version__ = "0.1.0"
