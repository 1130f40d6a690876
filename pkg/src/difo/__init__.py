"""Source-free domain adaptation by distilling a prompt-customized vision-language model.

The pieces, bottom up: information losses (:mod:`difo.losses`), the frozen
ViL branch and prompt learning (:mod:`difo.vil`), the target classifier
(:mod:`difo.target`), the prediction bank (:mod:`difo.bank`), the
alternating training loop (:mod:`difo.adaptation`), synthetic data
(:mod:`difo.data`) and metrics (:mod:`difo.evaluation`).
"""

__version__ = "0.1.0"

from .adaptation import AdaptationConfig, AdaptResult, EpochRecord, adapt, mka_objective, variant
from .bank import PredictionBank, fuse, init_bank, most_likely, sample_weight
from .benchmark import ToyBenchmark, build_benchmark
from .data import (DomainDataset, ShiftSpec, export_dataset, generate_shift_pair, load_dataset, load_image_folder,
                   open_set_split, partial_set_split)
from .errors import (ConfigError, DataError, DifoError, DivergenceUndefinedError, InvalidInputError, NumericalError,
                     ShapeError)
from .evaluation import (accuracy, confusion_matrix, mean_class_accuracy, mmd, mmd_trajectory, open_set_scores,
                         per_class_accuracy, train_oracle, weight_sweep, zero_shot_accuracy)
from .losses import (balance_loss, batch_joint, entropy, kl_divergence, mce_log_ratio, mce_loss, mutual_information,
                     pc_loss, softmax, tsc_loss)
from .target import SourceConfig, TargetModel, forward, load_model, predict, pretrain_source, save_model, smooth_labels
from .vil import PromptContext, ToyViLConfig, ToyViLModel, build_toy_vil, customize, get_backend, init_prompt, \
    register_backend, vil_predict
