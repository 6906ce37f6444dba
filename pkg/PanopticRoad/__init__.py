from .model import MultiTaskModel, ModelConfig, PredictionBundle, build_model, count_parameters, load_checkpoint
from .config import RunConfig, load_config
from .trainer import Trainer
from .predictor import Predictor
from .evaluate import evaluate
from .synthetic import generate_synthetic
