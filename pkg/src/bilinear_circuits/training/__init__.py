"""Synthetic tasks, trainable models, Adam and gradient checking."""
from .gradcheck import GradCheckResult, grad_check
from .models import LayerAutoencoder, TransformerModel, model_from_params, normalize_arch
from .tasks import (
    ModelConfig,
    OptConfig,
    TaskConfig,
    gen_bigram_batch,
    gen_induction_batch,
    gen_superposition_batch,
    gen_token_batch,
    make_dictionary,
)
from .train import dictionary_recovery, evaluate, train, unigram_loss
