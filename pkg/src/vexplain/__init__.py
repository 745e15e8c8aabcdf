"""Class-discriminative conditional sentence generation.

A stacked-LSTM generator conditioned on an image feature and a class
embedding, trained with a relevance (cross-entropy) loss plus a
REINFORCE-weighted discriminative loss whose reward is a frozen sentence
classifier's probability of the true class, evaluated with n-gram TF-IDF
class-relevance metrics.
"""

from .classifier import (
    ClassifierConfig,
    ClassifierModel,
    classify,
    load_classifier,
    reward,
    save_classifier,
    train_classifier,
)
from .data import (
    Corpus,
    Instance,
    SynthSpec,
    Vocabulary,
    build_vocabulary,
    generate_synth,
    load_corpus,
    save_corpus,
    tokenize,
)
from .generator import (
    Conditioning,
    GeneratorModel,
    SampledSentence,
    compute_class_embeddings,
    forward_step,
    greedy_decode,
    init_generator,
    load_generator,
    relevance_loss,
    sample_sequence,
    save_generator,
)
from .metrics import (
    MetricReport,
    NgramStats,
    cider,
    class_rank,
    class_similarity,
    evaluate_models,
)
from .nnet import GradientTape, grad_check, lstm_step, lstm_step_backward, softmax
from .training import (
    MODES,
    TrainConfig,
    UpdateRecord,
    combined_update,
    discriminative_gradient,
    mode_flags,
    oracle_expected_reward,
    train,
)

__version__ = "0.1.0"
