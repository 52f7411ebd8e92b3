"""Test-time debiasing of zero-shot image classification with prompt embeddings.

Adapts a small gate and scale on the class prompts per test image, using
attention-guided foreground/background views of that image.
"""

from .adapt import AdaptationConfig, AdaptationTrace, adapt_sample, adapt_stream
from .attention import AttentionMap, gradcam
from .core import (
    BiPromptError,
    DegenerateCollapseError,
    DegenerateInputError,
    ImageView,
    InvalidInputError,
    InvalidTaskError,
    NumericalFailureError,
    UnsupportedEncoderError,
    predict,
    similarity_logits,
)
from .debias import (
    PromptSet,
    load_prompt_state,
    normalize_prompts,
    random_erase,
    reset,
    save_prompt_state,
    split_views,
)
from .evalbench import (
    BiasSpec,
    GroupedExample,
    average_accuracy,
    conditional_mutual_information,
    generate_dataset,
    worst_group_accuracy,
)
from .objective import LossWeights, total_loss_biprompt, total_loss_seraser

__version__ = "0.1.0"
