"""mixtrack: vision-language tracking at desk scale.

Library layout:

- ``autodiff``   minimal float64 tensor core with reverse-mode gradients
- ``language``   toy deterministic token embedder, attribute dictionary,
                 missing-annotation strategies
- ``fusion``     channel-selection fusion of language into vision features
                 plus the contrastive alignment loss
- ``blocks``     shuffle-style candidate blocks of the search space
- ``supernet``   two-branch weight-sharing supernet, path codes, subnet
                 extraction
- ``evolution``  evolutionary code search with a brute-force oracle
- ``synth``      synthetic scene / sequence generator with distractors
- ``tracking``   matching head, losses, SUC metric, train / retrain /
                 evaluate loops
- ``cli``        batch entry points (gen-data, search, retrain-eval,
                 gradcheck)
"""

from mixtrack.autodiff import Tensor, grad_check, no_grad

__all__ = ["Tensor", "grad_check", "no_grad"]
__version__ = "0.1.0"
