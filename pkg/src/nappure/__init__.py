"""Purification of non-additive adversarial perturbations.

Jointly recovers a clean image and the parameters of a known transformation
family by alternating Adam updates on an image-likelihood term, a
perturbation prior and a reconstruction term.
"""

from nappure.tensor import (
    derive_rng,
    export_ppm,
    make_rng,
    read_tensor,
    sample_gaussian,
    write_tensor,
)
from nappure.transforms import (
    TransformSpec,
    apply,
    apply_vjp,
    gaussian_smooth_flow,
    identity_params,
    potential,
    potential_grad,
    project_constraints,
)
from nappure.prior import GmmPrior, SigmaSchedule, denoise, denoise_vjp, likelihood_loss
from nappure.purifier import (
    AdamState,
    PurifyConfig,
    PurifyResult,
    adam_step,
    lm_purify,
    nappure_purify,
    total_loss,
)
from nappure.attack import (
    AttackConfig,
    SoftmaxClassifier,
    cross_entropy_grad,
    evaluate,
    pgd_attack,
    train_classifier,
)

__version__ = "0.1.0"
