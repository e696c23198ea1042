"""
Expected parameter updates of one plain-SGD step, assembled from two separate backward passes
without gradient reversal:

    theta_F: -lr_F * (grad L + s_F * lambda * grad H)
    theta_C: -lr_C * (grad L + s_C * lambda * grad H)

with (s_F, s_C) = (+1, -1) for the adversarial modes and (+1, +1) for ent_cov.
"""

from typing import Dict, Optional

import numpy as np

from app.core.network import Network, cross_entropy, entropy
from app.core.tensor import Tape, softmax_rows
from app.errors import ContractError
from app.models import ParamGroup, TrainConfig, TrainMode


def entropy_signs(mode: TrainMode) -> Dict[ParamGroup, float]:
    if mode.adversarial:
        return {ParamGroup.FEATURE_EXTRACTOR: 1.0, ParamGroup.CLASSIFIER: -1.0}
    return {ParamGroup.FEATURE_EXTRACTOR: 1.0, ParamGroup.CLASSIFIER: 1.0}


def loss_gradients(network: Network, images, labels=None) -> Dict[str, np.ndarray]:
    """Gradient of L (labels given) or of H (no labels) for every parameter, no GRL."""
    with Tape() as tape:
        logits = network.logits(images)
        loss = cross_entropy(logits, labels) if labels is not None else entropy(softmax_rows(logits))
    return tape.parameter_gradients(loss, network.parameters)


def expected_sgd_update(
    network: Network,
    labeled_images,
    labels,
    unlabeled_images: Optional[np.ndarray],
    config: TrainConfig,
) -> Dict[str, np.ndarray]:
    """
    Per-parameter update delta (theta_new - theta) that a combined train_step must realize.
    :raises ContractError: momentum or weight decay configured (the oracle covers plain SGD).
    """
    if config.momentum or config.weight_decay:
        raise ContractError("the update oracle covers plain SGD only")
    lr = config.lr_by_group()
    grad_L = loss_gradients(network, labeled_images, labels)
    use_entropy = config.mode.uses_unlabeled and config.lambda_ != 0 and unlabeled_images is not None
    grad_H = loss_gradients(network, unlabeled_images) if use_entropy else None
    signs = entropy_signs(config.mode)

    updates = {}
    for param in network.parameters:
        direction = grad_L[param.name]
        if grad_H is not None:
            direction = direction + signs[param.group] * config.lambda_ * grad_H[param.name]
        updates[param.name] = -lr[param.group] * direction
    return updates
