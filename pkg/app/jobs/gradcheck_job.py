import asyncio
import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from app.config import GradCheckConfig
from app.core.network import Network, build_network, cross_entropy, entropy
from app.core.tensor import softmax_rows
from app.core.trainer import Batch, combined_gradients
from app.models import (
    FeatureExtractorConfig,
    GradCheckReport,
    LayerError,
    LayerKind,
    LayerSpec,
    ModelConfig,
    ParamGroup,
    SopConfig,
    TrainConfig,
    TrainMode,
)
from app.oracle.gradients import compare_gradients, finite_diff_grad
from app.utils import save_to_json


def toy_model_config(base: Optional[ModelConfig] = None) -> ModelConfig:
    """conv 3x3 (6 channels, padding 1) -> relu -> pointwise (6 channels): d = 6, m = 21."""
    base = base or ModelConfig()
    layers = [
        LayerSpec(kind=LayerKind.CONV2D, out_channels=6, kernel_size=3, padding=1),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.POINTWISE_LINEAR, out_channels=6),
    ]
    return base.model_copy(update={"feature_extractor": FeatureExtractorConfig(layers=layers)})


class GradCheckJob:
    """
    Gradient gate for the full pipeline: conv -> SOP (unrolled Newton-Schulz) -> GRL ->
    normalized classifier -> cross-entropy and entropy.

    The gradients the trainer applies (labeled pass plus the GRL unlabeled pass) are compared
    against central finite differences of L + lambda*H for theta_F and L - lambda*H for theta_C.
    """

    def __init__(
        self,
        model_config: Optional[ModelConfig] = None,
        sop_config: Optional[SopConfig] = None,
        step: float = GradCheckConfig.STEP,
        tolerance: float = GradCheckConfig.TOLERANCE,
        seed: int = GradCheckConfig.SEED,
    ):
        self.logger = logging.getLogger("GradCheckJob")
        self.config = GradCheckConfig()
        self.model_config = toy_model_config(model_config)
        self.sop_config = sop_config or SopConfig()
        self.step = step
        self.tolerance = tolerance
        self.seed = seed

    def build(self) -> Tuple[Network, Batch, Batch, TrainConfig]:
        rng = np.random.default_rng(self.seed)
        network = build_network(
            TrainMode.OURS,
            self.model_config,
            self.sop_config,
            self.config.INPUT_SHAPE,
            self.config.NUM_CLASSES,
            rng,
        )
        size = self.config.BATCH_SIZE
        shape = (size,) + tuple(self.config.INPUT_SHAPE)
        labeled = Batch(
            images=rng.normal(size=shape),
            ids=np.arange(size),
            labels=rng.integers(0, self.config.NUM_CLASSES, size=size),
        )
        unlabeled = Batch(images=rng.normal(size=shape), ids=np.arange(size, 2 * size))
        train_config = TrainConfig(mode=TrainMode.OURS, **{"lambda": self.config.LAMBDA})
        return network, labeled, unlabeled, train_config

    def check(self) -> GradCheckReport:
        network, labeled, unlabeled, train_config = self.build()
        _, _, analytic = combined_gradients(network, labeled, unlabeled, train_config)
        lambda_ = train_config.lambda_

        def objective(sign: float):
            def value() -> float:
                L = cross_entropy(network.logits(labeled.images), labeled.labels).item()
                H = entropy(softmax_rows(network.logits(unlabeled.images))).item()
                return L + sign * lambda_ * H

            return value

        objectives = {
            ParamGroup.FEATURE_EXTRACTOR: objective(1.0),
            ParamGroup.CLASSIFIER: objective(-1.0),
        }
        layers = []
        for param in network.parameters:
            (numeric,) = finite_diff_grad(objectives[param.group], [param.data], h=self.step)
            comparison = compare_gradients(analytic[param.name], numeric)
            layers.append(
                LayerError(
                    name=param.name,
                    group=param.group,
                    max_rel_err=comparison.max_rel_err,
                    mean_rel_err=comparison.mean_rel_err,
                )
            )
            self.logger.info(
                f"{param.name}: max rel err {comparison.max_rel_err:.2e}, mean {comparison.mean_rel_err:.2e}"
            )

        max_rel_err = max(layer.max_rel_err for layer in layers)
        report = GradCheckReport(
            tolerance=self.tolerance,
            max_rel_err=max_rel_err,
            passed=max_rel_err <= self.tolerance,
            layers=layers,
        )
        if report.passed:
            self.logger.info(f"Gradient check passed: max rel err {max_rel_err:.2e} <= {self.tolerance:g}")
        else:
            self.logger.error(f"Gradient check FAILED: max rel err {max_rel_err:.2e} > {self.tolerance:g}")
        return report

    async def run(self, output: Optional[Path] = None) -> GradCheckReport:
        report = await asyncio.to_thread(self.check)
        if output is not None:
            await save_to_json(report.model_dump(mode="json"), Path(output), indent=2)
        return report
