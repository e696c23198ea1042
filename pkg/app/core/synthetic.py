"""
Desk-scale fine-grained dataset generator.

Every image shows each of the P parts exactly once, so first-order (part presence) statistics
are identical across classes. A class is defined by which parts co-occur: its signature is a
matching of the parts into pairs, and the two blobs of a pair are placed close together.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from app.core.dataset import SPLIT_ORDER, Dataset, DatasetSplit
from app.errors import SpecError
from app.models import Split, SyntheticSpec

logger = logging.getLogger("SyntheticGenerator")

MAX_LAYOUT_ATTEMPTS = 200
MAX_SITE_ATTEMPTS = 100
MAX_SIGNATURE_DRAWS = 10_000

Pair = Tuple[int, int]


@dataclass(frozen=True)
class PartPlacement:
    part: int
    center: Tuple[float, float]


def matching_count(num_parts: int) -> int:
    """Number of distinct ways to pair up floor(P/2) disjoint part pairs out of P parts."""
    if num_parts % 2:
        return num_parts * matching_count(num_parts - 1)
    return math.prod(range(num_parts - 1, 0, -2))


class SyntheticGenerator:
    """
    Draws class signatures, part patterns and image layouts from one RNG stream.

    Usage:
        >>> dataset = SyntheticGenerator(SyntheticSpec(seed=3)).generate()
    """

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self._check_feasible()
        self.patterns = self._draw_patterns()
        self.signatures = self._draw_signatures()
        yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
        self._grid = (yy.astype(np.float64), xx.astype(np.float64))

    def _check_feasible(self) -> None:
        spec = self.spec
        if spec.num_classes > matching_count(spec.num_parts):
            raise SpecError(
                f"{spec.num_classes} classes need distinct pairings but {spec.num_parts} parts "
                f"allow only {matching_count(spec.num_parts)}"
            )
        span_y = spec.height - 1 - 2 * spec.edge_margin
        span_x = spec.width - 1 - 2 * spec.edge_margin
        if min(span_y, span_x) < spec.cooccurrence_radius:
            raise SpecError(
                f"grid {spec.height}x{spec.width} with edge margin {spec.edge_margin} cannot hold "
                f"two parts {spec.cooccurrence_radius} apart"
            )

    def _draw_patterns(self) -> np.ndarray:
        """(P, c) unit channel patterns: one-hot when there are enough channels."""
        spec = self.spec
        if spec.channels >= spec.num_parts:
            return np.eye(spec.num_parts, spec.channels)
        patterns = self.rng.normal(size=(spec.num_parts, spec.channels))
        return patterns / np.linalg.norm(patterns, axis=1, keepdims=True)

    def _draw_signatures(self) -> List[Tuple[Pair, ...]]:
        spec = self.spec
        signatures: List[Tuple[Pair, ...]] = []
        seen = set()
        for _ in range(MAX_SIGNATURE_DRAWS):
            if len(signatures) == spec.num_classes:
                break
            order = self.rng.permutation(spec.num_parts)
            pairs = tuple(
                sorted(tuple(sorted((int(order[i]), int(order[i + 1])))) for i in range(0, spec.num_parts - 1, 2))
            )
            if pairs not in seen:
                seen.add(pairs)
                signatures.append(pairs)
        if len(signatures) < spec.num_classes:
            raise SpecError(f"could not draw {spec.num_classes} distinct class signatures")
        return signatures

    def singles(self, label: int) -> List[int]:
        paired = {part for pair in self.signatures[label] for part in pair}
        return [part for part in range(self.spec.num_parts) if part not in paired]

    def _inside(self, point: np.ndarray) -> bool:
        spec = self.spec
        low = spec.edge_margin
        return low <= point[0] <= spec.height - 1 - low and low <= point[1] <= spec.width - 1 - low

    def _place_sites(self, sites: List[Tuple[int, ...]], rng: np.random.Generator) -> List[PartPlacement]:
        spec = self.spec
        low = np.array([spec.edge_margin, spec.edge_margin])
        high = np.array([spec.height - 1 - spec.edge_margin, spec.width - 1 - spec.edge_margin])

        for _ in range(MAX_LAYOUT_ATTEMPTS):
            placements: List[PartPlacement] = []
            centers: List[np.ndarray] = []
            for site in sites:
                for _ in range(MAX_SITE_ATTEMPTS):
                    first = rng.uniform(low, high)
                    candidate = [first]
                    if len(site) == 2:
                        angle = rng.uniform(0.0, 2.0 * np.pi)
                        distance = rng.uniform(0.5 * spec.cooccurrence_radius, spec.cooccurrence_radius)
                        second = first + distance * np.array([np.sin(angle), np.cos(angle)])
                        if not self._inside(second):
                            continue
                        candidate.append(second)
                    if all(
                        np.hypot(*(point - other)) >= spec.site_separation for point in candidate for other in centers
                    ):
                        centers.extend(candidate)
                        placements.extend(
                            PartPlacement(part, (float(point[0]), float(point[1])))
                            for part, point in zip(site, candidate)
                        )
                        break
                else:
                    break
            else:
                return placements
        raise SpecError(
            f"could not place {sum(len(site) for site in sites)} parts on a {spec.height}x{spec.width} grid "
            f"with separation {spec.site_separation}; enlarge the grid or reduce separation"
        )

    def sample_layout(self, label: int, rng: np.random.Generator = None) -> List[PartPlacement]:
        """Part positions for one image of class `label`; broken pairs become two single sites."""
        rng = self.rng if rng is None else rng
        sites: List[Tuple[int, ...]] = []
        for pair in self.signatures[label]:
            if rng.random() < self.spec.pair_break_prob:
                sites.extend([(pair[0],), (pair[1],)])
            else:
                sites.append(pair)
        sites.extend((part,) for part in self.singles(label))
        return self._place_sites(sites, rng)

    def render(self, layout: List[PartPlacement], rng: np.random.Generator = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        spec = self.spec
        yy, xx = self._grid
        image = np.zeros(spec.image_shape)
        for placement in layout:
            jitter = rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
            amplitude = spec.amplitude * (1.0 + jitter)
            cy, cx = placement.center
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * spec.blob_sigma**2))
            image += amplitude * self.patterns[placement.part][:, None, None] * blob[None]
        if spec.noise_std > 0:
            image += rng.normal(0.0, spec.noise_std, size=image.shape)
        return image

    def _per_class(self, split: Split) -> int:
        spec = self.spec
        return {
            Split.LABELED: spec.labeled_per_class,
            Split.UNLABELED: spec.unlabeled_per_class,
            Split.VALIDATION: spec.validation_per_class,
            Split.TEST: spec.test_per_class,
        }[split]

    def generate(self) -> Dataset:
        """All four splits, class-sorted, with sequential sample ids across splits."""
        spec = self.spec
        next_id = 0
        parts = {}
        for split in SPLIT_ORDER:
            count = self._per_class(split)
            images, labels = [], []
            for label in range(spec.num_classes):
                for _ in range(count):
                    images.append(self.render(self.sample_layout(label)))
                    labels.append(label)
            total = len(images)
            parts[split.value] = DatasetSplit(
                split=split,
                images=np.stack(images) if images else np.zeros((0,) + spec.image_shape),
                ids=np.arange(next_id, next_id + total, dtype=np.int64),
                labels=None if split is Split.UNLABELED else np.asarray(labels, dtype=np.int64),
            )
            next_id += total

        dataset = Dataset(
            num_classes=spec.num_classes,
            spec=spec,
            meta={"signatures": [[list(pair) for pair in signature] for signature in self.signatures]},
            **parts,
        )
        dataset.validate()
        logger.info(f"Generated synthetic dataset (seed {spec.seed}): {dataset.counts()}")
        return dataset


def generate(spec: SyntheticSpec) -> Dataset:
    return SyntheticGenerator(spec).generate()
