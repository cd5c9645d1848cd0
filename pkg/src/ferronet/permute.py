"""2x2 patch-permutation augmentation.

An image is cut into quadrants numbered left-to-right, top-to-bottom
(0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right) and
reassembled in one of the 4! = 24 orders. A permutation's label is the
lexicographic rank of its slot -> source mapping, so label 0 is the identity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

NUM_PATCHES = 4
NUM_PERMUTATIONS = 24
MODES = ("online_uniform", "identity_only")


@dataclass(frozen=True)
class PatchPermutation:
    index: int
    # mapping[slot] = source patch placed at that slot
    mapping: tuple[int, int, int, int]

    def __post_init__(self):
        if sorted(self.mapping) != [0, 1, 2, 3]:
            raise ContractError(f"mapping {self.mapping} is not a bijection on 0..3")


@dataclass
class PermutedSample:
    image: np.ndarray
    class_label: int
    perm_label: int


_ALL = tuple(PatchPermutation(i, m) for i, m in enumerate(itertools.permutations(range(NUM_PATCHES))))
_BY_MAPPING = {p.mapping: p for p in _ALL}


def enumerate_permutations() -> tuple[PatchPermutation, ...]:
    """All 24 permutations in lexicographic order of their mappings."""
    return _ALL


def permutation_from_mapping(mapping: Sequence[int]) -> PatchPermutation:
    try:
        return _BY_MAPPING[tuple(int(m) for m in mapping)]
    except KeyError:
        raise ContractError(f"{tuple(mapping)} is not a permutation of 0..3") from None


def inverse_of(perm: PatchPermutation) -> PatchPermutation:
    inv = [0] * NUM_PATCHES
    for slot, src in enumerate(perm.mapping):
        inv[src] = slot
    return _BY_MAPPING[tuple(inv)]


def compose(first: PatchPermutation, second: PatchPermutation) -> PatchPermutation:
    """The single permutation equal to applying ``first`` and then ``second``."""
    return _BY_MAPPING[tuple(first.mapping[second.mapping[s]] for s in range(NUM_PATCHES))]


def _check_even(image: np.ndarray) -> None:
    if image.ndim != 3:
        raise ContractError(f"expected a [C, H, W] image, got shape {image.shape}")
    _, h, w = image.shape
    if h % 2 or w % 2:
        raise ContractError(f"image sides must be even to split into quadrants, got {h}x{w}")


def split_into_patches(image: np.ndarray) -> list[np.ndarray]:
    """Quadrants ordered top-left, top-right, bottom-left, bottom-right (views)."""
    _check_even(image)
    _, h, w = image.shape
    hh, hw = h // 2, w // 2
    return [image[:, :hh, :hw], image[:, :hh, hw:], image[:, hh:, :hw], image[:, hh:, hw:]]


def permute_image(image: np.ndarray, perm: PatchPermutation) -> np.ndarray:
    patches = split_into_patches(image)
    _, h, w = image.shape
    hh, hw = h // 2, w // 2
    out = np.empty_like(image)
    for slot, (r, c) in enumerate(((0, 0), (0, hw), (hh, 0), (hh, hw))):
        out[:, r:r + hh, c:c + hw] = patches[perm.mapping[slot]]
    return out


def apply_permutation(image: np.ndarray, perm: PatchPermutation, class_label: int = -1) -> PermutedSample:
    return PermutedSample(permute_image(image, perm), class_label, perm.index)


def augment_sample(image: np.ndarray, class_label: int, rng: Optional[np.random.Generator],
                   mode: str = "online_uniform") -> PermutedSample:
    """Permute one image: uniformly at random, or with the identity for evaluation."""
    if mode not in MODES:
        raise ContractError(f"augmentation mode must be one of {MODES}, got {mode!r}")
    if mode == "identity_only":
        return apply_permutation(image, _ALL[0], class_label)
    if rng is None:
        raise ContractError("online_uniform needs a random generator")
    return apply_permutation(image, _ALL[int(rng.integers(NUM_PERMUTATIONS))], class_label)


def permute_batch(images: np.ndarray, perm_labels: np.ndarray) -> np.ndarray:
    """Apply ``perm_labels[i]`` to ``images[i]`` for a [B, C, H, W] stack."""
    if images.ndim != 4:
        raise ContractError(f"expected [B, C, H, W], got {images.shape}")
    _check_even(images[0] if len(images) else np.zeros((1, 2, 2)))
    out = np.empty_like(images)
    for i, label in enumerate(perm_labels):
        out[i] = permute_image(images[i], _ALL[int(label)])
    return out


def expand_offline(images: np.ndarray, class_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every image under all 24 permutations: returns (images, class_labels, perm_labels).

    Output row ``24 * i + k`` is source image ``i`` under permutation ``k``.
    """
    n = len(images)
    if n == 0:
        return images[:0].copy(), np.asarray(class_labels)[:0].copy(), np.zeros(0, dtype=np.int64)
    _check_even(images[0])
    out = np.empty((n * NUM_PERMUTATIONS,) + images.shape[1:], dtype=images.dtype)
    for i in range(n):
        for perm in _ALL:
            out[i * NUM_PERMUTATIONS + perm.index] = permute_image(images[i], perm)
    perm_labels = np.tile(np.arange(NUM_PERMUTATIONS, dtype=np.int64), n)
    return out, np.repeat(np.asarray(class_labels, dtype=np.int64), NUM_PERMUTATIONS), perm_labels
