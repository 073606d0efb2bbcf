"""Split forward pass around the feature-augmentation hook."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .augmentation import AugState, fata_augment
from .nn import LayerStack
from .tensor import Tensor


class FataModel:
    """A ``LayerStack`` with an augmentation point after encoder layer ``aug_position``.

    Positions are 0-based: 0 means "after the first encoder layer".
    """

    def __init__(self, stack: LayerStack, aug_position: int = 2, mode: str = "adapt") -> None:
        self.stack = stack
        self.aug_position = aug_position
        self.mode = mode
        self._check_index(aug_position)

    @property
    def num_layers(self) -> int:
        return len(self.stack)

    @property
    def num_classes(self) -> int:
        return self.stack.config.num_classes

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.num_layers:
            raise IndexError(f"layer index {i} outside [0, {self.num_layers - 1}]")

    def forward_to(self, x, i: int | None = None) -> Tensor:
        """Feature after encoder layer ``i``."""
        i = self.aug_position if i is None else i
        self._check_index(i)
        x = T.as_tensor(x)
        expected = self.stack.config.input_shape
        if x.shape[1:] != expected:
            raise T.ShapeError("forward_to", x.shape, (-1,) + expected)
        h = x
        for blk in self.stack.layers[: i + 1]:
            h = blk(h, self.mode)
        return h

    def forward_from(self, z, i: int | None = None) -> Tensor:
        """Class probabilities from a feature taken after layer ``i``."""
        i = self.aug_position if i is None else i
        self._check_index(i)
        z = T.as_tensor(z)
        expected = self.stack.layer_output_shape(i)
        if z.shape[1:] != expected:
            raise T.ShapeError("forward_from", z.shape, (-1,) + expected)
        h = z
        for blk in self.stack.layers[i + 1 :]:
            h = blk(h, self.mode)
        return T.softmax(self.stack.head(h))

    def logits(self, x) -> Tensor:
        h = T.as_tensor(x)
        for blk in self.stack.layers:
            h = blk(h, self.mode)
        return self.stack.head(h)

    def __call__(self, x) -> Tensor:
        return T.softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            return T.argmax(self.logits(x), axis=-1)

    def degenerate_norm(self) -> bool:
        """True when a batch-norm layer just normalized a single-sample batch."""
        return any(n.last_degenerate for n in self.stack.norm_layers())

    def two_branch(self, x, aug: AugState) -> tuple[Tensor, Tensor, np.ndarray]:
        """Original and augmented predictions from one shared encoder prefix.

        Returns ``(p_orig, p_aug, pseudo_label)``. The pseudo-label is the
        detached argmax of ``p_orig``. The caller decides whether ``p_orig``
        carries a gradient.
        """
        z = self.forward_to(x)
        p_orig = self.forward_from(z)
        p_aug = self.forward_from(fata_augment(z, aug))
        pseudo = T.argmax(T.stop_gradient(p_orig), axis=-1)
        return p_orig, p_aug, pseudo
