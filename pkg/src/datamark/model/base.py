"""The classifier interface every verification routine talks to."""

from __future__ import annotations

import numpy as np

from datamark.core import Image


class Classifier:
    """Anything mapping an image to a posterior vector over ``num_classes`` labels.

    Subclasses implement :meth:`posterior`; :meth:`posterior_batch` may be
    overridden for speed but must return the same values.  ``reentrant``
    declares whether concurrent queries are safe.
    """

    num_classes: int
    reentrant: bool = False

    def posterior(self, image: Image) -> np.ndarray:
        raise NotImplementedError

    def posterior_batch(self, images: np.ndarray) -> np.ndarray:
        """Posteriors for an (N, C, H, W) uint8 stack, shape (N, K)."""
        return np.stack([self.posterior(Image(img)) for img in images])


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index (np.argmax already does this)."""
    return np.asarray(probs).argmax(axis=-1)
