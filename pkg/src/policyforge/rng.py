"""Deterministic, splittable random streams.

Every stream is labelled by ``(root_seed, path)``. The label is fed to
:class:`numpy.random.SeedSequence` (``entropy=root_seed``,
``spawn_key=path``) and the resulting state seeds a PCG64 generator
(128-bit state plus 128-bit increment, period 2**128). Child streams are
therefore pure functions of the parent label and the child id; drawing from
a parent never changes its children.

Simulation code names one stream per (repetition, module, purpose), e.g.
``root.derive(rep).derive(DGP)``, so that changing the number of trees in a
forest cannot perturb the data-generating draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_ROOT_SEED = 20240101

# Purpose ids used when deriving per-repetition streams.
DGP = 1
FOLDS = 2
NUISANCE = 3
CAUSAL_FOREST = 4
NDR = 5
BART = 6
POLICY = 7
CFTT = 8
SECOND_STAGE = 9

_MASK64 = (1 << 64) - 1


@dataclass(eq=False)
class RngStream:
    """A labelled PCG64 stream.

    Two streams with equal labels produce identical output sequences.
    The generator is created lazily and then advances as it is drawn from.
    """

    root_seed: int = DEFAULT_ROOT_SEED
    path: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.root_seed = int(self.root_seed) & _MASK64
        self.path = tuple(int(i) & _MASK64 for i in self.path)

    @property
    def label(self) -> tuple[int, tuple[int, ...]]:
        return (self.root_seed, self.path)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.root_seed, spawn_key=self.path)

    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.PCG64(self.seed_sequence()))
        return self._gen

    def derive(self, id: int) -> RngStream:
        return RngStream(self.root_seed, self.path + (int(id),))

    def seed64(self) -> int:
        """A 64-bit integer fixed by the label; seeds compiled kernels."""
        return int(self.seed_sequence().generate_state(1, np.uint64)[0] >> np.uint64(1))


def derive(parent: RngStream, id: int) -> RngStream:
    """Child stream of ``parent`` identified by ``id``."""
    return parent.derive(id)


def draw_uniform(s: RngStream, size: int | None = None) -> float | np.ndarray:
    """Uniform on [0, 1)."""
    return s.generator().random(size)


def draw_normal(s: RngStream, size: int | None = None) -> float | np.ndarray:
    """Standard normal (numpy's ziggurat sampler)."""
    return s.generator().standard_normal(size)


def draw_bernoulli(s: RngStream, p: float | np.ndarray, size: int | None = None) -> int | np.ndarray:
    """Bernoulli(p) as 0/1 integers; ``p`` may be an array of probabilities."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~((p_arr >= 0.0) & (p_arr <= 1.0))):
        raise ValueError("bernoulli probability must lie in [0, 1]")
    if size is None and p_arr.ndim == 0:
        return int(s.generator().random() < p_arr)
    shape = size if size is not None else p_arr.shape
    return (s.generator().random(shape) < p_arr).astype(np.int8)
