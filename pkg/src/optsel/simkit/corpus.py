"""Synthetic mixed-quality corpora.

Clean samples are labelled by a fixed teacher network.  Noisy-label samples
share the clean feature distribution but carry uniformly resampled labels.
Off-distribution samples are labelled from a latent clean input that is
rotated, scaled and shifted before it is observed, so their feature/label
relation conflicts with the target task.  The held-out target and test sets
are always clean.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import container
from ..errors import ConfigError
from .model import LinearStackModel

QUALITIES = ("clean", "noisy_label", "off_distribution")


@dataclass(frozen=True)
class Sample:
    id: int
    tokens: np.ndarray  # d0 x T
    label: np.ndarray  # (T,) class ids
    quality: str = "clean"


@dataclass(frozen=True)
class NoiseParams:
    offdist_scale: float = 3.0
    offdist_shift: float = 1.0
    teacher_scale: float = 3.0


@dataclass
class Corpus:
    train: list[Sample]
    target: list[Sample]
    test: list[Sample]
    teacher: LinearStackModel | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.train)

    def quality_fractions(self) -> dict[str, float]:
        counts = {q: 0 for q in QUALITIES}
        for s in self.train:
            counts[s.quality] += 1
        return {q: c / max(len(self.train), 1) for q, c in counts.items()}


def _check_mix(mix: Sequence[float]) -> np.ndarray:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0, atol=1e-9):
        raise ConfigError(f"mix must be three non-negative fractions summing to 1, got {list(mix)}")
    return mix


def gen_corpus(
    seed: int,
    n: int,
    dims: Sequence[int],
    mix: Sequence[float] = (0.4, 0.3, 0.3),
    noise: NoiseParams = NoiseParams(),
    T: int = 4,
    n_target: int = 200,
    n_test: int = 1000,
    activation: str = "tanh",
) -> Corpus:
    """Draw a corpus for a teacher network with layer widths ``dims = [d0, ..., C]``."""
    mix = _check_mix(mix)
    if n < 1 or T < 1:
        raise ConfigError("n and T must be >= 1")
    ss = np.random.SeedSequence([int(seed), 0xC0])
    r_teacher, r_rot, r_train, r_eval = (np.random.default_rng(s) for s in ss.spawn(4))
    teacher = LinearStackModel.init(r_teacher, dims, scale=noise.teacher_scale, activation=activation)
    d0, C = dims[0], dims[-1]

    q, _ = np.linalg.qr(r_rot.standard_normal((d0, d0)))
    shift = r_rot.standard_normal(d0)
    shift *= noise.offdist_shift * np.sqrt(d0) / np.linalg.norm(shift)

    def label(z):
        return np.argmax(teacher.logits(z), axis=1)

    kinds = r_train.choice(3, size=n, p=mix)
    z = r_train.standard_normal((n, d0, T))
    y = label(z)
    x = z.copy()
    noisy = kinds == 1
    y[noisy] = r_train.integers(0, C, size=(int(noisy.sum()), T))
    off = kinds == 2
    x[off] = noise.offdist_scale * np.matmul(q, z[off]) + shift[None, :, None]
    train = [Sample(i, x[i], y[i], QUALITIES[kinds[i]]) for i in range(n)]

    ze = r_eval.standard_normal((n_target + n_test, d0, T))
    ye = label(ze)
    target = [Sample(n + i, ze[i], ye[i]) for i in range(n_target)]
    test = [Sample(n + n_target + i, ze[n_target + i], ye[n_target + i]) for i in range(n_test)]
    meta = {"seed": int(seed), "dims": list(dims), "mix": mix.tolist(), "T": T}
    return Corpus(train, target, test, teacher, meta)


def _w_split(f, samples: Sequence[Sample]) -> None:
    container.w_u32(f, len(samples))
    for s in samples:
        f.write(struct.pack("<qB", s.id, QUALITIES.index(s.quality)))
        container.w_mat(f, s.tokens)
        f.write(np.ascontiguousarray(s.label, dtype="<i8").tobytes())


def _r_split(f, d0: int, T: int) -> list[Sample]:
    count = container.r_u32(f)
    out = []
    for _ in range(count):
        sid, qi = struct.unpack("<qB", container.read_exact(f, 9))
        tokens = container.r_mat(f, (d0, T))
        label = np.frombuffer(container.read_exact(f, 8 * T), dtype="<i8").astype(np.int64)
        out.append(Sample(sid, tokens, label, QUALITIES[qi]))
    return out


def export_corpus(corpus: Corpus, path: str | os.PathLike | None = None) -> bytes:
    """Write train/target/test splits to a GSEL container (the teacher is not stored)."""
    d0, T = corpus.train[0].tokens.shape
    f = io.BytesIO()
    container.write_header(f, container.KIND_CORPUS)
    container.w_u32(f, d0, T)
    for split in (corpus.train, corpus.target, corpus.test):
        _w_split(f, split)
    data = f.getvalue()
    if path is not None:
        container.atomic_write_bytes(path, data)
    return data


def import_corpus(src) -> Corpus:
    f = io.BytesIO(src) if isinstance(src, (bytes, bytearray)) else open(src, "rb")
    with f:
        container.read_header(f, container.KIND_CORPUS)
        d0, T = container.r_u32(f, 2)
        train, target, test = (_r_split(f, d0, T) for _ in range(3))
    return Corpus(train, target, test)
