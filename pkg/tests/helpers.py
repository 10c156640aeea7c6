import numpy as np
import torch

from conceptfuse.data import FACE_BOX, as_tensor, toy_images
from conceptfuse.masks import REFERENCE_NONFACE, SOURCE_FACE, RectangleSegmenter, acquire_mask
from conceptfuse.templates import REFERENCE, SOURCE
from conceptfuse.trainer import ConceptSpec, TrainConfig

# Calibrated toy run: the training section written by `conceptfuse init-toy`.
TOY_TRAIN = dict(phase1_steps=300, phase2_steps=300, phase1_lr_embeddings=5e-3, seed=0)


def toy_concepts(n_source=2, n_reference=2, seed=0):
    src, ref = toy_images(n_source, n_reference, seed=seed)
    src_t, ref_t = as_tensor(src), as_tensor(ref)
    seg = RectangleSegmenter(FACE_BOX)
    sm = [acquire_mask(img.numpy(), SOURCE_FACE, seg) for img in src_t]
    rm = [acquire_mask(img.numpy(), REFERENCE_NONFACE, seg) for img in ref_t]
    return [
        ConceptSpec(SOURCE, "<v1>", src_t, sm, "person"),
        ConceptSpec(REFERENCE, "<v2>", ref_t, rm, "style"),
    ]


def small_config(**kw):
    base = dict(phase1_steps=3, phase2_steps=3, phase1_lr_embeddings=5e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def rng_array(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def moving_average(x, n=20):
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, np.ones(n) / n, mode="valid")


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.corrcoef(a, b)[0, 1])


def step_losses(history, phase, kind="step"):
    return [r["loss"] for r in history if r["kind"] == kind and r["phase"] == phase]


def micro_mean(history, phase, key, task=None):
    """Per-step mean of a micro-record term, skipping steps where it is absent."""
    by_step = {}
    for r in history:
        if r["kind"] == "micro" and r["phase"] == phase and key in r and (task is None or r["task"] == task):
            by_step.setdefault(r["step"], []).append(r[key])
    return [float(np.mean(by_step[s])) for s in sorted(by_step)]


# acceptance bookkeeping ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class criterion:
    """Context manager recording one acceptance criterion's outcome.

    Checks go through :meth:`check`; every failed check is listed and the
    block raises ``AssertionError`` on exit, so the test fails with the
    same detail that is printed in the summary.
    """

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.notes: list[str] = []
        self.failures: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def check(self, ok: bool, text: str) -> None:
        if ok:
            if text not in self.notes:
                self.notes.append(text)
        else:
            self.failures.append(f"FAILED {text}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, AssertionError):
            self.failures.append(f"error {exc_type.__name__}: {exc}")
        ok = not self.failures and exc is None
        detail = "; ".join(self.failures + self.notes)
        ACCEPTANCE[self.number] = (self.title, ok, detail)
        print(f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}")
        if exc is None and self.failures:
            raise AssertionError(detail)
        return False
