"""Two-phase optimisation over source, reference and composed-prompt tasks.

Phase 1 trains only the special-token embedding rows on the masked
reconstruction losses of the source and reference tasks. Phase 2 attaches
low-rank adapters to the cross-attention projections and trains them
together with the embeddings, adding the composed-prompt task (reference
noise as pseudo-label plus identity loss on the Tweedie estimate) and the
attention refocusing penalty on every task.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from . import lora
from .checkpoint import Checkpoint
from .diffusion import DiffusionBackend, forward_noise, tensor_digest, tweedie_estimate
from .errors import ConfigurationError, InvariantViolation
from .losses import LossWeights, attention_refocusing_loss, identity_loss, masked_reconstruction_loss
from .masks import RegionMask
from .templates import COMPOSED_TEMPLATES, REFERENCE, REFERENCE_TEMPLATE, SOURCE, SOURCE_TEMPLATE, fill

log = logging.getLogger(__name__)

TASKS = ("source", "reference", "composed")


class TrainingFailure(InvariantViolation):
    pass


@dataclass
class TrainConfig:
    phase1_steps: int = 1200
    phase1_lr_embeddings: float = 5e-4
    phase2_steps: int = 1500
    phase2_lr_lora: float = 1e-4
    phase2_lr_embeddings: float = 1e-5
    batch_size: int = 1
    grad_accum: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    t_id_max: float = 0.6
    task_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    prompt_templates: tuple[str, ...] = COMPOSED_TEMPLATES
    source_template: str = SOURCE_TEMPLATE
    reference_template: str = REFERENCE_TEMPLATE
    lora_rank: int = 4
    lora_targets: tuple[str, ...] = ("*",)
    lora_init_std: float = 0.01
    weight_decay: float = 1e-2
    attn_reduction: str = "grid"
    id_skip_warmup: int = 20
    id_max_skip_rate: float = 0.8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.task_mix = tuple(float(x) for x in self.task_mix)
        self.prompt_templates = tuple(self.prompt_templates)
        self.lora_targets = (self.lora_targets,) if isinstance(self.lora_targets, str) else tuple(self.lora_targets)
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("phase1_steps", "phase2_steps"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                problems.append(f"{name}: must be a non-negative integer")
        for name in ("phase1_lr_embeddings", "phase2_lr_lora", "phase2_lr_embeddings"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be positive")
        for name in ("batch_size", "grad_accum", "lora_rank"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                problems.append(f"{name}: must be a positive integer")
        if not 0 < self.t_id_max < 1:
            problems.append("t_id_max: must lie in (0, 1)")
        if len(self.task_mix) != 3 or any(p < 0 for p in self.task_mix) or abs(sum(self.task_mix) - 1) > 1e-6:
            problems.append("task_mix: three non-negative probabilities summing to 1")
        if self.attn_reduction not in ("grid", "penalized"):
            problems.append("attn_reduction: one of 'grid', 'penalized'")
        if not 0 <= self.id_max_skip_rate <= 1:
            problems.append("id_max_skip_rate: must lie in [0, 1]")
        if problems:
            raise ConfigurationError("invalid training config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"invalid training config: unknown field(s) {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"invalid training config: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_mix"] = list(self.task_mix)
        d["prompt_templates"] = list(self.prompt_templates)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class ConceptSpec:
    concept_id: str
    special_token: str
    images: torch.Tensor
    masks: list[RegionMask]
    init_word: str | None = None

    def __post_init__(self):
        if self.concept_id not in (SOURCE, REFERENCE):
            raise ConfigurationError(f"concept_id must be {SOURCE!r} or {REFERENCE!r}")
        if len(self.images) == 0 or len(self.images) != len(self.masks):
            raise ConfigurationError(
                f"{self.concept_id}: need a non-empty image list with one mask per image "
                f"(got {len(self.images)} images, {len(self.masks)} masks)"
            )

    def manifest_entry(self) -> dict:
        return {"token": self.special_token, "init_word": self.init_word}


@dataclass
class Task:
    kind: str
    image_index: int
    template: str
    losses: tuple[str, ...]


@dataclass
class Sample:
    task: Task
    t: int
    eps: np.ndarray
    t_id: int | None = None
    eps_id: np.ndarray | None = None
    id_source_index: int | None = None


def admissible_mix(config: TrainConfig, phase: int) -> np.ndarray:
    mix = np.asarray(config.task_mix, dtype=np.float64)
    if phase == 1:
        mix = mix.copy()
        mix[2] = 0.0
    if mix.sum() <= 0:
        raise ConfigurationError(f"task_mix leaves no admissible task in phase {phase}")
    return mix / mix.sum()


def sample_task(config: TrainConfig, rng: np.random.Generator, phase: int,
                n_source: int = 1, n_reference: int = 1) -> Task:
    """Draw one task. Phase 1 only admits source / reference tasks."""
    mix = admissible_mix(config, phase)
    kind = TASKS[int(rng.choice(3, p=mix))]
    ar = ("attn",) if phase == 2 and config.weights.lambda_attn > 0 else ()
    if kind == "source":
        return Task(kind, int(rng.integers(n_source)), config.source_template, ("mask",) + ar)
    if kind == "reference":
        return Task(kind, int(rng.integers(n_reference)), config.reference_template, ("mask",) + ar)
    if not config.prompt_templates:
        raise ConfigurationError("composed task enabled but prompt_templates is empty")
    template = config.prompt_templates[int(rng.integers(len(config.prompt_templates)))]
    idl = ("id",) if config.weights.lambda_id > 0 else ()
    return Task(kind, int(rng.integers(n_reference)), template, ("mask",) + idl + ar)


def sample_t_id(config: TrainConfig, T: int, rng: np.random.Generator) -> int:
    t_max = max(1, int(config.t_id_max * T))
    return int(rng.integers(1, t_max + 1))


def phase_rng(seed: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase])


class Trainer:
    """Holds the data and backend for one run and executes the phases."""

    def __init__(self, config: TrainConfig, concepts: Sequence[ConceptSpec], backend: DiffusionBackend,
                 embedder=None, trace: Callable[[dict], None] | None = None):
        self.config = config
        self.backend = backend
        self.embedder = embedder
        self.trace = trace
        by_id = {c.concept_id: c for c in concepts}
        if set(by_id) != {SOURCE, REFERENCE}:
            raise ConfigurationError("need exactly one source and one reference concept")
        self.concepts = by_id
        for c in concepts:
            if c.concept_id not in backend.concept_tokens():
                backend.add_concept(c.concept_id, c.special_token, c.init_word)
        self.tokens = backend.concept_tokens()
        with torch.no_grad():
            self.latents = {cid: backend.encode(c.images.to(torch.float32)) for cid, c in by_id.items()}
        self.latent_hw = tuple(self.latents[SOURCE].shape[-2:])
        self.face_of_reference = [m.complement() for m in by_id[REFERENCE].masks]
        self._prompt_cache: dict[str, object] = {}
        self.id_attempts = 0
        self.id_skips = 0
        self.history: list[dict] = []

    # bookkeeping -----------------------------------------------------------
    def concept_manifest(self) -> dict:
        return {cid: c.manifest_entry() for cid, c in self.concepts.items()}

    def checkpoint(self, phase: int) -> Checkpoint:
        return Checkpoint.capture(self.backend, phase, self.concept_manifest(), self.config.to_dict())

    def _emit(self, record: dict) -> None:
        self.history.append(record)
        if self.trace is not None:
            self.trace(record)

    def _prompt(self, template: str):
        if template not in self._prompt_cache:
            self._prompt_cache[template] = self.backend.resolve_prompt(fill(template, self.tokens), template)
        return self._prompt_cache[template]

    def frozen_digest(self) -> str:
        return tensor_digest(self.backend.backbone_parameters())

    # sampling ----------------------------------------------------------------
    def draw(self, rng: np.random.Generator, phase: int) -> Sample:
        task = sample_task(self.config, rng, phase, len(self.latents[SOURCE]), len(self.latents[REFERENCE]))
        shape = tuple(self.latents[SOURCE].shape[1:])
        T = self.backend.schedule.T
        sample = Sample(task, int(rng.integers(1, T + 1)), rng.standard_normal(shape))
        if "id" in task.losses:
            sample.t_id = sample_t_id(self.config, T, rng)
            sample.eps_id = rng.standard_normal(shape)
            sample.id_source_index = int(rng.integers(len(self.concepts[SOURCE].images)))
        return sample

    # losses ------------------------------------------------------------------
    def _target(self, task: Task) -> tuple[torch.Tensor, RegionMask]:
        if task.kind == "source":
            return self.latents[SOURCE][task.image_index], self.concepts[SOURCE].masks[task.image_index]
        return self.latents[REFERENCE][task.image_index], self.concepts[REFERENCE].masks[task.image_index]

    def _ar_targets(self, task: Task, prompt) -> dict[int, RegionMask]:
        if task.kind == "source":
            return {prompt.position(SOURCE): self.concepts[SOURCE].masks[task.image_index]}
        if task.kind == "reference":
            return {prompt.position(REFERENCE): self.concepts[REFERENCE].masks[task.image_index]}
        return {
            prompt.position(SOURCE): self.face_of_reference[task.image_index],
            prompt.position(REFERENCE): self.concepts[REFERENCE].masks[task.image_index],
        }

    def sample_losses(self, batch: Sequence[Sample]) -> list[dict]:
        """Forward one micro-batch; returns per-sample dicts of loss tensors."""
        w = self.config.weights
        sched = self.backend.schedule
        dtype = self.latents[SOURCE].dtype
        z0 = torch.stack([self._target(s.task)[0] for s in batch])
        eps = torch.stack([torch.from_numpy(s.eps).to(dtype) for s in batch])
        t = torch.tensor([s.t for s in batch])
        prompts = [self._prompt(s.task.template) for s in batch]
        masks = torch.stack([self._target(s.task)[1].tensor(self.latent_hw, dtype) for s in batch])

        ar_targets = [self._ar_targets(s.task, p) if "attn" in s.task.losses else {} for s, p in zip(batch, prompts)]
        record_tokens = sorted({k for d in ar_targets for k in d})
        state = forward_noise(z0, t, eps, sched)
        context = self.backend.encode_prompts(prompts)
        eps_pred, record = self.backend.predict(state.z, t, context, record_tokens=record_tokens)
        mask_losses = masked_reconstruction_loss(eps, eps_pred, masks, per_sample=True)

        out = []
        for i, s in enumerate(batch):
            terms = {"mask": mask_losses[i]}
            if ar_targets[i]:
                terms["attn"] = attention_refocusing_loss(
                    record, ar_targets[i], batch_index=i, reduction=self.config.attn_reduction)
            out.append(terms)

        id_idx = [i for i, s in enumerate(batch) if "id" in s.task.losses]
        if id_idx:
            if self.embedder is None:
                raise ConfigurationError("identity loss is active but no identity embedder was given")
            z_id = z0[id_idx]
            eps_id = torch.stack([torch.from_numpy(batch[i].eps_id).to(dtype) for i in id_idx])
            t_id = torch.tensor([batch[i].t_id for i in id_idx])
            st = forward_noise(z_id, t_id, eps_id, sched)
            eps_hat, _ = self.backend.predict(st.z, t_id, context[id_idx])
            x0_img = self.backend.decode(tweedie_estimate(st, eps_hat, sched))
            sources = self.concepts[SOURCE].images.to(dtype)
            for j, i in enumerate(id_idx):
                self.id_attempts += 1
                value = identity_loss(x0_img[j], sources, self.embedder, batch[i].id_source_index)
                if value is None:
                    self.id_skips += 1
                else:
                    out[i]["id"] = value
            self._check_skip_rate()

        for terms in out:
            total = terms["mask"]
            if "attn" in terms:
                total = total + w.lambda_attn * terms["attn"]
            if "id" in terms:
                total = total + w.lambda_id * terms["id"]
            terms["total"] = total
        return out

    def _check_skip_rate(self) -> None:
        c = self.config
        if self.id_attempts >= c.id_skip_warmup and self.id_skips / self.id_attempts > c.id_max_skip_rate:
            raise TrainingFailure(
                f"identity loss skipped on {self.id_skips}/{self.id_attempts} attempts "
                f"(bound {c.id_max_skip_rate:.0%}): the face detector finds no face in the "
                f"Tweedie estimates; lower t_id_max or check the embedder"
            )

    # loop --------------------------------------------------------------------
    def _optimise(self, phase: int, steps: int, groups: list[dict]) -> None:
        c = self.config
        rng = phase_rng(c.seed, phase)
        opt = torch.optim.AdamW(groups, betas=(0.9, 0.999), weight_decay=c.weight_decay)
        for step in range(steps):
            samples = [self.draw(rng, phase) for _ in range(c.batch_size * c.grad_accum)]
            opt.zero_grad(set_to_none=True)
            totals = []
            for m in range(c.grad_accum):
                micro = samples[m * c.batch_size:(m + 1) * c.batch_size]
                terms = self.sample_losses(micro)
                batch_total = torch.stack([d["total"] for d in terms]).mean()
                (batch_total / c.grad_accum).backward()
                for j, (s, d) in enumerate(zip(micro, terms)):
                    rec = {"kind": "micro", "phase": phase, "step": step, "micro": m * c.batch_size + j,
                           "task": s.task.kind, "t": s.t}
                    rec.update({k: float(v.detach()) for k, v in d.items()})
                    rec["id_skipped"] = "id" in s.task.losses and "id" not in d
                    rec["weights"] = c.weights.to_dict()
                    self._emit(rec)
                    totals.append(float(d["total"].detach()))
            opt.step()
            self._emit({"kind": "step", "phase": phase, "step": step, "loss": float(np.mean(totals))})

    def run_phase1(self) -> Checkpoint:
        c = self.config
        if lora.attached(self.backend):
            raise ConfigurationError("phase 1 expects a backend without adapters")
        params = list(self.backend.concept_parameters().values())
        self.backend.requires_grad_(False)
        for p in params:
            p.requires_grad_(True)
        before = self.frozen_digest()
        self._optimise(1, c.phase1_steps, [{"params": params, "lr": c.phase1_lr_embeddings}])
        for p in params:
            p.requires_grad_(False)
        if self.frozen_digest() != before:
            raise InvariantViolation("phase 1 modified backbone parameters")
        return self.checkpoint(1)

    def attach_adapters(self) -> list[lora.LoraAdapter]:
        c = self.config
        adapters = lora.attached(self.backend)
        if not adapters:
            adapters = lora.attach(self.backend, c.lora_targets, rank=c.lora_rank,
                                   init_std=c.lora_init_std, seed=c.seed)
        return adapters

    def run_phase2(self, adapters: list[lora.LoraAdapter] | None = None) -> Checkpoint:
        c = self.config
        adapters = adapters if adapters is not None else self.attach_adapters()
        emb = list(self.backend.concept_parameters().values())
        lparams = lora.adapter_parameters(adapters)
        self.backend.requires_grad_(False)
        for p in emb + lparams:
            p.requires_grad_(True)
        before = self.frozen_digest()
        self.id_attempts = self.id_skips = 0
        self._optimise(2, c.phase2_steps, [
            {"params": emb, "lr": c.phase2_lr_embeddings},
            {"params": lparams, "lr": c.phase2_lr_lora},
        ])
        for p in emb + lparams:
            p.requires_grad_(False)
        if self.frozen_digest() != before:
            raise InvariantViolation("phase 2 modified parameters outside embeddings and adapters")
        return self.checkpoint(2)


def run_phase1(config: TrainConfig, concepts: Sequence[ConceptSpec], backend: DiffusionBackend, **kw) -> Checkpoint:
    return Trainer(config, concepts, backend, **kw).run_phase1()


def run_phase2(config: TrainConfig, concepts: Sequence[ConceptSpec], backend: DiffusionBackend,
               adapters=None, **kw) -> Checkpoint:
    return Trainer(config, concepts, backend, **kw).run_phase2(adapters)


def jsonl_writer(path, mode: str = "a"):
    """Trace callback that writes one JSON line per record."""
    fh = open(path, mode, encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    write.close = fh.close
    return write
