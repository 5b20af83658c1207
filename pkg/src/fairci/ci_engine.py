"""Conditional-independence enforcement.

Two discriminators are trained adversarially: ``D1`` scores ``(u, y)`` and
``D2`` scores ``(u, s, y)``, where ``u`` is the model output (label space)
or the latent vector (latent space). Their "fake" inputs replace ``u`` with
``u'`` resampled within the batch among samples sharing the same label, so
``u'`` is conditionally independent of ``s`` given ``y``. The encoder
minimises ``(L_D1 - L_D2)**2`` alongside its task loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import fairmetrics
from .errors import InvalidParameterError
from .nets import (
    Discriminator,
    Encoder,
    disc_input_dims,
    init_discriminator,
    init_encoder,
)
from .synthgen import SynthDataset

log = logging.getLogger(__name__)

CI_TARGETS = ("none", "regularizer", "label_space", "latent_space", "partitioned")
ADVERSARIAL_TARGETS = ("label_space", "latent_space", "partitioned")
SIGMA_RANGE = (1.0, 7.0)
DISC_INPUT_NORMS = ("none", "global", "dim")


@dataclass
class TrainingConfig:
    ci_target: str = "none"
    lambda_ci: float = 0.0
    lambda_s: float = 1.0
    task_weight: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 100
    disc_steps_per_enc_step: int = 1
    disc_learning_rate: Optional[float] = None
    disc_input_norm: str = "global"
    seed: int = 0
    split_index: int = 8
    s_binarization_threshold: float = 3.5
    stratified_batches: bool = False
    aux_loss: str = "mse"
    disc_hidden: int = 64
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_max_points: int = 1000

    def validate(self):
        """Raise ``InvalidParameterError`` naming the first offending field."""
        def bad(name, msg):
            raise InvalidParameterError(f"{name}: {msg} (got {getattr(self, name)!r})")

        if self.ci_target not in CI_TARGETS:
            bad("ci_target", f"must be one of {CI_TARGETS}")
        for name in ("lambda_ci", "lambda_s"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not self.task_weight > 0:
            bad("task_weight", "must be > 0")
        if not self.learning_rate > 0:
            bad("learning_rate", "must be > 0")
        if self.disc_learning_rate is not None and not self.disc_learning_rate > 0:
            bad("disc_learning_rate", "must be > 0 or null")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            bad("batch_size", "must be a positive integer")
        if self.ci_target in ADVERSARIAL_TARGETS and self.batch_size < 2:
            bad("batch_size", "must be >= 2 when dynamic sampling is used")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            bad("epochs", "must be a non-negative integer")
        if self.disc_steps_per_enc_step < 1:
            bad("disc_steps_per_enc_step", "must be >= 1")
        if self.ci_target == "partitioned" and not 0 < self.split_index < 10:
            bad("split_index", "must lie in (0, 10)")
        if self.aux_loss not in ("mse", "bce"):
            bad("aux_loss", "must be 'mse' or 'bce'")
        if self.disc_input_norm not in DISC_INPUT_NORMS:
            bad("disc_input_norm", f"must be one of {DISC_INPUT_NORMS}")
        if self.disc_hidden < 1:
            bad("disc_hidden", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown training field(s): {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


class LossTerms(NamedTuple):
    l_d1: torch.Tensor
    l_d2: torch.Tensor
    l_ci: torch.Tensor
    l_task: torch.Tensor
    l_aux: torch.Tensor
    l_total: torch.Tensor


@dataclass
class LossBreakdown:
    l_d1: float
    l_d2: float
    l_ci: float
    l_task: float
    l_aux: float
    l_total: float

    @classmethod
    def from_terms(cls, t: LossTerms) -> "LossBreakdown":
        return cls(*(float(v.detach()) for v in t))


@dataclass
class DynamicBatch:
    latents: torch.Tensor
    labels: torch.Tensor
    sensitives: torch.Tensor
    resampled: torch.Tensor


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def column(self, name: str) -> list:
        return [row[name] for row in self.epochs]


# -- sampler ------------------------------------------------------------------

def resample_indices(labels: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """For each position ``i`` pick uniformly, with replacement, an index ``j``
    with ``labels[j] == labels[i]``."""
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.numel() == 0:
        raise InvalidParameterError("cannot resample an empty batch")
    out = torch.empty(labels.numel(), dtype=torch.long)
    for value in torch.unique(labels):
        members = torch.nonzero(labels == value, as_tuple=True)[0]
        picks = torch.randint(len(members), (len(members),), generator=gen)
        out[members] = members[picks]
    return out


def dynamic_sample(latents, labels, gen: torch.Generator) -> torch.Tensor:
    """Within-batch label-conditional resampling of latent vectors.

    The result is detached: resampled vectors act as a fixed reference
    sample and carry no gradient back to the encoder.
    """
    latents = torch.as_tensor(latents)
    if latents.shape[0] == 0:
        raise InvalidParameterError("cannot resample an empty batch")
    if latents.shape[0] != torch.as_tensor(labels).reshape(-1).shape[0]:
        raise InvalidParameterError("latents and labels differ in length")
    return latents.detach()[resample_indices(labels, gen)]


def label_space_sample(logits, labels, gen: torch.Generator) -> torch.Tensor:
    """Scalar-output version of :func:`dynamic_sample`."""
    logits = torch.as_tensor(logits)
    return dynamic_sample(logits.reshape(logits.shape[0], -1), labels, gen).reshape(logits.shape)


# -- losses -------------------------------------------------------------------

def normalize_sensitive(s) -> torch.Tensor:
    lo, hi = SIGMA_RANGE
    return (torch.as_tensor(s) - lo) / (hi - lo)


def _col(t: torch.Tensor, dtype) -> torch.Tensor:
    t = torch.as_tensor(t).to(dtype)
    return t.reshape(t.shape[0], -1)


def _check_lengths(*ts):
    n = {int(torch.as_tensor(t).shape[0]) for t in ts}
    if len(n) != 1:
        raise InvalidParameterError(f"inputs differ in length: {sorted(n)}")
    if 0 in n:
        raise InvalidParameterError("inputs must be nonempty")


def standardize(u: torch.Tensor, mode: str = "global", eps: float = 1e-5) -> torch.Tensor:
    """Centre a batch per dimension, then scale it by the batch RMS spread
    (``global``) or by each dimension's own spread (``dim``).

    Applied separately to the real and the resampled inputs. On the real side
    the statistics stay in the graph, so shifting or rescaling the whole batch
    carries no gradient to the encoder.
    """
    centred = u - u.mean(dim=0, keepdim=True)
    sq = centred.pow(2).mean(dim=0, keepdim=True)
    if mode == "global":
        sq = sq.mean()
    return centred / torch.sqrt(sq + eps)


def disc_inputs(cfg: "TrainingConfig", real: torch.Tensor, fake: torch.Tensor):
    if cfg.disc_input_norm == "none":
        return real, fake
    return standardize(real, cfg.disc_input_norm), standardize(fake.detach(), cfg.disc_input_norm)


def loss_d1(d1: Discriminator, real, fake, labels) -> torch.Tensor:
    """``mean log(1 - D1(u', y)) + mean log D1(u, y)``."""
    _check_lengths(real, fake, labels)
    dtype = next(d1.parameters()).dtype
    y = _col(labels, dtype)
    p_real = d1(torch.cat([_col(real, dtype), y], dim=1))
    p_fake = d1(torch.cat([_col(fake, dtype), y], dim=1))
    return torch.log1p(-p_fake).mean() + torch.log(p_real).mean()


def loss_d2(d2: Discriminator, real, fake, sensitive, labels) -> torch.Tensor:
    """``mean log(1 - D2(u', s, y)) + mean log D2(u, s, y)``."""
    _check_lengths(real, fake, sensitive, labels)
    dtype = next(d2.parameters()).dtype
    sy = torch.cat([_col(sensitive, dtype), _col(labels, dtype)], dim=1)
    p_real = d2(torch.cat([_col(real, dtype), sy], dim=1))
    p_fake = d2(torch.cat([_col(fake, dtype), sy], dim=1))
    return torch.log1p(-p_fake).mean() + torch.log(p_real).mean()


def loss_ci(l_d1, l_d2):
    return (l_d1 - l_d2) ** 2


def discriminator_loss(l_d1, l_d2):
    """Sum of the two discriminator log-likelihoods. Discriminators ascend
    this quantity; the training loop descends its negation."""
    return l_d1 + l_d2


def _check_weight(name, value):
    if value < 0:
        raise InvalidParameterError(f"{name} must be >= 0, got {value}")


def encoder_loss(cfg: TrainingConfig, l_ci, l_task, l_aux=None):
    """``lambda * L_CI + rho * L_task`` plus ``lambda_s * aux`` when partitioned.

    The CI term is left out entirely (not multiplied by zero) when it is
    disabled or ``lambda_ci == 0``.
    """
    _check_weight("lambda_ci", cfg.lambda_ci)
    _check_weight("lambda_s", cfg.lambda_s)
    if not cfg.task_weight > 0:
        raise InvalidParameterError(f"task_weight must be > 0, got {cfg.task_weight}")
    total = cfg.task_weight * l_task
    if cfg.ci_target in ADVERSARIAL_TARGETS and cfg.lambda_ci != 0 and l_ci is not None:
        total = cfg.lambda_ci * l_ci + total
    if cfg.ci_target == "partitioned" and l_aux is not None:
        total = total + cfg.lambda_s * l_aux
    return total


def rate_gaps(soft_preds, labels, groups) -> torch.Tensor:
    """Per label, the absolute gap between the two groups' mean soft outputs.
    Cells without members contribute zero."""
    soft_preds = torch.as_tensor(soft_preds).reshape(-1)
    labels = torch.as_tensor(labels).reshape(-1)
    groups = torch.as_tensor(groups).reshape(-1)
    gaps = []
    for y in (0, 1):
        in_y = labels == y
        g0 = in_y & (groups == 0)
        g1 = in_y & (groups == 1)
        if g0.any() and g1.any():
            gaps.append((soft_preds[g0].mean() - soft_preds[g1].mean()).abs())
        else:
            gaps.append(soft_preds.new_zeros(()))
    return torch.stack(gaps)


def regularizer_loss(lam: float, soft_preds, labels, groups) -> torch.Tensor:
    """``lam * (R0 + R1) + BCE`` with soft, differentiable rate gaps."""
    _check_weight("lambda", lam)
    soft_preds = torch.as_tensor(soft_preds).reshape(-1)
    target = torch.as_tensor(labels).reshape(-1).to(soft_preds.dtype)
    bce = F.binary_cross_entropy(soft_preds, target)
    if lam == 0:
        return bce
    return lam * rate_gaps(soft_preds, labels, groups).sum() + bce


# -- one batch ----------------------------------------------------------------

def ci_representation(encoder: Encoder, out, ci_target: str) -> torch.Tensor:
    if ci_target == "label_space":
        return out.logit.reshape(-1, 1)
    return encoder.invariant_slice(out.latent)


def batch_losses(
    cfg: TrainingConfig,
    encoder: Encoder,
    d1: Optional[Discriminator],
    d2: Optional[Discriminator],
    x: torch.Tensor,
    y: torch.Tensor,
    s_raw: torch.Tensor,
    gen: Optional[torch.Generator] = None,
    resample_idx: Optional[torch.Tensor] = None,
    out=None,
    fake: Optional[torch.Tensor] = None,
) -> LossTerms:
    """Every loss term for one batch, as differentiable tensors.

    The resampled values come from ``fake`` if given, else from
    ``resample_idx`` applied to the current representation, else from a fresh
    draw with ``gen``. They are constants for differentiation in every case.
    """
    if out is None:
        out = encoder(x)
    yf = y.to(out.logit.dtype)
    l_task = F.binary_cross_entropy_with_logits(out.logit, yf)
    zero = out.logit.new_zeros(())
    l_d1 = l_d2 = l_ci = l_aux = zero

    if cfg.ci_target == "regularizer":
        groups = fairmetrics_groups(s_raw, cfg.s_binarization_threshold)
        total = regularizer_loss(cfg.lambda_ci, torch.sigmoid(out.logit), y, groups)
        return LossTerms(l_d1, l_d2, l_ci, l_task, l_aux, total)

    if cfg.ci_target in ADVERSARIAL_TARGETS and _both_labels(y):
        u = ci_representation(encoder, out, cfg.ci_target)
        if fake is not None:
            u_fake = fake.detach()
        else:
            idx = resample_idx if resample_idx is not None else resample_indices(y, gen)
            u_fake = u.detach()[idx]
        s = normalize_sensitive(s_raw)
        u, u_fake = disc_inputs(cfg, u, u_fake)
        l_d1 = loss_d1(d1, u, u_fake, y)
        l_d2 = loss_d2(d2, u, u_fake, s, y)
        l_ci = loss_ci(l_d1, l_d2)

    if cfg.ci_target == "partitioned":
        if cfg.aux_loss == "mse":
            l_aux = F.mse_loss(out.aux_logit, normalize_sensitive(s_raw).to(out.aux_logit.dtype))
        else:
            target = fairmetrics_groups(s_raw, cfg.s_binarization_threshold).to(out.aux_logit.dtype)
            l_aux = F.binary_cross_entropy_with_logits(out.aux_logit, target)

    total = encoder_loss(cfg, l_ci, l_task, l_aux)
    return LossTerms(l_d1, l_d2, l_ci, l_task, l_aux, total)


def fairmetrics_groups(s_raw, threshold: float) -> torch.Tensor:
    return (torch.as_tensor(s_raw) > threshold).long()


def _both_labels(y: torch.Tensor) -> bool:
    return bool((y == 0).any() and (y == 1).any())


# -- training -----------------------------------------------------------------

def _streams(seed: int):
    """Independent RNG streams so that enabling the discriminators never
    perturbs encoder initialisation or batch order."""
    ss = np.random.SeedSequence(seed)
    enc_s, d1_s, d2_s, shuffle_s, sample_s = (
        int(c.generate_state(1, dtype=np.uint64)[0] >> 1) for c in ss.spawn(5)
    )
    return {
        "encoder": enc_s,
        "d1": d1_s,
        "d2": d2_s,
        "shuffle": np.random.default_rng(shuffle_s),
        "sampler": torch.Generator().manual_seed(sample_s),
    }


def _batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator, stratified: bool):
    n = len(labels)
    if not stratified:
        order = rng.permutation(n)
    else:
        pos = rng.permutation(np.flatnonzero(labels == 1))
        neg = rng.permutation(np.flatnonzero(labels == 0))
        # interleave by rank within class so every batch mirrors the class ratio
        keys = np.concatenate([(np.arange(len(neg)) + 0.5) / len(neg),
                               (np.arange(len(pos)) + 0.5) / len(pos)])
        merged = np.concatenate([neg, pos])
        order = merged[np.argsort(keys, kind="stable")]
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_discriminators(cfg: TrainingConfig, encoder: Encoder, seeds: dict):
    if cfg.ci_target not in ADVERSARIAL_TARGETS:
        return None, None
    dim1, dim2 = disc_input_dims(cfg.ci_target, encoder.arch)
    dtype = next(encoder.parameters()).dtype
    d1 = init_discriminator(dim1, seeds["d1"], cfg.disc_hidden, dtype)
    d2 = init_discriminator(dim2, seeds["d2"], cfg.disc_hidden, dtype)
    return d1, d2


def _tensors(data: SynthDataset):
    x = torch.from_numpy(np.ascontiguousarray(data.normalized_pixels())).unsqueeze(1)
    y = torch.from_numpy(data.label.astype(np.int64))
    s = torch.from_numpy(data.sigma_b.astype(np.float32))
    return x, y, s


def train(
    cfg: TrainingConfig,
    data: SynthDataset,
    val: Optional[SynthDataset] = None,
    arch_kwargs: Optional[dict] = None,
    on_epoch: Optional[Callable] = None,
):
    """Alternating adversarial training.

    Per batch: the discriminators take ``disc_steps_per_enc_step`` steps on
    ``-(L_D1 + L_D2)`` with the encoder fixed, then the encoder takes one step
    on its loss with the discriminators fixed. ``on_epoch(epoch, encoder, row)``
    is called after each epoch if given. Returns ``(encoder, history)``.
    """
    cfg.validate()
    streams = _streams(cfg.seed)
    encoder = init_encoder(
        streams["encoder"],
        partitioned=cfg.ci_target == "partitioned",
        split_index=cfg.split_index,
        **(arch_kwargs or {}),
    )
    d1, d2 = make_discriminators(cfg, encoder, streams)
    opt_enc = torch.optim.Adam(
        encoder.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    opt_disc = None
    if d1 is not None:
        opt_disc = torch.optim.Adam(
            list(d1.parameters()) + list(d2.parameters()),
            lr=cfg.disc_learning_rate or cfg.learning_rate,
            betas=cfg.adam_betas, eps=cfg.adam_eps,
        )
    gen = streams["sampler"]
    x_all, y_all, s_all = _tensors(data)
    history = TrainingHistory()

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(6)
        batches = _batches(data.label, cfg.batch_size, streams["shuffle"], cfg.stratified_batches)
        for b, idx in enumerate(batches):
            idx_t = torch.from_numpy(idx)
            xb, yb, sb = x_all[idx_t], y_all[idx_t], s_all[idx_t]
            out = encoder(xb)
            ci_ok = _both_labels(yb)
            if opt_disc is not None and not ci_ok:
                history.warnings.append(
                    {"epoch": epoch, "batch": b, "event": "missing_label_class"}
                )
                log.warning("epoch %d batch %d: one label class missing, CI term skipped", epoch, b)
            if opt_disc is not None and ci_ok:
                u = ci_representation(encoder, out, cfg.ci_target).detach()
                s_norm = normalize_sensitive(sb)
                for _ in range(cfg.disc_steps_per_enc_step):
                    u_real, u_fake = disc_inputs(cfg, u, dynamic_sample(u, yb, gen))
                    l_d = discriminator_loss(
                        loss_d1(d1, u_real, u_fake, yb), loss_d2(d2, u_real, u_fake, s_norm, yb)
                    )
                    opt_disc.zero_grad()
                    (-l_d).backward()
                    opt_disc.step()
            terms = batch_losses(cfg, encoder, d1, d2, xb, yb, sb, gen=gen, out=out)
            opt_enc.zero_grad()
            terms.l_total.backward()
            opt_enc.step()
            sums += [float(t.detach()) for t in terms]
        row = dict(zip(("l_d1", "l_d2", "l_ci", "l_task", "l_aux", "l_total"),
                       (sums / len(batches)).tolist()))
        row["epoch"] = epoch
        if val is not None:
            rep = evaluate(encoder, val, cfg.s_binarization_threshold, max_points=cfg.val_max_points)
            row["val_bacc"] = rep.bacc
            row["val_dcor2"] = rep.dcor2_latent
        history.epochs.append(row)
        log.debug("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, encoder, row)
    return encoder, history


# -- evaluation ---------------------------------------------------------------

@torch.no_grad()
def predict(encoder: Encoder, data: SynthDataset, batch_size: int = 2048):
    x, _, _ = _tensors(data)
    dtype = next(encoder.parameters()).dtype
    lat, logit, aux = [], [], []
    for i in range(0, len(x), batch_size):
        out = encoder(x[i:i + batch_size].to(dtype))
        lat.append(out.latent)
        logit.append(out.logit)
        if out.aux_logit is not None:
            aux.append(out.aux_logit)
    return (
        torch.cat(lat).double().numpy(),
        torch.cat(logit).double().numpy(),
        torch.cat(aux).double().numpy() if aux else None,
    )


def evaluate(
    encoder: Encoder,
    data: SynthDataset,
    threshold: float = 3.5,
    max_points: int = fairmetrics.DCOR_MAX_POINTS,
    seed: int = 0,
) -> fairmetrics.MetricsReport:
    """Metrics on held-out data. ``dcor2_latent`` is measured on the
    CI-enforced part of the latent (the invariant slice when partitioned)."""
    latent, logit, _ = predict(encoder, data)
    lat_ci = latent[:, : encoder.arch.split_index] if encoder.arch.partitioned else latent
    report = fairmetrics.evaluate_outputs(
        lat_ci, logit, data.label, data.sigma_b, threshold, max_points=max_points, seed=seed
    )
    if encoder.arch.partitioned:
        variant = latent[:, encoder.arch.split_index:]
        report.extra["dcor2_invariant"] = report.dcor2_latent
        report.extra["dcor2_variant"] = fairmetrics.conditional_dcor2(
            variant, data.sigma_b, data.label, max_points, seed
        )
        report.extra["dcor2_full_latent"] = fairmetrics.conditional_dcor2(
            latent, data.sigma_b, data.label, max_points, seed
        )
    return report


def correctness(encoder: Encoder, data: SynthDataset) -> np.ndarray:
    _, logit, _ = predict(encoder, data)
    return ((logit > 0).astype(np.int64) == data.label).astype(np.int64)
