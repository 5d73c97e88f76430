"""Few-shot training of the four residual projections.

The objective is cross-entropy on the renormalized fusion of the text and
static-memory predictions; the dynamic memory has no stream to draw from
at training time and is excluded.  Gradients are derived by hand through
the readout chain (residual linear maps, L2 normalizations, similarity
weighting, cosine-logit softmax) so training needs no autodiff framework.
Updates use decoupled weight decay on the weight matrices only, with a
bias-corrected adaptive step and a cosine-annealed learning rate.

Training math defaults to float32; callers can request float64 (the
finite-difference checks in the test suite do).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embeddings_io import TextClassifier
from .errors import NumericalFailure, ValidationError
from .memory import StaticMemory
from .pipeline import FusionWeights
from .readout import LinearMap, ProjectionSet, ReadoutConfig, Weighting

PARAM_NAMES = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")
_MIN_NORM = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    leave_one_out: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("learning_rate, batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid optimizer moment coefficients")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")


@dataclass
class OptimizerState:
    """First/second moment accumulators per parameter tensor plus a step count."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            first={k: np.zeros_like(v) for k, v in params.items()},
            second={k: np.zeros_like(v) for k, v in params.items()},
        )


def params_from_projections(proj: ProjectionSet, dtype=np.float32) -> dict[str, np.ndarray]:
    return {
        "w_q": proj.query.weight.astype(dtype), "b_q": proj.query.bias.astype(dtype),
        "w_k": proj.key.weight.astype(dtype), "b_k": proj.key.bias.astype(dtype),
        "w_v": proj.value.weight.astype(dtype), "b_v": proj.value.bias.astype(dtype),
        "w_o": proj.output.weight.astype(dtype), "b_o": proj.output.bias.astype(dtype),
    }


def projections_from_params(params: dict[str, np.ndarray]) -> ProjectionSet:
    def lin(prefix: str) -> LinearMap:
        return LinearMap(params[f"w_{prefix}"].astype(np.float32),
                         params[f"b_{prefix}"].astype(np.float32))

    return ProjectionSet(query=lin("q"), key=lin("k"), value=lin("v"),
                         output=lin("o"), identity_mode=False)


def _l2_rows(pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(pre, axis=-1, keepdims=True)
    if np.any(norms < _MIN_NORM):
        raise NumericalFailure("projection output collapsed during training")
    return pre / norms, norms


def _l2_backward(grad_out: np.ndarray, out: np.ndarray, norms: np.ndarray) -> np.ndarray:
    inner = (grad_out * out).sum(axis=-1, keepdims=True)
    return (grad_out - inner * out) / norms


def _loo_mask(shape: tuple[int, int, int], shot_ids: np.ndarray | None,
              dtype) -> np.ndarray | None:
    if shot_ids is None:
        return None
    mask = np.ones(shape, dtype=dtype)
    rows = np.arange(shape[0])
    mask[rows, shot_ids[:, 0], shot_ids[:, 1]] = 0.0
    return mask


def _forward(params: dict[str, np.ndarray], features: np.ndarray, labels: np.ndarray,
             shots: np.ndarray, text_rows: np.ndarray, cfg: ReadoutConfig,
             weights: FusionWeights, shot_ids: np.ndarray | None, dtype,
             need_cache: bool):
    """Batched loss forward; optionally returns the tensors backward needs."""
    v_in = features.astype(dtype)
    m_in = shots.astype(dtype)
    text = text_rows.astype(dtype)
    batch = v_in.shape[0]
    scale = dtype(cfg.logit_scale)
    beta = dtype(cfg.beta)

    pre_q = v_in + v_in @ params["w_q"] + params["b_q"]
    q, nq = _l2_rows(pre_q)
    pre_k = m_in + m_in @ params["w_k"] + params["b_k"]
    keys, nk = _l2_rows(pre_k)
    pre_v = m_in + m_in @ params["w_v"] + params["b_v"]
    vals, nv = _l2_rows(pre_v)

    sims = np.einsum("bd,ckd->bck", q, keys)
    mask = _loo_mask(sims.shape, shot_ids, dtype)
    if cfg.weighting is Weighting.SHARPENED_EXP:
        att = np.exp(-beta * (1.0 - sims))
        if mask is not None:
            att = att * mask
    else:
        logits_att = beta * sims
        if mask is not None:
            logits_att = np.where(mask > 0, logits_att, dtype(-np.inf))
        logits_att = logits_att - logits_att.max(axis=-1, keepdims=True)
        expd = np.exp(logits_att)
        att = expd / expd.sum(axis=-1, keepdims=True)

    combined = np.einsum("bck,ckd->bcd", att, vals)
    pre_o = combined + combined @ params["w_o"] + params["b_o"]
    rows, no = _l2_rows(pre_o)

    logits = scale * np.einsum("bd,bcd->bc", v_in, rows)
    logits = logits - logits.max(axis=1, keepdims=True)
    exp_logits = np.exp(logits)
    p_static = exp_logits / exp_logits.sum(axis=1, keepdims=True)

    text_logits = scale * (v_in @ text.T)
    text_logits = text_logits - text_logits.max(axis=1, keepdims=True)
    exp_text = np.exp(text_logits)
    p_text = exp_text / exp_text.sum(axis=1, keepdims=True)

    fused = dtype(weights.alpha1) * p_text + dtype(weights.alpha3) * p_static
    total = fused.sum(axis=1, keepdims=True)
    picked = fused[np.arange(batch), labels]
    if np.any(picked <= 0):
        raise NumericalFailure("fused probability of a true class reached zero")
    loss = float(np.mean(-np.log(picked / total[:, 0])))
    if not math.isfinite(loss):
        raise NumericalFailure(f"training loss is not finite: {loss}")

    if not need_cache:
        return loss, None
    cache = dict(v_in=v_in, m_in=m_in, q=q, nq=nq, keys=keys, nk=nk, vals=vals, nv=nv,
                 att=att, combined=combined, rows=rows, no=no, p_static=p_static,
                 fused=fused, total=total, scale=scale, beta=beta, mask=mask,
                 labels=labels, batch=batch, dtype=dtype)
    return loss, cache


def _backward(params: dict[str, np.ndarray], cfg: ReadoutConfig, weights: FusionWeights,
              cache: dict) -> dict[str, np.ndarray]:
    dtype = cache["dtype"]
    batch = cache["batch"]
    labels = cache["labels"]
    p_static = cache["p_static"]
    fused = cache["fused"]
    total = cache["total"]

    one_hot = np.zeros_like(fused)
    one_hot[np.arange(batch), labels] = 1.0
    picked = fused[np.arange(batch), labels][:, None]
    d_fused = (-one_hot / picked + 1.0 / total) / dtype(batch)
    d_pstat = dtype(weights.alpha3) * d_fused

    inner = (d_pstat * p_static).sum(axis=1, keepdims=True)
    d_logits = p_static * (d_pstat - inner)
    d_rows = cache["scale"] * d_logits[:, :, None] * cache["v_in"][:, None, :]

    d_pre_o = _l2_backward(d_rows, cache["rows"], cache["no"])
    g_w_o = np.einsum("bcd,bce->de", cache["combined"], d_pre_o)
    g_b_o = d_pre_o.sum(axis=(0, 1))
    d_combined = d_pre_o + d_pre_o @ params["w_o"].T

    d_att = np.einsum("bcd,ckd->bck", d_combined, cache["vals"])
    d_vals = np.einsum("bck,bcd->ckd", cache["att"], d_combined)

    att = cache["att"]
    if cfg.weighting is Weighting.SHARPENED_EXP:
        d_sims = cache["beta"] * att * d_att
    else:
        inner_att = (d_att * att).sum(axis=-1, keepdims=True)
        d_sims = cache["beta"] * att * (d_att - inner_att)

    d_q = np.einsum("bck,ckd->bd", d_sims, cache["keys"])
    d_keys = np.einsum("bck,bd->ckd", d_sims, cache["q"])

    d_pre_k = _l2_backward(d_keys, cache["keys"], cache["nk"])
    g_w_k = np.einsum("ckd,cke->de", cache["m_in"], d_pre_k)
    g_b_k = d_pre_k.sum(axis=(0, 1))

    d_pre_v = _l2_backward(d_vals, cache["vals"], cache["nv"])
    g_w_v = np.einsum("ckd,cke->de", cache["m_in"], d_pre_v)
    g_b_v = d_pre_v.sum(axis=(0, 1))

    d_pre_q = _l2_backward(d_q, cache["q"], cache["nq"])
    g_w_q = cache["v_in"].T @ d_pre_q
    g_b_q = d_pre_q.sum(axis=0)

    grads = {"w_q": g_w_q, "b_q": g_b_q, "w_k": g_w_k, "b_k": g_b_k,
             "w_v": g_w_v, "b_v": g_b_v, "w_o": g_w_o, "b_o": g_b_o}
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure(f"gradient for {name} is not finite")
    return grads


def _resolve_shots(static: StaticMemory | np.ndarray) -> np.ndarray:
    if isinstance(static, StaticMemory):
        return static.features
    return np.asarray(static)


def training_loss(features: np.ndarray, labels: np.ndarray,
                  static: StaticMemory | np.ndarray, text: TextClassifier,
                  proj: ProjectionSet | dict[str, np.ndarray], cfg: ReadoutConfig,
                  weights: FusionWeights, shot_ids: np.ndarray | None = None,
                  dtype=np.float32) -> float:
    """Mean cross-entropy of the fused text+static prediction over a batch."""
    params = proj if isinstance(proj, dict) else params_from_projections(proj, dtype)
    params = {k: v.astype(dtype) for k, v in params.items()}
    loss, _ = _forward(params, np.asarray(features), np.asarray(labels),
                       _resolve_shots(static), text.rows, cfg, weights,
                       shot_ids, dtype, need_cache=False)
    return loss


def backward(features: np.ndarray, labels: np.ndarray,
             static: StaticMemory | np.ndarray, text: TextClassifier,
             proj: ProjectionSet | dict[str, np.ndarray], cfg: ReadoutConfig,
             weights: FusionWeights, shot_ids: np.ndarray | None = None,
             dtype=np.float32) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for all eight parameter tensors."""
    params = proj if isinstance(proj, dict) else params_from_projections(proj, dtype)
    params = {k: v.astype(dtype) for k, v in params.items()}
    loss, cache = _forward(params, np.asarray(features), np.asarray(labels),
                           _resolve_shots(static), text.rows, cfg, weights,
                           shot_ids, dtype, need_cache=True)
    grads = _backward(params, cfg, weights, cache)
    return loss, grads


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 down to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, cfg: TrainConfig, lr_t: float) -> None:
    """Bias-corrected adaptive update with decoupled decay on weights only."""
    if lr_t < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr_t}")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name in PARAM_NAMES:
        grad = grads[name]
        state.first[name] = cfg.beta1 * state.first[name] + (1.0 - cfg.beta1) * grad
        state.second[name] = cfg.beta2 * state.second[name] + (1.0 - cfg.beta2) * grad * grad
        m_hat = state.first[name] / bc1
        v_hat = state.second[name] / bc2
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if name.startswith("w_") and cfg.weight_decay > 0:
            update = update + cfg.weight_decay * params[name]
        params[name] = params[name] - lr_t * update


@dataclass
class TrainRecord:
    epoch: int
    step: int
    lr: float
    loss: float


def render_training_log(history: list[TrainRecord]) -> str:
    lines = ["epoch step lr loss"]
    for rec in history:
        lines.append(f"{rec.epoch} {rec.step} {rec.lr:.8e} {rec.loss:.6f}")
    return "\n".join(lines) + "\n"


def train(static: StaticMemory, text: TextClassifier, readout_cfg: ReadoutConfig,
          fusion: FusionWeights, cfg: TrainConfig,
          dtype=np.float32) -> tuple[ProjectionSet, list[TrainRecord]]:
    """Run the full optimization loop over the C*K shot features.

    Batches are reshuffled every epoch from the configured seed, so the
    result is bitwise reproducible.  Returns the trained projections and
    the per-step loss history.
    """
    shots = static.features
    num_classes, num_shots, dim = shots.shape
    if cfg.leave_one_out and num_shots < 2:
        raise ValidationError("leave-one-out training needs at least 2 shots per class")

    features = shots.reshape(num_classes * num_shots, dim)
    labels = np.repeat(np.arange(num_classes), num_shots)
    slot_ids = np.tile(np.arange(num_shots), num_classes)
    total = features.shape[0]
    batch_size = min(cfg.batch_size, total)
    steps_per_epoch = math.ceil(total / batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    params = params_from_projections(ProjectionSet.zeros(dim), dtype)
    state = OptimizerState.init(params)
    rng = np.random.default_rng(cfg.seed)
    history: list[TrainRecord] = []

    global_step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(total)
        for start in range(0, total, batch_size):
            chosen = order[start : start + batch_size]
            batch_ids = None
            if cfg.leave_one_out:
                batch_ids = np.stack([labels[chosen], slot_ids[chosen]], axis=1)
            lr_t = cosine_lr(global_step, total_steps, cfg.learning_rate)
            try:
                loss, grads = backward(features[chosen], labels[chosen], static, text,
                                       params, readout_cfg, fusion,
                                       shot_ids=batch_ids, dtype=dtype)
            except NumericalFailure as exc:
                exc.history = history
                raise NumericalFailure(
                    f"training diverged at epoch {epoch} step {global_step}: {exc}"
                ) from exc
            optimizer_step(params, grads, state, cfg, lr_t)
            history.append(TrainRecord(epoch=epoch, step=global_step, lr=lr_t, loss=loss))
            global_step += 1

    return projections_from_params(params), history
