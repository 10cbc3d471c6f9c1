"""Uncertainty-aware neural surrogate for Shapley interactions.

The network attends over context token sets with additive attention
(``w3 . tanh(W4 q + W5 x_j)``, softmax over ``j``), concatenates the pooled
contexts after the head representations, and feeds the result to two
separate 3-layer tanh MLPs: one regresses the interaction, the other emits
an uncertainty logit squashed to ``(0, 1)``.

Training minimises ``(pred - target)^2 / (beta1 * sigma) + beta2 * sigma``.
Gradients are computed by hand; see ``tests/test_surrogate.py`` for the
finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from coalign.alignment import Region, TokenSpace, region_representation, softmax
from coalign.errors import ContractViolation, InvalidArgument, NumericFailure
from coalign.game import Coalition, GameEvaluator
from coalign.sampling import InteractionEstimate, SamplingConfig, sample_interaction

SIGMA_MIN = 1e-6
SIGMA_MAX = 1 - 1e-6
MAGIC = "UNSIL1"


@dataclass(frozen=True)
class SurrogateInput:
    """What the network sees for one coalition.

    ``head`` vectors are passed through unchanged; each array in ``contexts``
    is attention-pooled with ``query`` into one vector.
    """

    head: tuple[np.ndarray, ...]
    query: np.ndarray
    contexts: tuple[np.ndarray, ...]


def featurize_token_level(space: TokenSpace, region: Region) -> SurrogateInput:
    if not region.members:
        raise InvalidArgument("region has no members")
    h = region_representation(space, region)
    return SurrogateInput((h,), h, (space.patches, space.words))


def featurize_semantics_level(region_reps, phrase_reps, pair: tuple[int, int]) -> SurrogateInput:
    hi, ht = np.asarray(region_reps, float), np.asarray(phrase_reps, float)
    i, j = pair
    if not (0 <= i < len(hi) and 0 <= j < len(ht)):
        raise InvalidArgument(f"pair {pair} outside {len(hi)} regions x {len(ht)} phrases")
    return SurrogateInput((hi[i], ht[j]), (hi[i] + ht[j]) / 2, (hi, ht))


@dataclass(frozen=True)
class Prediction:
    value: float
    uncertainty: float


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 1.0
    beta2: float = 1.0
    learning_rate: float = 1e-2
    warmup_iterations: int = 100

    def __post_init__(self):
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise InvalidArgument("beta1 and beta2 must be > 0")
        if self.learning_rate < 0:
            raise InvalidArgument("learning_rate must be >= 0")
        if self.warmup_iterations < 1:
            raise InvalidArgument("warmup_iterations must be >= 1")


def _glorot(rng, fan_out, fan_in):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


@dataclass
class SurrogateParams:
    d: int
    hidden: int
    n_head: int
    n_ctx: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.d * (self.n_head + self.n_ctx)

    @classmethod
    def shapes(cls, d: int, hidden: int, n_head: int, n_ctx: int) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for c in range(n_ctx):
            out[f"att{c}.W4"] = (d, d)
            out[f"att{c}.W5"] = (d, d)
            out[f"att{c}.w3"] = (d,)
        f = d * (n_head + n_ctx)
        for h in ("val", "unc"):
            out[f"{h}.W1"] = (hidden, f)
            out[f"{h}.b1"] = (hidden,)
            out[f"{h}.W2"] = (hidden, hidden)
            out[f"{h}.b2"] = (hidden,)
            out[f"{h}.W3"] = (1, hidden)
            out[f"{h}.b3"] = (1,)
        return out

    @classmethod
    def init(cls, d: int, hidden: int = 64, *, n_head: int = 1, n_ctx: int = 2, seed: int = 0) -> "SurrogateParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in cls.shapes(d, hidden, n_head, n_ctx).items():
            if name.split(".")[1].startswith("b"):
                arrays[name] = np.zeros(shape)
            elif len(shape) == 1:
                arrays[name] = _glorot(rng, 1, shape[0])[0]
            else:
                arrays[name] = _glorot(rng, *shape)
        return cls(d, hidden, n_head, n_ctx, arrays)

    @classmethod
    def zeros(cls, d: int, hidden: int = 64, *, n_head: int = 1, n_ctx: int = 2) -> "SurrogateParams":
        shapes = cls.shapes(d, hidden, n_head, n_ctx)
        return cls(d, hidden, n_head, n_ctx, {k: np.zeros(s) for k, s in shapes.items()})

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "SurrogateParams":
        return SurrogateParams(self.d, self.hidden, self.n_head, self.n_ctx, {k: v.copy() for k, v in self.arrays.items()})

    def pin_uncertainty(self, sigma: float) -> "SurrogateParams":
        """A copy whose uncertainty head outputs exactly ``sigma`` for every input."""
        out = self.copy()
        for k in ("unc.W1", "unc.W2", "unc.W3"):
            out.arrays[k][:] = 0.0
        out.arrays["unc.b3"][:] = math.log(sigma / (1 - sigma))
        return out


# --- forward / backward -----------------------------------------------------

def _check_input(params: SurrogateParams, x: SurrogateInput):
    if len(x.head) != params.n_head or len(x.contexts) != params.n_ctx:
        raise ContractViolation(
            f"input has {len(x.head)} head / {len(x.contexts)} context slots, "
            f"params expect {params.n_head} / {params.n_ctx}"
        )
    for v in (*x.head, x.query):
        if np.shape(v) != (params.d,):
            raise ContractViolation(f"vector of shape {np.shape(v)}, params expect ({params.d},)")
    for c in x.contexts:
        if np.ndim(c) != 2 or np.shape(c)[1] != params.d or len(c) == 0:
            raise ContractViolation(f"context of shape {np.shape(c)} does not match d={params.d}")


def attention_pool(params: SurrogateParams, slot: int, query: np.ndarray, tokens: np.ndarray):
    """Pooled context vector and its attention weights for one context slot."""
    p = params.arrays
    hid = np.tanh(tokens @ p[f"att{slot}.W5"].T + p[f"att{slot}.W4"] @ query)
    alpha = softmax(hid @ p[f"att{slot}.w3"])
    return alpha @ tokens, alpha


def _mlp_forward(p, prefix, f):
    a1 = np.tanh(p[f"{prefix}.W1"] @ f + p[f"{prefix}.b1"])
    a2 = np.tanh(p[f"{prefix}.W2"] @ a1 + p[f"{prefix}.b2"])
    out = float((p[f"{prefix}.W3"] @ a2 + p[f"{prefix}.b3"])[0])
    return out, (f, a1, a2)


def _mlp_backward(p, prefix, cache, dout, grads):
    f, a1, a2 = cache
    grads[f"{prefix}.W3"] += dout * a2[None, :]
    grads[f"{prefix}.b3"] += dout
    dz2 = dout * p[f"{prefix}.W3"][0] * (1 - a2**2)
    grads[f"{prefix}.W2"] += np.outer(dz2, a1)
    grads[f"{prefix}.b2"] += dz2
    dz1 = (p[f"{prefix}.W2"].T @ dz2) * (1 - a1**2)
    grads[f"{prefix}.W1"] += np.outer(dz1, f)
    grads[f"{prefix}.b1"] += dz1
    return p[f"{prefix}.W1"].T @ dz1


def _forward(params: SurrogateParams, x: SurrogateInput):
    _check_input(params, x)
    p = params.arrays
    pooled, att_cache = [], []
    for c, tokens in enumerate(x.contexts):
        tokens = np.asarray(tokens, float)
        hid = np.tanh(tokens @ p[f"att{c}.W5"].T + p[f"att{c}.W4"] @ x.query)
        alpha = softmax(hid @ p[f"att{c}.w3"])
        pooled.append(alpha @ tokens)
        att_cache.append((tokens, hid, alpha))
    f = np.concatenate([np.asarray(h, float) for h in x.head] + pooled)
    value, val_cache = _mlp_forward(p, "val", f)
    logit, unc_cache = _mlp_forward(p, "unc", f)
    raw = 0.5 * (1.0 + math.tanh(0.5 * logit))
    sigma = min(max(raw, SIGMA_MIN), SIGMA_MAX)
    cache = (x, att_cache, val_cache, unc_cache, raw, sigma)
    return Prediction(value, sigma), cache


def pooled_features(params: SurrogateParams, x: SurrogateInput) -> np.ndarray:
    """The concatenated vector fed to both MLP heads (length ``d * (n_head + n_ctx)``)."""
    _, cache = _forward(params, x)
    return cache[2][0]


def predict(params: SurrogateParams, x: SurrogateInput) -> Prediction:
    return _forward(params, x)[0]


def _backward(params: SurrogateParams, cache, dvalue: float, dsigma: float, grads: dict):
    p = params.arrays
    x, att_cache, val_cache, unc_cache, raw, sigma = cache
    dlogit = dsigma * raw * (1 - raw) if SIGMA_MIN < raw < SIGMA_MAX else 0.0
    df = _mlp_backward(p, "val", val_cache, dvalue, grads)
    df = df + _mlp_backward(p, "unc", unc_cache, dlogit, grads)
    off = params.d * params.n_head
    for c, (tokens, hid, alpha) in enumerate(att_cache):
        de = df[off + c * params.d : off + (c + 1) * params.d]
        dalpha = tokens @ de
        dscore = alpha * (dalpha - alpha @ dalpha)
        grads[f"att{c}.w3"] += hid.T @ dscore
        dpre = np.outer(dscore, p[f"att{c}.w3"]) * (1 - hid**2)
        grads[f"att{c}.W5"] += dpre.T @ tokens
        grads[f"att{c}.W4"] += np.outer(dpre.sum(axis=0), x.query)


def unsil_loss(prediction: Prediction, target: float, cfg: TrainConfig) -> float:
    """``(pred - target)^2 / (beta1 * sigma) + beta2 * sigma``."""
    s = prediction.uncertainty
    if not 0 < s < 1:
        raise ContractViolation(f"uncertainty {s} outside (0, 1)")
    err = prediction.value - target
    return err * err / (cfg.beta1 * s) + cfg.beta2 * s


def loss_and_grads(params: SurrogateParams, batch: Sequence[tuple[SurrogateInput, float]], cfg: TrainConfig):
    """Mean loss over ``batch`` and its gradient for every parameter array."""
    if not batch:
        raise InvalidArgument("empty batch")
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    total = 0.0
    k = len(batch)
    for x, target in batch:
        pred, cache = _forward(params, x)
        err = pred.value - target
        s = pred.uncertainty
        total += unsil_loss(pred, target, cfg)
        dvalue = 2 * err / (cfg.beta1 * s) / k
        dsigma = (cfg.beta2 - err * err / (cfg.beta1 * s * s)) / k
        _backward(params, cache, dvalue, dsigma, grads)
    return total / k, grads


def train_step(params: SurrogateParams, batch, cfg: TrainConfig) -> tuple[SurrogateParams, float]:
    """One plain gradient-descent step on the mean loss; ``params`` is left untouched."""
    loss, grads = loss_and_grads(params, batch, cfg)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericFailure(f"non-finite loss/gradient (loss={loss}) on a batch of {len(batch)}")
    out = params.copy()
    for name, g in grads.items():
        out.arrays[name] -= cfg.learning_rate * g
    return out, loss


# --- gating -----------------------------------------------------------------

@dataclass(frozen=True)
class HybridOutcome:
    estimate: InteractionEstimate
    prediction: Prediction | None
    trained: bool


def _hybrid(game, s, x, params, cfg, sampling_cfg, rng, iteration, *, freeze=False, force_sampling=False):
    if iteration < cfg.warmup_iterations or force_sampling:
        pred = None
    else:
        pred = predict(params, x)
        if rng.random() > pred.uncertainty:
            est = InteractionEstimate(pred.value, 0.0, 0, 0, "surrogate")
            return est, params, HybridOutcome(est, pred, False)
    est = sample_interaction(game, s, sampling_cfg)
    trained = not freeze
    if trained:
        params, _ = train_step(params, [(x, est.mean)], cfg)
    return est, params, HybridOutcome(est, pred, trained)


def hybrid_estimate(
    game: GameEvaluator,
    s: Coalition,
    features: SurrogateInput,
    params: SurrogateParams,
    cfg: TrainConfig,
    sampling_cfg: SamplingConfig,
    rng: np.random.Generator,
    iteration: int,
    *,
    freeze: bool = False,
    force_sampling: bool = False,
) -> tuple[InteractionEstimate, SurrogateParams]:
    """Sample during warm-up; afterwards trust the surrogate when ``U(0,1) > sigma``.

    Every sampled result is also used for one training step unless ``freeze``.
    """
    est, params, _ = _hybrid(
        game, s, features, params, cfg, sampling_cfg, rng, iteration, freeze=freeze, force_sampling=force_sampling
    )
    return est, params


class HybridEstimator:
    """Stateful wrapper around :func:`hybrid_estimate` for streams of coalitions.

    Training steps are applied in call order under a single writer.
    """

    def __init__(
        self,
        params: SurrogateParams,
        cfg: TrainConfig,
        sampling_cfg: SamplingConfig,
        seed: int = 0,
        *,
        freeze: bool = False,
        force_sampling: bool = False,
    ):
        self.params = params
        self.cfg = cfg
        self.sampling_cfg = sampling_cfg
        self.rng = np.random.default_rng(seed)
        self.freeze = freeze
        self.force_sampling = force_sampling
        self.iteration = 0
        self.history: list[HybridOutcome] = []

    def __call__(self, game: GameEvaluator, s: Coalition, features: SurrogateInput) -> InteractionEstimate:
        sampling = SamplingConfig(
            self.sampling_cfg.num_samples,
            self.sampling_cfg.seed + self.iteration,
            self.sampling_cfg.workers,
            self.sampling_cfg.block_size,
        )
        est, self.params, outcome = _hybrid(
            game, s, features, self.params, self.cfg, sampling, self.rng, self.iteration,
            freeze=self.freeze, force_sampling=self.force_sampling,
        )
        self.iteration += 1
        self.history.append(outcome)
        return est


# --- checkpoint format ------------------------------------------------------

def save_params(params: SurrogateParams, fh: TextIO):
    fh.write(f"{MAGIC}\n")
    fh.write(f"d {params.d}\nhidden {params.hidden}\nn_head {params.n_head}\nn_ctx {params.n_ctx}\n")
    for name, arr in params.arrays.items():
        fh.write(f"array {name} {' '.join(str(s) for s in arr.shape)}\n")
        for row in np.atleast_2d(arr):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_params(fh: TextIO) -> SurrogateParams:
    lines = iter(fh.read().splitlines())
    if next(lines, "").strip() != MAGIC:
        raise ContractViolation(f"not a {MAGIC} parameter file")
    dims = {}
    for key in ("d", "hidden", "n_head", "n_ctx"):
        k, v = next(lines).split()
        if k != key:
            raise ContractViolation(f"expected header field {key!r}, got {k!r}")
        dims[key] = int(v)
    shapes = SurrogateParams.shapes(dims["d"], dims["hidden"], dims["n_head"], dims["n_ctx"])
    arrays = {}
    for line in lines:
        if not line.strip():
            continue
        tag, name, *shape = line.split()
        shape = tuple(int(s) for s in shape)
        if tag != "array" or shapes.get(name) != shape:
            raise ContractViolation(f"unexpected array record {line!r}")
        rows = 1 if len(shape) == 1 else shape[0]
        data = [float(v) for _ in range(rows) for v in next(lines).split()]
        arrays[name] = np.array(data).reshape(shape)
    if set(arrays) != set(shapes):
        raise ContractViolation(f"missing arrays: {sorted(set(shapes) - set(arrays))}")
    return SurrogateParams(dims["d"], dims["hidden"], dims["n_head"], dims["n_ctx"], arrays)
