"""Experiment commands: each is a pure function of its resolved :class:`RunConfig`.

Every command returns a :class:`Report` holding the main CSV text (with a
``#`` comment header echoing the format version and resolved config), an exit
code, and optional side files keyed by filename suffix.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from coalign.alignment import (
    ProposalHead,
    alignment_matrix,
    compose_total_loss,
    encode_many,
    loss_cmc,
    loss_fsa,
    loss_tsa,
    make_planted_instance,
    normalize_interactions,
    phrase_representation,
    propose_regions,
    random_layout,
    random_region_like,
    region_representation,
    semantic_game,
)
from coalign.errors import DegenerateInputError, ResourceLimitError
from coalign.exact import (
    interaction_exact_expectation_form,
    pairwise_interaction_exact,
    shapley_interaction_exact,
    shapley_vector_exact,
)
from coalign.game import Coalition, GameEvaluator, additive_game, all_subsets, table_game
from coalign.sampling import (
    SamplingConfig,
    convergence_sweep_many,
    derive_seed,
    format_sweep_csv,
    is_non_increasing,
)
from coalign.serialization import format_matrix_csv, write_instance
from coalign.surrogate import HybridEstimator, SurrogateParams, TrainConfig, featurize_token_level

FORMAT_VERSION = "coalign-report/1"
AXIOM_TOL = 1e-9
REFERENCE_INSTABILITY = 0.06


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    out: str | None = None
    workers: int = 1
    budgets: tuple[int, ...] = (50, 100, 200, 500, 1000)
    repeats: int = 10
    dims: tuple[int, int, int, int] = (3, 4, 6, 16)
    beta1: float = 1.0
    beta2: float = 1.0
    lr: float = 0.01
    warmup: int = 100
    hidden: int = 64
    force_sampling: bool = False
    freeze_surrogate: bool = False
    norm_mode: str = "rowwise"
    games: int = 100
    min_players: int = 3
    max_players: int = 10
    max_coalition: int = 4
    cap: int = 20
    samples: int = 500
    stream: int = 2000
    instances: int = 10
    noise: float = 0.1
    proposals: int = 4
    tau: float = 0.07
    cmc_batch: int = 4
    inject_broken: bool = False

    # Fields that may not influence output bytes.
    NOT_ECHOED = ("out", "workers")

    def echo(self) -> str:
        parts = []
        for f in fields(self):
            if f.name in self.NOT_ECHOED:
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append(f"{f.name}={v}")
        return " ".join(parts)


COMMAND_DEFAULTS: dict[str, dict] = {
    "axioms": {"games": 100},
    "oracle": {"games": 50},
    "sweep": {},
    "unsil": {"beta2": 0.25, "noise": 0.02},
    "align-demo": {},
}


def _coerce(name: str, raw):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if name == "budgets":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if name == "dims":
            vals = tuple(int(x) for x in raw.lower().split("x"))
            if len(vals) != 4:
                raise ValueError
            return vals
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str | None" or kind == "str":
            return raw
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known or key == "command":
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(command: str, file_values: dict | None = None, flag_values: dict | None = None) -> RunConfig:
    """Defaults, then per-command defaults, then the config file, then flags."""
    if command not in COMMAND_DEFAULTS:
        raise UsageError(f"unknown command {command!r}")
    values = dict(COMMAND_DEFAULTS[command])
    values.update(file_values or {})
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    values = {k: _coerce(k, v) for k, v in values.items()}
    cfg = RunConfig(command=command, **values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.repeats < 2:
        raise UsageError("repeats must be >= 2")
    if not cfg.budgets or min(cfg.budgets) < 1:
        raise UsageError("budgets must be a non-empty list of positive counts")
    if cfg.norm_mode not in ("minmax", "rowwise"):
        raise UsageError("norm-mode must be minmax or rowwise")
    if cfg.workers < 1 or cfg.games < 1 or cfg.stream < 1 or cfg.instances < 1:
        raise UsageError("workers, games, stream and instances must be >= 1")
    if not 1 <= cfg.min_players <= cfg.max_players:
        raise UsageError("need 1 <= min_players <= max_players")
    H, W, L2, d = cfg.dims
    if min(H, W, L2) < 1 or d < 2:
        raise UsageError(f"bad dims {cfg.dims}")


@dataclass
class Report:
    text: str
    exit_code: int = 0
    files: dict[str, str] = field(default_factory=dict)


def _header(cfg: RunConfig, extra: list[str] = ()) -> str:
    lines = [f"# {FORMAT_VERSION} command={cfg.command}", f"# config: {cfg.echo()}"]
    lines += [f"# {x}" for x in extra]
    return "\n".join(lines) + "\n"


def _rng(cfg: RunConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cfg.seed, *key))


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


# --- axioms -----------------------------------------------------------------

def _swap_table(n: int, i: int, j: int) -> np.ndarray:
    """Index map sending each mask to the mask with players ``i`` and ``j`` exchanged."""
    masks = np.arange(1 << n)
    bi, bj = (masks >> i) & 1, (masks >> j) & 1
    return masks & ~((1 << i) | (1 << j)) | (bi << j) | (bj << i)


def purity_deviation(game: GameEvaluator) -> float:
    masks, _ = all_subsets(list(range(game.n)), game.n)
    return float(np.max(np.abs(game.evaluate_masks(masks) - game.evaluate_masks(masks))))


def _broken_game(n: int, rng: np.random.Generator) -> GameEvaluator:
    base = rng.normal(size=1 << n)
    return GameEvaluator(n, batch_fn=lambda m: base[m] + rng.normal(scale=1e-3, size=len(m)), name="broken")


def axiom_deviations(n: int, rng: np.random.Generator, cap: int = 20) -> dict[str, float]:
    """Max deviation of each axiom on freshly drawn random games over ``n`` players."""
    tv, tu = rng.normal(size=1 << n), rng.normal(size=1 << n)
    v, u = table_game(tv), table_game(tu)
    phi_v = shapley_vector_exact(v, cap=cap)
    phi_u = shapley_vector_exact(u, cap=cap)
    phi_w = shapley_vector_exact(table_game(tu + tv), cap=cap)
    out = {
        "efficiency": abs(phi_v.sum() - (tv[-1] - tv[0])),
        "linearity": float(np.max(np.abs(phi_w - phi_u - phi_v))),
    }
    if n >= 2:
        i, j = rng.choice(n, size=2, replace=False)
        sym = (tv + tv[_swap_table(n, i, j)]) / 2
        phi = shapley_vector_exact(table_game(sym), cap=cap)
        out["symmetry"] = abs(phi[i] - phi[j])
    else:
        out["symmetry"] = 0.0
    i = int(rng.integers(n))
    masks = np.arange(1 << n)
    base = tv.copy()
    base[0] = 0.0
    c = rng.normal()
    dummy = base[masks & ~(1 << i)] + c * ((masks >> i) & 1)
    phi = shapley_vector_exact(table_game(dummy), cap=cap)
    out["dummy"] = abs(phi[i] - dummy[1 << i])
    out["purity"] = purity_deviation(v)
    return out


def cmd_axioms(cfg: RunConfig) -> Report:
    worst = {k: 0.0 for k in ("linearity", "symmetry", "dummy", "efficiency", "purity")}
    span = cfg.max_players - cfg.min_players + 1
    for g in range(cfg.games):
        n = cfg.min_players + g % span
        for k, dev in axiom_deviations(n, _rng(cfg, g), cfg.cap).items():
            worst[k] = max(worst[k], dev)
    if cfg.inject_broken:
        worst["purity"] = max(worst["purity"], purity_deviation(_broken_game(cfg.min_players, _rng(cfg, cfg.games))))
    rows = ["axiom,max_deviation,tolerance,status"]
    failed = False
    for k, dev in worst.items():
        tol = 0.0 if k == "purity" else AXIOM_TOL
        ok = dev <= tol
        failed |= not ok
        rows.append(f"{k},{dev:.6e},{tol:g},{_status(ok)}")
    return Report(_header(cfg) + "\n".join(rows) + "\n", 1 if failed else 0)


# --- oracle equivalence -----------------------------------------------------

def oracle_deviations(n: int, rng: np.random.Generator, max_coalition: int = 4, cap: int = 20) -> dict[str, float]:
    game = table_game(rng.normal(size=1 << n))
    size = int(rng.integers(1, min(max_coalition, n) + 1))
    s = Coalition.from_members(rng.choice(n, size=size, replace=False), n)
    direct = shapley_interaction_exact(game, s, cap=cap).value
    expect = interaction_exact_expectation_form(game, s, cap=cap).value
    out = {"direct_vs_expectation": abs(direct - expect), "pairwise_vs_direct": 0.0}
    if n >= 2:
        i, j = (int(x) for x in rng.choice(n, size=2, replace=False))
        pair = Coalition.from_members((i, j), n)
        out["pairwise_vs_direct"] = abs(
            pairwise_interaction_exact(game, i, j, cap=cap).value - shapley_interaction_exact(game, pair, cap=cap).value
        )
    add = additive_game(rng.integers(-5, 6, size=n))
    out["additive_zero"] = max(
        abs(shapley_interaction_exact(add, s, cap=cap).value),
        abs(interaction_exact_expectation_form(add, s, cap=cap).value),
    )
    return out


def cmd_oracle(cfg: RunConfig) -> Report:
    if cfg.max_players > cfg.cap:
        raise ResourceLimitError(f"max_players {cfg.max_players} exceeds the enumeration cap {cfg.cap}")
    worst = {"direct_vs_expectation": 0.0, "pairwise_vs_direct": 0.0, "additive_zero": 0.0}
    span = cfg.max_players - cfg.min_players + 1
    for g in range(cfg.games):
        n = cfg.min_players + g % span
        for k, dev in oracle_deviations(n, _rng(cfg, g), cfg.max_coalition, cfg.cap).items():
            worst[k] = max(worst[k], dev)
    rows = ["check,max_abs_diff,tolerance,status"]
    failed = False
    for k, dev in worst.items():
        # Integer additive games have exactly zero interaction on both paths.
        tol = 0.0 if k == "additive_zero" else AXIOM_TOL
        ok = dev <= tol if k == "additive_zero" else dev < tol
        failed |= not ok
        rows.append(f"{k},{dev:.6e},{tol:g},{_status(ok)}")
    return Report(_header(cfg) + "\n".join(rows) + "\n", 1 if failed else 0)


# --- sweep ------------------------------------------------------------------

def planted_stream_item(cfg: RunConfig, key: tuple[int, ...], k: int, noise: float):
    """A planted instance and one of its planted regions, fully determined by ``key``."""
    H, W, L2, d = cfg.dims
    rng = _rng(cfg, *key)
    layout = random_layout(rng, H, W, L2)
    inst = make_planted_instance(derive_seed(cfg.seed, *key, 1), H, W, L2, d, layout, noise=noise)
    region = inst.regions[k % len(inst.regions)]
    game = inst.token_game()
    return inst, region, game, Coalition.from_members(region.members, game.n)


def sweep_rows(cfg: RunConfig):
    items = []
    for k in range(cfg.instances):
        _, _, game, s = planted_stream_item(cfg, (0, k), k, cfg.noise)
        items.append((game, s))
    return convergence_sweep_many(items, cfg.budgets, cfg.repeats, derive_seed(cfg.seed, 1), workers=cfg.workers)


def cmd_sweep(cfg: RunConfig) -> Report:
    rows = sweep_rows(cfg)
    extra = [f"non_increasing={str(is_non_increasing(rows)).lower()}", f"reference_instability={REFERENCE_INSTABILITY}"]
    at500 = [r for r in rows if r.sample_count == 500]
    if at500:
        r = at500[0]
        extra.append(f"instability_at_500={r.mean_instability:.10g} below_reference={str(r.mean_instability < REFERENCE_INSTABILITY).lower()}")
    flagged = [str(r.sample_count) for r in rows if r.degenerate]
    if flagged:
        extra.append(f"degenerate_budgets={','.join(flagged)}")
    return Report(_header(cfg, extra) + format_sweep_csv(rows))


# --- UNSIL study ------------------------------------------------------------

@dataclass
class StudyResult:
    relative_errors: np.ndarray
    sigmas: np.ndarray  # nan during warm-up / forced sampling
    methods: list[str]
    estimates: np.ndarray
    exact: np.ndarray
    hybrid_evals: int
    sampling_evals: int

    @property
    def eval_ratio(self) -> float:
        return self.hybrid_evals / self.sampling_evals

    def sigma_deciles(self) -> tuple[float, float]:
        s = self.sigmas[~np.isnan(self.sigmas)]
        if len(s) < 10:
            return float("nan"), float("nan")
        k = len(s) // 10
        return float(s[:k].mean()), float(s[-k:].mean())


def run_unsil_study(cfg: RunConfig) -> StudyResult:
    d = cfg.dims[3]
    estimator = HybridEstimator(
        SurrogateParams.init(d, cfg.hidden, seed=derive_seed(cfg.seed, 2)),
        TrainConfig(cfg.beta1, cfg.beta2, cfg.lr, cfg.warmup),
        SamplingConfig(cfg.samples, derive_seed(cfg.seed, 3), cfg.workers),
        derive_seed(cfg.seed, 4),
        freeze=cfg.freeze_surrogate,
        force_sampling=cfg.force_sampling,
    )
    errs, sig, methods, ests, exact = [], [], [], [], []
    hybrid = full = 0
    for k in range(cfg.stream):
        inst, region, game, s = planted_stream_item(cfg, (5, k), k, cfg.noise)
        truth = interaction_exact_expectation_form(game, s, cap=cfg.cap).value
        est = estimator(game, s, featurize_token_level(inst.space, region))
        outcome = estimator.history[-1]
        hybrid += est.evals_used
        full += cfg.samples * (len(s) + 2)
        errs.append(abs(est.mean - truth) / abs(truth))
        sig.append(outcome.prediction.uncertainty if outcome.prediction else np.nan)
        methods.append(est.method)
        ests.append(est.mean)
        exact.append(truth)
    return StudyResult(np.array(errs), np.array(sig), methods, np.array(ests), np.array(exact), hybrid, full)


def cmd_unsil(cfg: RunConfig) -> Report:
    res = run_unsil_study(cfg)
    first, last = res.sigma_deciles()
    summary = [
        ("stream_length", cfg.stream),
        ("mean_relative_error", f"{res.relative_errors.mean():.10g}"),
        ("hybrid_evals", res.hybrid_evals),
        ("sampling_only_evals", res.sampling_evals),
        ("eval_ratio", f"{res.eval_ratio:.10g}"),
        ("surrogate_fraction", f"{res.methods.count('surrogate') / cfg.stream:.10g}"),
        ("sigma_first_decile", f"{first:.10g}"),
        ("sigma_last_decile", f"{last:.10g}"),
    ]
    text = _header(cfg) + "metric,value\n" + "".join(f"{k},{v}\n" for k, v in summary)
    trace = ["iteration,method,sigma,estimate,exact,relative_error"]
    for k in range(cfg.stream):
        trace.append(
            f"{k},{res.methods[k]},{res.sigmas[k]:.10g},{res.estimates[k]:.10g},{res.exact[k]:.10g},{res.relative_errors[k]:.10g}"
        )
    return Report(text, 0, {"_trace.csv": _header(cfg) + "\n".join(trace) + "\n"})


# --- alignment demo ---------------------------------------------------------

@dataclass
class DemoResult:
    instance: object
    token_rows: list[tuple[str, tuple[int, ...], float]]
    interactions: np.ndarray
    labels: np.ndarray
    matrix: object
    losses: dict[str, float]
    planted_argmax: list[bool]


def run_align_demo(cfg: RunConfig) -> DemoResult:
    H, W, L2, d = cfg.dims
    rng = _rng(cfg, 7)
    inst = make_planted_instance(derive_seed(cfg.seed, 8), H, W, L2, d, random_layout(rng, H, W, L2), noise=cfg.noise)
    space = inst.space
    game = inst.token_game()

    def token_interaction(region):
        return shapley_interaction_exact(game, Coalition.from_members(region.members, game.n), cap=cfg.cap).value

    head = ProposalHead.random(d, min(H, W), rng)
    proposals = propose_regions(space, head, min(cfg.proposals, space.L1))
    rows = []
    for k, r in enumerate(inst.regions):
        rows.append(("planted", r.members, token_interaction(r)))
        rand = random_region_like(r, H, W, rng, exclude=inst.regions)
        rows.append(("random", rand.members, token_interaction(rand)))
    prop_vals = []
    for p in proposals:
        prop_vals.append(token_interaction(p.region))
        rows.append(("proposal", p.region.members, prop_vals[-1]))
    try:
        tsa_labels = normalize_interactions(prop_vals, "minmax")
    except DegenerateInputError:
        tsa_labels = np.full(len(prop_vals), 0.5)
    l_tsa = loss_tsa([p.confidence for p in proposals], tsa_labels)

    regions = list(inst.regions)
    for p in proposals:
        if p.region.members not in {r.members for r in regions}:
            regions.append(p.region)
    phrases = inst.chunked_phrases()
    hi = np.array([region_representation(space, r) for r in regions])
    ht = np.array([phrase_representation(space, p) for p in phrases])
    sem = semantic_game(hi, ht)
    M, N = len(hi), len(ht)
    inter = np.array(
        [[pairwise_interaction_exact(sem, i, M + j, cap=cfg.cap).value for j in range(N)] for i in range(M)]
    )
    labels = normalize_interactions(inter, cfg.norm_mode) if cfg.norm_mode == "rowwise" else _minmax_or_half(inter)
    matrix = alignment_matrix(hi, ht)
    l_fsa = loss_fsa(matrix, labels)

    imgs, txts = [], []
    for b in range(cfg.cmc_batch):
        other = inst if b == 0 else make_planted_instance(
            derive_seed(cfg.seed, 9, b), H, W, L2, d, random_layout(_rng(cfg, 10, b), H, W, L2), noise=cfg.noise
        )
        keep = np.ones((1, other.space.n_players), dtype=bool)
        img, txt = encode_many(other.space, keep)
        imgs.append(img[0])
        txts.append(txt[0])
    l_cmc = loss_cmc(np.array(imgs), np.array(txts), cfg.tau)
    losses = {"loss_cmc": l_cmc, "loss_tsa": l_tsa, "loss_fsa": l_fsa, "total": compose_total_loss(l_cmc, l_tsa, l_fsa)}
    argmax = [int(np.argmax(inter[k])) == inst.planted_phrase_index(k, phrases) for k in range(len(inst.regions))]
    return DemoResult(inst, rows, inter, labels, matrix, losses, argmax)


def _minmax_or_half(x: np.ndarray) -> np.ndarray:
    try:
        return normalize_interactions(x, "minmax")
    except DegenerateInputError:
        return np.full(x.shape, 0.5)


def cmd_align_demo(cfg: RunConfig) -> Report:
    res = run_align_demo(cfg)
    M, N = res.interactions.shape
    rlab = [f"region{i}" for i in range(M)]
    clab = [f"phrase{j}" for j in range(N)]
    buf = io.StringIO()
    write_instance(res.instance, buf)
    token_csv = ["kind,members,interaction"] + [
        f"{kind},{' '.join(map(str, members))},{val:.12g}" for kind, members, val in res.token_rows
    ]
    files = {
        ".instance.txt": buf.getvalue(),
        "_token_interactions.csv": "\n".join(token_csv) + "\n",
        "_interactions.csv": format_matrix_csv(res.interactions, rlab, clab),
        "_labels.csv": format_matrix_csv(res.labels, rlab, clab),
        "_alignment.csv": format_matrix_csv(res.matrix.row_normalized, rlab, clab),
    }
    extra = [f"planted_row_argmax={sum(res.planted_argmax)}/{len(res.planted_argmax)}"]
    text = _header(cfg, extra) + ",".join(res.losses) + "\n" + ",".join(f"{v:.12g}" for v in res.losses.values()) + "\n"
    return Report(text, 0, files)


COMMANDS: dict[str, Callable[[RunConfig], Report]] = {
    "axioms": cmd_axioms,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "unsil": cmd_unsil,
    "align-demo": cmd_align_demo,
}


def run_command(cfg: RunConfig) -> Report:
    return COMMANDS[cfg.command](cfg)
