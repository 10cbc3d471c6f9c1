"""Finite-difference oracle shared by the unit and acceptance tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = f()
        flat[k] = old - step
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * step)
    return g


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def surrogate_grad_error(rng: np.random.Generator) -> float:
    from coalign.surrogate import SurrogateInput, SurrogateParams, TrainConfig, loss_and_grads

    d, hidden = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    n_head, n_ctx = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    params = SurrogateParams.init(d, hidden, n_head=n_head, n_ctx=n_ctx, seed=int(rng.integers(1 << 30)))
    for a in params.arrays.values():
        a += rng.normal(scale=0.3, size=a.shape)
    cfg = TrainConfig(beta1=float(rng.uniform(0.5, 2)), beta2=float(rng.uniform(0.5, 2)))
    batch = []
    for _ in range(int(rng.integers(1, 4))):
        x = SurrogateInput(
            tuple(rng.normal(size=d) for _ in range(n_head)),
            rng.normal(size=d),
            tuple(rng.normal(size=(int(rng.integers(1, 5)), d)) for _ in range(n_ctx)),
        )
        batch.append((x, float(rng.normal())))
    _, grads = loss_and_grads(params, batch, cfg)
    worst = 0.0
    for name, arr in params.arrays.items():
        num = numeric_grad(lambda: loss_and_grads(params, batch, cfg)[0], arr)
        worst = max(worst, max_rel_error(grads[name], num))
    return worst


def cmc_grad_error(rng: np.random.Generator) -> float:
    from coalign.alignment import loss_cmc, loss_cmc_grad

    B, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    img, txt = rng.normal(size=(B, d)), rng.normal(size=(B, d))
    tau = float(rng.uniform(0.3, 2.0))
    gi, gt = loss_cmc_grad(img, txt, tau)
    ni = numeric_grad(lambda: loss_cmc(img, txt, tau), img)
    nt = numeric_grad(lambda: loss_cmc(img, txt, tau), txt)
    return max(max_rel_error(gi, ni), max_rel_error(gt, nt))


def tsa_grad_error(rng: np.random.Generator) -> float:
    from coalign.alignment import loss_tsa, loss_tsa_grad

    k = int(rng.integers(1, 6))
    s, y = rng.uniform(0.05, 0.95, size=k), rng.uniform(0, 1, size=k)
    return max_rel_error(loss_tsa_grad(s, y), numeric_grad(lambda: loss_tsa(s, y), s))


def fsa_grad_error(rng: np.random.Generator) -> float:
    from coalign.alignment import AlignmentMatrix, loss_fsa, loss_fsa_grad

    M, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    raw, y = rng.normal(size=(M, N)), rng.uniform(0, 1, size=(M, N))
    g = loss_fsa_grad(AlignmentMatrix(raw), y)
    return max_rel_error(g, numeric_grad(lambda: loss_fsa(AlignmentMatrix(raw), y), raw))


def proposal_head_grad_error(rng: np.random.Generator) -> float:
    from coalign.alignment import ProposalHead, TokenSpace, _sigmoid, loss_tsa, propose_regions, tsa_head_gradient

    H, W, d = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
    space = TokenSpace(rng.normal(size=(H * W, d)), rng.normal(size=(3, d)), H, W)
    head = ProposalHead.random(d, 2, rng)
    props = propose_regions(space, head, int(rng.integers(1, H * W + 1)))
    labels = rng.uniform(0, 1, size=len(props))
    centers = [p.region.center for p in props]

    def loss():
        return loss_tsa(_sigmoid(head.logits(space.patches[centers])[:, 2]), labels)

    dw, db = tsa_head_gradient(space, head, props, labels)
    return max(
        max_rel_error(dw, numeric_grad(loss, head.weight)),
        max_rel_error(db, numeric_grad(loss, head.bias)),
    )


GRADIENT_CHECKS = {
    "surrogate": surrogate_grad_error,
    "cmc": cmc_grad_error,
    "tsa": tsa_grad_error,
    "fsa": fsa_grad_error,
    "proposal_head": proposal_head_grad_error,
}
