"""Numerical check of the parameter-distance bound on convex instances.

For multinomial logistic regression the summed cross-entropy is convex and
beta-smooth in the parameters, so the one-step unlearning update
theta' = theta_o - (1/beta) * grad(loss over D + adversarial point) admits

    ||theta' - theta_u||^2 <= ||theta_o - theta_u||^2 + (2/beta)(L*delta - C)

whenever both models reach near-zero training loss. Every term is computed
here; violations are reported, not raised.
"""

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, build_adversarial_set
from .data import LabeledDataset
from .models import (ModelSpec, ModelState, TrainingDiverged, init_params,
                     loss_and_grads, per_sample_losses)
from . import backends

BOUND_SLACK = 1e-9


def lipschitz_input(state):
    """Spectral norm of the weight matrix: a Lipschitz constant for the
    logit map (softmax is 1-Lipschitz, so it bounds the probability map too)."""
    if state.spec.kind != "logistic":
        raise ValueError("input Lipschitz constant is only computed for logistic models")
    d, m = state.spec.layer_widths
    W = state.params[:d * m].reshape(d, m)
    if not W.any():
        return 0.0
    return float(np.linalg.svd(W, compute_uv=False)[0])


def smoothness_beta(data):
    """Curvature upper bound for the summed softmax cross-entropy.

    The logit Hessian is bounded by I/2 and the bias is a trained
    parameter, so the data matrix is bias-augmented: beta = lambda_max(sum
    of [x;1][x;1]^T) / 2. Deliberately an upper bound; the 1/beta step and
    the descent lemma stay valid.
    """
    X, _ = data.rows(np.arange(data.n))
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    lam = float(np.linalg.eigvalsh(A.T @ A)[-1])
    return 0.5 * lam


def one_step_unlearn(theta_o, dprime, beta):
    """Exact single gradient-descent step at rate 1/beta on the summed loss."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    X, y = dprime.rows(np.arange(dprime.n))
    _, grad, _ = loss_and_grads(theta_o, X, y)
    return ModelState(theta_o.spec, theta_o.params - grad / beta, theta_o.rng_seed)


@dataclass
class ConvexInstance:
    data: LabeledDataset      # the full training set D
    forget_row: int           # row index of the sample to forget
    adv: object               # AdvRecord for that sample
    theta_o: ModelState       # trained on D
    theta_u: ModelState       # trained on D minus the forget sample
    beta: float               # smoothness of the loss on D' = D + adv point
    lipschitz: float          # input Lipschitz constant of theta_o's logit map
    delta: float              # ||x - x_adv||

    def dprime(self):
        X, y = self.data.rows(np.arange(self.data.n))
        feats = np.vstack([X, self.adv.x_adv[None, :]])
        labels = np.concatenate([y, [self.adv.y_adv]])
        ids = np.concatenate([self.data.ids, [-1]])
        return LabeledDataset(feats, labels, ids, self.data.num_classes)


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    c_term: float
    component_losses: tuple   # (l_o_xp_y, l_p_xp_yp, l_u_x_y, l_u_xp_yp)
    holds: bool
    precondition_residuals: tuple  # max per-sample CE of theta_o on D, theta_u on D-x
    lipschitz: float
    beta: float
    delta: float
    # proof-step check: R(theta_u) - R(theta') >= (beta/2)(lhs - ||theta_o-theta_u||^2)
    r_hat_u: float
    r_hat_prime: float
    intermediate_holds: bool


def _single_loss(state, x, y):
    return float(per_sample_losses(state, x.reshape(1, -1), [y])[0])


def theorem_bound_check(instance):
    """Evaluate every term of the bound on one instance."""
    data = instance.data
    row = instance.forget_row
    x, y = data.rows([row])
    x, y = x[0], int(y[0])
    xp, yp = instance.adv.x_adv, int(instance.adv.y_adv)
    theta_o, theta_u = instance.theta_o, instance.theta_u
    beta, L, delta = instance.beta, instance.lipschitz, instance.delta

    dprime = instance.dprime()
    theta_p = one_step_unlearn(theta_o, dprime, beta)

    c1 = _single_loss(theta_o, xp, y)
    c2 = _single_loss(theta_p, xp, yp)
    c3 = _single_loss(theta_u, x, y)
    c4 = _single_loss(theta_u, xp, yp)
    c_term = c1 + c2 - c3 - c4

    lhs = float(np.sum((theta_p.params - theta_u.params) ** 2))
    base = float(np.sum((theta_o.params - theta_u.params) ** 2))
    rhs = base + (2.0 / beta) * (L * delta - c_term)

    Xp, Yp = dprime.rows(np.arange(dprime.n))
    r_u = float(np.sum(per_sample_losses(theta_u, Xp, Yp)))
    r_p = float(np.sum(per_sample_losses(theta_p, Xp, Yp)))
    intermediate = r_u - r_p >= (beta / 2.0) * (lhs - base) - BOUND_SLACK

    all_rows = np.arange(data.n)
    Xo, Yo = data.rows(all_rows)
    res_o = float(per_sample_losses(theta_o, Xo, Yo).max())
    keep = all_rows[all_rows != row]
    if keep.size:
        Xu, Yu = data.rows(keep)
        res_u = float(per_sample_losses(theta_u, Xu, Yu).max())
    else:
        res_u = 0.0

    return BoundReport(lhs, rhs, c_term, (c1, c2, c3, c4),
                       bool(lhs <= rhs + BOUND_SLACK), (res_o, res_u),
                       L, beta, delta, r_u, r_p, bool(intermediate))


def train_to_residual(spec, data, idx, tol=1e-3, seed=0, max_epochs=20_000,
                      check_every=25):
    """Full-batch descent until the worst per-sample CE <= tol.

    Backtracking line search starting from the safe 1/beta step: the trial
    step doubles each epoch and halves until the summed loss decreases, so
    descent is guaranteed on this convex objective while the step grows as
    the curvature dies off (separable data drives the loss to zero only as
    the margin diverges, which a fixed 1/beta step reaches far too slowly).
    Deterministic; raises if the budget runs out (non-separable data).
    """
    idx = np.asarray(idx, dtype=np.int64)
    X, y = data.rows(idx)
    sub = LabeledDataset(X, y, data.ids[idx], data.num_classes)
    floor = 1.0 / smoothness_beta(sub)
    params = init_params(spec, seed).params
    widths = spec.layer_widths
    Xc = np.ascontiguousarray(X)
    yc = np.ascontiguousarray(y)
    lr = floor
    loss, grad, _ = backends.loss_and_grads(params, widths, Xc, yc, True, False)
    for epoch in range(max_epochs):
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, 0)
        trial = lr * 2.0
        while True:
            cand = params - trial * grad
            closs, cgrad, _ = backends.loss_and_grads(cand, widths, Xc, yc, True, False)
            if np.isfinite(closs) and closs <= loss or trial <= floor:
                break
            trial *= 0.5
        params, loss, grad, lr = cand, closs, cgrad, trial
        if (epoch + 1) % check_every == 0:
            state = ModelState(spec, params, seed)
            if per_sample_losses(state, Xc, yc).max() <= tol:
                return state
    state = ModelState(spec, params, seed)
    worst = float(per_sample_losses(state, Xc, yc).max())
    if worst <= tol:
        return state
    raise RuntimeError(
        f"residual target {tol} not reached in {max_epochs} epochs (worst CE {worst:.3e})")


def make_convex_instance(seed, n=40, d=2, tol=1e-3, spread=0.05):
    """Separable two-class instance with a genuine attacked forget sample."""
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        labels = np.arange(n, dtype=np.int64) % 2
        centers = np.array([[0.3] * d, [0.7] * d])
        X = centers[labels] + rng.normal(0.0, spread, size=(n, d))
        X = np.clip(X, 0.0, 1.0)
        # margin along the center line must survive the noise
        u = (centers[1] - centers[0]) / np.linalg.norm(centers[1] - centers[0])
        proj = (X - centers.mean(axis=0)) @ u
        if proj[labels == 0].max() < -0.05 and proj[labels == 1].min() > 0.05:
            break
    else:
        raise RuntimeError("could not generate a separable instance")
    data = LabeledDataset(X, labels, np.arange(n, dtype=np.int64), 2)

    spec = ModelSpec("logistic", (d, 2))
    theta_o = train_to_residual(spec, data, np.arange(n), tol=tol, seed=seed)
    forget_row = int(rng.integers(0, n))
    keep = np.setdiff1d(np.arange(n), [forget_row])
    theta_u = train_to_residual(spec, data, keep, tol=tol, seed=seed)

    atk = AttackConfig(kind="pgd", steps=50, step_fraction=0.1,
                       eps_init=0.01, max_doublings=30, seed=seed)
    adv = build_adversarial_set(theta_o, atk, data, np.array([forget_row])).records[0]

    inst = ConvexInstance(data, forget_row, adv, theta_o, theta_u,
                          beta=0.0, lipschitz=lipschitz_input(theta_o),
                          delta=adv.delta)
    inst.beta = smoothness_beta(inst.dprime())
    return inst
