"""Numerical solver for the local dual-plan problem.

Single-shooting formulation: the decision vector holds the shared first
input, the free nominal inputs, the free backup inputs, and the separation
slacks; the last backup input is eliminated so the backup plan ends at rest
by construction, which also fixes the terminal equilibrium to the simulated
terminal position.

The remaining constraints are inequalities, handled by an augmented
Lagrangian (multiplier-shifted quadratic penalty) whose smooth subproblems
— box-bounded only in the slacks — are solved with L-BFGS-B. Gradients are
analytic, via one adjoint sweep per input chain.

All inequality limits except the cost-bound and soft-separation constraints
are tightened by a small margin, so a subproblem solved to the penalty
target is feasible for the original limits with room to spare; the
one-step-shifted plan then stays feasible up to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .dynamics import AgentParams, step_vec
from .safeset import gamma_radius, gamma_radius_slope
from .ocp import (
    ContingencyPlan,
    FhocpSolution,
    FhocpSpec,
    NominalPlan,
    braking_plan,
    candidate_solution,
    constraint_breakdown,
    constraint_residual,
    contingency_cost,
    minimal_slacks,
    nominal_objective,
    shift_candidate,
    simulate_contingency,
)

# Speeds below this are treated as zero when normalizing velocity directions.
_SPEED_EPS = 1e-12

# Ridge added to the objective Hessian before factorizing the preconditioner;
# covers directions (free backup inputs in tracking mode) the objective
# leaves flat.
_PRECOND_RIDGE = 0.1

# Cache of Cholesky factors keyed by problem structure; the objective is
# quadratic in the decision vector, so its Hessian is constant per structure.
_PRECOND_CACHE: dict = {}


@dataclass
class SolverOptions:
    """Tolerances and loop limits of the augmented-Lagrangian solver."""

    feas_tol: float = 1e-5        # acceptable residual of a returned solution
    opt_tol: float = 1e-5         # projected-gradient norm target (inner loop)
    margin: float = 1e-5          # limit tightening (hard inequalities only)
    pen_target: float = 5e-6      # distance-unit violation target (margin/2)
    lyap_target: float = 1e-7     # violation target of the cost-bound constraint
    max_inner_total: int = 400    # inner iterations, summed over outer loop
    max_outer: int = 15
    mu0: float = 10.0             # initial penalty weight
    mu_growth: float = 10.0
    mu_max: float = 1e7
    lbfgs_memory: int = 20
    objective: str = "nominal"    # "nominal" or "contingency"

    def __post_init__(self):
        if self.objective not in ("nominal", "contingency"):
            raise ValueError("objective must be 'nominal' or 'contingency'")


@dataclass
class SolveReport:
    converged: bool
    outer_iters: int
    inner_iters: int
    penalty_violation: float
    projected_grad_norm: float
    objective_value: float
    message: str = ""


class _Problem:
    """Flattened, array-based view of one FhocpSpec for the hot loop."""

    def __init__(self, spec: FhocpSpec, opts: SolverOptions):
        p = spec.params
        self.spec = spec
        self.opts = opts
        self.Ts = p.Ts
        self.params = p
        self.N_n = spec.horizons.N_n
        self.N_c = spec.horizons.N_c
        if self.N_c < 2:
            raise ValueError("backup horizon must be at least 2")
        self.p0 = spec.x0.p.copy()
        self.v0 = spec.x0.v.copy()
        self.n_nb = len(spec.neighbor_sets)
        self.nz_u = 2 + 2 * (self.N_n - 1) + 2 * (self.N_c - 2)
        # Keep only the (neighbor, stage) separation pairs that any feasible
        # plan could make binding: stage k lies within Ts*k*v_max of the
        # start, so a further neighbor cannot violate that stage's term.
        nb_c = np.array([b.c for b in spec.neighbor_sets]).reshape(-1, 2)
        nb_R = np.array([b.R for b in spec.neighbor_sets])
        d_nb = np.linalg.norm(nb_c - self.p0, axis=1)
        ks = np.arange(self.N_n)
        reach = (p.Ts * ks * p.v_max + gamma_radius(p.v_max, p) + 0.05)
        pair_mask = d_nb[:, None] <= reach[None, :] + nb_R[:, None]
        self.pair_nb, self.pair_k = np.nonzero(pair_mask)
        self.ns = self.pair_nb.size
        self.nz = self.nz_u + self.ns
        self.bounds = [(None, None)] * self.nz_u + [(0.0, None)] * self.ns

        m = opts.margin
        w = spec.weights
        self.w = w
        self.p_ref = spec.x_ref.p.copy()
        self.offset_const = float(np.dot(w.P_s[2:], spec.x_ref.v ** 2))

        self.vlim2 = (p.v_max - m) ** 2
        self.alim = p.a_max
        self.alim2 = (p.a_max - m) ** 2

        # The backup plan stays within Ts*N_c*v_max of the start, so
        # obstacles and walls beyond that reach can never bind.
        reach_c = p.Ts * self.N_c * p.v_max + 0.05
        near_obs = [o for o in spec.obstacles
                    if np.linalg.norm(np.asarray(o.center, float) - self.p0)
                    <= o.radius + p.r + m + reach_c]
        self.obs_c = np.array([o.center for o in near_obs]).reshape(-1, 2)
        self.obs_lim2 = np.array([(o.radius + p.r + m) ** 2 for o in near_obs])
        self.ws = spec.workspace
        # Wall rows as g = sgn * p[axis] + c0 <= 0; keep reachable walls only.
        self.ws_rows: list = []
        if self.ws is not None:
            xmin, xmax, ymin, ymax = self.ws
            r_m = p.r + m
            for axis, sgn, c0, gap in (
                    (0, -1.0, xmin + r_m, self.p0[0] - (xmin + r_m)),
                    (0, 1.0, -(xmax - r_m), (xmax - r_m) - self.p0[0]),
                    (1, -1.0, ymin + r_m, self.p0[1] - (ymin + r_m)),
                    (1, 1.0, -(ymax - r_m), (ymax - r_m) - self.p0[1])):
                if gap <= reach_c:
                    self.ws_rows.append((axis, sgn, c0))

        self.set_c = spec.active_set.c.copy()
        self.term_lim2 = max(spec.active_set.R - m, 0.0) ** 2
        self.cont_lim2 = max(spec.active_set.R - p.r - m, 0.0) ** 2

        self.nb_c = nb_c
        self.nb_R = nb_R

        self.tail_on = spec.enforce_tail
        self.lyap_on = spec.enforce_lyap and math.isfinite(spec.J_hat)
        self.J_hat = spec.J_hat

        self.n_obs = self.obs_c.shape[0]
        self.n_ws = len(self.ws_rows)
        Nc = self.N_c
        self.n_tail = Nc * (Nc + 1) // 2 if self.tail_on else 0
        self.ng = (self.nz_u // 2 + self.ns + self.N_n + (Nc - 1) + 1
                   + self.n_obs * (Nc + 1) + self.n_ws * (Nc + 1)
                   + 1 + (Nc + 1) + self.n_tail + (1 if self.lyap_on else 0))
        # (k, l) index pairs, l > k, of the suffix-containment constraints.
        if self.tail_on:
            kk, ll = np.meshgrid(np.arange(Nc), np.arange(Nc + 1), indexing="ij")
            mask = ll > kk
            self.tail_k = kk[mask]
            self.tail_l = ll[mask]
        self._build_violation_scales()
        self.chol = self._preconditioner()
        # State-input sensitivities of one chain: p_k and v_k are linear in
        # the inputs, with dp_k/du_j = Ts^2 (k - j - 1/2) and dv_k/du_j = Ts
        # for j < k (zero otherwise).
        self.Sp_n, self.Sv_n = _chain_sensitivities(self.N_n, p.Ts)
        self.Sp_c, self.Sv_c = _chain_sensitivities(Nc, p.Ts)

    def _preconditioner(self) -> np.ndarray:
        """Cholesky factor of the (constant) objective Hessian in the input
        block, plus a ridge. Slack entries are linear in the objective and
        stay untransformed so their bound constraints remain boxes."""
        w = self.w
        key = (self.N_n, self.N_c, self.Ts, self.opts.objective,
               w.Q_p.tobytes(), w.Q_v.tobytes(), w.R_u.tobytes(),
               w.P_s.tobytes(), w.Q_s.tobytes(), w.R_s.tobytes(), w.gamma)
        hit = _PRECOND_CACHE.get(key)
        if hit is not None:
            return hit
        lam0 = np.zeros(self.ng)
        nzu = self.nz_u

        def grad_u(zu):
            z = np.zeros(self.nz)
            z[:nzu] = zu
            _, _, _, grad = self.evaluate(z, lam0, 0.0, need_grad=True)
            return grad[:nzu]

        g0 = grad_u(np.zeros(nzu))
        H = np.empty((nzu, nzu))
        eye = np.eye(nzu)
        for i in range(nzu):
            H[:, i] = grad_u(eye[i]) - g0
        H = 0.5 * (H + H.T) + _PRECOND_RIDGE * np.eye(nzu)
        chol = np.linalg.cholesky(H)
        _PRECOND_CACHE[key] = chol
        return chol

    def _build_violation_scales(self):
        """Conversion factors from raw constraint values to distance-unit
        bound excess: for g = d^2 - lim^2 the excess d - lim is at most
        g / (2 lim); for g = lim^2 - d^2 it is at most g / lim; linear
        constraints convert one-to-one. The cost-bound constraint keeps
        cost units and gets its own tolerance."""
        inv = np.empty(self.ng)
        thr = np.full(self.ng, self.opts.pen_target)
        Nc = self.N_c
        i = 0
        nu = self.nz_u // 2
        inv[i:i + nu] = 1.0 / (2.0 * math.sqrt(self.alim2)); i += nu
        if self.ns:
            # soft constraint: required distance ~ generator radius + R_j
            lim = self.params.r + self.nb_R.min(initial=1.0)
            inv[i:i + self.ns] = 1.0 / max(2.0 * lim, 1.0); i += self.ns
        inv[i:i + self.N_n + Nc - 1] = 1.0 / (2.0 * math.sqrt(self.vlim2))
        i += self.N_n + Nc - 1
        inv[i] = 1.0 / (2.0 * math.sqrt(self.alim2)); i += 1
        if self.n_obs:
            lims = np.sqrt(np.maximum(self.obs_lim2, 1e-4))
            inv[i:i + self.n_obs * (Nc + 1)] = \
                np.repeat(1.0 / lims, Nc + 1); i += self.n_obs * (Nc + 1)
        if self.n_ws:
            inv[i:i + self.n_ws * (Nc + 1)] = 1.0; i += self.n_ws * (Nc + 1)
        inv[i] = 1.0 / (2.0 * math.sqrt(max(self.term_lim2, 1e-4))); i += 1
        inv[i:i + Nc + 1] = 1.0 / (2.0 * math.sqrt(max(self.cont_lim2, 1e-4)))
        i += Nc + 1
        if self.tail_on:
            # smallest suffix radius: the rest value of the generator
            a0 = gamma_radius(0.0, self.params) - self.params.r - self.opts.margin
            inv[i:i + self.n_tail] = 1.0 / (2.0 * max(a0, 1e-2)); i += self.n_tail
        if self.lyap_on:
            inv[i] = 1.0
            thr[i] = self.opts.lyap_target
            i += 1
        self.viol_scale = inv
        self.viol_tol = thr

    def scaled_violation(self, g: np.ndarray) -> float:
        """Largest constraint violation relative to its own tolerance."""
        return float(np.max(np.maximum(0.0, g) * self.viol_scale / self.viol_tol,
                            initial=0.0))

    # -- decision vector layout ------------------------------------------

    def z_from_inputs(self, U_n: np.ndarray, U_c: np.ndarray) -> np.ndarray:
        """Assemble a decision vector; slacks are set to their minimal values."""
        z = np.empty(self.nz)
        z[0:2] = U_c[0]
        z[2:2 + 2 * (self.N_n - 1)] = U_n[1:].ravel()
        z[2 + 2 * (self.N_n - 1):self.nz_u] = U_c[1:self.N_c - 1].ravel()
        if self.ns:
            P_n, V_n = self._roll(U_n)
            _, _, slack = self._soft_terms(P_n, V_n)
            z[self.nz_u:] = slack
        return z

    def inputs_from_z(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u0 = z[0:2]
        k = 2 + 2 * (self.N_n - 1)
        U_n = np.vstack([u0, z[2:k].reshape(self.N_n - 1, 2)])
        U_free = z[k:self.nz_u].reshape(self.N_c - 2, 2)
        u_last = -self.v0 / self.Ts - u0 - U_free.sum(axis=0)
        U_c = np.vstack([u0, U_free, u_last])
        return U_n, U_c

    def project(self, z: np.ndarray) -> np.ndarray:
        """Clip free inputs to the acceleration ball and slacks to >= 0.

        Used only to sanitize start vectors; inside the loop the input
        bounds live in the augmented Lagrangian.
        """
        z = z.copy()
        rows = z[:self.nz_u].reshape(-1, 2)
        norms = np.linalg.norm(rows, axis=1)
        scale = np.minimum(1.0, self.alim / np.maximum(norms, _SPEED_EPS))
        z[:self.nz_u] = (rows * scale[:, None]).ravel()
        z[self.nz_u:] = np.maximum(z[self.nz_u:], 0.0)
        return z

    # -- forward model ----------------------------------------------------

    def _roll(self, U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Ts = self.Ts
        cU = np.cumsum(U, axis=0)
        N = U.shape[0]
        V = np.empty((N + 1, 2))
        V[0] = self.v0
        V[1:] = self.v0 + Ts * cU
        P = np.empty((N + 1, 2))
        P[0] = self.p0
        P[1:] = self.p0 + Ts * np.cumsum(V[:-1], axis=0) + 0.5 * Ts * Ts * cU
        return P, V

    def _soft_terms(self, P_n, V_n):
        """Per-pair required separations, center offsets, and minimal slacks."""
        s_pair = np.linalg.norm(V_n[self.pair_k], axis=1)
        R_stage = gamma_radius(s_pair, self.params)
        d_req = R_stage + self.nb_R[self.pair_nb]               # (ns,)
        delta = P_n[self.pair_k] - self.nb_c[self.pair_nb]      # (ns, 2)
        dist2 = np.sum(delta * delta, axis=1)
        slack = np.maximum(0.0, d_req * d_req - dist2)
        return d_req, delta, slack

    # -- value / gradient -------------------------------------------------

    def evaluate(self, z: np.ndarray, lam: np.ndarray, mu: float,
                 need_grad: bool):
        """Augmented-Lagrangian value and, optionally, its gradient in z.

        Returns (L, f, g, grad_or_None).
        """
        opts = self.opts
        w = self.w
        Ts = self.Ts
        N_n, N_c = self.N_n, self.N_c
        U_n, U_c = self.inputs_from_z(z)
        slack = z[self.nz_u:]
        P_n, V_n = self._roll(U_n)
        P_c, V_c = self._roll(U_c)

        s_n = np.linalg.norm(V_n, axis=1)
        s_c = np.linalg.norm(V_c, axis=1)
        p_bar = P_c[N_c]

        # -------- objective
        dP = P_n - self.p_ref
        off = float(np.dot(w.P_s[:2], (p_bar - self.p_ref) ** 2)) + self.offset_const
        dPc = P_c[:N_c] - p_bar
        J_c = (float(np.sum((dPc * dPc) @ w.Q_s[:2]))
               + float(np.sum((V_c[:N_c] * V_c[:N_c]) @ w.Q_s[2:]))
               + float(np.sum((U_c * U_c) @ w.R_s)) + off)

        slack_pen = w.rho_nom * float(np.sum(slack))
        if opts.objective == "nominal":
            f = (float(np.sum((dP[:N_n] * dP[:N_n]) @ w.Q_p))
                 + float(np.dot(w.Q_p, dP[N_n] * dP[N_n]))
                 + float(np.sum((V_n[:N_n] * V_n[:N_n]) @ w.Q_v))
                 + float(np.sum((U_n * U_n) @ w.R_u))
                 + w.gamma * off + slack_pen)
        else:
            f = J_c + slack_pen

        # -------- constraints (margined, mostly squared units)
        g = np.empty(self.ng)
        i = 0
        z_rows = z[:self.nz_u].reshape(-1, 2)
        nu = z_rows.shape[0]
        g[i:i + nu] = np.sum(z_rows * z_rows, axis=1) - self.alim2; i += nu
        if self.ns:
            d_req, delta, _ = self._soft_terms(P_n, V_n)
            dist2 = np.sum(delta * delta, axis=1)
            g[i:i + self.ns] = d_req * d_req - dist2 - slack
            i += self.ns
        g[i:i + N_n] = s_n[1:] ** 2 - self.vlim2; i += N_n
        g[i:i + N_c - 1] = s_c[1:N_c] ** 2 - self.vlim2; i += N_c - 1
        g[i] = float(np.dot(U_c[-1], U_c[-1])) - self.alim2; i += 1
        if self.n_obs:
            do = P_c[None, :, :] - self.obs_c[:, None, :]
            g[i:i + self.n_obs * (N_c + 1)] = \
                (self.obs_lim2[:, None] - np.sum(do * do, axis=2)).ravel()
            i += self.n_obs * (N_c + 1)
        for axis, sgn, c0 in self.ws_rows:
            g[i:i + N_c + 1] = sgn * P_c[:, axis] + c0; i += N_c + 1
        d_term = p_bar - self.set_c
        g[i] = float(np.dot(d_term, d_term)) - self.term_lim2; i += 1
        d_act = P_c - self.set_c
        g[i:i + N_c + 1] = np.sum(d_act * d_act, axis=1) - self.cont_lim2
        i += N_c + 1
        if self.tail_on:
            a_tail = gamma_radius(s_c[:N_c], self.params) - self.params.r - opts.margin
            D = P_c[self.tail_l] - P_c[self.tail_k]
            g[i:i + self.n_tail] = np.sum(D * D, axis=1) - a_tail[self.tail_k] ** 2
            i += self.n_tail
        if self.lyap_on:
            g[i] = J_c - self.J_hat; i += 1

        if mu > 0.0:
            wgt = np.maximum(0.0, lam + mu * g)
            L = f + float(np.sum(wgt * wgt) - np.sum(lam * lam)) / (2.0 * mu)
        else:
            wgt = np.zeros(self.ng)
            L = f
        if not need_grad:
            return L, f, g, None

        # -------- gradient accumulation (objective + weighted constraints)
        Gp_n = np.zeros((N_n + 1, 2))
        Gv_n = np.zeros((N_n + 1, 2))
        Gu_n = np.zeros((N_n, 2))
        Gp_c = np.zeros((N_c + 1, 2))
        Gv_c = np.zeros((N_c + 1, 2))
        Gu_c = np.zeros((N_c, 2))
        grad = np.zeros(self.nz)
        grad[self.nz_u:] = w.rho_nom

        # weight multiplying the gradient of J_c (objective and/or cost bound)
        wJc = 0.0
        if opts.objective == "nominal":
            Gp_n[:N_n] += 2.0 * dP[:N_n] * w.Q_p
            Gp_n[N_n] += 2.0 * dP[N_n] * w.Q_p
            Gv_n[:N_n] += 2.0 * V_n[:N_n] * w.Q_v
            Gu_n += 2.0 * U_n * w.R_u
            Gp_c[N_c] += 2.0 * w.gamma * w.P_s[:2] * (p_bar - self.p_ref)
        else:
            wJc += 1.0

        i = 0
        wu = wgt[i:i + nu]; i += nu
        grad[:self.nz_u] += (2.0 * wu[:, None] * z_rows).ravel()
        if self.ns:
            ws_ = wgt[i:i + self.ns]; i += self.ns
            grad[self.nz_u:] -= ws_
            if np.any(ws_ > 0.0):
                np.add.at(Gp_n, self.pair_k, (-2.0 * ws_)[:, None] * delta)
                slope = gamma_radius_slope(s_n[:N_n], self.params)
                vdir = np.where(s_n[:N_n, None] > _SPEED_EPS,
                                V_n[:N_n] / np.maximum(s_n[:N_n, None], _SPEED_EPS),
                                0.0)
                cg = np.bincount(self.pair_k, weights=ws_ * d_req,
                                 minlength=N_n)
                Gv_n[:N_n] += (2.0 * cg * slope)[:, None] * vdir
        wv = wgt[i:i + N_n]; i += N_n
        Gv_n[1:] += 2.0 * wv[:, None] * V_n[1:]
        wv = wgt[i:i + N_c - 1]; i += N_c - 1
        Gv_c[1:N_c] += 2.0 * wv[:, None] * V_c[1:N_c]
        Gu_c[N_c - 1] += 2.0 * wgt[i] * U_c[-1]; i += 1
        if self.n_obs:
            wo = wgt[i:i + self.n_obs * (N_c + 1)].reshape(self.n_obs, N_c + 1)
            i += self.n_obs * (N_c + 1)
            Gp_c += np.einsum("jk,jkd->kd", -2.0 * wo, do)
        for axis, sgn, _ in self.ws_rows:
            Gp_c[:, axis] += sgn * wgt[i:i + N_c + 1]; i += N_c + 1
        Gp_c[N_c] += 2.0 * wgt[i] * d_term; i += 1
        wc = wgt[i:i + N_c + 1]; i += N_c + 1
        Gp_c += 2.0 * wc[:, None] * d_act
        if self.tail_on:
            wt = wgt[i:i + self.n_tail]; i += self.n_tail
            if np.any(wt > 0.0):
                term = 2.0 * wt[:, None] * D
                np.add.at(Gp_c, self.tail_l, term)
                np.add.at(Gp_c, self.tail_k, -term)
                wk = np.bincount(self.tail_k, weights=wt, minlength=N_c)
                slope_c = gamma_radius_slope(s_c[:N_c], self.params)
                vdir_c = np.where(s_c[:N_c, None] > _SPEED_EPS,
                                  V_c[:N_c] / np.maximum(s_c[:N_c, None], _SPEED_EPS),
                                  0.0)
                Gv_c[:N_c] += (-2.0 * wk * a_tail * slope_c)[:, None] * vdir_c
        if self.lyap_on:
            wJc += wgt[i]; i += 1

        if wJc != 0.0:
            Gp_c[:N_c] += wJc * 2.0 * dPc * w.Q_s[:2]
            Gv_c[:N_c] += wJc * 2.0 * V_c[:N_c] * w.Q_s[2:]
            Gu_c += wJc * 2.0 * U_c * w.R_s
            Gp_c[N_c] += wJc * (-2.0 * np.sum(dPc * w.Q_s[:2], axis=0)
                                + 2.0 * w.P_s[:2] * (p_bar - self.p_ref))

        dU_n = _input_grads(Gp_n, Gv_n, Gu_n, Ts)
        dU_c = _input_grads(Gp_c, Gv_c, Gu_c, Ts)
        grad[0:2] += dU_n[0] + dU_c[0] - dU_c[-1]
        k = 2 + 2 * (N_n - 1)
        grad[2:k] += dU_n[1:].ravel()
        grad[k:self.nz_u] += (dU_c[1:N_c - 1] - dU_c[-1]).ravel()
        return L, f, g, grad

    def constraint_jacobian(self, z: np.ndarray) -> np.ndarray:
        """Exact Jacobian of the margined constraint vector with respect to z.

        Row order matches the `g` returned by `evaluate`. Built from the
        per-state constraint gradients and the chain sensitivities.
        """
        w = self.w
        N_n, N_c = self.N_n, self.N_c
        U_n, U_c = self.inputs_from_z(z)
        P_n, V_n = self._roll(U_n)
        P_c, V_c = self._roll(U_c)
        s_n = np.linalg.norm(V_n, axis=1)
        s_c = np.linalg.norm(V_c, axis=1)
        p_bar = P_c[N_c]

        dU_c = np.zeros((self.ng, N_c, 2))
        dU_n = np.zeros((self.ng, N_n, 2))
        J = np.zeros((self.ng, self.nz))

        def block(S_p, S_v, k_idx, gp, gv=None):
            b = S_p[k_idx][:, :, None] * gp[:, None, :]
            if gv is not None:
                b += S_v[k_idx][:, :, None] * gv[:, None, :]
            return b

        i = 0
        nu = self.nz_u // 2
        rows = np.arange(nu)
        z_rows = z[:self.nz_u].reshape(-1, 2)
        J[rows + i, 2 * rows] = 2.0 * z_rows[:, 0]
        J[rows + i, 2 * rows + 1] = 2.0 * z_rows[:, 1]
        i += nu
        if self.ns:
            d_req, delta, _ = self._soft_terms(P_n, V_n)
            slope = gamma_radius_slope(s_n[:N_n], self.params)
            vdir = np.where(s_n[:N_n, None] > _SPEED_EPS,
                            V_n[:N_n] / np.maximum(s_n[:N_n, None], _SPEED_EPS),
                            0.0)
            gv = 2.0 * d_req[:, None] * (slope[:, None] * vdir)[self.pair_k]
            dU_n[i:i + self.ns] = block(self.Sp_n, self.Sv_n, self.pair_k,
                                        -2.0 * delta, gv)
            J[i + np.arange(self.ns), self.nz_u + np.arange(self.ns)] = -1.0
            i += self.ns
        dU_n[i:i + N_n] = block(self.Sp_n, self.Sv_n, 1 + np.arange(N_n),
                                np.zeros((N_n, 2)), 2.0 * V_n[1:])
        i += N_n
        dU_c[i:i + N_c - 1] = block(self.Sp_c, self.Sv_c,
                                    1 + np.arange(N_c - 1),
                                    np.zeros((N_c - 1, 2)), 2.0 * V_c[1:N_c])
        i += N_c - 1
        dU_c[i, N_c - 1] = 2.0 * U_c[-1]
        i += 1
        if self.n_obs:
            do = P_c[None, :, :] - self.obs_c[:, None, :]
            m = self.n_obs * (N_c + 1)
            k_idx = np.tile(np.arange(N_c + 1), self.n_obs)
            dU_c[i:i + m] = block(self.Sp_c, self.Sv_c, k_idx,
                                  (-2.0 * do).reshape(m, 2))
            i += m
        if self.n_ws:
            ks = np.arange(N_c + 1)
            for axis, sgn, _ in self.ws_rows:
                gp = np.zeros((N_c + 1, 2))
                gp[:, axis] = sgn
                dU_c[i:i + N_c + 1] = block(self.Sp_c, self.Sv_c, ks, gp)
                i += N_c + 1
        dU_c[i] = self.Sp_c[N_c][:, None] * (2.0 * (p_bar - self.set_c))
        i += 1
        dU_c[i:i + N_c + 1] = block(self.Sp_c, self.Sv_c,
                                    np.arange(N_c + 1),
                                    2.0 * (P_c - self.set_c))
        i += N_c + 1
        if self.tail_on:
            a_tail = gamma_radius(s_c[:N_c], self.params) - self.params.r \
                - self.opts.margin
            D = P_c[self.tail_l] - P_c[self.tail_k]
            slope_c = gamma_radius_slope(s_c[:N_c], self.params)
            vdir_c = np.where(s_c[:N_c, None] > _SPEED_EPS,
                              V_c[:N_c] / np.maximum(s_c[:N_c, None], _SPEED_EPS),
                              0.0)
            gv = ((-2.0 * a_tail * slope_c)[:, None] * vdir_c)[self.tail_k]
            dU_c[i:i + self.n_tail] = (
                block(self.Sp_c, self.Sv_c, self.tail_l, 2.0 * D)
                + block(self.Sp_c, self.Sv_c, self.tail_k, -2.0 * D, gv))
            i += self.n_tail
        if self.lyap_on:
            dPc = P_c[:N_c] - p_bar
            gp_full = np.empty((N_c + 1, 2))
            gp_full[:N_c] = 2.0 * dPc * w.Q_s[:2]
            gp_full[N_c] = (-2.0 * np.sum(dPc * w.Q_s[:2], axis=0)
                            + 2.0 * w.P_s[:2] * (p_bar - self.p_ref))
            gv_full = np.zeros((N_c + 1, 2))
            gv_full[:N_c] = 2.0 * V_c[:N_c] * w.Q_s[2:]
            dU_c[i] = (self.Sp_c.T @ gp_full + self.Sv_c.T @ gv_full
                       + 2.0 * U_c * w.R_s)
            i += 1

        k0 = 2 + 2 * (N_n - 1)
        J[:, 0:2] += dU_n[:, 0] + dU_c[:, 0] - dU_c[:, -1]
        J[:, 2:k0] += dU_n[:, 1:].reshape(self.ng, -1)
        J[:, k0:self.nz_u] += (dU_c[:, 1:N_c - 1] - dU_c[:, -1:, :]
                               ).reshape(self.ng, -1)
        return J

    def projected_grad_norm(self, z: np.ndarray, grad: np.ndarray) -> float:
        """Gradient norm with inactive directions at the slack bound removed."""
        pg = grad.copy()
        s = z[self.nz_u:]
        gs = pg[self.nz_u:]
        gs[(s <= 0.0) & (gs > 0.0)] = 0.0
        return float(np.linalg.norm(pg, np.inf))

    def polish(self, z: np.ndarray, max_rounds: int = 4
               ) -> Tuple[np.ndarray, bool]:
        """Newton feasibility restoration for near-feasible iterates.

        Line-search based solvers can stall with a handful of rows a hair
        outside their tolerance, most often the cost-bound row, whose
        tolerance is orders of magnitude tighter than the geometric ones.
        Each round computes the minimum-norm step that pushes the violated
        rows slightly inside while holding every nearby active row fixed to
        first order; because all constraints are quadratic, one or two
        rounds remove violations of this size to machine precision.
        """
        z = z.copy()
        lam0 = np.zeros(self.ng)
        free = np.ones(self.nz, dtype=bool)
        free[self.nz_u:] = z[self.nz_u:] > 1e-12
        for _ in range(max_rounds):
            _, _, g, _ = self.evaluate(z, lam0, 0.0, need_grad=False)
            sv = g * self.viol_scale / self.viol_tol
            bad = np.flatnonzero(sv > 1.0)
            if bad.size == 0:
                return z, True
            act_band = 1e-4 / self.viol_scale
            act = np.flatnonzero((g >= -act_band) & (sv <= 1.0))
            J = self.constraint_jacobian(z)
            rows = np.concatenate([bad, act])
            A = J[np.ix_(rows, np.flatnonzero(free))]
            rhs = np.zeros(rows.size)
            back = 0.1 * self.viol_tol[bad] / self.viol_scale[bad]
            rhs[:bad.size] = -g[bad] - back
            dz, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            if not np.all(np.isfinite(dz)):
                return z, False
            z[free] = z[free] + dz
            z[self.nz_u:] = np.maximum(z[self.nz_u:], 0.0)
        _, _, g, _ = self.evaluate(z, lam0, 0.0, need_grad=False)
        return z, self.scaled_violation(g) <= 1.0

    def to_solution(self, z: np.ndarray) -> FhocpSolution:
        spec = self.spec
        U_n, U_c = self.inputs_from_z(z)
        con = simulate_contingency(spec.x0, U_c, self.params)
        nom_states = np.empty((self.N_n + 1, 4))
        nom_states[0] = spec.x0.as_vec()
        for k in range(self.N_n):
            nom_states[k + 1] = step_vec(nom_states[k], U_n[k], self.Ts)
        slacks = minimal_slacks(nom_states, spec.neighbor_sets, self.params)
        nom = NominalPlan(states=nom_states, inputs=U_n.copy(), slacks=slacks)
        J_c = contingency_cost(con, spec.x_ref, spec.weights)
        J = nominal_objective(nom, spec.x_ref, con.eq, spec.weights)
        sol = FhocpSolution(nominal=nom, contingency=con, J=J, J_c=J_c, residual=0.0)
        sol.residual = constraint_residual(sol, spec)
        return sol


def _chain_sensitivities(N: int, Ts: float) -> Tuple[np.ndarray, np.ndarray]:
    k = np.arange(N + 1)[:, None]
    j = np.arange(N)[None, :]
    mask = j < k
    Sp = np.where(mask, Ts * Ts * (k - j - 0.5), 0.0)
    Sv = np.where(mask, Ts, 0.0)
    return Sp, Sv


def _input_grads(Gp: np.ndarray, Gv: np.ndarray, Gu: np.ndarray,
                 Ts: float) -> np.ndarray:
    """Adjoint sweep of one double-integrator chain.

    Gp, Gv are direct gradients with respect to positions/velocities
    (stage 0..N), Gu with respect to inputs; returns the total gradient
    with respect to the inputs.
    """
    lam_p = np.flipud(np.cumsum(np.flipud(Gp), axis=0))
    tail_p = np.zeros_like(lam_p)
    if lam_p.shape[0] > 1:
        tail_p[:-1] = np.flipud(np.cumsum(np.flipud(lam_p[1:]), axis=0))
    lam_v = np.flipud(np.cumsum(np.flipud(Gv), axis=0)) + Ts * tail_p
    return Gu + 0.5 * Ts * Ts * lam_p[1:] + Ts * lam_v[1:]


def _inner_solve(prob: _Problem, z: np.ndarray, lam: np.ndarray, mu: float,
                 budget: int, opts: SolverOptions):
    """Minimize the smooth augmented Lagrangian with L-BFGS-B.

    The input block is preconditioned with the Cholesky factor of the
    objective Hessian (y = L^T z_u); slack coordinates pass through so
    their nonnegativity bounds stay box-shaped.
    """
    Lc = prob.chol
    nzu = prob.nz_u

    def to_z(yy):
        zz = yy.copy()
        zz[:nzu] = solve_triangular(Lc.T, yy[:nzu], lower=False)
        return zz

    def fun(yy):
        L, _, _, grad = prob.evaluate(to_z(yy), lam, mu, need_grad=True)
        gy = grad.copy()
        gy[:nzu] = solve_triangular(Lc, grad[:nzu], lower=True)
        return L, gy

    y0 = z.copy()
    y0[:nzu] = Lc.T @ z[:nzu]
    res = minimize(fun, y0, jac=True, method="L-BFGS-B", bounds=prob.bounds,
                   options={"maxiter": budget, "maxcor": opts.lbfgs_memory,
                            "ftol": 1e-16, "gtol": opts.opt_tol, "maxls": 60})
    y = np.asarray(res.x, dtype=float)
    z = to_z(y)
    _, pg = fun(y)
    _, _, g, _ = prob.evaluate(z, lam, mu, need_grad=True)
    gs = pg[nzu:]
    gs[(y[nzu:] <= 0.0) & (gs > 0.0)] = 0.0
    pg_norm = float(np.linalg.norm(pg, np.inf))
    return z, g, pg_norm, int(res.nit) + 1


def _slsqp_stage(prob: _Problem, z: np.ndarray, precond: bool,
                 maxiter: int) -> Tuple[np.ndarray, int, int]:
    """One SLSQP pass over the full problem; returns (z, status, nit).

    With `precond` the search runs in y = L^T z_u coordinates (slacks pass
    through so their bounds stay boxes); otherwise in the raw variables.
    """
    lam0 = np.zeros(prob.ng)
    Lc = prob.chol
    nzu = prob.nz_u

    if precond:
        def to_z(yy):
            zz = yy.copy()
            zz[:nzu] = solve_triangular(Lc.T, yy[:nzu], lower=False)
            return zz
        y0 = z.copy()
        y0[:nzu] = Lc.T @ z[:nzu]
    else:
        def to_z(yy):
            return yy
        y0 = z

    cache: dict = {}

    def _shared_eval(yy):
        key = yy.tobytes()
        if cache.get("key") != key:
            cache["key"] = key
            cache["val"] = prob.evaluate(to_z(yy), lam0, 0.0, need_grad=True)
        return cache["val"]

    def fobj(yy):
        _, f, _, grad = _shared_eval(yy)
        if not precond:
            return f, grad
        gy = grad.copy()
        gy[:nzu] = solve_triangular(Lc, grad[:nzu], lower=True)
        return f, gy

    def cons(yy):
        _, _, g, _ = _shared_eval(yy)
        return -g

    def cons_jac(yy):
        J = -prob.constraint_jacobian(to_z(yy))
        if precond:
            J[:, :nzu] = solve_triangular(Lc, J[:, :nzu].T, lower=True).T
        return J

    try:
        res = minimize(fobj, y0, jac=True, method="SLSQP", bounds=prob.bounds,
                       constraints=[{"type": "ineq", "fun": cons,
                                     "jac": cons_jac}],
                       options={"maxiter": maxiter, "ftol": 1e-12})
        return to_z(np.asarray(res.x, dtype=float)), int(res.status), \
            int(res.nit)
    except (ValueError, FloatingPointError):
        return z, -1, 1


def solve_fhocp(spec: FhocpSpec, options: Optional[SolverOptions] = None,
                warm_start: Optional[np.ndarray] = None,
                warm_multipliers: Optional[Tuple[np.ndarray, float]] = None
                ) -> Tuple[FhocpSolution, SolveReport]:
    """Solve one local problem; returns the reconstructed solution and report.

    `warm_start` is a decision vector from `warm_start_vector` (or a previous
    solve of a structurally identical problem); `warm_multipliers` carries
    (lambda, mu) from such a solve and is ignored on structure mismatch.
    """
    opts = options or SolverOptions()
    prob = _Problem(spec, opts)
    if warm_start is not None:
        z = prob.project(np.asarray(warm_start, dtype=float).copy())
    else:
        cand = braking_plan(spec.x0, spec.horizons.N_c, spec.params)
        z = prob.project(_vector_from_plans(prob, cand.inputs, None))

    # Stage 1: sequential quadratic programming on the full problem with
    # exact gradients/Jacobians; fast and precise on these smooth QCQPs.
    # The first attempt runs in preconditioned coordinates y = L^T z_u,
    # where the objective Hessian is near-identity, so SLSQP's identity
    # BFGS seed gives well-scaled steps; the rare instances where its QP
    # subproblem degenerates get a retry in the plain coordinates.
    lam0 = np.zeros(prob.ng)
    budget = opts.max_inner_total
    total_inner = 0

    for precond in (True, False):
        z_sqp, sqp_status, sqp_nit = _slsqp_stage(prob, z, precond,
                                                  min(300, budget))
        total_inner += sqp_nit
        budget -= sqp_nit
        if not np.all(np.isfinite(z_sqp)):
            continue
        _, f, g, _ = prob.evaluate(z_sqp, lam0, 0.0, need_grad=False)
        viol = prob.scaled_violation(g)
        # Status 8 is a line-search stall, which on these problems occurs at
        # points that are optimal to machine precision but uncertifiable by
        # the line search; accept it when the iterate is feasible. The caller
        # additionally guards against suboptimality via the fallback gate.
        if sqp_status in (0, 8) and viol > 1.0:
            z_pol, ok = prob.polish(z_sqp)
            if ok:
                z_sqp = z_pol
                _, f, g, _ = prob.evaluate(z_sqp, lam0, 0.0, need_grad=False)
                viol = prob.scaled_violation(g)
        if sqp_status in (0, 8) and viol <= 1.0:
            sol = prob.to_solution(z_sqp)
            report = SolveReport(converged=True, outer_iters=1,
                                 inner_iters=total_inner,
                                 penalty_violation=viol,
                                 projected_grad_norm=0.0, objective_value=f,
                                 message="" if sqp_status == 0
                                 else "line-search stall at feasible point")
            sol.diagnostics["report"] = report
            sol.diagnostics["z"] = z_sqp
            return sol, report
        if viol <= prob.scaled_violation(
                prob.evaluate(z, lam0, 0.0, need_grad=False)[2]):
            z = z_sqp
        if budget <= 0:
            break

    # Stage 2: augmented-Lagrangian loop from the best point so far.
    lam = np.zeros(prob.ng)
    mu = opts.mu0
    if warm_multipliers is not None and warm_multipliers[0].shape == (prob.ng,):
        lam = warm_multipliers[0].copy()
        mu = min(max(warm_multipliers[1], opts.mu0), opts.mu_max)
    outer = 0
    viol = math.inf
    pg_norm = math.inf
    f = math.inf
    prev_viol = math.inf
    for outer in range(1, opts.max_outer + 1):
        z, g, pg_norm, used = _inner_solve(prob, z, lam, mu, max(budget, 50),
                                           opts)
        total_inner += used
        budget -= used
        _, f, _, _ = prob.evaluate(z, lam, mu, need_grad=False)
        viol = prob.scaled_violation(g)
        if viol <= 1.0 and pg_norm <= opts.opt_tol:
            break
        if budget <= 0:
            break
        lam = np.maximum(0.0, lam + mu * g)
        if viol > 0.25 * prev_viol and mu < opts.mu_max:
            mu = min(mu * opts.mu_growth, opts.mu_max)
        prev_viol = viol
    if viol > 1.0 and pg_norm <= opts.opt_tol:
        z_pol, ok = prob.polish(z)
        if ok:
            z = z_pol
            _, f, g, _ = prob.evaluate(z, lam, mu, need_grad=False)
            viol = prob.scaled_violation(g)
    converged = viol <= 1.0 and pg_norm <= opts.opt_tol
    sol = prob.to_solution(z)
    report = SolveReport(converged=converged, outer_iters=outer,
                         inner_iters=total_inner, penalty_violation=viol,
                         projected_grad_norm=pg_norm, objective_value=f,
                         message="" if converged else "tolerances not met")
    sol.diagnostics["report"] = report
    sol.diagnostics["z"] = z
    sol.diagnostics["multipliers"] = (lam, mu)
    return sol, report


def _vector_from_plans(prob: _Problem, U_c: np.ndarray,
                       U_n: Optional[np.ndarray]) -> np.ndarray:
    if U_n is None:
        U_n = np.zeros((prob.N_n, 2))
        take = min(prob.N_n, U_c.shape[0])
        U_n[:take] = U_c[:take]
    U_n = U_n.copy()
    U_n[0] = U_c[0]
    return prob.z_from_inputs(U_n, U_c)


def warm_start_vector(spec: FhocpSpec, candidate: ContingencyPlan,
                      prev_nominal: Optional[NominalPlan] = None,
                      options: Optional[SolverOptions] = None) -> np.ndarray:
    """Decision vector seeded from a feasible backup candidate, optionally
    reusing the previous nominal inputs shifted by one step."""
    prob = _Problem(spec, options or SolverOptions())
    U_n = None
    if prev_nominal is not None:
        U_n = np.zeros((prob.N_n, 2))
        U_n[:prob.N_n - 1] = prev_nominal.inputs[1:]
    return _vector_from_plans(prob, candidate.inputs, U_n)


@dataclass
class StepSolveResult:
    solution: FhocpSolution
    candidate: FhocpSolution
    used_fallback: bool
    report: SolveReport


def solve_with_fallback(spec: FhocpSpec,
                        prev: Optional[FhocpSolution] = None,
                        options: Optional[SolverOptions] = None,
                        accept_residual: float = 1e-9,
                        lyap_accept_tol: float = 1e-7) -> StepSolveResult:
    """One planning step with the guaranteed fallback.

    The candidate is the one-step shift of the previous solution (pure
    braking at startup). The optimized solution is accepted only if its
    residual outside the cost-bound constraint is essentially zero, the
    cost bound is met to `lyap_accept_tol`, and it does not lose to the
    candidate on the chosen objective; otherwise the candidate is used.
    """
    opts = options or SolverOptions()
    if prev is None:
        cand_plan = braking_plan(spec.x0, spec.horizons.N_c, spec.params)
    else:
        cand_plan = shift_candidate(prev, spec.params)
    cand_sol = candidate_solution(cand_plan, spec)

    warm = warm_start_vector(spec, cand_plan,
                             prev.nominal if prev is not None else None, opts)
    warm_mult = prev.diagnostics.get("multipliers") if prev is not None else None
    sol, report = solve_fhocp(spec, opts, warm_start=warm,
                              warm_multipliers=warm_mult)

    breakdown = constraint_breakdown(sol, spec)
    lyap_excess = breakdown.pop("lyapunov")
    nonlyap = max(breakdown.values())
    obj_key = (lambda s: s.J) if opts.objective == "nominal" else (lambda s: s.J_c)
    acceptable = (report.converged
                  and nonlyap <= accept_residual
                  and lyap_excess <= lyap_accept_tol
                  and obj_key(sol) <= obj_key(cand_sol) + 1e-12)
    if acceptable:
        sol.diagnostics["candidate_residual"] = cand_sol.residual
        return StepSolveResult(solution=sol, candidate=cand_sol,
                               used_fallback=False, report=report)
    cand_sol.diagnostics["report"] = report
    cand_sol.diagnostics["candidate_residual"] = cand_sol.residual
    return StepSolveResult(solution=cand_sol, candidate=cand_sol,
                           used_fallback=True, report=report)
