//! Time-dependent evaluation of the order-K approximate solution: the
//! modified-transport coordinate y, its inversion, the weighted coefficient
//! sums f_[K], rho_[K], phi_[K], and the residual operators built on them.
//! All t/x/p derivatives are exact chain-rule compositions through y; finite
//! differences appear only in tests.

use crate::expansion::expr::{diff_q, diff_y, PhaseExpr, Tape};
use crate::expansion::CoefficientTable;
use crate::fields::interpolate;
use anyhow::{ensure, Context, Result};

/// Order-K approximate solution evaluated on top of a coefficient table.
/// Evaluation is defined for t >= 1 (log t >= 0); the residual statements
/// assume t >= T0 > 1.
pub struct ApproxSolution<'a> {
    table: &'a CoefficientTable,
    order: usize,
    /// roots laid out per (k,l): f, then dy f (3), then dq f (3)
    f_tape: Tape,
    /// p-expansion coefficients p_{k,l}, three components per (k,l), k >= 1
    p_tape: Tape,
    /// sup |grad phi_inf| over the grid, the data norm entering support
    /// envelopes
    f_norm: f64,
}

fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

impl<'a> ApproxSolution<'a> {
    pub fn new(table: &'a CoefficientTable, order: usize) -> Result<Self> {
        ensure!(
            order <= table.order(),
            "approximation order {order} exceeds table order {}",
            table.order()
        );
        let mut f_roots = Vec::new();
        for k in 0..=order {
            for l in 0..=k {
                let f = table.symbols().f(k, l);
                f_roots.push(f);
                for a in 0..3 {
                    f_roots.push(diff_y(f, a));
                }
                for a in 0..3 {
                    f_roots.push(diff_q(f, a));
                }
            }
        }
        let mut p_roots = Vec::new();
        for k in 1..=order.max(1).min(table.order()) {
            for l in 0..=k {
                p_roots.extend(table.entry(k, l).p_coeff);
            }
        }
        let f_norm = (0..3)
            .map(|a| table.entry(0, 0).grad_phi.comps[a].max_abs())
            .fold(0.0f64, f64::max);
        Ok(ApproxSolution {
            table,
            order,
            f_tape: Tape::compile(&f_roots),
            p_tape: Tape::compile(&p_roots),
            f_norm,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn table(&self) -> &CoefficientTable {
        self.table
    }

    /// sup |grad phi_inf| over the grid, the data norm F entering the
    /// support envelopes of the finite problem.
    pub fn data_norm(&self) -> f64 {
        self.f_norm
    }

    /// d^I phi_{k,l} interpolated at q; errors when q leaves the field box.
    fn phi_kl(&self, k: usize, l: usize, d: [usize; 3], q: [f64; 3]) -> Result<f64> {
        let field = self.table.entry(k, l).phi_derivative(d)?;
        interpolate(&field, q).with_context(|| format!("phi_{{{k},{l}}} derivative at {q:?}"))
    }

    /// grad phi_inf at p, straight from the (0,0) gradient fields.
    pub fn grad_phi_inf(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let g = &self.table.entry(0, 0).grad_phi;
        Ok([
            interpolate(&g.comps[0], p)?,
            interpolate(&g.comps[1], p)?,
            interpolate(&g.comps[2], p)?,
        ])
    }

    /// hess phi_inf at p, symmetrised from the interpolated derivative fields.
    pub fn hess_phi_inf(&self, p: [f64; 3]) -> Result<[[f64; 3]; 3]> {
        let mut h = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let mut d = [0usize; 3];
                d[i] += 1;
                d[j] += 1;
                let v = self.phi_kl(0, 0, d, p)?;
                h[i][j] = v;
                h[j][i] = v;
            }
        }
        Ok(h)
    }

    /// Third derivative tensor of phi_inf at p, fully symmetrised.
    pub fn third_phi_inf(&self, p: [f64; 3]) -> Result<[[[f64; 3]; 3]; 3]> {
        let mut tinf = [[[0.0; 3]; 3]; 3];
        for a in 0..3 {
            for b in a..3 {
                for c in b..3 {
                    let mut dd = [0usize; 3];
                    dd[a] += 1;
                    dd[b] += 1;
                    dd[c] += 1;
                    let v = self.phi_kl(0, 0, dd, p)?;
                    for perm in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                        tinf[perm[0]][perm[1]][perm[2]] = v;
                    }
                }
            }
        }
        Ok(tinf)
    }

    /// y(t, x, p) = x - t p + log t grad phi_inf(p).
    pub fn y_map(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<[f64; 3]> {
        ensure!(t >= 1.0, "y is defined for t >= 1");
        let g = self.grad_phi_inf(p)?;
        let lt = t.ln();
        Ok([
            x[0] - t * p[0] + lt * g[0],
            x[1] - t * p[1] + lt * g[1],
            x[2] - t * p[2] + lt * g[2],
        ])
    }

    /// Invert y(t, x, .) = y for p by Newton iteration on
    /// t p = x - y + log t grad phi_inf(p), seeded with the order-2
    /// p-expansion. Contracts once |hess phi_inf| log t / t < 1/2.
    pub fn invert_y(&self, t: f64, x: [f64; 3], y: [f64; 3]) -> Result<[f64; 3]> {
        ensure!(t > 1.0, "inversion needs t > 1");
        let lt = t.ln();
        let w = [x[0] / t, x[1] / t, x[2] / t];
        let mut p = w;
        // seed: p = w + sum_{k>=1} (log t)^l / t^k p_{k,l}(y, w)
        if !self.p_tape.is_empty() {
            let mut slots = Vec::new();
            let mut out = Vec::new();
            self.p_tape
                .eval(self.table.profile(), self.table, y, w, &mut slots, &mut out);
            let mut r = 0;
            'seed: for k in 1..=self.order.max(1).min(self.table.order()) {
                for l in 0..=k {
                    if k > 2 {
                        break 'seed;
                    }
                    let c = lt.powi(l as i32) / t.powi(k as i32);
                    for a in 0..3 {
                        p[a] += c * out[r + a];
                    }
                    r += 3;
                }
            }
        }
        for _ in 0..50 {
            let g = self.grad_phi_inf(p)?;
            let mut res = [0.0; 3];
            for a in 0..3 {
                res[a] = t * p[a] - x[a] + y[a] - lt * g[a];
            }
            let h = self.hess_phi_inf(p)?;
            // J = t I - log t hess
            let mut jm = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    jm[i][j] = if i == j { t } else { 0.0 } - lt * h[i][j];
                }
            }
            let dp = solve3(jm, res)?;
            let mut step = 0.0f64;
            for a in 0..3 {
                p[a] -= dp[a];
                step = step.max(dp[a].abs());
            }
            if step <= 1e-12 {
                return Ok(p);
            }
        }
        anyhow::bail!("invert_y: Newton failed to converge in 50 iterations at t = {t}")
    }

    /// All f_{k,l} and their first y/q derivatives at (y, q), in tape order.
    fn eval_f_layers(&self, y: [f64; 3], q: [f64; 3], out: &mut Vec<f64>) {
        let mut slots = Vec::new();
        self.f_tape
            .eval(self.table.profile(), self.table, y, q, &mut slots, out);
    }

    /// f_[K] together with its exact first x- and p-derivatives, one tape
    /// pass plus the hess phi_inf chain terms from the p-dependence of y.
    pub fn eval_f_jet(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<(f64, [f64; 3], [f64; 3])> {
        let y = self.y_map(t, x, p)?;
        let lt = t.ln();
        let hinf = self.hess_phi_inf(p)?;
        let mut out = Vec::new();
        self.eval_f_layers(y, p, &mut out);
        let (mut v, mut dx, mut dp) = (0.0, [0.0; 3], [0.0; 3]);
        for k in 0..=self.order {
            for l in 0..=k {
                let c = lt.powi(l as i32) / t.powi(k as i32);
                let b = 7 * (tri(k) + l);
                v += c * out[b];
                for a in 0..3 {
                    dx[a] += c * out[b + 1 + a];
                    let mut d = -t * out[b + 1 + a] + out[b + 4 + a];
                    for j in 0..3 {
                        d += lt * hinf[a][j] * out[b + 1 + j];
                    }
                    dp[a] += c * d;
                }
            }
        }
        Ok((v, dx, dp))
    }

    /// f_[K](t, x, p), truncating the sum at `kcap` (kcap = order for the
    /// full approximation; lower caps give the telescoped partial sums).
    pub fn eval_f_at_order(&self, kcap: usize, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        ensure!(kcap <= self.order, "cap {kcap} exceeds order {}", self.order);
        let y = self.y_map(t, x, p)?;
        let mut out = Vec::new();
        self.eval_f_layers(y, p, &mut out);
        let lt = t.ln();
        let mut acc = 0.0;
        for k in 0..=kcap {
            for l in 0..=k {
                acc += lt.powi(l as i32) / t.powi(k as i32) * out[7 * (tri(k) + l)];
            }
        }
        Ok(acc)
    }

    pub fn eval_fk(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        self.eval_f_at_order(self.order, t, x, p)
    }

    /// rho_[K](t, x) = (1/t^3) sum (log t)^l / t^k rho_{k,l}(x/t).
    pub fn eval_rhok(&self, t: f64, x: [f64; 3]) -> Result<f64> {
        ensure!(t >= 1.0, "evaluation needs t >= 1");
        let w = [x[0] / t, x[1] / t, x[2] / t];
        let lt = t.ln();
        let mut acc = 0.0;
        for k in 0..=self.order {
            for l in 0..=k {
                acc += lt.powi(l as i32) / t.powi(k as i32)
                    * interpolate(&self.table.entry(k, l).rho, w)?;
            }
        }
        Ok(acc / t.powi(3))
    }

    /// phi_[K](t, x) = (1/t) sum (log t)^l / t^k phi_{k,l}(x/t).
    pub fn eval_phik(&self, t: f64, x: [f64; 3]) -> Result<f64> {
        ensure!(t >= 1.0, "evaluation needs t >= 1");
        let w = [x[0] / t, x[1] / t, x[2] / t];
        let lt = t.ln();
        let mut acc = 0.0;
        for k in 0..=self.order {
            for l in 0..=k {
                acc += lt.powi(l as i32) / t.powi(k as i32)
                    * interpolate(&self.table.entry(k, l).phi, w)?;
            }
        }
        Ok(acc / t)
    }

    /// grad_x phi_[K](t, x) = (1/t^2) sum (log t)^l / t^k grad phi_{k,l}(x/t).
    pub fn eval_grad_phik(&self, t: f64, x: [f64; 3]) -> Result<[f64; 3]> {
        ensure!(t >= 1.0, "evaluation needs t >= 1");
        let w = [x[0] / t, x[1] / t, x[2] / t];
        let lt = t.ln();
        let mut acc = [0.0; 3];
        for k in 0..=self.order {
            for l in 0..=k {
                let c = lt.powi(l as i32) / t.powi(k as i32);
                let g = &self.table.entry(k, l).grad_phi;
                for a in 0..3 {
                    acc[a] += c * interpolate(&g.comps[a], w)?;
                }
            }
        }
        let t2 = t * t;
        Ok([acc[0] / t2, acc[1] / t2, acc[2] / t2])
    }

    /// Second x-derivatives of phi_[K] at (t, x).
    fn hess_phik(&self, t: f64, x: [f64; 3]) -> Result<[[f64; 3]; 3]> {
        let w = [x[0] / t, x[1] / t, x[2] / t];
        let lt = t.ln();
        let mut acc = [[0.0; 3]; 3];
        for k in 0..=self.order {
            for l in 0..=k {
                let c = lt.powi(l as i32) / t.powi(k as i32);
                for i in 0..3 {
                    for j in i..3 {
                        let mut d = [0usize; 3];
                        d[i] += 1;
                        d[j] += 1;
                        let v = c * self.phi_kl(k, l, d, w)?;
                        acc[i][j] += v;
                        if i != j {
                            acc[j][i] += v;
                        }
                    }
                }
            }
        }
        let t3 = t * t * t;
        for row in acc.iter_mut() {
            for v in row.iter_mut() {
                *v /= t3;
            }
        }
        Ok(acc)
    }

    /// grad_x phi_[K](t, x) through the order-`mord` Taylor jet of each
    /// phi_{k,l} around p. The jet uses the same interpolated derivative
    /// fields the coefficient expressions reference, so the designed
    /// residual cancellations hold exactly in floating point; the jet
    /// differs from direct interpolation at x/t by O(|x/t - p|^{mord+1}).
    pub fn jet_grad_phik(
        &self,
        t: f64,
        x: [f64; 3],
        p: [f64; 3],
        mord: usize,
    ) -> Result<[f64; 3]> {
        ensure!(t >= 1.0, "evaluation needs t >= 1");
        let dw = [x[0] / t - p[0], x[1] / t - p[1], x[2] / t - p[2]];
        let lt = t.ln();
        let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
        let mut acc = [0.0; 3];
        for m0 in 0..=mord {
            for m1 in 0..=mord - m0 {
                for m2 in 0..=mord - m0 - m1 {
                    let c = dw[0].powi(m0 as i32) * dw[1].powi(m1 as i32)
                        * dw[2].powi(m2 as i32)
                        / (fact(m0) * fact(m1) * fact(m2));
                    if c == 0.0 {
                        continue;
                    }
                    for k in 0..=self.order {
                        for l in 0..=k {
                            let cl = c * lt.powi(l as i32) / t.powi(k as i32);
                            for i in 0..3 {
                                let mut d = [m0, m1, m2];
                                d[i] += 1;
                                acc[i] += cl * self.phi_kl(k, l, d, p)?;
                            }
                        }
                    }
                }
            }
        }
        let t2 = t * t;
        Ok([acc[0] / t2, acc[1] / t2, acc[2] / t2])
    }

    /// The Vlasov residual X_{phi_[K]} f_[K] = (d_t + p . d_x +
    /// grad phi_[K] . d_p) f_[K], all derivatives exact through the chain
    /// rule d_t y = -p + grad phi_inf(p)/t, d_x y = I,
    /// d_p y = -t I + log t hess phi_inf(p). The force field is evaluated
    /// through the order-(K+2) jet around p: interpolating the gradient
    /// fields at x/t directly would reintroduce an O(h^3) derivative
    /// inconsistency between independent interpolants, a t^-2 floor that
    /// buries the K >= 1 residual.
    pub fn vlasov_residual(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        ensure!(t > 1.0, "residual needs t > 1");
        let y = self.y_map(t, x, p)?;
        let mut out = Vec::new();
        self.eval_f_layers(y, p, &mut out);
        let lt = t.ln();
        let ginf = self.grad_phi_inf(p)?;
        let hinf = self.hess_phi_inf(p)?;
        let gk = self.jet_grad_phik(t, x, p, self.order + 2)?;

        let mut res = 0.0;
        for k in 0..=self.order {
            for l in 0..=k {
                let base = 7 * (tri(k) + l);
                let f = out[base];
                let dyf = [out[base + 1], out[base + 2], out[base + 3]];
                let dqf = [out[base + 4], out[base + 5], out[base + 6]];
                let cl = lt.powi(l as i32);
                // d_t of the prefactor, plus the surviving d_t y transport
                // piece (the -p and +p . d_y f cancel against p . d_x)
                let mut dt_pref = -(k as f64) * cl;
                if l >= 1 {
                    dt_pref += l as f64 * lt.powi(l as i32 - 1);
                }
                res += dt_pref / t.powi(k as i32 + 1) * f;
                let dyg: f64 = (0..3).map(|a| dyf[a] * ginf[a]).sum();
                res += cl / t.powi(k as i32 + 1) * dyg;
                // force term through d_p y
                let mut force = 0.0;
                for i in 0..3 {
                    let mut dpi = -t * dyf[i] + dqf[i];
                    for j in 0..3 {
                        dpi += lt * hinf[i][j] * dyf[j];
                    }
                    force += gk[i] * dpi;
                }
                res += cl / t.powi(k as i32) * force;
            }
        }
        Ok(res)
    }

    /// int f_[K](t, x, p) dp - rho_[K](t, x). The p-integral is evaluated
    /// through the exact substitution p = p(t, x, y) (Newton inversion of
    /// the transport coordinate) on the same refined y-lattice the table's
    /// coefficient quadrature uses, with the analytic Jacobian
    /// |det dp/dy| = 1/det(t I - log t hess phi_inf(p)). Sharing the lattice
    /// means the quadrature error acts on the difference between integrand
    /// and expansion, which is itself the defect being measured, instead of
    /// flooring the result at the absolute quadrature error of rho. The
    /// p-nodes this induces live in the shrunken support ball around
    /// x/t + (log t / t) grad phi_inf(x/t), with t-independent resolution
    /// in y-coordinates.
    pub fn density_mismatch(&self, t: f64, x: [f64; 3]) -> Result<f64> {
        ensure!(t > 1.0, "mismatch needs t > 1");
        let b = self.table.profile().support_radius();
        let grid = self.table.grid();
        let fine = crate::fields::Grid3::new(2 * grid.n, grid.origin, grid.spacing / 2.0)?;
        let lt = t.ln();
        let cell = fine.spacing * fine.spacing * fine.spacing;
        let mut out = Vec::new();
        let mut quad = 0.0;
        for kk in 0..fine.n {
            for jj in 0..fine.n {
                for ii in 0..fine.n {
                    let y = fine.node(ii, jj, kk);
                    // every f_{k,l} vanishes for |y| >= B
                    if y[0] * y[0] + y[1] * y[1] + y[2] * y[2] >= b * b {
                        continue;
                    }
                    let p = self.invert_y(t, x, y)?;
                    let h = self.hess_phi_inf(p)?;
                    let mut m = [[0.0; 3]; 3];
                    for a in 0..3 {
                        for c in 0..3 {
                            m[a][c] = if a == c { t } else { 0.0 } - lt * h[a][c];
                        }
                    }
                    let det = det3(&m);
                    self.eval_f_layers(y, p, &mut out);
                    for k in 0..=self.order {
                        for l in 0..=k {
                            quad += cell / det * lt.powi(l as i32) / t.powi(k as i32)
                                * out[7 * (tri(k) + l)];
                        }
                    }
                }
            }
        }
        // the expansion identities substitute p -> y with the signed
        // Jacobian, det(dp/dy) = -t^-3 to leading order, so rho_[K] tracks
        // minus the physical p-integral (rho_{0,0} = -int f_inf dy)
        Ok(-quad - self.eval_rhok(t, x)?)
    }

    /// L_i g(y(t,x,p), p) for a phase expression g, via the direct
    /// definition L_i = t d_{x^i} + d_{p^i} + (log t / t)
    /// d_i d_j phi_inf(p) d_{p^j} and the exact chain rule through y.
    pub fn apply_l(&self, i: usize, g: PhaseExpr, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        ensure!(i < 3, "axis out of range");
        ensure!(t >= 1.0, "L_i needs t >= 1");
        let y = self.y_map(t, x, p)?;
        let lt = t.ln();
        let hinf = self.hess_phi_inf(p)?;
        let mut roots = Vec::with_capacity(6);
        for a in 0..3 {
            roots.push(diff_y(g, a));
        }
        for a in 0..3 {
            roots.push(diff_q(g, a));
        }
        let tape = Tape::compile(&roots);
        let mut slots = Vec::new();
        let mut d = Vec::new();
        tape.eval(self.table.profile(), self.table, y, p, &mut slots, &mut d);
        // d_{p^m}[g(y,p)] with the chain rule through y
        let dp = |m: usize, d: &[f64]| -> f64 {
            let mut v = -t * d[m] + d[3 + m];
            for j in 0..3 {
                v += lt * hinf[m][j] * d[j];
            }
            v
        };
        // t d_{x^i} contributes t d_{y^i} g
        let mut v = t * d[i] + dp(i, &d);
        for m in 0..3 {
            v += lt / t * hinf[i][m] * dp(m, &d);
        }
        Ok(v)
    }

    /// First derivatives of g together with their own first derivatives,
    /// evaluated at (y, p) through a single tape: for each h in
    /// (dy g x3, dq g x3) a block of 7 values [h, dy h x3, dq h x3].
    fn second_jet(&self, g: PhaseExpr, y: [f64; 3], p: [f64; 3]) -> Vec<f64> {
        let mut roots = Vec::with_capacity(42);
        let mut firsts = Vec::with_capacity(6);
        for a in 0..3 {
            firsts.push(diff_y(g, a));
        }
        for a in 0..3 {
            firsts.push(diff_q(g, a));
        }
        for h in firsts {
            roots.push(h);
            for a in 0..3 {
                roots.push(diff_y(h, a));
            }
            for a in 0..3 {
                roots.push(diff_q(h, a));
            }
        }
        let tape = Tape::compile(&roots);
        let mut slots = Vec::new();
        let mut out = Vec::new();
        tape.eval(self.table.profile(), self.table, y, p, &mut slots, &mut out);
        out
    }

    /// Defect of the commutator identity [X_{phi_[K]}, L_i] g at (t, x, p):
    /// the left side X(L_i g) - L_i(X g) is expanded analytically through the
    /// chain rule, the right side is the closed-form commutator; both sides
    /// interpolate the same phi_[K] derivative fields.
    pub fn commutator_check(
        &self,
        i: usize,
        g: PhaseExpr,
        t: f64,
        x: [f64; 3],
        p: [f64; 3],
    ) -> Result<f64> {
        ensure!(i < 3, "axis out of range");
        ensure!(t > 1.0, "commutator needs t > 1");
        let y = self.y_map(t, x, p)?;
        let lt = t.ln();

        // one tape holding every first derivative of g together with its own
        // first derivatives: blocks of 7 per h in (dy g, dq g)
        let d = self.second_jet(g, y, p);
        let jet = |m: usize| -> ([f64; 3], [f64; 3]) {
            let b = 7 * m;
            (
                [d[b + 1], d[b + 2], d[b + 3]],
                [d[b + 4], d[b + 5], d[b + 6]],
            )
        };

        // phi_inf jets at p
        let ginf = self.grad_phi_inf(p)?;
        let hinf = self.hess_phi_inf(p)?;
        let tinf = self.third_phi_inf(p)?;
        // phi_[K] jets at (t, x)
        let gk = self.eval_grad_phik(t, x)?;
        let hk = self.hess_phik(t, x)?;

        // chain-rule building blocks for h(y, p)
        let dp_of = |dyh: &[f64; 3], dqh: &[f64; 3], m: usize| -> f64 {
            let mut v = -t * dyh[m] + dqh[m];
            for j in 0..3 {
                v += lt * hinf[m][j] * dyh[j];
            }
            v
        };
        let x_of = |dyh: &[f64; 3], dqh: &[f64; 3]| -> f64 {
            // X[h(y,p)] = (1/t) grad phi_inf(p) . d_y h
            //           + d_x phi_[K] . (d_p through y + d_q)
            let mut v = 0.0;
            for a in 0..3 {
                v += ginf[a] * dyh[a] / t;
                v += gk[a] * dp_of(dyh, dqh, a);
            }
            v
        };
        let l_of = |dyh: &[f64; 3], dqh: &[f64; 3], ax: usize| -> f64 {
            let mut v = t * dyh[ax] + dp_of(dyh, dqh, ax);
            for m in 0..3 {
                v += lt / t * hinf[ax][m] * dp_of(dyh, dqh, m);
            }
            v
        };

        let dyg_v = [d[0], d[7], d[14]];
        let dqg_v = [d[21], d[28], d[35]];

        // --- left side, term 1: X(L_i g) ------------------------------------
        // L_i g = (log^2 t / t) S_{ik} (d_{y^k} g)
        //       + (delta_{ik} + (log t / t) H_{ik}) (d_{q^k} g),  S = H^2
        let mut s = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                for m in 0..3 {
                    s[a][b] += hinf[a][m] * hinf[m][b];
                }
            }
        }
        let mut x_lig = 0.0;
        for k in 0..3 {
            let (dyh, dqh) = jet(k);
            // d_t of (log^2 t / t), times S_{ik} d_k g
            x_lig += (2.0 * lt - lt * lt) / (t * t) * s[i][k] * dyg_v[k];
            // coefficient constant in t: S transported by X through p
            let mut xs = 0.0;
            for m in 0..3 {
                let mut ds = 0.0;
                for j in 0..3 {
                    ds += tinf[m][i][j] * hinf[j][k] + hinf[i][j] * tinf[m][j][k];
                }
                xs += gk[m] * ds;
            }
            x_lig += lt * lt / t * (xs * dyg_v[k] + s[i][k] * x_of(&dyh, &dqh));
        }
        {
            let (dyh, dqh) = jet(3 + i);
            x_lig += x_of(&dyh, &dqh);
        }
        for k in 0..3 {
            let (dyh, dqh) = jet(3 + k);
            x_lig += (1.0 - lt) / (t * t) * hinf[i][k] * dqg_v[k];
            let mut xh = 0.0;
            for m in 0..3 {
                xh += gk[m] * tinf[i][k][m];
            }
            x_lig += lt / t * (xh * dqg_v[k] + hinf[i][k] * x_of(&dyh, &dqh));
        }

        // --- left side, term 2: L_i(X g) ------------------------------------
        // X g = (1/t) grad phi_inf . d_y g + Phi_k(t,x) D_k g with
        // D_k g = -t d_{y^k} g + log t H_{kj} d_{y^j} g + d_{q^k} g
        let mut li_xg = 0.0;
        for j in 0..3 {
            let (dyh, dqh) = jet(j);
            // L_i(grad phi_inf_j) = H_{ij} + (log t / t) H_{im} H_{mj}
            let mut lg = hinf[i][j];
            for m in 0..3 {
                lg += lt / t * hinf[i][m] * hinf[m][j];
            }
            li_xg += (lg * dyg_v[j] + ginf[j] * l_of(&dyh, &dqh, i)) / t;
        }
        for k in 0..3 {
            // L_i Phi_k = t d_{x^i} Phi_k
            let mut dk = -t * dyg_v[k] + dqg_v[k];
            for j in 0..3 {
                dk += lt * hinf[k][j] * dyg_v[j];
            }
            li_xg += t * hk[k][i] * dk;
            // Phi_k L_i(D_k g): expand D_k g term by term
            let mut li_dk = 0.0;
            {
                let (dyh, dqh) = jet(k);
                li_dk += -t * l_of(&dyh, &dqh, i);
            }
            for j in 0..3 {
                let (dyh, dqh) = jet(j);
                // L_i(H_{kj}) = T_{kji} + (log t / t) H_{im} T_{kjm}
                let mut lh = tinf[k][j][i];
                for m in 0..3 {
                    lh += lt / t * hinf[i][m] * tinf[k][j][m];
                }
                li_dk += lt * (lh * dyg_v[j] + hinf[k][j] * l_of(&dyh, &dqh, i));
            }
            {
                let (dyh, dqh) = jet(3 + k);
                li_dk += l_of(&dyh, &dqh, i);
            }
            li_xg += gk[k] * li_dk;
        }

        // --- right side: the closed-form commutator --------------------------
        let mut rhs = 0.0;
        for k in 0..3 {
            let dpk = dp_of(&dyg_v, &dqg_v, k);
            rhs += (hinf[i][k] / (t * t) - t * hk[i][k]) * dpk;
            rhs -= lt / (t * t) * hinf[i][k] * (t * dyg_v[k] + dpk);
            for l in 0..3 {
                rhs += lt / t * gk[k] * tinf[i][k][l] * dp_of(&dyg_v, &dqg_v, l);
            }
        }

        Ok((x_lig - li_xg - rhs).abs())
    }

    /// Defect of the companion identity [X_{phi_[K]}, t^{-1} d_{p^i}] g =
    /// -(1/t^2)(t d_{x^i} + d_{p^i}) g at (t, x, p), expanded the same way
    /// as `commutator_check`.
    pub fn dp_commutator_check(
        &self,
        i: usize,
        g: PhaseExpr,
        t: f64,
        x: [f64; 3],
        p: [f64; 3],
    ) -> Result<f64> {
        ensure!(i < 3, "axis out of range");
        ensure!(t > 1.0, "commutator needs t > 1");
        let y = self.y_map(t, x, p)?;
        let lt = t.ln();

        let d = self.second_jet(g, y, p);
        let jet = |m: usize| -> ([f64; 3], [f64; 3]) {
            let b = 7 * m;
            (
                [d[b + 1], d[b + 2], d[b + 3]],
                [d[b + 4], d[b + 5], d[b + 6]],
            )
        };

        let ginf = self.grad_phi_inf(p)?;
        let hinf = self.hess_phi_inf(p)?;
        let tinf = self.third_phi_inf(p)?;
        let gk = self.eval_grad_phik(t, x)?;

        let dp_of = |dyh: &[f64; 3], dqh: &[f64; 3], m: usize| -> f64 {
            let mut v = -t * dyh[m] + dqh[m];
            for j in 0..3 {
                v += lt * hinf[m][j] * dyh[j];
            }
            v
        };
        let x_of = |dyh: &[f64; 3], dqh: &[f64; 3]| -> f64 {
            let mut v = 0.0;
            for a in 0..3 {
                v += ginf[a] * dyh[a] / t;
                v += gk[a] * dp_of(dyh, dqh, a);
            }
            v
        };

        let dyg_v = [d[0], d[7], d[14]];
        let dqg_v = [d[21], d[28], d[35]];

        // --- left side, term 1: X(t^{-1} d_{p^i} g) --------------------------
        // t^{-1} d_{p^i} g = -d_{y^i} g + (log t / t) H_{ij} d_{y^j} g
        //                  + (1/t) d_{q^i} g
        let mut lhs1 = 0.0;
        {
            let (dyh, dqh) = jet(i);
            lhs1 -= x_of(&dyh, &dqh);
        }
        for j in 0..3 {
            let (dyh, dqh) = jet(j);
            lhs1 += (1.0 - lt) / (t * t) * hinf[i][j] * dyg_v[j];
            let mut xh = 0.0;
            for m in 0..3 {
                xh += gk[m] * tinf[i][j][m];
            }
            lhs1 += lt / t * (xh * dyg_v[j] + hinf[i][j] * x_of(&dyh, &dqh));
        }
        {
            let (dyh, dqh) = jet(3 + i);
            lhs1 += -dqg_v[i] / (t * t) + x_of(&dyh, &dqh) / t;
        }

        // --- left side, term 2: t^{-1} d_{p^i}(X g) --------------------------
        let mut lhs2 = 0.0;
        for j in 0..3 {
            let (dyh, dqh) = jet(j);
            lhs2 += (hinf[i][j] * dyg_v[j] + ginf[j] * dp_of(&dyh, &dqh, i)) / t;
        }
        for k in 0..3 {
            let mut dpdk = {
                let (dyh, dqh) = jet(k);
                -t * dp_of(&dyh, &dqh, i)
            };
            for j in 0..3 {
                let (dyh, dqh) = jet(j);
                dpdk += lt * (tinf[k][j][i] * dyg_v[j] + hinf[k][j] * dp_of(&dyh, &dqh, i));
            }
            {
                let (dyh, dqh) = jet(3 + k);
                dpdk += dp_of(&dyh, &dqh, i);
            }
            lhs2 += gk[k] * dpdk;
        }
        lhs2 /= t;

        // --- right side -------------------------------------------------------
        let rhs = -(t * dyg_v[i] + dp_of(&dyg_v, &dqg_v, i)) / (t * t);

        Ok((lhs1 - lhs2 - rhs).abs())
    }

    /// Modified trajectories x + t p - log t grad phi_inf(p) per sample,
    /// against the free trajectory x + t p, as CSV.
    pub fn emit_trajectories(
        &self,
        samples: &[([f64; 3], [f64; 3])],
        ts: &[f64],
    ) -> Result<String> {
        let mut csv = String::from("t,sample,mod_x,mod_y,mod_z,free_x,free_y,free_z\n");
        for &t in ts {
            ensure!(t >= 1.0, "trajectories need t >= 1");
            let lt = t.ln();
            for (s, &(x, p)) in samples.iter().enumerate() {
                let g = self.grad_phi_inf(p)?;
                let m = [
                    x[0] + t * p[0] - lt * g[0],
                    x[1] + t * p[1] - lt * g[1],
                    x[2] + t * p[2] - lt * g[2],
                ];
                let fr = [x[0] + t * p[0], x[1] + t * p[1], x[2] + t * p[2]];
                csv.push_str(&format!(
                    "{t},{s},{},{},{},{},{},{}\n",
                    m[0], m[1], m[2], fr[0], fr[1], fr[2]
                ));
            }
        }
        Ok(csv)
    }
}

/// Closed form for L_i applied to h(y, p): the corrected transport identity
/// (log^2 t / t) (hess^2)_{ik} d_{y^k} h + (delta + (log t / t) hess)_{ik}
/// d_{q^k} h. Used as the oracle counterpart of apply_l.
pub fn l_closed_form(
    i: usize,
    dyh: [f64; 3],
    dqh: [f64; 3],
    hess: [[f64; 3]; 3],
    t: f64,
) -> f64 {
    let lt = t.ln();
    let mut v = 0.0;
    for k in 0..3 {
        let mut s = 0.0;
        for m in 0..3 {
            s += hess[i][m] * hess[m][k];
        }
        v += lt * lt / t * s * dyh[k];
        let delta = if i == k { 1.0 } else { 0.0 };
        v += (delta + lt / t * hess[i][k]) * dqh[k];
    }
    v
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
pub(crate) fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        ensure!(a[piv][col].abs() > 1e-300, "singular Newton Jacobian");
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let mut v = b[r];
        for c in r + 1..3 {
            v -= a[r][c] * x[c];
        }
        x[r] = v / a[r][r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det3_matches_cofactor_expansion() {
        let m = [[2.0, -1.0, 0.5], [0.0, 3.0, 1.0], [1.0, 1.0, -2.0]];
        // expanded by hand along the first row
        assert!((det3(&m) - (-16.5)).abs() <= 1e-14);
    }

    #[test]
    fn solve3_recovers_known_solution() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, -1.0], [0.0, -1.0, 2.0]];
        let xs = [0.3, -1.2, 0.7];
        let mut b = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                b[r] += a[r][c] * xs[c];
            }
        }
        let got = solve3(a, b).unwrap();
        for r in 0..3 {
            assert!((got[r] - xs[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn l_closed_form_reduces_to_dq_for_zero_hessian() {
        let v = l_closed_form(1, [1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [[0.0; 3]; 3], 50.0);
        assert_eq!(v, 5.0);
    }
}
