//! Decay-rate fitting and stratified L2 energy norms shared by the
//! expansion-side residual checks and the finite-problem solver. A
//! DecaySeries holds measured sup- or L2-norms against time; fit_rate
//! extracts the power of 1/t with the log-power frozen to the predicted
//! value, since alpha and m are nearly collinear over desk-scale t-ranges
//! and freezing m is what makes alpha identifiable. The jointly-fitted
//! variant is available but flagged, for reports only.

use crate::approx::{solve3, ApproxSolution};
use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// A measured non-negative decay quantity sampled on an increasing t-grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecaySeries {
    pairs: Vec<(f64, f64)>,
}

impl DecaySeries {
    /// Times must be strictly increasing with t > 1 (the fits regress
    /// against log t and log log t), values non-negative and finite.
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        for win in pairs.windows(2) {
            ensure!(win[0].0 < win[1].0, "series times must be strictly increasing");
        }
        for &(t, v) in &pairs {
            ensure!(t > 1.0, "series time {t} must exceed 1");
            ensure!(v.is_finite() && v >= 0.0, "series value {v} at t = {t} is not a norm");
        }
        Ok(DecaySeries { pairs })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Result of fitting v = A (log t)^m / t^alpha to a DecaySeries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateFit {
    pub amplitude: f64,
    pub alpha: f64,
    /// log-power: frozen integer for fit_rate, fitted for fit_rate_joint
    pub m: f64,
    /// 95% confidence half-width on alpha
    pub alpha_ci: f64,
    /// rms of the log-space fit residuals
    pub rms: f64,
    /// zero values dropped before fitting
    pub dropped: usize,
    /// set on the jointly-fitted variant: alpha and m are nearly collinear
    /// at desk-scale t-ranges, so joint estimates are unstable
    pub ill_conditioned: bool,
}

impl fmt::Display for RateFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha = {:.4} +/- {:.4} (m = {:.2}, A = {:.4e}, rms {:.2e}",
            self.alpha, self.alpha_ci, self.m, self.amplitude, self.rms
        )?;
        if self.dropped > 0 {
            write!(f, ", {} zero points dropped", self.dropped)?;
        }
        if self.ill_conditioned {
            write!(f, ", ill-conditioned joint fit")?;
        }
        write!(f, ")")
    }
}

/// Two-sided 97.5% Student-t quantile for small degrees of freedom.
fn t_quantile(df: usize) -> f64 {
    const TABLE: [f64; 11] = [
        f64::INFINITY,
        12.706,
        4.303,
        3.182,
        2.776,
        2.571,
        2.447,
        2.365,
        2.306,
        2.262,
        2.228,
    ];
    if df < TABLE.len() {
        TABLE[df]
    } else if df <= 20 {
        2.09
    } else if df <= 30 {
        2.04
    } else {
        1.98
    }
}

fn usable(series: &DecaySeries) -> (Vec<(f64, f64)>, usize) {
    let kept: Vec<(f64, f64)> = series.pairs.iter().copied().filter(|&(_, v)| v > 0.0).collect();
    let dropped = series.pairs.len() - kept.len();
    (kept, dropped)
}

/// Least squares of log v against log A - alpha log t + m log log t with the
/// log-power m frozen. Zero values are dropped (count reported in the fit).
pub fn fit_rate(series: &DecaySeries, m: i32) -> Result<RateFit> {
    let (kept, dropped) = usable(series);
    ensure!(
        kept.len() >= 4,
        "rate fit needs at least 4 positive points, got {} ({dropped} zeros dropped)",
        kept.len()
    );
    let n = kept.len() as f64;
    let pts: Vec<(f64, f64)> = kept
        .iter()
        .map(|&(t, v)| (t.ln(), v.ln() - f64::from(m) * t.ln().ln()))
        .collect();
    let su: f64 = pts.iter().map(|p| p.0).sum();
    let sz: f64 = pts.iter().map(|p| p.1).sum();
    let (ub, zb) = (su / n, sz / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - ub).powi(2)).sum();
    let sxz: f64 = pts.iter().map(|p| (p.0 - ub) * (p.1 - zb)).sum();
    ensure!(sxx > 0.0, "degenerate t-grid");
    let slope = sxz / sxx;
    let intercept = zb - slope * ub;
    let ss: f64 = pts.iter().map(|&(u, z)| (z - intercept - slope * u).powi(2)).sum();
    let df = kept.len() - 2;
    let se = (ss / df as f64 / sxx).sqrt();
    Ok(RateFit {
        amplitude: intercept.exp(),
        alpha: -slope,
        m: f64::from(m),
        alpha_ci: t_quantile(df) * se,
        rms: (ss / n).sqrt(),
        dropped,
        ill_conditioned: false,
    })
}

/// Three-parameter variant fitting m as well; always flagged as
/// ill-conditioned and intended for report context only.
pub fn fit_rate_joint(series: &DecaySeries) -> Result<RateFit> {
    let (kept, dropped) = usable(series);
    ensure!(
        kept.len() >= 4,
        "rate fit needs at least 4 positive points, got {} ({dropped} zeros dropped)",
        kept.len()
    );
    // normal equations for z = a - alpha u + m w, u = log t, w = log log t
    let mut ata = [[0.0f64; 3]; 3];
    let mut atz = [0.0f64; 3];
    let rows: Vec<([f64; 3], f64)> = kept
        .iter()
        .map(|&(t, v)| ([1.0, -t.ln(), t.ln().ln()], v.ln()))
        .collect();
    for (row, z) in &rows {
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atz[i] += row[i] * z;
        }
    }
    let coef = solve3(ata, atz).context("joint rate fit: singular normal equations")?;
    let ss: f64 = rows
        .iter()
        .map(|(row, z)| (z - coef[0] * row[0] - coef[1] * row[1] - coef[2] * row[2]).powi(2))
        .sum();
    let df = kept.len().saturating_sub(3).max(1);
    // diagonal of (A^T A)^-1 for the alpha column
    let mut e = [0.0; 3];
    e[1] = 1.0;
    let inv_col = solve3(ata, e)?;
    let se = (ss / df as f64 * inv_col[1].max(0.0)).sqrt();
    Ok(RateFit {
        amplitude: coef[0].exp(),
        alpha: coef[1],
        m: coef[2],
        alpha_ci: t_quantile(df) * se,
        rms: (ss / kept.len() as f64).sqrt(),
        dropped,
        ill_conditioned: true,
    })
}

/// Scalar function of (t, x, p) with derivatives, as consumed by the energy
/// norm. Mixed partials default to nested central differences with the
/// field's own step; implementations with analytic derivatives override.
pub trait PhaseField {
    fn value(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64>;

    /// finite-difference step, a quarter of the natural grid spacing
    fn fd_step(&self) -> f64;

    fn derivative(&self, t: f64, x: [f64; 3], p: [f64; 3], dx: [usize; 3], dp: [usize; 3]) -> Result<f64> {
        let total = dx.iter().sum::<usize>() + dp.iter().sum::<usize>();
        if total == 0 {
            return self.value(t, x, p);
        }
        let h = self.fd_step();
        // peel one derivative off the first active axis
        for a in 0..3 {
            if dx[a] > 0 {
                let mut lower = dx;
                lower[a] -= 1;
                let (mut xp, mut xm) = (x, x);
                xp[a] += h;
                xm[a] -= h;
                let vp = self.derivative(t, xp, p, lower, dp)?;
                let vm = self.derivative(t, xm, p, lower, dp)?;
                return Ok((vp - vm) / (2.0 * h));
            }
        }
        for a in 0..3 {
            if dp[a] > 0 {
                let mut lower = dp;
                lower[a] -= 1;
                let (mut pp, mut pm) = (p, p);
                pp[a] += h;
                pm[a] -= h;
                let vp = self.derivative(t, x, pp, dx, lower)?;
                let vm = self.derivative(t, x, pm, dx, lower)?;
                return Ok((vp - vm) / (2.0 * h));
            }
        }
        unreachable!()
    }
}

/// Any closure of (t, x, p), differentiated by finite differences.
pub struct FnField<F: Fn(f64, [f64; 3], [f64; 3]) -> Result<f64>> {
    pub f: F,
    pub step: f64,
}

impl<F: Fn(f64, [f64; 3], [f64; 3]) -> Result<f64>> PhaseField for FnField<F> {
    fn value(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        (self.f)(t, x, p)
    }

    fn fd_step(&self) -> f64 {
        self.step
    }
}

/// The approximate solution f_[K] as an energy subject: value and first
/// derivatives analytic through the y chain rule, second derivatives by
/// differencing the analytic first derivatives.
pub struct ApproxField<'a>(pub &'a ApproxSolution<'a>);

impl PhaseField for ApproxField<'_> {
    fn value(&self, t: f64, x: [f64; 3], p: [f64; 3]) -> Result<f64> {
        self.0.eval_fk(t, x, p)
    }

    fn fd_step(&self) -> f64 {
        self.0.table().grid().spacing / 4.0
    }

    fn derivative(&self, t: f64, x: [f64; 3], p: [f64; 3], dx: [usize; 3], dp: [usize; 3]) -> Result<f64> {
        let total = dx.iter().sum::<usize>() + dp.iter().sum::<usize>();
        if total <= 1 {
            let (v, gx, gp) = self.0.eval_f_jet(t, x, p)?;
            if total == 0 {
                return Ok(v);
            }
            for a in 0..3 {
                if dx[a] == 1 {
                    return Ok(gx[a]);
                }
                if dp[a] == 1 {
                    return Ok(gp[a]);
                }
            }
        }
        let h = self.fd_step();
        for a in 0..3 {
            if dx[a] > 0 {
                let mut lower = dx;
                lower[a] -= 1;
                let (mut xp, mut xm) = (x, x);
                xp[a] += h;
                xm[a] -= h;
                return Ok((self.derivative(t, xp, p, lower, dp)?
                    - self.derivative(t, xm, p, lower, dp)?)
                    / (2.0 * h));
            }
        }
        for a in 0..3 {
            if dp[a] > 0 {
                let mut lower = dp;
                lower[a] -= 1;
                let (mut pp, mut pm) = (p, p);
                pp[a] += h;
                pm[a] -= h;
                return Ok((self.derivative(t, x, pp, dx, lower)?
                    - self.derivative(t, x, pm, dx, lower)?)
                    / (2.0 * h));
            }
        }
        unreachable!()
    }
}

/// Multi-index pairs (I, J) with |I| + |J| <= order, in a fixed canonical
/// order (total degree, then |I| descending, then lexicographic).
pub fn operator_terms(order: usize) -> Vec<([usize; 3], [usize; 3])> {
    fn multisets(total: usize) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
        out
    }
    let mut terms = Vec::new();
    for n in 0..=order {
        for i in (0..=n).rev() {
            for mi in multisets(i) {
                for mj in multisets(n - i) {
                    terms.push((mi, mj));
                }
            }
        }
    }
    terms
}

/// L^I (t^-1 d_p)^J applied to the field at one phase point, for every term
/// of `operator_terms(order)`, assembled from mixed partials of the field
/// and the phi_inf jets carried by the approximation. L_i is the transport
/// vector field t d_{x^i} + d_{p^i} + (log t / t) d_i d_j phi_inf(p) d_{p^j};
/// products of two L's pick up first-order terms from the p-dependence of
/// the hessian coefficient (the third derivative tensor of phi_inf).
pub fn operator_values(
    approx: &ApproxSolution,
    field: &dyn PhaseField,
    t: f64,
    x: [f64; 3],
    p: [f64; 3],
    order: usize,
) -> Result<Vec<f64>> {
    ensure!(order <= 2, "energy derivative order capped at 2");
    ensure!(t > 1.0, "energy norm needs t > 1");
    let lt = t.ln();
    let c = lt / t;
    let hinf = approx.hess_phi_inf(p)?;
    let mut bmat = [[0.0; 3]; 3];
    for i in 0..3 {
        for a in 0..3 {
            bmat[i][a] = if i == a { 1.0 } else { 0.0 } + c * hinf[i][a];
        }
    }
    let v = field.derivative(t, x, p, [0; 3], [0; 3])?;
    let mut gx = [0.0; 3];
    let mut gp = [0.0; 3];
    let mut dxx = [[0.0; 3]; 3];
    let mut dxp = [[0.0; 3]; 3];
    let mut dpp = [[0.0; 3]; 3];
    if order >= 1 {
        for a in 0..3 {
            gx[a] = field.derivative(t, x, p, axis_index(a), [0; 3])?;
            gp[a] = field.derivative(t, x, p, [0; 3], axis_index(a))?;
        }
    }
    let tinf = if order >= 2 {
        for a in 0..3 {
            for b in 0..3 {
                dxp[a][b] = field.derivative(t, x, p, axis_index(a), axis_index(b))?;
            }
            for b in a..3 {
                let vxx = field.derivative(t, x, p, pair_index(a, b), [0; 3])?;
                dxx[a][b] = vxx;
                dxx[b][a] = vxx;
                let vpp = field.derivative(t, x, p, [0; 3], pair_index(a, b))?;
                dpp[a][b] = vpp;
                dpp[b][a] = vpp;
            }
        }
        approx.third_phi_inf(p)?
    } else {
        [[[0.0; 3]; 3]; 3]
    };

    let l_first = |i: usize| -> f64 {
        let mut s = t * gx[i];
        for a in 0..3 {
            s += bmat[i][a] * gp[a];
        }
        s
    };
    let mut out = Vec::new();
    for (mi, mj) in operator_terms(order) {
        let ni: usize = mi.iter().sum();
        let nj: usize = mj.iter().sum();
        let val = match (ni, nj) {
            (0, 0) => v,
            (1, 0) => l_first(first_axis(mi)),
            (0, 1) => gp[first_axis(mj)] / t,
            (0, 2) => {
                let (a, b) = two_axes(mj);
                dpp[a][b] / (t * t)
            }
            (1, 1) => {
                let i = first_axis(mi);
                let b = first_axis(mj);
                let mut s = t * dxp[i][b];
                for a in 0..3 {
                    s += bmat[i][a] * dpp[a][b];
                }
                s / t
            }
            (2, 0) => {
                let (i, j) = two_axes(mi);
                let mut s = t * t * dxx[i][j];
                for b in 0..3 {
                    s += t * bmat[j][b] * dxp[i][b];
                }
                for a in 0..3 {
                    let mut inner = t * dxp[j][a];
                    for b in 0..3 {
                        inner += c * tinf[j][b][a] * gp[b] + bmat[j][b] * dpp[a][b];
                    }
                    s += bmat[i][a] * inner;
                }
                s
            }
            _ => unreachable!(),
        };
        out.push(val);
    }
    Ok(out)
}

fn axis_index(a: usize) -> [usize; 3] {
    let mut d = [0; 3];
    d[a] = 1;
    d
}

fn pair_index(a: usize, b: usize) -> [usize; 3] {
    let mut d = [0; 3];
    d[a] += 1;
    d[b] += 1;
    d
}

fn first_axis(m: [usize; 3]) -> usize {
    (0..3).find(|&a| m[a] > 0).expect("degree-1 multi-index")
}

fn two_axes(m: [usize; 3]) -> (usize, usize) {
    let mut axes = Vec::with_capacity(2);
    for a in 0..3 {
        for _ in 0..m[a] {
            axes.push(a);
        }
    }
    (axes[0], axes[1])
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

/// Stratified L2_x L2_p energy of Sum_{|I|+|J| <= order} L^I (t^-1 d_p)^J
/// applied to the field: the sum over terms of their individual L2 norms.
/// The (x, p) integral is parametrised by (y, p) over the support box
/// [-B, B]^6 -- x differs from y by a p-dependent translation, so the
/// Jacobian is exactly 1 -- with one deterministically jittered sample per
/// stratum.
pub fn energy_norm(
    approx: &ApproxSolution,
    field: &dyn PhaseField,
    t: f64,
    order: usize,
    strata: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(order <= 2, "energy derivative order capped at 2");
    ensure!(strata >= 2, "need at least 2 strata per axis");
    ensure!(t > 1.0, "energy norm needs t > 1");
    let b = approx.table().profile().support_radius();
    let cell = 2.0 * b / strata as f64;
    let nterms = operator_terms(order).len();
    let mut acc = vec![0.0f64; nterms];
    let vol = cell.powi(6);
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut idx = [0usize; 6];
    loop {
        let mut z = [0.0f64; 6];
        for a in 0..6 {
            z[a] = -b + cell * (idx[a] as f64 + lcg(&mut state));
        }
        let y = [z[0], z[1], z[2]];
        let p = [z[3], z[4], z[5]];
        // skip strata beyond the support reach |y| + |p| <= B, with one
        // cell of margin for fields that are only approximately supported
        let reach = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt()
            + (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if reach <= b + 2.0 * cell {
            let g = approx.grad_phi_inf(p)?;
            let lt = t.ln();
            let x = [
                y[0] + t * p[0] - lt * g[0],
                y[1] + t * p[1] - lt * g[1],
                y[2] + t * p[2] - lt * g[2],
            ];
            let vals = operator_values(approx, field, t, x, p, order)?;
            for (a, v) in acc.iter_mut().zip(&vals) {
                *a += vol * v * v;
            }
        }
        // odometer over the 6D strata lattice
        let mut a = 0;
        loop {
            idx[a] += 1;
            if idx[a] < strata {
                break;
            }
            idx[a] = 0;
            a += 1;
            if a == 6 {
                return Ok(acc.iter().map(|s| s.sqrt()).sum());
            }
        }
    }
}
