//! Inductive construction of the polyhomogeneous coefficient table.
//!
//! For a scattering profile f_inf with potential phi_inf this module builds,
//! order by order, the coefficients of the late-time ansatz
//!
//!   f_[K]   = sum (log t)^l / t^k       f_{k,l}(y, p),
//!   phi_[K] = (1/t)   sum (log t)^l / t^k phi_{k,l}(x/t),
//!   rho_[K] = (1/t^3) sum (log t)^l / t^k rho_{k,l}(x/t),
//!
//! with y = x - t p + log t grad phi_inf(p). Each stage k computes the
//! integrated quantities P_{k,l}(w) = int f_{k,l} dy from lower-order data
//! (the phi_{k,.} contributions cancel under the y-integral), assembles
//! rho_{k,l} from the change-of-variables sum over H-compositions against the
//! Jacobian coefficients J_{k,l}, solves the free-space Poisson problem for
//! phi_{k,l}, and only then forms the force coefficients Psi_{k,l} and the
//! distribution coefficients f_{k,l} as expression trees.
//!
//! Distribution coefficients stay symbolic (6D grids are infeasible); density
//! coefficients are 3D grid fields obtained by y-quadrature per w-node.

pub mod expr;
pub mod series;

use crate::fields::{
    differentiate, interpolate_unchecked, read_snapshot, write_snapshot, Field3, Field3Vec, Grid3,
};
use crate::poisson::PoissonSolver;
use crate::profile::{build_base_fields, ScatteringProfile};
use anyhow::{ensure, Context, Result};
use expr::{
    add, add_many, mul, neg, phi, prof, scale, sub, vanishes_outside_support, PhaseExpr,
    PhiSource, Tape,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

pub(crate) fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product::<f64>().max(1.0)
}

fn binom(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// All (k1, l1, k2, l2) with k1+k2 = k, l1+l2 = l, 0 <= l_i <= k_i.
fn split_pairs(k: usize, l: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for k1 in 0..=k {
        let k2 = k - k1;
        for l1 in l.saturating_sub(k2)..=l.min(k1) {
            out.push((k1, l1, k2, l - l1));
        }
    }
    out
}

/// All per-axis count vectors [a0,a1,a2] with a0+a1+a2 = total.
fn axis_counts(total: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a0 in 0..=total {
        for a1 in 0..=total - a0 {
            out.push([a0, a1, total - a0 - a1]);
        }
    }
    out
}

fn multinomial(counts: [usize; 3]) -> f64 {
    factorial(counts.iter().sum()) / counts.iter().map(|&c| factorial(c)).product::<f64>()
}

fn hess_inf(i: usize, j: usize) -> PhaseExpr {
    let mut d = [0u8; 3];
    d[i] += 1;
    d[j] += 1;
    phi(0, 0, d)
}

fn y_power(a: [usize; 3]) -> PhaseExpr {
    let mut e = expr::one();
    for axis in 0..3 {
        for _ in 0..a[axis] {
            e = mul(e, expr::y(axis));
        }
    }
    e
}

fn grad_inf_power(b: [usize; 3]) -> PhaseExpr {
    let mut e = expr::one();
    for axis in 0..3 {
        for _ in 0..b[axis] {
            e = mul(e, series::grad_phi_inf(axis));
        }
    }
    e
}

/// Component j of Psi_{k,l}, optionally restricted to tensor rank >= min_rank
/// (rank 0 is the bare grad phi_{k,l} term; the integrated identities use the
/// rank >= 1 remainder).
fn psi_component(k: usize, l: usize, j: usize, min_rank: usize) -> PhaseExpr {
    let mut total = expr::zero();
    for (k1, l1, k2, l2) in split_pairs(k, l) {
        if k2 < min_rank {
            continue;
        }
        let weight = binom(k2, l2) * if l2 % 2 == 0 { 1.0 } else { -1.0 } / factorial(k2);
        // contract k2-l2 copies of y and l2 copies of grad phi_inf against
        // the symmetric derivative tensor of phi_{k1,l1}, free index j
        for a in axis_counts(k2 - l2) {
            for b in axis_counts(l2) {
                let mut d = [
                    (a[0] + b[0]) as u8,
                    (a[1] + b[1]) as u8,
                    (a[2] + b[2]) as u8,
                ];
                d[j] += 1;
                let term = mul(mul(y_power(a), grad_inf_power(b)), phi(k1 as u8, l1 as u8, d));
                total = add(total, scale(weight * multinomial(a) * multinomial(b), term));
            }
        }
    }
    total
}

/// Force-expansion coefficient Psi_{k,l}(y, p) as a vector of expressions.
pub fn build_psi(k: usize, l: usize) -> [PhaseExpr; 3] {
    [
        psi_component(k, l, 0, 0),
        psi_component(k, l, 1, 0),
        psi_component(k, l, 2, 0),
    ]
}

/// Momentum-expansion coefficient p_{k,l}(w, y) of the inversion of the
/// modified-coordinate map.
pub fn build_p_coeff(k: usize, l: usize) -> [PhaseExpr; 3] {
    assert!(k >= 1 && l <= k);
    let p = series::p_series(k);
    [p.get(0, k, l), p.get(1, k, l), p.get(2, k, l)]
}

/// Jacobian-expansion coefficient J_{k,l}(w, y) of t^3 det(dp/dy).
pub fn build_jacobian_coeff(k: usize, l: usize) -> PhaseExpr {
    assert!(l <= k);
    let delta = series::p_series(k);
    series::jacobian_series(k, &delta).get(k, l)
}

/// Ordered tuples (k_i, l_i), i = 1..m, with k_i >= 1, sum k_i = k,
/// sum l_i = l, 0 <= l_i <= k_i.
fn ordered_tuples(k: usize, l: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        k: usize,
        l: usize,
        m: usize,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if m == 0 {
            if k == 0 && l == 0 {
                out.push(cur.clone());
            }
            return;
        }
        if k < m {
            return;
        }
        for ki in 1..=k - (m - 1) {
            for li in 0..=ki.min(l) {
                cur.push((ki, li));
                rec(k - ki, l - li, m - 1, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(k, l, m, &mut Vec::new(), &mut out);
    out
}

fn apply_h_with(p: &[[PhaseExpr; 3]], k: usize, l: usize, h: PhaseExpr) -> PhaseExpr {
    if k == 0 {
        assert_eq!(l, 0);
        return h;
    }
    let mut total = expr::zero();
    for m in 1..=k {
        let mut msum = expr::zero();
        for tuple in ordered_tuples(k, l, m) {
            // contract the m momentum-coefficient vectors against the m-th
            // q-gradient of h, brute force over the 3^m index assignments
            for mut assign in 0..3usize.pow(m as u32) {
                let mut coeff = expr::one();
                let mut deriv = h;
                for &(ki, li) in &tuple {
                    let axis = assign % 3;
                    assign /= 3;
                    coeff = mul(coeff, p[tri(ki) + li][axis]);
                    deriv = expr::diff_q(deriv, axis);
                }
                msum = add(msum, mul(coeff, deriv));
            }
        }
        total = add(total, scale(1.0 / factorial(m), msum));
    }
    total
}

/// Change-of-variables operator H_{k,l}[h](w, y): the Taylor transport of h
/// from p = w + sum p_{k,l} ... back to the base point w.
pub fn apply_h(k: usize, l: usize, h: PhaseExpr) -> PhaseExpr {
    let pser = series::p_series(k.max(1));
    let mut p = Vec::new();
    for kk in 0..=k.max(1) {
        for ll in 0..=kk {
            p.push([pser.get(0, kk, ll), pser.get(1, kk, ll), pser.get(2, kk, ll)]);
        }
    }
    apply_h_with(&p, k, l, h)
}

/// The complete symbolic side of the table: every expression the numeric
/// induction evaluates, tri-indexed by (k, l).
pub struct Symbols {
    pub order: usize,
    pub toporder_as_printed: bool,
    pub f: Vec<PhaseExpr>,
    pub psi: Vec<[PhaseExpr; 3]>,
    pub p: Vec<[PhaseExpr; 3]>,
    pub j: Vec<PhaseExpr>,
    /// integrand whose y-quadrature gives P_{k,l} - (l+1)/k P_{k,l+1}
    pub p_script_integrand: Vec<PhaseExpr>,
    /// integrand whose y-quadrature gives rho_{k,l} + P_{k,l}
    pub rho_integrand: Vec<PhaseExpr>,
}

impl Symbols {
    pub fn f(&self, k: usize, l: usize) -> PhaseExpr {
        self.f[tri(k) + l]
    }
    pub fn psi(&self, k: usize, l: usize) -> &[PhaseExpr; 3] {
        &self.psi[tri(k) + l]
    }
    pub fn p_script_integrand(&self, k: usize, l: usize) -> PhaseExpr {
        self.p_script_integrand[tri(k) + l]
    }
    pub fn rho_integrand(&self, k: usize, l: usize) -> PhaseExpr {
        self.rho_integrand[tri(k) + l]
    }
}

/// Distribution coefficient f_{k,l}(y, p) from the downward-in-l recursion.
pub fn build_f_coeff(k: usize, l: usize) -> PhaseExpr {
    build_symbols(k, false).f(k, l)
}

/// The (k, l) bracket of the layered Vlasov residual of the order-K ansatz:
/// -k f_{k,l} + (l+1) f_{k,l+1} minus the transported sums. Vanishes
/// identically for every k <= symbols.order by construction of the f
/// recursion; the expression is assembled independently here so that tests
/// can evaluate the designed cancellation term by term.
pub fn layer_bracket(symbols: &Symbols, k: usize, l: usize) -> PhaseExpr {
    assert!(k >= 1 && l <= k && k <= symbols.order);
    let f = |k: usize, l: usize| symbols.f(k, l);
    let mut e = scale(-(k as f64), f(k, l));
    if l + 1 <= k {
        e = add(e, scale((l + 1) as f64, f(k, l + 1)));
    }
    for (k1, l1, k2, l2) in split_pairs(k, l) {
        if k2 >= 1 {
            for i in 0..3 {
                e = sub(e, mul(expr::diff_y(f(k1, l1), i), symbols.psi(k2, l2)[i]));
            }
        }
    }
    if l >= 1 {
        for (k1, l1, k2, l2) in split_pairs(k - 1, l - 1) {
            for i in 0..3 {
                for j in 0..3 {
                    e = add(
                        e,
                        mul(
                            mul(expr::diff_y(f(k1, l1), i), symbols.psi(k2, l2)[j]),
                            hess_inf(i, j),
                        ),
                    );
                }
            }
        }
    }
    for (k1, l1, k2, l2) in split_pairs(k - 1, l) {
        for i in 0..3 {
            e = add(e, mul(expr::diff_q(f(k1, l1), i), symbols.psi(k2, l2)[i]));
        }
    }
    e
}

pub fn build_symbols(order: usize, toporder_as_printed: bool) -> Symbols {
    let len = tri(order + 1);
    let pser = series::p_series(order.max(1));
    let jser = series::jacobian_series(order.max(1), &pser);
    let mut p = Vec::with_capacity(len);
    let mut j = Vec::with_capacity(len);
    let mut psi = Vec::with_capacity(len);
    for k in 0..=order {
        for l in 0..=k {
            p.push([pser.get(0, k, l), pser.get(1, k, l), pser.get(2, k, l)]);
            j.push(jser.get(k, l));
            psi.push(build_psi(k, l));
        }
    }

    // f recursion: f_{0,0} = f_inf; for k >= 1 the l = k coefficient comes
    // from the log-degree balance, then l descends with the (l+1) ladder term
    let mut f = vec![expr::zero(); len];
    f[0] = prof([0; 3], [0; 3]);
    let dyf_dot_psi = |f: PhaseExpr, psi: &[PhaseExpr; 3]| {
        add_many((0..3).map(|i| mul(expr::diff_y(f, i), psi[i])))
    };
    let dqf_dot_psi = |f: PhaseExpr, psi: &[PhaseExpr; 3]| {
        add_many((0..3).map(|i| mul(expr::diff_q(f, i), psi[i])))
    };
    let dyf_psi_hess = |f: PhaseExpr, psi: &[PhaseExpr; 3]| {
        add_many((0..3).flat_map(|i| {
            (0..3).map(move |jj| mul(mul(expr::diff_y(f, i), psi[jj]), hess_inf(i, jj)))
        }))
    };
    for k in 1..=order {
        let mut e = expr::zero();
        for (k1, l1, k2, l2) in split_pairs(k, k) {
            if k1 <= k - 1 {
                e = sub(e, dyf_dot_psi(f[tri(k1) + l1], &psi[tri(k2) + l2]));
            }
        }
        for (k1, l1, k2, l2) in split_pairs(k - 1, k - 1) {
            e = add(e, dyf_psi_hess(f[tri(k1) + l1], &psi[tri(k2) + l2]));
        }
        f[tri(k) + k] = scale(1.0 / k as f64, e);
        for l in (0..k).rev() {
            let mut e = scale((l + 1) as f64, f[tri(k) + l + 1]);
            for (k1, l1, k2, l2) in split_pairs(k, l) {
                if k1 <= k - 1 {
                    e = sub(e, dyf_dot_psi(f[tri(k1) + l1], &psi[tri(k2) + l2]));
                }
            }
            if l >= 1 {
                for (k1, l1, k2, l2) in split_pairs(k - 1, l - 1) {
                    e = add(e, dyf_psi_hess(f[tri(k1) + l1], &psi[tri(k2) + l2]));
                }
            }
            for (k1, l1, k2, l2) in split_pairs(k - 1, l) {
                e = add(e, dqf_dot_psi(f[tri(k1) + l1], &psi[tri(k2) + l2]));
            }
            f[tri(k) + l] = scale(1.0 / k as f64, e);
        }
    }

    // Integrated forms for P_{k,l} = int f_{k,l} dy. Terms of shape
    // (d_y f) . V are integrated by parts to -f (d_y . V), so every pure
    // q-coefficient drops structurally and only phi_{k',l'} with k' <= k-1
    // remain referenced.
    let ibp_psi_hess = |fe: PhaseExpr, psi: &[PhaseExpr; 3]| {
        neg(add_many((0..3).flat_map(|i| {
            (0..3).map(move |jj| mul(mul(fe, expr::diff_y(psi[jj], i)), hess_inf(i, jj)))
        })))
    };
    let ibp_tail = |fe: PhaseExpr, k2: usize, l2: usize| {
        // -int (d_y^i f) tail^i dy = +int f d_y^i tail^i dy
        add_many((0..3).map(|i| mul(fe, expr::diff_y(psi_component(k2, l2, i, 1), i))))
    };
    let mut p_script_integrand = vec![expr::zero(); len];
    let mut rho_integrand = vec![expr::zero(); len];
    for k in 1..=order {
        for l in (0..=k).rev() {
            let mut e = expr::zero();
            if l == k {
                for (k1, l1, k2, l2) in split_pairs(k - 1, k - 1) {
                    e = add(e, ibp_psi_hess(f[tri(k1) + l1], &psi[tri(k2) + l2]));
                }
                for (k1, l1, k2, l2) in split_pairs(k, k) {
                    if k2 >= 1 {
                        e = add(e, ibp_tail(f[tri(k1) + l1], k2, l2));
                    }
                }
            } else {
                if l >= 1 {
                    for (k1, l1, k2, l2) in split_pairs(k - 1, l - 1) {
                        e = add(e, ibp_psi_hess(f[tri(k1) + l1], &psi[tri(k2) + l2]));
                    }
                }
                for (k1, l1, k2, l2) in split_pairs(k - 1, l) {
                    e = add(e, dqf_dot_psi(f[tri(k1) + l1], &psi[tri(k2) + l2]));
                }
                for (k1, l1, k2, l2) in split_pairs(k, l) {
                    if k2 >= 1 {
                        e = add(e, ibp_tail(f[tri(k1) + l1], k2, l2));
                    }
                }
            }
            p_script_integrand[tri(k) + l] = scale(1.0 / k as f64, e);

            // rho_{k,l} + P_{k,l} = sum over k1+k2+k3 = k with k1 <= k-1 of
            // int H_{k2,l2}[f_{k1,l1}] J_{k3,l3} dy
            let mut r = expr::zero();
            for k1 in 0..=k - 1 {
                for l1 in 0..=k1.min(l) {
                    if toporder_as_printed && l1 + 1 > l {
                        continue;
                    }
                    for (k2, l2, k3, l3) in split_pairs(k - k1, l - l1) {
                        let hf = apply_h_with(&p, k2, l2, f[tri(k1) + l1]);
                        r = add(r, mul(hf, j[tri(k3) + l3]));
                    }
                }
            }
            rho_integrand[tri(k) + l] = r;
        }
    }

    Symbols {
        order,
        toporder_as_printed,
        f,
        psi,
        p,
        j,
        p_script_integrand,
        rho_integrand,
    }
}

// --- numeric table -------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TableOptions {
    /// +1.0 for the attractive (gravitational) sign of the force, -1.0 for
    /// the repulsive (plasma) sign; multiplies every Poisson source.
    pub gravity_sign: f64,
    /// Restrict the top-order density sum to l1 <= l-1 as printed in the
    /// source identity, instead of the unrestricted k1 <= k-1 form that the
    /// integrated-identity substitution produces. Default false.
    pub toporder_as_printed: bool,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            gravity_sign: 1.0,
            toporder_as_printed: false,
        }
    }
}

/// One (k, l) slot of the coefficient table.
pub struct TableEntry {
    pub f: PhaseExpr,
    pub psi: [PhaseExpr; 3],
    pub p_coeff: [PhaseExpr; 3],
    pub j_coeff: PhaseExpr,
    /// P_{k,l}(w) = int f_{k,l}(y, w) dy from the integrated recursion
    pub p_script: Field3,
    pub rho: Field3,
    pub phi: Field3,
    pub grad_phi: Field3Vec,
    deriv_cache: Mutex<HashMap<[u8; 3], Arc<Field3>>>,
    max_order: usize,
}

impl TableEntry {
    /// Derivative tensor component d^I phi_{k,l}; order 1 is the kernel
    /// gradient, higher orders differentiate the gradient components.
    pub fn phi_derivative(&self, i: [usize; 3]) -> Result<Arc<Field3>> {
        let total: usize = i.iter().sum();
        ensure!(
            total <= self.max_order,
            "phi derivative order {total} exceeds maximum {}",
            self.max_order
        );
        let key = [i[0] as u8, i[1] as u8, i[2] as u8];
        if let Some(f) = self.deriv_cache.lock().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let field = if total == 0 {
            self.phi.clone()
        } else {
            let axis = (0..3).find(|&a| i[a] > 0).unwrap();
            let mut rest = i;
            rest[axis] -= 1;
            differentiate(&self.grad_phi.comps[axis], rest, self.max_order)?
        };
        let arc = Arc::new(field);
        self.deriv_cache.lock().unwrap().insert(key, arc.clone());
        Ok(arc)
    }
}

struct EntriesPhi<'a> {
    entries: &'a [TableEntry],
}

impl PhiSource for EntriesPhi<'_> {
    fn phi_value(&self, k: u8, l: u8, d: [u8; 3], q: [f64; 3]) -> f64 {
        let e = &self.entries[tri(k as usize) + l as usize];
        let fld = e
            .phi_derivative([d[0] as usize, d[1] as usize, d[2] as usize])
            .expect("phi derivative within table order");
        interpolate_unchecked(&fld, q)
    }
}

pub struct CoefficientTable {
    profile: ScatteringProfile,
    grid: Grid3,
    order: usize,
    options: TableOptions,
    symbols: Symbols,
    entries: Vec<TableEntry>,
}

impl PhiSource for CoefficientTable {
    fn phi_value(&self, k: u8, l: u8, d: [u8; 3], q: [f64; 3]) -> f64 {
        EntriesPhi { entries: &self.entries }.phi_value(k, l, d, q)
    }
}

impl CoefficientTable {
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn grid(&self) -> Grid3 {
        self.grid
    }
    pub fn profile(&self) -> &ScatteringProfile {
        &self.profile
    }
    pub fn options(&self) -> TableOptions {
        self.options
    }
    pub fn symbols(&self) -> &Symbols {
        &self.symbols
    }
    pub fn entry(&self, k: usize, l: usize) -> &TableEntry {
        assert!(l <= k && k <= self.order);
        &self.entries[tri(k) + l]
    }

    /// Direct y-quadrature of the symbolic f_{k,l}; the cancellation
    /// invariant says this matches the stored P_{k,l}.
    pub fn direct_f_integral(&self, k: usize, l: usize) -> Result<Field3> {
        let fields = integrate_over_y(
            &self.profile,
            &EntriesPhi { entries: &self.entries },
            self.grid,
            &[self.symbols.f(k, l)],
        )?;
        Ok(fields.into_iter().next().unwrap())
    }

    /// Density coefficient via the generic (non-top-order) identity, which
    /// also sums the k1 = k term -f_{k,l}: an independent recomputation used
    /// to verify the stored rho_{k,l}.
    pub fn rho_via_full_sum(&self, k: usize, l: usize) -> Result<Field3> {
        ensure!(k >= 1, "generic density identity applies to k >= 1");
        let mut integrand = expr::zero();
        for k1 in 0..=k {
            for l1 in 0..=k1.min(l) {
                for (k2, l2, k3, l3) in split_pairs(k - k1, l - l1) {
                    let hf = apply_h_with(&self.symbols.p, k2, l2, self.symbols.f(k1, l1));
                    integrand = add(integrand, mul(hf, self.symbols.j[tri(k3) + l3]));
                }
            }
        }
        let fields = integrate_over_y(
            &self.profile,
            &EntriesPhi { entries: &self.entries },
            self.grid,
            &[integrand],
        )?;
        Ok(fields.into_iter().next().unwrap())
    }
}

/// Refinement of the internal y-quadrature lattice relative to the stored
/// field grid. The integrands are analytic in y (profile jets times values
/// frozen at the w-node), so refining y costs no interpolation and pushes the
/// trapezoid defect of the exact-cancellation identities well below the grid
/// resolution of the fields themselves.
const Y_OVERSAMPLE: usize = 2;

/// y-quadrature of each root expression per w-node of `grid`. Every root must
/// carry a profile factor (vanish outside the support ball) so the integral
/// truncates to |y| <= B exactly.
fn integrate_over_y(
    profile: &ScatteringProfile,
    phi_src: &dyn PhiSource,
    grid: Grid3,
    roots: &[PhaseExpr],
) -> Result<Vec<Field3>> {
    for &r in roots {
        ensure!(
            vanishes_outside_support(r),
            "integrand is not supported in the profile ball"
        );
    }
    let tape = Tape::compile(roots);
    let b = profile.support_radius();
    let n = grid.n;
    let fine = Grid3::new(
        Y_OVERSAMPLE * grid.n,
        grid.origin,
        grid.spacing / Y_OVERSAMPLE as f64,
    )?;
    let h = fine.spacing;
    // y index window: nodes with |y_a| <= b; anything outside has |y| > b
    let lo = ((-b - fine.origin[0]) / h).ceil().max(0.0) as usize;
    let hi = (((b - fine.origin[0]) / h).floor() as usize).min(fine.n - 1);
    let cell = h * h * h;

    let rows: Vec<Vec<f64>> = (0..n * n * n)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new(), Vec::new()),
            |(slots, out, acc), widx| {
                let (i, j, k) = (widx % n, (widx / n) % n, widx / (n * n));
                let w = grid.node(i, j, k);
                acc.clear();
                acc.resize(roots.len(), 0.0);
                if w[0] * w[0] + w[1] * w[1] + w[2] * w[2] > b * b {
                    return acc.clone();
                }
                tape.eval_q_prefix(phi_src, w, slots);
                for yk in lo..=hi {
                    for yj in lo..=hi {
                        for yi in lo..=hi {
                            let y = fine.node(yi, yj, yk);
                            tape.eval_at_y(profile, y, w, slots, out);
                            for (a, v) in acc.iter_mut().zip(out.iter()) {
                                *a += v;
                            }
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a *= cell;
                }
                acc.clone()
            },
        )
        .collect();

    let mut fields = vec![Field3::zeros(grid); roots.len()];
    for (widx, row) in rows.iter().enumerate() {
        for (r, &v) in row.iter().enumerate() {
            fields[r].values[widx] = v;
        }
    }
    for f in &fields {
        f.assert_finite()?;
    }
    Ok(fields)
}

/// Build the full order-K coefficient table on `grid`.
pub fn build_table(
    profile: &ScatteringProfile,
    order: usize,
    grid: Grid3,
) -> Result<CoefficientTable> {
    build_table_with(profile, order, grid, TableOptions::default())
}

pub fn build_table_with(
    profile: &ScatteringProfile,
    order: usize,
    grid: Grid3,
    options: TableOptions,
) -> Result<CoefficientTable> {
    ensure!(
        2 * order + 4 <= profile.max_order(),
        "order {order} needs {} profile derivatives, only {} available",
        2 * order + 4,
        profile.max_order()
    );
    ensure!(
        options.gravity_sign == 1.0 || options.gravity_sign == -1.0,
        "gravity sign must be +1 or -1"
    );
    grid.check_support_margin(profile.support_radius())?;

    let symbols = build_symbols(order, options.toporder_as_printed);
    let base = build_base_fields(profile, grid)?;
    let sigma = options.gravity_sign;
    let solver = PoissonSolver::new();

    let mut entries: Vec<TableEntry> = Vec::with_capacity(tri(order + 1));
    entries.push(TableEntry {
        f: symbols.f(0, 0),
        psi: *symbols.psi(0, 0),
        p_coeff: symbols.p[0],
        j_coeff: symbols.j[0],
        p_script: base.rho_inf.scale(-1.0),
        rho: base.rho_inf.clone(),
        phi: base.phi_inf.scale(sigma),
        grad_phi: Field3Vec {
            comps: [
                base.grad_phi_inf.comps[0].scale(sigma),
                base.grad_phi_inf.comps[1].scale(sigma),
                base.grad_phi_inf.comps[2].scale(sigma),
            ],
        },
        deriv_cache: Mutex::new(HashMap::new()),
        max_order: profile.max_order(),
    });

    for k in 1..=order {
        // one quadrature pass for the whole stage: P- and rho-integrands for
        // every l reference only entries of order <= k-1
        let mut roots = Vec::with_capacity(2 * (k + 1));
        for l in 0..=k {
            roots.push(symbols.p_script_integrand[tri(k) + l]);
            roots.push(symbols.rho_integrand[tri(k) + l]);
        }
        let fields = integrate_over_y(profile, &EntriesPhi { entries: &entries }, grid, &roots)?;

        // descend in l to resolve the (l+1)/k ladder in P
        let mut p_scripts: Vec<Option<Field3>> = vec![None; k + 1];
        for l in (0..=k).rev() {
            let mut ps = fields[2 * l].clone();
            if l < k {
                ps.axpy((l + 1) as f64 / k as f64, p_scripts[l + 1].as_ref().unwrap());
            }
            p_scripts[l] = Some(ps);
        }

        for l in 0..=k {
            let p_script = p_scripts[l].take().unwrap();
            let mut rho = fields[2 * l + 1].clone();
            rho.axpy(-1.0, &p_script);
            let sol = solver
                .solve_free_space(&rho.scale(sigma))
                .with_context(|| format!("poisson solve for phi_{k},{l}"))?;
            entries.push(TableEntry {
                f: symbols.f(k, l),
                psi: *symbols.psi(k, l),
                p_coeff: symbols.p[tri(k) + l],
                j_coeff: symbols.j[tri(k) + l],
                p_script,
                rho,
                phi: sol.phi,
                grad_phi: sol.grad_phi,
                deriv_cache: Mutex::new(HashMap::new()),
                max_order: profile.max_order(),
            });
        }
    }

    Ok(CoefficientTable {
        profile: profile.clone(),
        grid,
        order,
        options,
        symbols,
        entries,
    })
}

// --- serialization -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    order: usize,
    options: TableOptions,
    grid_n: usize,
    grid_origin: [f64; 3],
    grid_spacing: f64,
    profile: ScatteringProfile,
    checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn entry_dump(e: &TableEntry) -> String {
    let mut s = String::new();
    s.push_str(&format!("f {}\n", expr::canonical_dump(e.f)));
    for a in 0..3 {
        s.push_str(&format!("psi{a} {}\n", expr::canonical_dump(e.psi[a])));
    }
    for a in 0..3 {
        s.push_str(&format!("p{a} {}\n", expr::canonical_dump(e.p_coeff[a])));
    }
    s.push_str(&format!("j {}\n", expr::canonical_dump(e.j_coeff)));
    s
}

/// Write the table to a directory: a JSON manifest with checksums, one
/// snapshot per grid field, and a canonical text dump of each entry's
/// expressions for golden-file comparisons.
pub fn save_table(table: &CoefficientTable, dir: &Path) -> Result<()> {
    fn put_field(
        dir: &Path,
        checksums: &mut BTreeMap<String, String>,
        name: String,
        f: &Field3,
    ) -> Result<()> {
        let path = dir.join(&name);
        write_snapshot(f, &path)?;
        checksums.insert(name, sha256_hex(&std::fs::read(&path)?));
        Ok(())
    }
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    for k in 0..=table.order {
        for l in 0..=k {
            let e = table.entry(k, l);
            put_field(dir, &mut checksums, format!("rho_{k}_{l}.vpf3"), &e.rho)?;
            put_field(dir, &mut checksums, format!("phi_{k}_{l}.vpf3"), &e.phi)?;
            put_field(dir, &mut checksums, format!("pscript_{k}_{l}.vpf3"), &e.p_script)?;
            for a in 0..3 {
                put_field(
                    dir,
                    &mut checksums,
                    format!("gradphi_{k}_{l}_{a}.vpf3"),
                    &e.grad_phi.comps[a],
                )?;
            }
            let name = format!("exprs_{k}_{l}.txt");
            let dump = entry_dump(e);
            std::fs::write(dir.join(&name), &dump)?;
            checksums.insert(name, sha256_hex(dump.as_bytes()));
        }
    }
    let manifest = Manifest {
        format: "coefficient-table/1".into(),
        order: table.order,
        options: table.options,
        grid_n: table.grid.n,
        grid_origin: table.grid.origin,
        grid_spacing: table.grid.spacing,
        profile: table.profile.clone(),
        checksums,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a table directory: grid fields come from the snapshots (checksummed),
/// expressions are rebuilt deterministically from the recursion and verified
/// against the stored dumps.
pub fn load_table(dir: &Path) -> Result<CoefficientTable> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .context("parsing table manifest")?;
    ensure!(
        manifest.format == "coefficient-table/1",
        "unknown table format {:?}",
        manifest.format
    );
    let grid = Grid3::new(manifest.grid_n, manifest.grid_origin, manifest.grid_spacing)?;
    for (name, sum) in &manifest.checksums {
        let bytes = std::fs::read(dir.join(name))
            .with_context(|| format!("missing table file {name}"))?;
        ensure!(
            &sha256_hex(&bytes) == sum,
            "checksum mismatch for table file {name}"
        );
    }
    let symbols = build_symbols(manifest.order, manifest.options.toporder_as_printed);
    let mut entries = Vec::with_capacity(tri(manifest.order + 1));
    for k in 0..=manifest.order {
        for l in 0..=k {
            let read = |stem: String| -> Result<Field3> {
                let f = read_snapshot(&dir.join(&stem))?;
                ensure!(f.grid == grid, "grid mismatch in {stem}");
                Ok(f)
            };
            let e = TableEntry {
                f: symbols.f(k, l),
                psi: *symbols.psi(k, l),
                p_coeff: symbols.p[tri(k) + l],
                j_coeff: symbols.j[tri(k) + l],
                p_script: read(format!("pscript_{k}_{l}.vpf3"))?,
                rho: read(format!("rho_{k}_{l}.vpf3"))?,
                phi: read(format!("phi_{k}_{l}.vpf3"))?,
                grad_phi: Field3Vec {
                    comps: [
                        read(format!("gradphi_{k}_{l}_0.vpf3"))?,
                        read(format!("gradphi_{k}_{l}_1.vpf3"))?,
                        read(format!("gradphi_{k}_{l}_2.vpf3"))?,
                    ],
                },
                deriv_cache: Mutex::new(HashMap::new()),
                max_order: manifest.profile.max_order(),
            };
            let stored = std::fs::read_to_string(dir.join(format!("exprs_{k}_{l}.txt")))?;
            ensure!(
                stored == entry_dump(&e),
                "expression dump mismatch for entry ({k},{l}): table was built \
                 by an incompatible recursion"
            );
            entries.push(e);
        }
    }
    Ok(CoefficientTable {
        profile: manifest.profile,
        grid,
        order: manifest.order,
        options: manifest.options,
        symbols,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_pairs_respects_bounds() {
        assert_eq!(split_pairs(1, 1), vec![(0, 0, 1, 1), (1, 1, 0, 0)]);
        for (k1, l1, k2, l2) in split_pairs(3, 2) {
            assert!(l1 <= k1 && l2 <= k2);
            assert_eq!(k1 + k2, 3);
            assert_eq!(l1 + l2, 2);
        }
    }

    /// Synthetic smooth fields phi_{k,l} with exact derivatives for testing.
    struct PolyPhi;

    fn mono_value(pows: [u8; 3], coef: f64, d: [u8; 3], q: [f64; 3]) -> f64 {
        let mut v = coef;
        for a in 0..3 {
            let (p, da) = (pows[a] as i32, d[a] as i32);
            if da > p {
                return 0.0;
            }
            for m in 0..da {
                v *= (p - m) as f64;
            }
            v *= q[a].powi(p - da);
        }
        v
    }

    impl PhiSource for PolyPhi {
        fn phi_value(&self, k: u8, l: u8, d: [u8; 3], q: [f64; 3]) -> f64 {
            let c = 1.0 + k as f64 + 0.5 * l as f64;
            mono_value([2, 1, 0], c, d, q)
                + mono_value([0, 1, 2], 0.5 * c, d, q)
                + mono_value([1, 1, 1], 1.0, d, q)
                + mono_value([1, 0, 0], 2.0 - c, d, q)
        }
    }

    fn phi_val(k: u8, l: u8, d: [u8; 3], q: [f64; 3]) -> f64 {
        PolyPhi.phi_value(k, l, d, q)
    }

    fn eval(e: PhaseExpr, y: [f64; 3], q: [f64; 3]) -> f64 {
        let profile = ScatteringProfile::default_desk();
        Tape::compile(&[e]).eval_one(&profile, &PolyPhi, y, q)
    }

    #[test]
    fn psi_base_coefficients() {
        // Psi_{0,0} = grad phi_inf
        let psi00 = build_psi(0, 0);
        for j in 0..3 {
            assert_eq!(psi00[j], series::grad_phi_inf(j));
        }
        let y = [0.3, -0.7, 0.2];
        let q = [0.5, 0.1, -0.4];
        let e = |a: usize| {
            let mut d = [0u8; 3];
            d[a] = 1;
            d
        };
        let hess = |i: usize, j: usize, q| {
            let mut d = [0u8; 3];
            d[i] += 1;
            d[j] += 1;
            phi_val(0, 0, d, q)
        };
        for j in 0..3 {
            // Psi_{1,0} = grad phi_{1,0} + y . hess phi_inf
            let psi10 = build_psi(1, 0);
            let want: f64 =
                phi_val(1, 0, e(j), q) + (0..3).map(|a| y[a] * hess(a, j, q)).sum::<f64>();
            assert!((eval(psi10[j], y, q) - want).abs() < 1e-12 * (1.0 + want.abs()));
            // Psi_{1,1} = grad phi_{1,1} - grad phi_inf . hess phi_inf
            let psi11 = build_psi(1, 1);
            let want: f64 = phi_val(1, 1, e(j), q)
                - (0..3).map(|a| phi_val(0, 0, e(a), q) * hess(a, j, q)).sum::<f64>();
            assert!((eval(psi11[j], y, q) - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn h_operator_first_order() {
        // H_{1,1}[h] = grad phi_inf . grad_q h
        let h = prof([0; 3], [0; 3]);
        let got = apply_h(1, 1, h);
        let want = add_many((0..3).map(|a| {
            mul(series::grad_phi_inf(a), prof([0; 3], {
                let mut d = [0u8; 3];
                d[a] = 1;
                d
            }))
        }));
        assert_eq!(got, want);
        assert_eq!(apply_h(0, 0, h), h);
        assert_eq!(apply_h(2, 1, expr::zero()), expr::zero());
    }

    #[test]
    fn zero_seed_kills_recursion() {
        // with f_inf replaced by zero every f_{k,l} vanishes; emulate by
        // checking the recursion is linear in the profile leaf: the only
        // non-profile entries are the trivial ones
        let sym = build_symbols(2, false);
        for k in 0..=2 {
            for l in 0..=k {
                assert!(vanishes_outside_support(sym.f(k, l)));
                assert!(vanishes_outside_support(sym.p_script_integrand[tri(k) + l]));
                if k >= 1 {
                    assert!(vanishes_outside_support(sym.rho_integrand[tri(k) + l]));
                }
            }
        }
    }

    #[test]
    fn first_stage_p_script_integrand_is_structurally_zero_at_top_log() {
        // int f_{1,1} dy = 0: after integration by parts every term carries a
        // y-derivative of a q-only coefficient
        let sym = build_symbols(1, false);
        assert_eq!(sym.p_script_integrand[tri(1) + 1], expr::zero());
    }

    #[test]
    fn symbols_are_lower_triangular_in_order() {
        let s1 = build_symbols(1, false);
        let s2 = build_symbols(2, false);
        for k in 0..=1 {
            for l in 0..=k {
                assert_eq!(s1.f(k, l), s2.f(k, l));
                assert_eq!(s1.psi(k, l), s2.psi(k, l));
                assert_eq!(s1.j[tri(k) + l], s2.j[tri(k) + l]);
                assert_eq!(
                    s1.p_script_integrand[tri(k) + l],
                    s2.p_script_integrand[tri(k) + l]
                );
                assert_eq!(s1.rho_integrand[tri(k) + l], s2.rho_integrand[tri(k) + l]);
            }
        }
    }
}
