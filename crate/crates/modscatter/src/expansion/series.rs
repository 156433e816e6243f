//! Truncated polyhomogeneous series with expression-valued coefficients.
//!
//! A `Series` collects coefficients c_{k,l}(y, q) of (log t)^l / t^k for
//! 0 <= l <= k <= kmax. Products truncate at kmax. `compose` Taylor-expands a
//! function of q around the base point when its argument is perturbed by a
//! series with no constant term; this drives both the momentum expansion
//! p = x/t + sum p_{k,l} (log t)^l / t^k and the Jacobian expansion of
//! t^3 det(dp/dy) as a geometric series.

use super::expr::{self, add, mul, neg, scale, PhaseExpr};

fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Double series sum_{0<=l<=k<=kmax} c_{k,l} (log t)^l / t^k.
#[derive(Clone)]
pub struct Series {
    pub kmax: usize,
    c: Vec<PhaseExpr>,
}

impl Series {
    pub fn zeros(kmax: usize) -> Series {
        Series {
            kmax,
            c: vec![expr::zero(); tri(kmax + 1)],
        }
    }

    /// Series with a single nonzero coefficient at (k, l).
    pub fn unit(kmax: usize, k: usize, l: usize, e: PhaseExpr) -> Series {
        let mut s = Series::zeros(kmax);
        s.set(k, l, e);
        s
    }

    pub fn get(&self, k: usize, l: usize) -> PhaseExpr {
        assert!(l <= k && k <= self.kmax);
        self.c[tri(k) + l]
    }

    pub fn set(&mut self, k: usize, l: usize, e: PhaseExpr) {
        assert!(l <= k && k <= self.kmax);
        self.c[tri(k) + l] = e;
    }

    pub fn add(&self, other: &Series) -> Series {
        assert_eq!(self.kmax, other.kmax);
        Series {
            kmax: self.kmax,
            c: self.c.iter().zip(&other.c).map(|(&a, &b)| add(a, b)).collect(),
        }
    }

    /// Truncated product: orders above kmax are dropped.
    pub fn mul(&self, other: &Series) -> Series {
        assert_eq!(self.kmax, other.kmax);
        let mut out = Series::zeros(self.kmax);
        for k1 in 0..=self.kmax {
            for l1 in 0..=k1 {
                let a = self.get(k1, l1);
                if a == expr::zero() {
                    continue;
                }
                for k2 in 0..=self.kmax - k1 {
                    for l2 in 0..=k2 {
                        let b = other.get(k2, l2);
                        if b == expr::zero() {
                            continue;
                        }
                        let (k, l) = (k1 + k2, l1 + l2);
                        out.set(k, l, add(out.get(k, l), mul(a, b)));
                    }
                }
            }
        }
        out
    }

    /// Multiply every coefficient by a fixed expression.
    pub fn mul_expr(&self, e: PhaseExpr) -> Series {
        Series {
            kmax: self.kmax,
            c: self.c.iter().map(|&a| mul(a, e)).collect(),
        }
    }

    pub fn scale(&self, f: f64) -> Series {
        Series {
            kmax: self.kmax,
            c: self.c.iter().map(|&a| scale(f, a)).collect(),
        }
    }

    /// Shift all indices by (k0, l0): multiplication by (log t)^{l0} / t^{k0}.
    pub fn shifted(&self, k0: usize, l0: usize) -> Series {
        assert!(l0 <= k0);
        let mut out = Series::zeros(self.kmax);
        for k in 0..=self.kmax.saturating_sub(k0) {
            for l in 0..=k {
                out.set(k + k0, l + l0, self.get(k, l));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|&e| e == expr::zero())
    }
}

/// Vector-valued series (one `Series` per spatial component).
#[derive(Clone)]
pub struct Series3 {
    pub comps: [Series; 3],
}

impl Series3 {
    pub fn zeros(kmax: usize) -> Series3 {
        Series3 {
            comps: [Series::zeros(kmax), Series::zeros(kmax), Series::zeros(kmax)],
        }
    }

    pub fn get(&self, axis: usize, k: usize, l: usize) -> PhaseExpr {
        self.comps[axis].get(k, l)
    }
}

/// Taylor composition g(q + delta) as a series, where `g` is an expression in
/// q alone (no y, no profile leaves) and `delta` has no constant term:
/// sum_{|alpha| <= kmax} (d_q^alpha g)(q) / alpha! * prod_a delta_a^{alpha_a}.
pub fn compose(g: PhaseExpr, delta: &Series3, kmax: usize) -> Series {
    for a in 0..3 {
        assert_eq!(delta.comps[a].get(0, 0), expr::zero(), "delta must vanish at order 0");
    }
    // powers of each component up to kmax
    let mut pows: Vec<Vec<Series>> = Vec::with_capacity(3);
    for a in 0..3 {
        let mut row = vec![Series::unit(kmax, 0, 0, expr::one())];
        for m in 1..=kmax {
            let prev = row[m - 1].clone();
            row.push(prev.mul(&delta.comps[a]));
        }
        pows.push(row);
    }
    let mut out = Series::zeros(kmax);
    for a0 in 0..=kmax {
        for a1 in 0..=kmax - a0 {
            for a2 in 0..=kmax - a0 - a1 {
                // d_q^alpha g
                let mut gd = g;
                for _ in 0..a0 {
                    gd = expr::diff_q(gd, 0);
                }
                for _ in 0..a1 {
                    gd = expr::diff_q(gd, 1);
                }
                for _ in 0..a2 {
                    gd = expr::diff_q(gd, 2);
                }
                if gd == expr::zero() {
                    continue;
                }
                let inv_fact = 1.0 / (factorial(a0) * factorial(a1) * factorial(a2));
                let prod = pows[0][a0].mul(&pows[1][a1]).mul(&pows[2][a2]);
                out = out.add(&prod.mul_expr(scale(inv_fact, gd)));
            }
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product::<f64>().max(1.0)
}

fn e_axis(axis: usize) -> [u8; 3] {
    let mut d = [0u8; 3];
    d[axis] = 1;
    d
}

/// Gradient component of phi_inf as an expression leaf.
pub fn grad_phi_inf(axis: usize) -> PhaseExpr {
    expr::phi(0, 0, e_axis(axis))
}

fn hess_phi_inf(i: usize, j: usize) -> PhaseExpr {
    let mut d = [0u8; 3];
    d[i] += 1;
    d[j] += 1;
    expr::phi(0, 0, d)
}

/// J1 = trace of the Hessian of phi_inf (the Laplacian).
pub fn j1_expr() -> PhaseExpr {
    expr::add_many((0..3).map(|a| hess_phi_inf(a, a)))
}

/// J2 = -e2(Hessian): sum_{i<j} [H_ij^2 - H_ii H_jj].
pub fn j2_expr() -> PhaseExpr {
    let h = |i, j| hess_phi_inf(i, j);
    expr::add_many((0..3).flat_map(|i| {
        (i + 1..3).map(move |j| add(mul(h(i, j), h(i, j)), neg(mul(h(i, i), h(j, j)))))
    }))
}

/// J3 = det of the Hessian of phi_inf.
pub fn j3_expr() -> PhaseExpr {
    let h = |i, j| hess_phi_inf(i, j);
    let cof = |i: usize| {
        let (j, k) = match i {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        // h(0,i) * (h(1,j)h(2,k) - h(1,k)h(2,j)) with cyclic sign absorbed
        mul(h(0, i), add(mul(h(1, j), h(2, k)), neg(mul(h(1, k), h(2, j)))))
    };
    expr::add_many((0..3).map(cof))
}

/// Coefficients p_{k,l}(w, y) of the inversion p = x/t + sum p_{k,l} (log t)^l / t^k,
/// obtained as the fixed point of delta = -y/t + (log t / t) grad phi_inf(w + delta).
pub fn p_series(kmax: usize) -> Series3 {
    let mut delta = Series3::zeros(kmax);
    for _ in 0..kmax {
        let mut next = Series3::zeros(kmax);
        for j in 0..3 {
            let drift = Series::unit(kmax, 1, 0, neg(expr::y(j)));
            let pull = compose(grad_phi_inf(j), &delta, kmax).shifted(1, 1);
            next.comps[j] = drift.add(&pull);
        }
        delta = next;
    }
    delta
}

/// Coefficients J_{k,l}(w, y) of t^3 det(dp/dy) = -sum_{m>=0} q^m with
/// q = (log t / t) J1(p) + (log t / t)^2 J2(p) + (log t / t)^3 J3(p),
/// J1/J2/J3 the elementary Jacobian blocks of dy/dp, composed at p = w + delta.
pub fn jacobian_series(kmax: usize, delta: &Series3) -> Series {
    let mut q = Series::zeros(kmax);
    for (r, g) in [(1usize, j1_expr()), (2, j2_expr()), (3, j3_expr())] {
        if r > kmax {
            break;
        }
        q = q.add(&compose(g, delta, kmax).shifted(r, r));
    }
    let mut total = Series::zeros(kmax);
    let mut qm = Series::unit(kmax, 0, 0, expr::one());
    for m in 0..=kmax {
        if m > 0 {
            qm = qm.mul(&q);
        }
        total = total.add(&qm);
    }
    total.scale(-1.0)
}
