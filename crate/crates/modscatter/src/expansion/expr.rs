//! Hash-consed phase-space expressions.
//!
//! A `PhaseExpr` is an immutable DAG over the free variables (y, q), where q
//! is the second phase-space argument (p for distribution coefficients, w for
//! density integrands). Leaves are constants, y-coordinates, exact profile
//! derivatives (d_x^Ix d_p^Ip f_inf)(y, q), and grid-field derivatives
//! (d^I phi_{k,l})(q) resolved through a `PhiSource`. Interior nodes are
//! binary sums and products. Nodes are interned in a global arena so common
//! subexpressions are shared; differentiation is memoized on the arena, and
//! evaluation runs on a flat compiled tape.

use crate::profile::{eval_profile_derivative, ScatteringProfile};
use once_cell::sync::Lazy;
use std::collections::HashMap;
use std::sync::Mutex;

/// Handle into the global expression arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhaseExpr(u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Const(u64), // f64 bits, for Eq/Hash
    Y(u8),
    Prof { ix: [u8; 3], ip: [u8; 3] },
    Phi { k: u8, l: u8, d: [u8; 3] },
    Add(PhaseExpr, PhaseExpr),
    Mul(PhaseExpr, PhaseExpr),
}

struct Arena {
    nodes: Vec<Node>,
    /// whether the expression vanishes outside the profile support ball
    vanishing: Vec<bool>,
    intern: HashMap<Node, PhaseExpr>,
    diff_memo: HashMap<(PhaseExpr, u8), PhaseExpr>,
}

static ARENA: Lazy<Mutex<Arena>> = Lazy::new(|| {
    Mutex::new(Arena {
        nodes: Vec::new(),
        vanishing: Vec::new(),
        intern: HashMap::new(),
        diff_memo: HashMap::new(),
    })
});

fn intern(node: Node) -> PhaseExpr {
    let mut a = ARENA.lock().unwrap();
    if let Some(&id) = a.intern.get(&node) {
        return id;
    }
    let vanishing = match node {
        Node::Const(bits) => f64::from_bits(bits) == 0.0,
        Node::Prof { .. } => true,
        Node::Y(_) | Node::Phi { .. } => false,
        Node::Add(x, y) => a.vanishing[x.0 as usize] && a.vanishing[y.0 as usize],
        Node::Mul(x, y) => a.vanishing[x.0 as usize] || a.vanishing[y.0 as usize],
    };
    let id = PhaseExpr(a.nodes.len() as u32);
    a.nodes.push(node);
    a.vanishing.push(vanishing);
    a.intern.insert(node, id);
    id
}

fn node_of(e: PhaseExpr) -> Node {
    ARENA.lock().unwrap().nodes[e.0 as usize]
}

pub fn constant(c: f64) -> PhaseExpr {
    // normalize -0.0 so folded zeros always intern to the same node
    let c = if c == 0.0 { 0.0 } else { c };
    intern(Node::Const(c.to_bits()))
}

pub fn zero() -> PhaseExpr {
    constant(0.0)
}

pub fn one() -> PhaseExpr {
    constant(1.0)
}

pub fn y(axis: usize) -> PhaseExpr {
    assert!(axis < 3);
    intern(Node::Y(axis as u8))
}

/// Exact profile derivative leaf (d_x^ix d_p^ip f_inf)(y, q).
pub fn prof(ix: [u8; 3], ip: [u8; 3]) -> PhaseExpr {
    intern(Node::Prof { ix, ip })
}

/// Grid-field derivative leaf (d^d phi_{k,l})(q).
pub fn phi(k: u8, l: u8, d: [u8; 3]) -> PhaseExpr {
    intern(Node::Phi { k, l, d })
}

fn as_const(e: PhaseExpr) -> Option<f64> {
    match node_of(e) {
        Node::Const(bits) => Some(f64::from_bits(bits)),
        _ => None,
    }
}

pub fn add(a: PhaseExpr, b: PhaseExpr) -> PhaseExpr {
    match (as_const(a), as_const(b)) {
        (Some(x), Some(z)) => return constant(x + z),
        (Some(0.0), _) => return b,
        (_, Some(0.0)) => return a,
        _ => {}
    }
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    intern(Node::Add(a, b))
}

pub fn mul(a: PhaseExpr, b: PhaseExpr) -> PhaseExpr {
    match (as_const(a), as_const(b)) {
        (Some(x), Some(z)) => return constant(x * z),
        (Some(0.0), _) | (_, Some(0.0)) => return zero(),
        (Some(1.0), _) => return b,
        (_, Some(1.0)) => return a,
        _ => {}
    }
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    intern(Node::Mul(a, b))
}

pub fn scale(c: f64, e: PhaseExpr) -> PhaseExpr {
    mul(constant(c), e)
}

pub fn neg(e: PhaseExpr) -> PhaseExpr {
    scale(-1.0, e)
}

pub fn sub(a: PhaseExpr, b: PhaseExpr) -> PhaseExpr {
    add(a, neg(b))
}

pub fn add_many(terms: impl IntoIterator<Item = PhaseExpr>) -> PhaseExpr {
    terms.into_iter().fold(zero(), add)
}

pub fn dot(a: &[PhaseExpr; 3], b: &[PhaseExpr; 3]) -> PhaseExpr {
    add_many((0..3).map(|i| mul(a[i], b[i])))
}

/// True if the expression vanishes identically when |y| > B or |q| > B
/// (every additive branch carries a profile factor).
pub fn vanishes_outside_support(e: PhaseExpr) -> bool {
    ARENA.lock().unwrap().vanishing[e.0 as usize]
}

const VAR_Q: u8 = 4;

/// d/dy^axis, treating q as independent.
pub fn diff_y(e: PhaseExpr, axis: usize) -> PhaseExpr {
    assert!(axis < 3);
    diff(e, axis as u8)
}

/// d/dq^axis (derivative in the second argument).
pub fn diff_q(e: PhaseExpr, axis: usize) -> PhaseExpr {
    assert!(axis < 3);
    diff(e, VAR_Q | axis as u8)
}

fn diff(e: PhaseExpr, key: u8) -> PhaseExpr {
    if let Some(&d) = ARENA.lock().unwrap().diff_memo.get(&(e, key)) {
        return d;
    }
    let axis = (key & 3) as usize;
    let in_q = key & VAR_Q != 0;
    let result = match node_of(e) {
        Node::Const(_) => zero(),
        Node::Y(i) => {
            if !in_q && i as usize == axis {
                one()
            } else {
                zero()
            }
        }
        Node::Prof { ix, ip } => {
            let (mut ix, mut ip) = (ix, ip);
            if in_q {
                ip[axis] += 1;
            } else {
                ix[axis] += 1;
            }
            prof(ix, ip)
        }
        Node::Phi { k, l, d } => {
            if in_q {
                let mut d = d;
                d[axis] += 1;
                phi(k, l, d)
            } else {
                zero()
            }
        }
        Node::Add(a, b) => add(diff(a, key), diff(b, key)),
        Node::Mul(a, b) => add(mul(diff(a, key), b), mul(a, diff(b, key))),
    };
    ARENA.lock().unwrap().diff_memo.insert((e, key), result);
    result
}

/// Canonical textual dump (structural, independent of arena ids).
pub fn canonical_dump(e: PhaseExpr) -> String {
    match node_of(e) {
        Node::Const(bits) => format!("(const {:?})", f64::from_bits(bits)),
        Node::Y(i) => format!("(y {i})"),
        Node::Prof { ix, ip } => format!(
            "(prof ({} {} {}) ({} {} {}))",
            ix[0], ix[1], ix[2], ip[0], ip[1], ip[2]
        ),
        Node::Phi { k, l, d } => format!("(phi {k} {l} ({} {} {}))", d[0], d[1], d[2]),
        Node::Add(a, b) => format!("(+ {} {})", canonical_dump(a), canonical_dump(b)),
        Node::Mul(a, b) => format!("(* {} {})", canonical_dump(a), canonical_dump(b)),
    }
}

/// Maximum phi-derivative order appearing in the expression.
pub fn max_phi_order(e: PhaseExpr) -> usize {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![e];
    let mut best = 0usize;
    while let Some(x) = stack.pop() {
        if !seen.insert(x) {
            continue;
        }
        match node_of(x) {
            Node::Phi { d, .. } => best = best.max(d.iter().map(|&v| v as usize).sum()),
            Node::Add(a, b) | Node::Mul(a, b) => {
                stack.push(a);
                stack.push(b);
            }
            _ => {}
        }
    }
    best
}

/// Maximum profile-derivative order appearing in the expression.
pub fn max_prof_order(e: PhaseExpr) -> usize {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![e];
    let mut best = 0usize;
    while let Some(x) = stack.pop() {
        if !seen.insert(x) {
            continue;
        }
        match node_of(x) {
            Node::Prof { ix, ip } => {
                best = best
                    .max(ix.iter().map(|&v| v as usize).sum::<usize>()
                        + ip.iter().map(|&v| v as usize).sum::<usize>())
            }
            Node::Add(a, b) | Node::Mul(a, b) => {
                stack.push(a);
                stack.push(b);
            }
            _ => {}
        }
    }
    best
}

// --- evaluation ---------------------------------------------------------------

/// Resolves grid-field derivative leaves at a point q.
pub trait PhiSource: Sync {
    fn phi_value(&self, k: u8, l: u8, d: [u8; 3], q: [f64; 3]) -> f64;
}

/// Flat evaluation program for a set of root expressions sharing subtrees.
///
/// Ops that do not depend on y (constants, grid-field leaves, and anything
/// built from them) are marked so that `eval_q_prefix` can evaluate them once
/// per q-point, with `eval_at_y` filling in only the y-dependent remainder
/// inside an inner y-loop.
pub struct Tape {
    ops: Vec<TapeOp>,
    y_dep: Vec<bool>,
    roots: Vec<u32>,
    root_vanishing: Vec<bool>,
}

enum TapeOp {
    Const(f64),
    Y(usize),
    Prof { ix: [usize; 3], ip: [usize; 3] },
    Phi { k: u8, l: u8, d: [u8; 3] },
    Add(u32, u32),
    Mul(u32, u32),
}

impl Tape {
    pub fn compile(roots: &[PhaseExpr]) -> Tape {
        // topological order via iterative post-order
        let mut slot: HashMap<PhaseExpr, u32> = HashMap::new();
        let mut ops = Vec::new();
        let mut stack: Vec<(PhaseExpr, bool)> = roots.iter().map(|&r| (r, false)).collect();
        while let Some((e, expanded)) = stack.pop() {
            if slot.contains_key(&e) {
                continue;
            }
            let node = node_of(e);
            if !expanded {
                if let Node::Add(a, b) | Node::Mul(a, b) = node {
                    stack.push((e, true));
                    stack.push((a, false));
                    stack.push((b, false));
                    continue;
                }
            }
            let op = match node {
                Node::Const(bits) => TapeOp::Const(f64::from_bits(bits)),
                Node::Y(i) => TapeOp::Y(i as usize),
                Node::Prof { ix, ip } => TapeOp::Prof {
                    ix: [ix[0] as usize, ix[1] as usize, ix[2] as usize],
                    ip: [ip[0] as usize, ip[1] as usize, ip[2] as usize],
                },
                Node::Phi { k, l, d } => TapeOp::Phi { k, l, d },
                Node::Add(a, b) => TapeOp::Add(slot[&a], slot[&b]),
                Node::Mul(a, b) => TapeOp::Mul(slot[&a], slot[&b]),
            };
            slot.insert(e, ops.len() as u32);
            ops.push(op);
        }
        let y_dep: Vec<bool> = {
            let mut flags = Vec::with_capacity(ops.len());
            for op in &ops {
                let dep = match *op {
                    TapeOp::Const(_) | TapeOp::Phi { .. } => false,
                    TapeOp::Y(_) | TapeOp::Prof { .. } => true,
                    TapeOp::Add(a, b) | TapeOp::Mul(a, b) => {
                        flags[a as usize] || flags[b as usize]
                    }
                };
                flags.push(dep);
            }
            flags
        };
        Tape {
            ops,
            y_dep,
            roots: roots.iter().map(|r| slot[r]).collect(),
            root_vanishing: roots.iter().map(|&r| vanishes_outside_support(r)).collect(),
        }
    }

    pub fn num_roots(&self) -> usize {
        self.roots.len()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Evaluate the q-only part of the tape (grid-field leaves and anything
    /// built from them) once per q-point. `slots` is reused by `eval_at_y`.
    pub fn eval_q_prefix(&self, phi: &dyn PhiSource, q: [f64; 3], slots: &mut Vec<f64>) {
        slots.resize(self.ops.len(), 0.0);
        for (i, op) in self.ops.iter().enumerate() {
            if self.y_dep[i] {
                continue;
            }
            slots[i] = match *op {
                TapeOp::Const(c) => c,
                TapeOp::Phi { k, l, d } => phi.phi_value(k, l, d, q),
                TapeOp::Add(a, b) => slots[a as usize] + slots[b as usize],
                TapeOp::Mul(a, b) => slots[a as usize] * slots[b as usize],
                TapeOp::Y(_) | TapeOp::Prof { .. } => unreachable!(),
            };
        }
    }

    /// Evaluate the y-dependent remainder at (y, q) after `eval_q_prefix` has
    /// filled `slots` for this q. `out` receives one value per root.
    pub fn eval_at_y(
        &self,
        profile: &ScatteringProfile,
        y: [f64; 3],
        q: [f64; 3],
        slots: &mut [f64],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        let b = profile.support_radius();
        let outside = {
            let yr = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
            let qr = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            yr + qr > b
        };
        if outside && self.root_vanishing.iter().all(|&v| v) {
            out.resize(self.roots.len(), 0.0);
            return;
        }
        for (i, op) in self.ops.iter().enumerate() {
            if !self.y_dep[i] {
                continue;
            }
            slots[i] = match *op {
                TapeOp::Y(a) => y[a],
                TapeOp::Prof { ix, ip } => {
                    eval_profile_derivative(profile, ix, ip, y, q).expect("profile order in range")
                }
                TapeOp::Add(a, b) => slots[a as usize] + slots[b as usize],
                TapeOp::Mul(a, b) => slots[a as usize] * slots[b as usize],
                TapeOp::Const(_) | TapeOp::Phi { .. } => unreachable!(),
            };
        }
        out.extend(self.roots.iter().map(|&r| slots[r as usize]));
    }

    /// Evaluate all roots at (y, q). `slots` is a scratch buffer reused
    /// across calls; `out` receives one value per root.
    pub fn eval(
        &self,
        profile: &ScatteringProfile,
        phi: &dyn PhiSource,
        y: [f64; 3],
        q: [f64; 3],
        slots: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        self.eval_q_prefix(phi, q, slots);
        self.eval_at_y(profile, y, q, slots, out);
    }

    /// Single-root convenience evaluation.
    pub fn eval_one(
        &self,
        profile: &ScatteringProfile,
        phi: &dyn PhiSource,
        y: [f64; 3],
        q: [f64; 3],
    ) -> f64 {
        let mut slots = Vec::new();
        let mut out = Vec::new();
        self.eval(profile, phi, y, q, &mut slots, &mut out);
        out[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct NoPhi;
    impl PhiSource for NoPhi {
        fn phi_value(&self, _: u8, _: u8, _: [u8; 3], _: [f64; 3]) -> f64 {
            panic!("no phi leaves expected")
        }
    }

    #[test]
    fn hash_consing_shares_nodes() {
        let a = add(y(0), y(1));
        let b = add(y(1), y(0));
        assert_eq!(a, b);
        assert_eq!(mul(zero(), a), zero());
        assert_eq!(scale(1.0, a), a);
    }

    #[test]
    fn differentiation_product_rule() {
        // d/dy0 (y0 * y0) = 2 y0, evaluated at y0 = 3
        let e = mul(y(0), y(0));
        let d = diff_y(e, 0);
        let tape = Tape::compile(&[d]);
        let prof = ScatteringProfile::default_desk();
        let v = tape.eval_one(&prof, &NoPhi, [3.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(v, 6.0);
    }

    #[test]
    fn prof_leaf_differentiates_into_indices() {
        let e = prof([0; 3], [0; 3]);
        let d = diff_y(diff_q(e, 2), 1);
        assert_eq!(d, prof([0, 1, 0], [0, 0, 1]));
        assert!(vanishes_outside_support(d));
        assert!(!vanishes_outside_support(add(d, y(0))));
        assert!(vanishes_outside_support(mul(phi(0, 0, [1, 0, 0]), d)));
    }
}
