//! Uniform 3D grids, scalar/vector fields, high-order finite differencing,
//! local polynomial interpolation, trapezoid quadrature, and the VPF3 binary
//! snapshot format.
//!
//! Layout is row-major with the x^1 index fastest, fixed by the snapshot
//! format. Grids are cubes, symmetric about the origin in all uses here,
//! though the code only assumes uniform spacing.

use anyhow::{bail, ensure, Context, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Uniform cubic grid: `n` nodes per axis starting at `origin` with step `spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid3 {
    pub n: usize,
    pub origin: [f64; 3],
    pub spacing: f64,
}

impl Grid3 {
    pub fn new(n: usize, origin: [f64; 3], spacing: f64) -> Result<Self> {
        ensure!(n >= 8, "grid needs n >= 8, got {n}");
        ensure!(n % 2 == 0, "grid needs even n, got {n}");
        ensure!(spacing > 0.0, "grid spacing must be positive");
        Ok(Grid3 { n, origin, spacing })
    }

    /// Symmetric grid [-L, L]^3 sized so the ball of radius `b` fits with a
    /// margin of at least 4 spacings on every side.
    pub fn for_support(b: f64, n: usize) -> Result<Self> {
        ensure!(b > 0.0, "support radius must be positive");
        ensure!(n >= 8 && n % 2 == 0, "grid needs even n >= 8");
        // L = b + 4.5 h with h = 2L/(n-1)  =>  L = b / (1 - 9/(n-1))
        let denom = 1.0 - 9.0 / (n as f64 - 1.0);
        ensure!(denom > 0.0, "n too small for requested margin");
        let l = b / denom;
        let spacing = 2.0 * l / (n as f64 - 1.0);
        Grid3::new(n, [-l, -l, -l], spacing)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index, x^1 fastest.
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
            self.origin[2] + self.spacing * k as f64,
        ]
    }

    /// Upper corner coordinate (last node).
    pub fn upper(&self) -> [f64; 3] {
        let ext = self.spacing * (self.n as f64 - 1.0);
        [self.origin[0] + ext, self.origin[1] + ext, self.origin[2] + ext]
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        let up = self.upper();
        (0..3).all(|a| x[a] >= self.origin[a] - 1e-12 && x[a] <= up[a] + 1e-12)
    }

    /// Check the declared support ball fits with margin >= 4 spacings.
    pub fn check_support_margin(&self, b: f64) -> Result<()> {
        let up = self.upper();
        for a in 0..3 {
            ensure!(
                self.origin[a] <= -b - 4.0 * self.spacing + 1e-12
                    && up[a] >= b + 4.0 * self.spacing - 1e-12,
                "support ball radius {b} does not fit in grid with margin 4h"
            );
        }
        Ok(())
    }
}

/// Scalar field sampled on a `Grid3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field3 {
    pub grid: Grid3,
    pub values: Vec<f64>,
}

impl Field3 {
    pub fn zeros(grid: Grid3) -> Self {
        Field3 { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let n = grid.n;
        let mut values = vec![0.0; grid.len()];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    values[grid.idx(i, j, k)] = f(grid.node(i, j, k));
                }
            }
        }
        Field3 { grid, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.idx(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = self.grid.idx(i, j, k);
        &mut self.values[idx]
    }

    pub fn assert_finite(&self) -> Result<()> {
        ensure!(self.values.iter().all(|v| v.is_finite()), "field has non-finite values");
        Ok(())
    }

    /// True if the field vanishes on the two outermost node shells.
    pub fn outer_shells_zero(&self) -> bool {
        let n = self.grid.n;
        let edge = |i: usize| i < 2 || i >= n - 2;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if (edge(i) || edge(j) || edge(k)) && self.at(i, j, k) != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// True if the field is zero within `cells` cells of the boundary.
    pub fn supported_away_from_boundary(&self, cells: usize) -> bool {
        let n = self.grid.n;
        let edge = |i: usize| i < cells || i >= n - cells;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if (edge(i) || edge(j) || edge(k)) && self.at(i, j, k) != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn scale(&self, a: f64) -> Field3 {
        Field3 { grid: self.grid, values: self.values.iter().map(|v| a * v).collect() }
    }

    pub fn add(&self, other: &Field3) -> Field3 {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        Field3 {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Field3) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Vector field: three scalar components on a shared grid.
#[derive(Clone, Debug)]
pub struct Field3Vec {
    pub comps: [Field3; 3],
}

impl Field3Vec {
    pub fn zeros(grid: Grid3) -> Self {
        Field3Vec { comps: [Field3::zeros(grid), Field3::zeros(grid), Field3::zeros(grid)] }
    }

    pub fn grid(&self) -> Grid3 {
        debug_assert_eq!(self.comps[0].grid, self.comps[1].grid);
        debug_assert_eq!(self.comps[0].grid, self.comps[2].grid);
        self.comps[0].grid
    }
}

/// Finite-difference weights for the `m`-th derivative at `x0` given nodes
/// `xs` (Fornberg's algorithm). Exact for polynomials of degree < xs.len().
pub fn fd_weights(x0: f64, xs: &[f64], m: usize) -> Vec<f64> {
    let nn = xs.len();
    // c[k][j]: weight of node j for k-th derivative, built incrementally.
    let mut c = vec![vec![0.0f64; nn]; m + 1];
    let mut c1 = 1.0f64;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..nn {
        let mn = i.min(m);
        let mut c2 = 1.0f64;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c[m].clone()
}

/// Per-axis stencil table: for each output index, the window start and weights.
fn axis_stencils(n: usize, h: f64, m: usize, order: usize) -> Vec<(usize, Vec<f64>)> {
    // Window size m + order + (1 if (m+order) even to keep centered windows symmetric).
    let mut w = m + order;
    if w % 2 == 0 {
        w += 1;
    }
    let w = w.min(n);
    let half = w / 2;
    let xs: Vec<f64> = (0..w).map(|i| i as f64 * h).collect();
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - w);
            let weights = fd_weights((i - start) as f64 * h, &xs, m);
            (start, weights)
        })
        .collect()
}

/// Default interior order of accuracy for `differentiate`.
pub const FD_ORDER: usize = 6;

/// Mixed partial derivative by repeated per-axis finite differencing
/// (6th-order interior stencils, one-sided at the boundary). The per-axis
/// derivative of order m is applied in a single pass with the exact m-th
/// derivative stencil, not by iterating first derivatives.
pub fn differentiate(field: &Field3, multi_index: [usize; 3], max_order: usize) -> Result<Field3> {
    let total: usize = multi_index.iter().sum();
    if total > max_order {
        bail!("derivative order {} exceeds configured maximum {}", total, max_order);
    }
    field.assert_finite()?;
    let mut out = field.clone();
    for axis in 0..3 {
        let m = multi_index[axis];
        if m == 0 {
            continue;
        }
        out = differentiate_axis(&out, axis, m);
    }
    Ok(out)
}

fn differentiate_axis(field: &Field3, axis: usize, m: usize) -> Field3 {
    let grid = field.grid;
    let n = grid.n;
    let stencils = axis_stencils(n, grid.spacing, m, FD_ORDER);
    let mut out = Field3::zeros(grid);
    let stride = match axis {
        0 => 1,
        1 => n,
        _ => n * n,
    };
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let pos = [i, j, k][axis];
                let (start, weights) = &stencils[pos];
                let base = grid.idx(i, j, k) - pos * stride + start * stride;
                let mut acc = 0.0;
                for (q, w) in weights.iter().enumerate() {
                    acc += w * field.values[base + q * stride];
                }
                out.values[grid.idx(i, j, k)] = acc;
            }
        }
    }
    out
}

/// Tricubic (4-point Lagrange per axis) interpolation; exact on cubics.
pub fn interpolate(field: &Field3, x: [f64; 3]) -> Result<f64> {
    let grid = field.grid;
    ensure!(grid.contains(x), "interpolation point {:?} outside grid box", x);
    Ok(interpolate_unchecked(field, x))
}

/// Interpolation without the box check; clamps the stencil window to the grid.
#[inline]
pub fn interpolate_unchecked(field: &Field3, x: [f64; 3]) -> f64 {
    let grid = &field.grid;
    let n = grid.n;
    let mut base = [0usize; 3];
    let mut wts = [[0.0f64; 4]; 3];
    for a in 0..3 {
        let s = (x[a] - grid.origin[a]) / grid.spacing;
        let i0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let u = s - i0 as f64; // position relative to window start, in cells
        // Lagrange basis on nodes {0,1,2,3}
        let (u0, u1, u2, u3) = (u, u - 1.0, u - 2.0, u - 3.0);
        wts[a] = [
            -u1 * u2 * u3 / 6.0,
            u0 * u2 * u3 / 2.0,
            -u0 * u1 * u3 / 2.0,
            u0 * u1 * u2 / 6.0,
        ];
        base[a] = i0;
    }
    let mut acc = 0.0;
    for dk in 0..4 {
        let wk = wts[2][dk];
        for dj in 0..4 {
            let wjk = wts[1][dj] * wk;
            let row = grid.idx(base[0], base[1] + dj, base[2] + dk);
            let v = &field.values[row..row + 4];
            acc += wjk * (wts[0][0] * v[0] + wts[0][1] * v[1] + wts[0][2] * v[2] + wts[0][3] * v[3]);
        }
    }
    acc
}

/// Trapezoid quadrature over the grid box. For compactly supported smooth
/// integrands this is spectrally accurate; the boundary half-weights only
/// matter for fields that do not vanish at the box edge.
pub fn quadrature(field: &Field3) -> f64 {
    let n = field.grid.n;
    let mut acc = 0.0;
    let wt = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    for k in 0..n {
        for j in 0..n {
            let wjk = wt(j) * wt(k);
            let row = field.grid.idx(0, j, k);
            let mut inner = 0.5 * field.values[row] + 0.5 * field.values[row + n - 1];
            for i in 1..n - 1 {
                inner += field.values[row + i];
            }
            acc += wjk * inner;
        }
    }
    acc * field.grid.spacing.powi(3)
}

// --- VPF3 binary snapshot format -------------------------------------------
//
// 64-byte header: magic "VPF3", version u32 LE, n u32 LE, origin 3 x f64 LE,
// spacing f64 LE, zero padding to 64; then n^3 f64 LE values, x^1 fastest.

pub const VPF3_MAGIC: &[u8; 4] = b"VPF3";
pub const VPF3_VERSION: u32 = 1;

pub fn write_snapshot(field: &Field3, path: &Path) -> Result<()> {
    let mut header = [0u8; 64];
    header[0..4].copy_from_slice(VPF3_MAGIC);
    header[4..8].copy_from_slice(&VPF3_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&(field.grid.n as u32).to_le_bytes());
    for a in 0..3 {
        header[12 + 8 * a..20 + 8 * a].copy_from_slice(&field.grid.origin[a].to_le_bytes());
    }
    header[36..44].copy_from_slice(&field.grid.spacing.to_le_bytes());
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    file.write_all(&header)?;
    for v in &field.values {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Field3> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut header = [0u8; 64];
    file.read_exact(&mut header)?;
    ensure!(&header[0..4] == VPF3_MAGIC, "bad snapshot magic");
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    ensure!(version == VPF3_VERSION, "unsupported snapshot version {version}");
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut origin = [0.0f64; 3];
    for a in 0..3 {
        origin[a] = f64::from_le_bytes(header[12 + 8 * a..20 + 8 * a].try_into().unwrap());
    }
    let spacing = f64::from_le_bytes(header[36..44].try_into().unwrap());
    let grid = Grid3::new(n, origin, spacing)?;
    let mut values = vec![0.0f64; grid.len()];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        file.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Field3 { grid, values })
}
