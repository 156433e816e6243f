//! Scattering profile oracles: exact derivatives, support, base fields,
//! and the data norm.

use modscatter::fields::{differentiate, quadrature, Field3, Grid3};
use modscatter::profile::{
    build_base_fields, compute_data_norm, eval_profile_derivative, Bump, ProfileTerm,
    RadialFactor, ScatteringProfile,
};

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

/// int_{|x|<=R} (1 - |x|^2/R^2)^J dx = 4 pi R^3 I_J,
/// I_J = int_0^1 s^2 (1-s^2)^J ds with I_0 = 1/3, I_J = I_{J-1} 2J/(2J+3).
fn ball_bump_integral(r: f64, j: u32) -> f64 {
    let mut i = 1.0 / 3.0;
    for m in 1..=j as u64 {
        i *= 2.0 * m as f64 / (2.0 * m as f64 + 3.0);
    }
    4.0 * std::f64::consts::PI * r.powi(3) * i
}

fn separable_profile(jx: u32, jp: u32) -> ScatteringProfile {
    ScatteringProfile::new(
        vec![ProfileTerm {
            amplitude: 2.0,
            factors: vec![
                RadialFactor {
                    mask: [true, true, true, false, false, false],
                    radius: 0.5,
                    gamma: 0.0,
                    poly_u: 0,
                    bump: Some(Bump::Polynomial { j: jx }),
                },
                RadialFactor {
                    mask: [false, false, false, true, true, true],
                    radius: 0.5,
                    gamma: 0.0,
                    poly_u: 0,
                    bump: Some(Bump::Polynomial { j: jp }),
                },
            ],
        }],
        1.0,
        12,
    )
    .unwrap()
}

#[test]
fn vanishes_outside_support_ball() {
    let prof = ScatteringProfile::default_desk();
    let b = prof.support_radius();
    let mut s = 7u64;
    for _ in 0..10_000 {
        let x = [lcg(&mut s) * 3.0 - 1.5, lcg(&mut s) * 3.0 - 1.5, lcg(&mut s) * 3.0 - 1.5];
        let p = [lcg(&mut s) * 3.0 - 1.5, lcg(&mut s) * 3.0 - 1.5, lcg(&mut s) * 3.0 - 1.5];
        let xr = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let pr = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if xr + pr > b {
            for (ix, ip) in [([0; 3], [0; 3]), ([1, 0, 0], [0, 0, 0]), ([1, 0, 2], [0, 1, 0])] {
                assert_eq!(eval_profile_derivative(&prof, ix, ip, x, p).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn nonnegative_everywhere() {
    let prof = ScatteringProfile::default_desk();
    let mut s = 99u64;
    for _ in 0..100_000 {
        let x = [lcg(&mut s) * 2.0 - 1.0, lcg(&mut s) * 2.0 - 1.0, lcg(&mut s) * 2.0 - 1.0];
        let p = [lcg(&mut s) * 2.0 - 1.0, lcg(&mut s) * 2.0 - 1.0, lcg(&mut s) * 2.0 - 1.0];
        assert!(prof.eval(x, p) >= 0.0);
    }
}

#[test]
fn peak_amplitude_at_center() {
    let prof = ScatteringProfile::default_desk();
    assert_eq!(prof.eval([0.0; 3], [0.0; 3]), 300.0);
}

#[test]
fn derivative_matches_central_finite_difference() {
    let prof = ScatteringProfile::default_desk();
    let x = [0.12, -0.21, 0.05];
    let p = [0.2, 0.11, -0.16];
    let h = 1e-4;
    // 4th-order central difference keeps truncation below the 1e-8 budget
    let cfd = |f: &dyn Fn(f64) -> f64| {
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    };

    // first x-derivative
    let exact = eval_profile_derivative(&prof, [1, 0, 0], [0, 0, 0], x, p).unwrap();
    let fd = cfd(&|d| prof.eval([x[0] + d, x[1], x[2]], p));
    assert!((exact - fd).abs() < 1e-8, "{exact} vs fd {fd}");

    // first p-derivative
    let exact = eval_profile_derivative(&prof, [0, 0, 0], [0, 0, 1], x, p).unwrap();
    let fd = cfd(&|d| prof.eval(x, [p[0], p[1], p[2] + d]));
    assert!((exact - fd).abs() < 1e-8, "{exact} vs fd {fd}");

    // mixed second derivative d_x1 d_p2 via FD of the exact d_x1
    let exact = eval_profile_derivative(&prof, [1, 0, 0], [0, 1, 0], x, p).unwrap();
    let fd = cfd(&|d| {
        eval_profile_derivative(&prof, [1, 0, 0], [0, 0, 0], x, [p[0], p[1] + d, p[2]]).unwrap()
    });
    assert!((exact - fd).abs() < 1e-8, "{exact} vs fd {fd}");

    // fourth mixed derivative vs FD of exact third
    let exact = eval_profile_derivative(&prof, [1, 1, 1], [0, 0, 1], x, p).unwrap();
    let fd = cfd(&|d| {
        eval_profile_derivative(&prof, [1, 1, 0], [0, 0, 1], [x[0], x[1], x[2] + d], p).unwrap()
    });
    assert!((exact - fd).abs() < 1e-7 * (1.0 + exact.abs()), "{exact} vs fd {fd}");
}

#[test]
fn smooth_bump_derivatives_match_finite_difference() {
    let prof = ScatteringProfile::new(
        vec![ProfileTerm {
            amplitude: 1.5,
            factors: vec![RadialFactor {
                mask: [true; 6],
                radius: 1.0 / std::f64::consts::SQRT_2,
                gamma: 2.0,
                poly_u: 0,
                bump: Some(Bump::SmoothExp { q: 3.0 }),
            }],
        }],
        1.0,
        12,
    )
    .unwrap();
    let x = [0.1, -0.15, 0.2];
    let p = [0.05, 0.1, -0.1];
    let h = 1e-4;
    let cfd = |f: &dyn Fn(f64) -> f64| {
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    };
    let exact = eval_profile_derivative(&prof, [0, 1, 0], [0, 0, 0], x, p).unwrap();
    let fd = cfd(&|d| prof.eval([x[0], x[1] + d, x[2]], p));
    assert!((exact - fd).abs() < 1e-8, "{exact} vs fd {fd}");
    let exact = eval_profile_derivative(&prof, [1, 1, 0], [0, 0, 0], x, p).unwrap();
    let fd = cfd(&|d| {
        eval_profile_derivative(&prof, [0, 1, 0], [0, 0, 0], [x[0] + d, x[1], x[2]], p).unwrap()
    });
    assert!((exact - fd).abs() < 1e-7 * (1.0 + exact.abs()), "{exact} vs fd {fd}");
}

#[test]
fn order_cap_enforced() {
    let prof = ScatteringProfile::default_desk();
    assert!(eval_profile_derivative(&prof, [7, 0, 0], [6, 0, 0], [0.0; 3], [0.0; 3]).is_err());
    assert!(eval_profile_derivative(&prof, [6, 0, 0], [6, 0, 0], [0.0; 3], [0.0; 3]).is_ok());
}

#[test]
fn zero_amplitude_gives_zero_fields() {
    let mut prof = ScatteringProfile::default_desk();
    prof = prof.scaled(0.0).unwrap();
    let grid = Grid3::for_support(1.0, 16).unwrap();
    let base = build_base_fields(&prof, grid).unwrap();
    assert_eq!(base.rho_inf.max_abs(), 0.0);
    assert_eq!(base.phi_inf.max_abs(), 0.0);
    for a in 0..3 {
        assert_eq!(base.grad_phi_inf.comps[a].max_abs(), 0.0);
    }
}

#[test]
fn separable_profile_rho_matches_analytic_mass_oracle() {
    let (jx, jp) = (6u32, 10u32);
    let prof = separable_profile(jx, jp);
    let grid = Grid3::for_support(1.0, 48).unwrap();
    let base = build_base_fields(&prof, grid).unwrap();
    let int_a = ball_bump_integral(0.5, jx);
    let mut max_err = 0.0f64;
    let mut max_val = 0.0f64;
    for k in 0..grid.n {
        for j in 0..grid.n {
            for i in 0..grid.n {
                let p = grid.node(i, j, k);
                let u = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / 0.25;
                let b = if u < 1.0 { (1.0 - u).powi(jp as i32) } else { 0.0 };
                let exact = -2.0 * int_a * b;
                let got = base.rho_inf.at(i, j, k);
                assert!(got <= 0.0, "rho_inf must be non-positive, got {got}");
                max_err = max_err.max((got - exact).abs());
                max_val = max_val.max(exact.abs());
            }
        }
    }
    assert!(max_err / max_val < 1e-8, "rho_inf error {}", max_err / max_val);

    // total charge: int rho_inf dp = -(analytic mass)
    let mass = 2.0 * int_a * ball_bump_integral(0.5, jp);
    let charge = quadrature(&base.rho_inf);
    assert!(
        (charge + mass).abs() < 1e-8 * mass,
        "charge {charge} vs -mass {}",
        -mass
    );
}

#[test]
fn base_fields_satisfy_poisson_interior() {
    let prof = ScatteringProfile::default_desk();
    let grid = Grid3::for_support(1.0, 96).unwrap();
    let base = build_base_fields(&prof, grid).unwrap();
    assert!(base.phi_inf.max_abs().is_finite());
    let grad_max = (0..3).map(|a| base.grad_phi_inf.comps[a].max_abs()).fold(0.0f64, f64::max);
    assert!(grad_max.is_finite() && grad_max > 0.0);

    let mut lap = Field3::zeros(grid);
    for axis in 0..3 {
        let mut mi = [0usize; 3];
        mi[axis] = 2;
        lap.axpy(1.0, &differentiate(&base.phi_inf, mi, 2).unwrap());
    }
    let n = grid.n;
    let mut max_err = 0.0f64;
    for k in 6..n - 6 {
        for j in 6..n - 6 {
            for i in 6..n - 6 {
                max_err = max_err.max((lap.at(i, j, k) - base.rho_inf.at(i, j, k)).abs());
            }
        }
    }
    let rel = max_err / base.rho_inf.max_abs();
    assert!(rel <= 1e-4, "interior Poisson residual {rel}");
}

#[test]
fn phi_derivative_tensors_consistent() {
    let prof = ScatteringProfile::default_desk();
    let grid = Grid3::for_support(1.0, 48).unwrap();
    let base = build_base_fields(&prof, grid).unwrap();
    // order 1 equals the kernel gradient components
    let d100 = base.phi_derivative([1, 0, 0]).unwrap();
    let mut dev = 0.0f64;
    for idx in 0..grid.len() {
        dev = dev.max((d100.values[idx] - base.grad_phi_inf.comps[0].values[idx]).abs());
    }
    assert!(dev / d100.max_abs() < 1e-10);
    // mixed partials commute: d_1 d_2 phi from grad_1 vs grad_2
    let d110 = base.phi_derivative([1, 1, 0]).unwrap();
    let alt = differentiate(&base.grad_phi_inf.comps[1], [1, 0, 0], 12).unwrap();
    let mut dev = 0.0f64;
    for idx in 0..grid.len() {
        dev = dev.max((d110.values[idx] - alt.values[idx]).abs());
    }
    // both sides carry 6th-order FD truncation of a sharp field; only their
    // consistency is being tested here
    assert!(dev / d110.max_abs() < 1e-3, "mixed partials disagree: {dev}");
    // order cap
    assert!(base.phi_derivative([13, 0, 0]).is_err());
}

#[test]
fn data_norm_zero_profile() {
    assert_eq!(compute_data_norm(&ScatteringProfile::zero(), 0, &|_| 2.0).unwrap(), 0.0);
}

#[test]
fn data_norm_unit_l2_profile_gives_two() {
    let prof = ScatteringProfile::default_desk();
    // v = L + L^2 at n=0 with nseq(0)=2; recover L and normalize by it
    let v = compute_data_norm(&prof, 0, &|_| 2.0).unwrap();
    let l2 = (-1.0 + (1.0 + 4.0 * v).sqrt()) / 2.0;
    let unit = prof.scaled(1.0 / l2).unwrap();
    let v2 = compute_data_norm(&unit, 0, &|_| 2.0).unwrap();
    assert!((v2 - 2.0).abs() < 1e-6, "data norm {v2}");
}

#[test]
fn data_norm_monotone_in_order() {
    let prof = ScatteringProfile::default_desk();
    let nseq = |n: usize| (n + 1) as f64;
    let v0 = compute_data_norm(&prof, 0, &nseq).unwrap();
    let v1 = compute_data_norm(&prof, 1, &nseq).unwrap();
    let v2 = compute_data_norm(&prof, 2, &nseq).unwrap();
    assert!(v0 <= v1 && v1 <= v2, "not monotone: {v0} {v1} {v2}");
    assert!(v0 > 0.0);
}

#[test]
fn constructor_rejects_bad_profiles() {
    // unbounded support: Gaussian without a bump
    let bad = ScatteringProfile::new(
        vec![ProfileTerm {
            amplitude: 1.0,
            factors: vec![RadialFactor {
                mask: [true; 6],
                radius: 1.0,
                gamma: 1.0,
                poly_u: 0,
                bump: None,
            }],
        }],
        1.0,
        12,
    );
    assert!(bad.is_err());
    // support reach exceeding declared B
    let bad = ScatteringProfile::new(
        vec![ProfileTerm {
            amplitude: 1.0,
            factors: vec![RadialFactor {
                mask: [true; 6],
                radius: 1.0, // sqrt(2) reach > 1
                gamma: 0.0,
                poly_u: 0,
                bump: Some(Bump::Polynomial { j: 4 }),
            }],
        }],
        1.0,
        12,
    );
    assert!(bad.is_err());
    // overlapping masks
    let m = [true, false, false, false, false, false];
    let f = RadialFactor { mask: m, radius: 0.3, gamma: 0.0, poly_u: 0, bump: Some(Bump::Polynomial { j: 2 }) };
    let bad = ScatteringProfile::new(
        vec![ProfileTerm { amplitude: 1.0, factors: vec![f.clone(), f] }],
        1.0,
        12,
    );
    assert!(bad.is_err());
    // negative amplitude
    let bad = ScatteringProfile::default_desk().scaled(-1.0);
    assert!(bad.is_err());
}
