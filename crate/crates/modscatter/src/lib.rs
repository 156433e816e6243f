//! Polyhomogeneous approximate solutions of the 3D Vlasov-Poisson inverse
//! modified-scattering problem.
//!
//! The library constructs, from a prescribed scattering profile f_inf(x,p),
//! the coefficient family {f_{k,l}, rho_{k,l}, phi_{k,l}, Psi_{k,l}, J_{k,l},
//! p_{k,l}} of the expansion
//!
//!   f_[K](t,x,p)   = sum_{k<=K} sum_{l<=k} (log t)^l / t^k     f_{k,l}(y,p)
//!   phi_[K](t,x)   = (1/t)   sum_{k<=K} sum_{l<=k} (log t)^l / t^k phi_{k,l}(x/t)
//!   rho_[K](t,x)   = (1/t^3) sum_{k<=K} sum_{l<=k} (log t)^l / t^k rho_{k,l}(x/t)
//!
//! in the modified-scattering coordinate y = x - t p + log t grad phi_inf(p),
//! verifies the residual decay rates of the construction, and solves the
//! backward-in-time finite problem from final data f_[K](T_f).
//!
//! Sign conventions: the transport operator is
//! X_phi = d_t + p.d_x + d_x phi . d_p with Delta phi = rho and
//! rho_inf(p) = -int f_inf(x,p) dx <= 0; the rho_{k,l} carry the signed
//! Jacobian of the change of variables (J_{0,0} = -1) and are therefore the
//! negatives of the physical momentum-space densities. The self-consistency
//! that decays is int f_[K] dp + rho_[K].

pub mod approx;
pub mod diagnostics;
pub mod expansion;
pub mod fields;
pub mod harness;
pub mod poisson;
pub mod profile;
pub mod solver;
