//! Integration of per-step control Gaussians into position Gaussians.
//!
//! Controls are independent across steps given the latent mode. The single
//! integrator is exactly linear-Gaussian. The dynamically-extended unicycle
//! propagates the mean with the exact constant-control step and the
//! covariance by linearizing that step about the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec2;

/// Added to the diagonal of every position covariance.
pub const COV_FLOOR: f64 = 1e-8;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl Gaussian2 {
    pub fn new(mean: Vec2, cov: Mat2) -> Self {
        Gaussian2 { mean, cov }
    }

    /// Builds the covariance from standard deviations and a correlation.
    pub fn from_std(mean: Vec2, sx: f64, sy: f64, rho: f64) -> Self {
        let c = rho * sx * sy;
        Gaussian2 {
            mean,
            cov: [[sx * sx, c], [c, sy * sy]],
        }
    }

    pub fn log_density(&self, x: Vec2) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        1.0 + (2.0 * std::f64::consts::PI).ln() + 0.5 * (a * d - b * b).ln()
    }
}

pub fn eigenvalues(m: &Mat2) -> (f64, f64) {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    (tr / 2.0 - disc, tr / 2.0 + disc)
}

/// Symmetric (to 1e-9 relative) with smallest eigenvalue above `-tol`.
pub fn is_psd(m: &Mat2, tol: f64) -> bool {
    let scale = m[0][0].abs().max(m[1][1].abs()).max(1.0);
    m.iter().flatten().all(|x| x.is_finite())
        && (m[0][1] - m[1][0]).abs() <= 1e-9 * scale
        && eigenvalues(m).0 >= -tol
}

fn check_controls(controls: &[Gaussian2], dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    for (t, u) in controls.iter().enumerate() {
        if !u.mean.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("control mean at step {t}")));
        }
        if !is_psd(&u.cov, 1e-12) {
            return Err(Error::NotPsd(format!("control covariance at step {t}: {:?}", u.cov)));
        }
    }
    Ok(())
}

/// `mu_t = p0 + dt * sum(mean u)`, `Sigma_t = dt^2 * sum(cov u) + floor * I`.
pub fn integrate_single_integrator(controls: &[Gaussian2], p0: Vec2, dt: f64) -> Result<Vec<Gaussian2>> {
    check_controls(controls, dt)?;
    let mut mean = p0;
    let mut cov = [[0.0; 2]; 2];
    let mut out = Vec::with_capacity(controls.len());
    for u in controls {
        for i in 0..2 {
            mean[i] += dt * u.mean[i];
            for j in 0..2 {
                cov[i][j] += dt * dt * u.cov[i][j];
            }
        }
        let mut floored = cov;
        floored[0][0] += COV_FLOOR;
        floored[1][1] += COV_FLOOR;
        out.push(Gaussian2::new(mean, floored));
    }
    Ok(out)
}

/// Integrates sampled (or mean) velocities into positions.
pub fn single_integrator_path(velocities: &[Vec2], p0: Vec2, dt: f64) -> Vec<Vec2> {
    let mut p = p0;
    velocities
        .iter()
        .map(|v| {
            p = [p[0] + dt * v[0], p[1] + dt * v[1]];
            p
        })
        .collect()
}

/// `(int_0^dt s^n cos(w s) ds, int_0^dt s^n sin(w s) ds)`. A power series
/// covers small turn angles, including the straight-line limit `w = 0`.
pub fn trig_moments(n: u32, w: f64, dt: f64) -> (f64, f64) {
    if (w * dt).abs() < 0.5 {
        moments_series(n, w, dt)
    } else {
        moments_closed(n, w, dt)
    }
}

fn moments_series(n: u32, w: f64, dt: f64) -> (f64, f64) {
    let x = w * dt;
    {
        let mut c = 0.0;
        let mut s = 0.0;
        let mut pow = 1.0; // x^m / m!
        for m in 0..24u32 {
            if m > 0 {
                pow *= x / m as f64;
            }
            let term = pow / (m + n + 1) as f64;
            match m % 4 {
                0 => c += term,
                1 => s += term,
                2 => c -= term,
                _ => s -= term,
            }
        }
        let scale = dt.powi(n as i32 + 1);
        (c * scale, s * scale)
    }
}

fn moments_closed(n: u32, w: f64, dt: f64) -> (f64, f64) {
    let x = w * dt;
    let (sx, cx) = x.sin_cos();
    let mut c = sx / w;
    let mut s = (1.0 - cx) / w;
    for k in 1..=n {
        let dk = dt.powi(k as i32);
        let (c_prev, s_prev) = (c, s);
        c = dk * sx / w - (k as f64 / w) * s_prev;
        s = -dk * cx / w + (k as f64 / w) * c_prev;
    }
    (c, s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnicycleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

impl UnicycleState {
    /// Heading and speed from a velocity vector.
    pub fn from_velocity(position: Vec2, velocity: Vec2) -> Self {
        UnicycleState {
            position,
            heading: velocity[1].atan2(velocity[0]),
            speed: (velocity[0] * velocity[0] + velocity[1] * velocity[1]).sqrt(),
        }
    }
}

/// One step under constant heading rate `w` and acceleration `a`, together
/// with the Jacobians with respect to `(x, y, heading, speed)` and `(w, a)`.
pub fn unicycle_step(s: &UnicycleState, w: f64, a: f64, dt: f64) -> (UnicycleState, [[f64; 4]; 4], [[f64; 2]; 4]) {
    let (c0, s0) = trig_moments(0, w, dt);
    let (c1, s1) = trig_moments(1, w, dt);
    let (c2, s2) = trig_moments(2, w, dt);
    let (sin_t, cos_t) = s.heading.sin_cos();
    let v = s.speed;
    let rc = v * c0 + a * c1;
    let rs = v * s0 + a * s1;
    let dx = cos_t * rc - sin_t * rs;
    let dy = sin_t * rc + cos_t * rs;
    let next = UnicycleState {
        position: [s.position[0] + dx, s.position[1] + dy],
        heading: s.heading + w * dt,
        speed: v + a * dt,
    };
    let mut f = [[0.0; 4]; 4];
    for (i, row) in f.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    f[0][2] = -dy;
    f[1][2] = dx;
    f[0][3] = cos_t * c0 - sin_t * s0;
    f[1][3] = sin_t * c0 + cos_t * s0;
    // d/dw of the moments: C_n' = -S_{n+1}, S_n' = C_{n+1}.
    let drc = -v * s1 - a * s2;
    let drs = v * c1 + a * c2;
    let mut g = [[0.0; 2]; 4];
    g[0][0] = cos_t * drc - sin_t * drs;
    g[1][0] = sin_t * drc + cos_t * drs;
    g[0][1] = cos_t * c1 - sin_t * s1;
    g[1][1] = sin_t * c1 + cos_t * s1;
    g[2][0] = dt;
    g[3][1] = dt;
    (next, f, g)
}

/// Mean path under `(heading rate, acceleration)` controls.
pub fn unicycle_path(controls: &[Vec2], start: &UnicycleState, dt: f64) -> Vec<Vec2> {
    let mut s = *start;
    controls
        .iter()
        .map(|u| {
            s = unicycle_step(&s, u[0], u[1], dt).0;
            s.position
        })
        .collect()
}

/// Controls are `(heading rate, longitudinal acceleration)`; the initial
/// pose is known exactly.
pub fn unicycle_integrate(controls: &[Gaussian2], start: &UnicycleState, dt: f64) -> Result<Vec<Gaussian2>> {
    check_controls(controls, dt)?;
    let mut s = *start;
    let mut p = [[0.0; 4]; 4];
    let mut out = Vec::with_capacity(controls.len());
    for u in controls {
        let (next, f, g) = unicycle_step(&s, u.mean[0], u.mean[1], dt);
        let mut np = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    for l in 0..4 {
                        acc += f[i][k] * p[k][l] * f[j][l];
                    }
                }
                for k in 0..2 {
                    for l in 0..2 {
                        acc += g[i][k] * u.cov[k][l] * g[j][l];
                    }
                }
                np[i][j] = acc;
            }
        }
        p = np;
        s = next;
        out.push(Gaussian2::new(
            s.position,
            [[p[0][0] + COV_FLOOR, p[0][1]], [p[1][0], p[1][1] + COV_FLOOR]],
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn still(n: usize, cov: f64) -> Vec<Gaussian2> {
        vec![Gaussian2::new([0.0, 0.0], [[cov, 0.0], [0.0, cov]]); n]
    }

    #[test]
    fn zero_controls_stay_put() {
        let out = integrate_single_integrator(&still(5, 0.0), [1.0, 2.0], 0.1).unwrap();
        for g in out {
            assert_eq!(g.mean, [1.0, 2.0]);
            assert!(g.cov[0][0] <= 2.0 * COV_FLOOR && g.cov[0][1] == 0.0);
        }
    }

    #[test]
    fn constant_velocity_closed_form() {
        let u = vec![Gaussian2::new([1.0, 0.0], [[0.0; 2]; 2]); 20];
        let out = integrate_single_integrator(&u, [3.0, -1.0], 0.1).unwrap();
        assert!((out[19].mean[0] - 5.0).abs() < 1e-12);
        assert!((out[19].mean[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_covariance_accumulates() {
        let out = integrate_single_integrator(&still(20, 0.01), [0.0, 0.0], 0.1).unwrap();
        assert!((out[19].cov[0][0] - 0.002).abs() < 1e-7);
        assert!((out[19].cov[1][1] - 0.002).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bad = vec![Gaussian2::new([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])];
        assert!(matches!(integrate_single_integrator(&bad, [0.0, 0.0], 0.1), Err(Error::NotPsd(_))));
        assert!(integrate_single_integrator(&still(1, 0.0), [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn moments_agree_across_branches() {
        let dt = 0.1;
        for n in 0..4 {
            for w in [-7.0, 3.0, 5.0] {
                let (a, b) = moments_series(n, w, dt);
                let (c, d) = moments_closed(n, w, dt);
                let scale = dt.powi(n as i32 + 1);
                assert!((a - c).abs() < 1e-12 * scale && (b - d).abs() < 1e-12 * scale, "n={n} w={w}");
            }
        }
        let (c0, s0) = trig_moments(0, 2.0, 1.0);
        assert!((c0 - 2f64.sin() / 2.0).abs() < 1e-15);
        assert!((s0 - (1.0 - 2f64.cos()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn straight_line_without_controls() {
        let start = UnicycleState { position: [0.0, 0.0], heading: 0.0, speed: 3.0 };
        let out = unicycle_integrate(&still(10, 0.0), &start, 0.1).unwrap();
        for (k, g) in out.iter().enumerate() {
            assert!((g.mean[0] - 3.0 * 0.1 * (k + 1) as f64).abs() < 1e-12);
            assert!(g.mean[1].abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_circle() {
        let (v, w) = (4.0, 0.5);
        let steps = 100;
        let dt = std::f64::consts::FRAC_PI_2 / w / steps as f64;
        let u = vec![Gaussian2::new([w, 0.0], [[0.0; 2]; 2]); steps];
        let start = UnicycleState { position: [0.0, 0.0], heading: 0.0, speed: v };
        let end = unicycle_integrate(&u, &start, dt).unwrap()[steps - 1].mean;
        assert!((end[0] - v / w).abs() < 1e-9 && (end[1] - v / w).abs() < 1e-9, "{end:?}");
    }

    #[test]
    fn tiny_turn_rate_matches_straight_line() {
        let u = vec![Gaussian2::new([1e-9, 0.5], [[0.0; 2]; 2]); 20];
        let start = UnicycleState { position: [1.0, 1.0], heading: 0.3, speed: 2.0 };
        let out = unicycle_integrate(&u, &start, 0.1).unwrap();
        let t = 2.0;
        let d = 2.0 * t + 0.25 * t * t;
        let end = out[19].mean;
        assert!((end[0] - (1.0 + d * 0.3f64.cos())).abs() < 1e-6);
        assert!((end[1] - (1.0 + d * 0.3f64.sin())).abs() < 1e-6);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let s = UnicycleState { position: [0.5, -0.2], heading: 0.7, speed: 3.0 };
        let (w, a, dt) = (0.8, -0.4, 0.1);
        let (_, f, g) = unicycle_step(&s, w, a, dt);
        let flat = |s: &UnicycleState| [s.position[0], s.position[1], s.heading, s.speed];
        let eps = 1e-6;
        for j in 0..4 {
            let mut hi = s;
            let mut lo = s;
            match j {
                0 => (hi.position[0] += eps, lo.position[0] -= eps),
                1 => (hi.position[1] += eps, lo.position[1] -= eps),
                2 => (hi.heading += eps, lo.heading -= eps),
                _ => (hi.speed += eps, lo.speed -= eps),
            };
            let (ph, pl) = (flat(&unicycle_step(&hi, w, a, dt).0), flat(&unicycle_step(&lo, w, a, dt).0));
            for i in 0..4 {
                assert!((f[i][j] - (ph[i] - pl[i]) / (2.0 * eps)).abs() < 1e-7, "F[{i}][{j}]");
            }
        }
        for j in 0..2 {
            let (wh, ah, wl, al) = if j == 0 { (w + eps, a, w - eps, a) } else { (w, a + eps, w, a - eps) };
            let (ph, pl) = (flat(&unicycle_step(&s, wh, ah, dt).0), flat(&unicycle_step(&s, wl, al, dt).0));
            for i in 0..4 {
                assert!((g[i][j] - (ph[i] - pl[i]) / (2.0 * eps)).abs() < 1e-7, "G[{i}][{j}]");
            }
        }
    }

    proptest! {
        #[test]
        fn unicycle_covariances_stay_psd(
            w in prop::collection::vec(-2.0f64..2.0, 15),
            var in prop::collection::vec(0.0f64..0.5, 15),
            speed in 0.0f64..20.0,
        ) {
            let u: Vec<Gaussian2> = w.iter().zip(&var)
                .map(|(&w, &s)| Gaussian2::new([w, 0.3], [[s, 0.1 * s], [0.1 * s, s]]))
                .collect();
            let start = UnicycleState { position: [0.0, 0.0], heading: 1.0, speed };
            for g in unicycle_integrate(&u, &start, 0.1).unwrap() {
                prop_assert!(is_psd(&g.cov, 0.0));
            }
        }
    }
}
