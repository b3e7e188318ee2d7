//! Rectified flow: straight-path interpolation, velocity targets, losses and
//! the Euler sampler.
//!
//! Conventions: `t = 0` is data (`z0`), `t = 1` is noise (`z1`), the path is
//! `z_t = (1 - t)·z0 + t·z1` and its velocity is `z1 - z0`. Sampling walks a
//! strictly decreasing schedule from 1 to 0.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DTensor, Real};

/// Point on the path together with the noise draw that produced it.
#[derive(Debug, Clone)]
pub struct FlowState<F: Real> {
    pub z_t: DTensor<F>,
    pub t: f64,
    pub z1: DTensor<F>,
}

impl<F: Real> FlowState<F> {
    pub fn new(z0: &DTensor<F>, z1: DTensor<F>, t: f64) -> Result<Self> {
        let z_t = interpolate(z0, &z1, t)?;
        Ok(Self { z_t, t, z1 })
    }
}

/// Strictly decreasing timesteps from exactly 1 down to exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    timesteps: Vec<f64>,
}

impl Schedule {
    pub fn new(timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.len() < 2 || timesteps[0] != 1.0 || *timesteps.last().unwrap() != 0.0 {
            return Err(Error::invalid("schedule must run from 1 to 0"));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("schedule must be strictly decreasing"));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// Number of Euler steps.
    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }
}

/// Uniformly spaced schedule `t_i = i / T`, `i = T..0`.
pub fn linear_schedule(steps: usize) -> Result<Schedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    let ts = (0..=steps)
        .rev()
        .map(|i| if i == steps { 1.0 } else { i as f64 / steps as f64 })
        .collect();
    Schedule::new(ts)
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t)·z0 + t·z1`; the endpoints are returned exactly.
pub fn interpolate<F: Real>(z0: &DTensor<F>, z1: &DTensor<F>, t: f64) -> Result<DTensor<F>> {
    check_t(t)?;
    z0.same_shape(z1)?;
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(z1.clone());
    }
    let (a, b) = (F::c(1.0 - t), F::c(t));
    z0.zip_map(z1, |x, y| a * x + b * y)
}

/// Ground-truth path velocity `z1 - z0`.
pub fn oracle_velocity<F: Real>(z0: &DTensor<F>, z1: &DTensor<F>) -> Result<DTensor<F>> {
    z1.zip_map(z0, |a, b| a - b)
}

fn require_finite<F: Real>(name: &str, t: &DTensor<F>) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Flow-matching loss: mean squared error between `z1 - z0` and `v_pred`.
pub fn fm_loss<F: Real>(v_pred: &DTensor<F>, z0: &DTensor<F>, z1: &DTensor<F>) -> Result<f64> {
    require_finite("v_pred", v_pred)?;
    require_finite("z0", z0)?;
    require_finite("z1", z1)?;
    let target = oracle_velocity(z0, z1)?;
    mse(v_pred, &target)
}

fn mse<F: Real>(a: &DTensor<F>, b: &DTensor<F>) -> Result<f64> {
    a.same_shape(b)?;
    let sq: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .collect();
    Ok(crate::tensor::pairwise_sum(&sq) / sq.len() as f64)
}

/// Recorded regression loss `mean((target - v_pred)²)` for training.
pub fn regression_loss<F: Real>(g: &mut Graph<F>, v_pred: Var, target: &DTensor<F>) -> Result<Var> {
    let t = g.constant(target.clone());
    g.mse(v_pred, t)
}

/// One Euler step `z + (t_prev - t_i)·v`.
pub fn euler_step<F: Real>(z: &DTensor<F>, v: &DTensor<F>, t_i: f64, t_prev: f64) -> Result<DTensor<F>> {
    if t_prev >= t_i {
        return Err(Error::invalid(format!("euler step needs t_prev < t_i ({t_prev} >= {t_i})")));
    }
    let dt = F::c(t_prev - t_i);
    z.zip_map(v, |a, b| a + dt * b)
}

/// Anything that predicts a velocity for a latent at time `t`.
pub trait VelocityField<F: Real> {
    fn velocity(&self, z_t: &DTensor<F>, t: f64) -> Result<DTensor<F>>;
}

impl<F: Real, T: Fn(&DTensor<F>, f64) -> Result<DTensor<F>>> VelocityField<F> for T {
    fn velocity(&self, z_t: &DTensor<F>, t: f64) -> Result<DTensor<F>> {
        self(z_t, t)
    }
}

/// Seeded standard-normal noise with the given shape.
pub fn noise<F: Real>(shape: &[usize], seed: u64) -> DTensor<F> {
    let n = shape.iter().product();
    DTensor::from_f64(shape, &rng::normal_vec(seed, n)).expect("noise shape")
}

/// Integrates `field` from seeded noise at t = 1 to t = 0.
pub fn sample<F: Real>(
    field: &impl VelocityField<F>,
    shape: &[usize],
    seed: u64,
    schedule: &Schedule,
) -> Result<DTensor<F>> {
    sample_from(field, noise(shape, seed), schedule)
}

/// Euler integration from an explicit `z1`.
pub fn sample_from<F: Real>(
    field: &impl VelocityField<F>,
    z1: DTensor<F>,
    schedule: &Schedule,
) -> Result<DTensor<F>> {
    let ts = schedule.timesteps();
    let mut z = z1;
    for (step, w) in ts.windows(2).enumerate() {
        let v = field.velocity(&z, w[0])?;
        z = euler_step(&z, &v, w[0], w[1])?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("latent after sampling step {step}")));
        }
    }
    Ok(z)
}

/// Best/worst clean latents sharing one noise draw.
#[derive(Debug, Clone)]
pub struct ContrastivePair<F: Real> {
    pub z0_best: DTensor<F>,
    pub z0_worst: DTensor<F>,
    pub shared_noise: DTensor<F>,
    pub lambda: f64,
}

impl<F: Real> ContrastivePair<F> {
    pub fn new(
        z0_best: DTensor<F>,
        z0_worst: DTensor<F>,
        shared_noise: DTensor<F>,
        lambda: f64,
    ) -> Result<Self> {
        z0_best.same_shape(&z0_worst)?;
        z0_best.same_shape(&shared_noise)?;
        let pair = Self {
            z0_best,
            z0_worst,
            shared_noise,
            lambda,
        };
        pair.check_lambda()?;
        Ok(pair)
    }

    fn check_lambda(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `z_t` on the path anchored at `anchor` with the pair's shared noise.
    pub fn state(&self, anchor: &DTensor<F>, t: f64) -> Result<DTensor<F>> {
        interpolate(anchor, &self.shared_noise, t)
    }
}

/// Contrastive target `(z0_best - z0_worst) / lambda`.
pub fn contrastive_velocity<F: Real>(pair: &ContrastivePair<F>) -> Result<DTensor<F>> {
    pair.check_lambda()?;
    let inv = F::c(1.0 / pair.lambda);
    pair.z0_best.zip_map(&pair.z0_worst, |b, w| (b - w) * inv)
}

/// Mean-square discrepancy between `v_pred` and the contrastive target.
pub fn contrastive_loss<F: Real>(v_pred: &DTensor<F>, pair: &ContrastivePair<F>) -> Result<f64> {
    require_finite("v_pred", v_pred)?;
    require_finite("z0_best", &pair.z0_best)?;
    require_finite("z0_worst", &pair.z0_worst)?;
    let target = contrastive_velocity(pair)?;
    mse(v_pred, &target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: &[f64]) -> DTensor<f64> {
        DTensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let z0 = t64(&[0.3, -1.0]);
        let z1 = t64(&[2.0, 4.0]);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        let m = interpolate(&t64(&[0., 0.]), &z1, 0.5).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0]);
        assert!(interpolate(&z0, &t64(&[1.0]), 0.5).is_err());
        assert!(interpolate(&z0, &z1, 1.5).is_err());
    }

    #[test]
    fn velocity_is_time_derivative_of_path() {
        let z0 = t64(&[1.0, 1.0, -0.25]);
        let z1 = t64(&[3.0, 0.0, 0.75]);
        let v = oracle_velocity(&z0, &z1).unwrap();
        assert_eq!(&v.data()[..2], &[2.0, -1.0]);
        assert!(oracle_velocity(&z0, &z0).unwrap().data().iter().all(|&x| x == 0.0));
        let h = 1e-6;
        for t in [0.2, 0.5, 0.9] {
            let a = interpolate(&z0, &z1, t + h).unwrap();
            let b = interpolate(&z0, &z1, t - h).unwrap();
            for i in 0..3 {
                let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
                assert!((fd - v.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fm_loss_cases() {
        let z0 = t64(&[0.5, -0.5, 1.0]);
        let z1 = t64(&[1.0, 2.0, -1.0]);
        let v = oracle_velocity(&z0, &z1).unwrap();
        assert_eq!(fm_loss(&v, &z0, &z1).unwrap(), 0.0);
        let c = 0.3;
        let off = v.map(|x| x + c);
        assert!((fm_loss(&off, &z0, &z1).unwrap() - c * c).abs() < 1e-12);
        let bad = t64(&[f64::NAN, 0.0, 0.0]);
        assert!(fm_loss(&bad, &z0, &z1).is_err());
    }

    #[test]
    fn euler_step_cases() {
        let z = t64(&[1.0]);
        assert_eq!(euler_step(&z, &t64(&[0.0]), 1.0, 0.5).unwrap(), z);
        assert_eq!(euler_step(&z, &t64(&[2.0]), 1.0, 0.5).unwrap().data(), &[0.0]);
        assert!(euler_step(&z, &z, 0.5, 0.5).is_err());
    }

    #[test]
    fn linear_schedules() {
        assert_eq!(linear_schedule(1).unwrap().timesteps(), &[1.0, 0.0]);
        assert_eq!(
            linear_schedule(4).unwrap().timesteps(),
            &[1.0, 0.75, 0.5, 0.25, 0.0]
        );
        for t in 1..50 {
            let s = linear_schedule(t).unwrap();
            assert_eq!(s.timesteps()[0], 1.0);
            assert_eq!(*s.timesteps().last().unwrap(), 0.0);
            assert_eq!(s.steps(), t);
        }
        assert!(linear_schedule(0).is_err());
        assert!(Schedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn sampler_is_exact_on_linear_field() {
        let target = t64(&[0.25, -1.5, 3.0, 0.0]);
        // Exact velocity toward a fixed point: v(z, t) = (z - z0*) / t.
        let field = |z: &DTensor<f64>, t: f64| z.zip_map(&target, |a, b| (a - b) / t);
        for steps in [1, 5, 20] {
            let out = sample(&field, &[4], 7, &linear_schedule(steps).unwrap()).unwrap();
            assert!(out.max_abs_diff(&target).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn sampler_determinism_and_seed_sensitivity() {
        let field = |z: &DTensor<f32>, _t: f64| Ok(z.map(|x| 0.5 * x));
        let s = linear_schedule(20).unwrap();
        let a = sample(&field, &[8], 1, &s).unwrap();
        let b = sample(&field, &[8], 1, &s).unwrap();
        let c = sample(&field, &[8], 2, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
    }

    #[test]
    fn sampler_reports_step_of_blowup() {
        let field = |z: &DTensor<f64>, t: f64| {
            Ok(if t < 0.6 { z.map(|_| f64::INFINITY) } else { z.clone() })
        };
        let err = sample(&field, &[2], 0, &linear_schedule(4).unwrap()).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }

    #[test]
    fn contrastive_velocity_cases() {
        let z = t64(&[0.0, 0.0]);
        let pair = ContrastivePair::new(t64(&[0.2, -0.4]), z.clone(), z.clone(), 0.2).unwrap();
        let v = contrastive_velocity(&pair).unwrap();
        assert!((v.data()[0] - 1.0).abs() < 1e-12 && (v.data()[1] + 2.0).abs() < 1e-12);
        let half = ContrastivePair { lambda: 0.1, ..pair.clone() };
        let v2 = contrastive_velocity(&half).unwrap();
        for i in 0..2 {
            assert!((v2.data()[i] - 2.0 * v.data()[i]).abs() < 1e-12);
        }
        let same = ContrastivePair::new(z.clone(), z.clone(), z.clone(), 0.2).unwrap();
        assert!(contrastive_velocity(&same).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(contrastive_loss(&z, &same).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&v, &pair).unwrap(), 0.0);
        assert!(ContrastivePair::new(z.clone(), z.clone(), z.clone(), 0.0).is_err());
        let neg = ContrastivePair { lambda: -1.0, ..pair };
        assert!(contrastive_velocity(&neg).is_err());
    }
}
