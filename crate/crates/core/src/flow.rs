//! Optimal-transport conditional flow matching.
//!
//! A prior draw `x0 ~ N(0, I)` and a data point `x1` are joined by the straight
//! path `phi_t = (1 - (1 - sigma_min) t) x0 + t x1`, whose constant velocity
//! `u = x1 - (1 - sigma_min) x0` is the regression target for the learned
//! field. Sampling integrates the learned field from `t = 0` to `t = 1` with
//! forward Euler on a uniform grid.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub n_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.0,
            n_steps: 64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "flow.sigma_min = {} must lie in [0, 1)",
                self.sigma_min
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("flow.n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training draw along the conditional path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub t: T,
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub xt: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn draw<R: Rng + ?Sized>(x1: Tensor<T>, sigma_min: f64, rng: &mut R) -> Self {
        let t = T::of(rng.gen::<f64>());
        let x0 = sample_prior(x1.shape(), rng);
        let xt = phi_t(&x0, &x1, t, sigma_min).expect("prior shares the data shape");
        let target = target_field(&x0, &x1, sigma_min).expect("prior shares the data shape");
        Self {
            t,
            x0,
            x1,
            xt,
            target,
        }
    }
}

/// I.i.d. standard normal entries.
pub fn sample_prior<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Elementwise `(1 - (1 - sigma_min) t) x0 + t x1`.
pub fn phi_t<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: T, sigma_min: f64) -> Result<Tensor<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let a = T::one() - (T::one() - T::of(sigma_min)) * t;
    x0.zip_map(x1, |p, q| a * p + t * q)
}

/// Elementwise `x1 - (1 - sigma_min) x0`; the time derivative of [`phi_t`].
pub fn target_field<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, sigma_min: f64) -> Result<Tensor<T>> {
    let b = T::one() - T::of(sigma_min);
    x0.zip_map(x1, |p, q| q - b * p)
}

/// Expands a per-row mask to per-cell weights, returning the valid-cell count.
fn row_width(len: usize, mask: &[bool]) -> Result<usize> {
    if mask.is_empty() || len % mask.len() != 0 {
        return Err(Error::ShapeMismatch(format!(
            "mask of {} rows does not tile {len} values",
            mask.len()
        )));
    }
    Ok(len / mask.len())
}

/// Mean of `(predicted - target)^2` over the cells of rows where `mask` is set.
///
/// `mask` has one flag per row (frame); each flag covers
/// `len / mask.len()` consecutive cells.
pub fn cfm_loss<T: Real>(predicted: &[T], target: &[T], mask: &[bool]) -> Result<T> {
    cfm_loss_with_grad(predicted, target, mask, None)
}

/// [`cfm_loss`], optionally writing `d loss / d predicted` into `grad`.
pub fn cfm_loss_with_grad<T: Real>(
    predicted: &[T],
    target: &[T],
    mask: &[bool],
    grad: Option<&mut [T]>,
) -> Result<T> {
    if predicted.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} values, target {}",
            predicted.len(),
            target.len()
        )));
    }
    let width = row_width(predicted.len(), mask)?;
    let valid = mask.iter().filter(|&&m| m).count() * width;
    if valid == 0 {
        return Err(Error::Empty("loss mask selects no frames"));
    }
    let inv = T::one() / T::of(valid as f64);
    let mut sum = T::zero();
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for i in r * width..(r + 1) * width {
            let d = predicted[i] - target[i];
            sum += d * d;
        }
    }
    if let Some(g) = grad {
        let two = T::of(2.0) * inv;
        for (r, &m) in mask.iter().enumerate() {
            for i in r * width..(r + 1) * width {
                g[i] = if m {
                    two * (predicted[i] - target[i])
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(sum * inv)
}

/// Forward Euler from `t = 0` to `t = 1` in `n_steps` uniform steps:
/// `x_{k+1} = x_k + field(x_k, k / n, cond) / n`.
pub fn euler_integrate<T, C, F>(
    mut field: F,
    x0: &Tensor<T>,
    cond: &C,
    n_steps: usize,
) -> Result<Tensor<T>>
where
    T: Real,
    C: ?Sized,
    F: FnMut(&Tensor<T>, T, &C) -> Result<Tensor<T>>,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let h = T::one() / T::of(n_steps as f64);
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = T::of(k as f64 / n_steps as f64);
        let v = field(&x, t, cond)?;
        x.ensure_same_shape(&v)?;
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
        if !x.all_finite() {
            return Err(Error::NonFiniteStep { step: k });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn prior_is_reproducible_and_shaped() {
        let a: Tensor<f32> = sample_prior(&[2, 94, 128], &mut ChaCha8Rng::seed_from_u64(3));
        let b: Tensor<f32> = sample_prior(&[2, 94, 128], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 94, 128]);
    }

    #[test]
    fn prior_moments() {
        let x: Tensor<f64> = sample_prior(&[100_000], &mut ChaCha8Rng::seed_from_u64(11));
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..1.03).contains(&var), "var {var}");
    }

    #[test]
    fn interpolant_values() {
        let (x0, x1) = (t1(&[2.0]), t1(&[6.0]));
        assert_eq!(phi_t(&x0, &x1, 0.25, 0.0).unwrap().data(), &[3.0]);
        let (x0, x1) = (t1(&[1.0]), t1(&[0.0]));
        let v = phi_t(&x0, &x1, 0.5, 0.1).unwrap().data()[0];
        assert!((v - 0.55).abs() < 1e-15);
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let x0: Tensor<f64> = sample_prior(&[64], &mut ChaCha8Rng::seed_from_u64(1));
        let x1: Tensor<f64> = sample_prior(&[64], &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(phi_t(&x0, &x1, 0.0, 0.0).unwrap(), x0);
        assert_eq!(phi_t(&x0, &x1, 0.0, 0.3).unwrap(), x0);
        assert_eq!(phi_t(&x0, &x1, 1.0, 0.0).unwrap(), x1);
    }

    #[test]
    fn target_values() {
        let f = target_field(&t1(&[1.0, 2.0]), &t1(&[3.0, 5.0]), 0.0).unwrap();
        assert_eq!(f.data(), &[2.0, 3.0]);
        let same = t1(&[0.3, -1.2]);
        assert!(target_field(&same, &same, 0.0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn target_is_central_difference_of_interpolant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Tensor<f64> = sample_prior(&[32], &mut rng);
        let x1: Tensor<f64> = sample_prior(&[32], &mut rng);
        for sigma in [0.0, 0.1] {
            let h = 1e-3;
            let ahead = phi_t(&x0, &x1, 0.3 + h, sigma).unwrap();
            let behind = phi_t(&x0, &x1, 0.3 - h, sigma).unwrap();
            let target = target_field(&x0, &x1, sigma).unwrap();
            for i in 0..32 {
                let fd = (ahead.data()[i] - behind.data()[i]) / (2.0 * h);
                let u = target.data()[i];
                assert!((fd - u).abs() <= 1e-6 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(phi_t(&t1(&[1.0]), &t1(&[1.0, 2.0]), 0.5, 0.0).is_err());
        assert!(target_field(&t1(&[1.0]), &t1(&[1.0, 2.0]), 0.0).is_err());
        assert!(phi_t(&t1(&[1.0]), &t1(&[1.0]), 1.5, 0.0).is_err());
    }

    #[test]
    fn loss_cases() {
        let p = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cfm_loss(&p, &p, &[true, true]).unwrap(), 0.0);
        let shifted: Vec<f64> = p.iter().map(|v| v + 0.5).collect();
        assert_eq!(cfm_loss(&shifted, &p, &[true, true]).unwrap(), 0.25);
        // errors only inside the masked-out second frame
        let q = [1.0, 2.0, 30.0, -4.0];
        assert_eq!(cfm_loss(&q, &p, &[true, false]).unwrap(), 0.0);
        assert!(cfm_loss(&q, &p, &[false, false]).is_err());
        assert!(cfm_loss(&q, &p[..3], &[true]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let p: [f64; 6] = [0.3, -1.0, 2.0, 0.7, 0.1, 0.0];
        let t = [0.0, 0.5, 1.0, -1.0, 2.0, 1.0];
        let mask = [true, false, true];
        let mut g = [0.0; 6];
        cfm_loss_with_grad(&p, &t, &mask, Some(&mut g)).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut up = p;
            up[i] += h;
            let mut dn = p;
            dn[i] -= h;
            let fd = (cfm_loss(&up, &t, &mask).unwrap() - cfm_loss(&dn, &t, &mask).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_field_moves_by_exactly_one_unit() {
        let x0 = t1(&[0.25, -2.0, 7.5]);
        let u = t1(&[1.0, 0.5, -4.0]);
        for n in [1, 2, 8, 64] {
            let out = euler_integrate(|_, _, u: &Tensor<f64>| Ok(u.clone()), &x0, &u, n).unwrap();
            assert_eq!(out.data(), &[1.25, -1.5, 3.5]);
        }
    }

    #[test]
    fn linear_growth_matches_euler_product() {
        let out = euler_integrate(|x: &Tensor<f64>, _, _: &()| Ok(x.clone()), &t1(&[1.0]), &(), 64)
            .unwrap();
        let want = (1.0f64 + 1.0 / 64.0).powi(64);
        assert!((out.data()[0] - want).abs() < 1e-12);
        assert!((out.data()[0] - 2.697_345).abs() < 1e-6);
    }

    #[test]
    fn true_field_reaches_the_data_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Tensor<f64> = sample_prior(&[200], &mut rng);
        let x1: Tensor<f64> = sample_prior(&[200], &mut rng);
        let u = target_field(&x0, &x1, 0.0).unwrap();
        let out = euler_integrate(|_, _, _: &()| Ok(u.clone()), &x0, &(), 64).unwrap();
        for (a, b) in out.data().iter().zip(x1.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let err = euler_integrate(
            |x: &Tensor<f64>, t, _: &()| Ok(x.map(|_| if t > 0.2 { f64::NAN } else { 1.0 })),
            &t1(&[0.0]),
            &(),
            10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteStep { step: 3 }));
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig::default().validate().is_ok());
        assert!(FlowConfig { sigma_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig { n_steps: 0, ..Default::default() }.validate().is_err());
    }
}
