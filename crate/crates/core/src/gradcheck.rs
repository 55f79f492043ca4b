//! Central-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    #[default]
    Central,
    /// Fourth-order five-point formula; resolves tiny gradients at a larger `h`.
    FivePoint,
    /// Ridders' extrapolation over central differences, starting at `eps`
    /// and shrinking; keeps the estimate with the smallest internal error.
    Ridders,
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;

/// Ridders' polynomial extrapolation of `(g(h) - g(-h)) / 2h` towards `h = 0`.
fn ridders(mut g: impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = [[0.0f64; RIDDERS_LEVELS]; RIDDERS_LEVELS];
    let mut h = h0;
    table[0][0] = (g(h)? - g(-h)?) / (2.0 * h);
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..RIDDERS_LEVELS {
        h /= RIDDERS_SHRINK;
        table[0][i] = (g(h)? - g(-h)?) / (2.0 * h);
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub stencil: Stencil,
    /// Coordinates sampled per tensor; tensors this small or smaller are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            stencil: Stencil::Central,
            samples_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn coordinates_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params`. Frozen tensors are skipped and do not appear in the report.
pub fn grad_check<F>(
    params: &ParamStore,
    analytic: &GradStore,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tensors: Vec::new(),
    };
    let mut eval = |p: &ParamStore| -> Result<f64> {
        let v = loss_fn(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss"))
        }
    };
    eval(&work)?;
    for idx in 0..params.len() {
        if !params.is_trainable(idx) {
            continue;
        }
        let len = params.get(idx).len();
        let coords: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck {
            name: params.name(idx).into(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for k in coords {
            let orig = work.get(idx).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(idx).data_mut()[k] = orig + offset;
                let v = eval(&work);
                work.get_mut(idx).data_mut()[k] = orig;
                v
            };
            let h = cfg.eps;
            let numeric = match cfg.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                }
                Stencil::Ridders => ridders(&mut at, h)?,
            };
            let a = analytic.get(idx).data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((k, a, numeric));
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.tensors.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Matrix;

    /// `0.5 * ||x W||^2` on the tape.
    fn quadratic(store: &ParamStore, x: &Matrix) -> (f64, GradStore) {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let w = tape.param(store, 0);
        let y = tape.matmul(xn, w).unwrap();
        let sq = tape.matmul_t(y, y).unwrap();
        let l = tape.scale(sq, 0.5);
        let g = tape.backward(l, store).unwrap();
        (tape.scalar(l), g)
    }

    #[test]
    fn quadratic_loss_checks_tightly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w: alloc::vec::Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.add("w", Matrix::from_vec(6, 5, w).unwrap());
        let x = Matrix::row_vector(&[0.3, -1.2, 0.7, 2.0, -0.4, 0.1]);
        let (_, g) = quadratic(&store, &x);
        // dW = x^T (x W)
        let y = x.matmul(store.get(0)).unwrap();
        let expect = x.t_matmul(&y).unwrap();
        for (a, b) in g.get(0).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let report = grad_check(
            &store,
            &g,
            |p| Ok(quadratic(p, &x).0),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.coordinates_checked(), 30);
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(&[0.7, -1.3]));
        let quartic = |p: &ParamStore| p.get(0).data().iter().map(|v| v * v * v * v).sum::<f64>();
        let mut g = GradStore::zeros_like(&store);
        *g.get_mut(0) = Matrix::row_vector(&[4.0 * 0.343, 4.0 * -2.197]);
        let check = |stencil| {
            let cfg = GradCheckConfig {
                eps: 1e-2,
                stencil,
                ..Default::default()
            };
            grad_check(&store, &g, |p| Ok(quartic(p)), &cfg).unwrap().max_rel_error
        };
        assert!(check(Stencil::Central) > 1e-5);
        assert!(check(Stencil::FivePoint) < 1e-12);
    }

    #[test]
    fn ridders_extrapolates_from_a_coarse_step() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(&[0.3, -0.8]));
        let f = |p: &ParamStore| p.get(0).data().iter().map(|v| libm::exp(2.0 * v)).sum::<f64>();
        let mut g = GradStore::zeros_like(&store);
        *g.get_mut(0) = Matrix::row_vector(&[2.0 * libm::exp(0.6), 2.0 * libm::exp(-1.6)]);
        let check = |stencil| {
            let cfg = GradCheckConfig {
                eps: 0.1,
                stencil,
                ..Default::default()
            };
            grad_check(&store, &g, |p| Ok(f(p)), &cfg).unwrap().max_rel_error
        };
        assert!(check(Stencil::Central) > 1e-3);
        assert!(check(Stencil::Ridders) < 1e-10);
    }

    #[test]
    fn frozen_tensor_not_reported() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::filled(1, 3, 0.5));
        store.add("b", Matrix::filled(1, 3, 0.5));
        store.set_trainable(1, false);
        let mut g = GradStore::zeros_like(&store);
        *g.get_mut(0) = Matrix::filled(1, 3, 1.0);
        let report = grad_check(
            &store,
            &g,
            |p| Ok(p.get(0).sum() + 7.0 * p.get(1).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.tensors.len(), 1);
        assert_eq!(report.tensors[0].name, "a");
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn nan_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::filled(1, 1, 0.5));
        let g = GradStore::zeros_like(&store);
        let r = grad_check(&store, &g, |_| Ok(f64::NAN), &GradCheckConfig::default());
        assert_eq!(r.unwrap_err(), Error::NonFinite("loss"));
    }
}
