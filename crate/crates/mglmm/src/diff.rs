//! Differentiation contract for the inner (random effects) and outer
//! (parameter) objectives.
//!
//! Gradients are exact everywhere: the outer objective carries its own
//! dual-mode derivative and the inner problem is analytic. The dense
//! Hessian of an objective without an analytic second derivative (the
//! post-fit observed information) is formed by central differences of the
//! exact gradient.

use crate::linalg::SquareMat;

/// A smooth objective with an exact gradient. Evaluation may mutate
/// internal caches (warm starts), hence `&mut self`.
pub trait DiffObjective {
    fn dim(&self) -> usize;
    fn value(&mut self, x: &[f64]) -> f64;
    /// Value and exact gradient (no finite differences).
    fn value_grad(&mut self, x: &[f64]) -> (f64, Vec<f64>);
    /// Analytic dense Hessian, for objectives that carry one.
    fn analytic_hessian(&mut self, _x: &[f64]) -> Option<SquareMat<f64>> {
        None
    }
}

/// Exact gradient of the objective at x.
pub fn gradient(obj: &mut dyn DiffObjective, x: &[f64]) -> Vec<f64> {
    obj.value_grad(x).1
}

/// Step used when differencing the gradient for a Hessian.
fn hessian_step(xi: f64) -> f64 {
    6e-6 * xi.abs().max(1.0)
}

/// Dense symmetric Hessian: the analytic one when the objective provides
/// it, otherwise central differences of the exact gradient, symmetrized.
pub fn hessian(obj: &mut dyn DiffObjective, x: &[f64]) -> SquareMat<f64> {
    if let Some(h) = obj.analytic_hessian(x) {
        return h;
    }
    let n = obj.dim();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let h = hessian_step(x[i]);
        xp[i] = x[i] + h;
        let gp = obj.value_grad(&xp).1;
        xp[i] = x[i] - h;
        let gm = obj.value_grad(&xp).1;
        xp[i] = x[i];
        cols.push(
            gp.iter()
                .zip(&gm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect(),
        );
    }
    SquareMat::from_fn(n, |i, j| 0.5 * (cols[i][j] + cols[j][i]))
}

/// Central-difference gradient oracle with the contract step
/// h_i = scale·max(1, |x_i|). Test harness for the exact gradients.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], scale: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = scale * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = ½ xᵀ A x − cᵀx with analytic pieces.
    struct Quadratic {
        a: SquareMat<f64>,
        c: Vec<f64>,
    }

    impl DiffObjective for Quadratic {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&mut self, x: &[f64]) -> f64 {
            let ax = self.a.mul_vec(x);
            let mut v = 0.0;
            for i in 0..x.len() {
                v += 0.5 * x[i] * ax[i] - self.c[i] * x[i];
            }
            v
        }
        fn value_grad(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
            let ax = self.a.mul_vec(x);
            let g: Vec<f64> = ax.iter().zip(&self.c).map(|(a, c)| a - c).collect();
            (self.value(x), g)
        }
    }

    fn sample() -> Quadratic {
        let mut a = SquareMat::<f64>::identity(3);
        a[(0, 1)] = 0.5;
        a[(1, 0)] = 0.5;
        a[(1, 1)] = 3.0;
        a[(2, 2)] = 2.0;
        Quadratic {
            a,
            c: vec![1.0, -2.0, 0.3],
        }
    }

    #[test]
    fn gradient_of_quadratic_is_linear_map() {
        let mut q = sample();
        let x = [0.7, -0.1, 2.0];
        let g = gradient(&mut q, &x);
        let want = {
            let ax = q.a.mul_vec(&x);
            ax.iter().zip(&q.c).map(|(a, c)| a - c).collect::<Vec<_>>()
        };
        assert_eq!(g, want);
        // the ½ xᵀ x case: gradient is x itself
        let mut identity = Quadratic {
            a: SquareMat::identity(3),
            c: vec![0.0; 3],
        };
        assert_eq!(gradient(&mut identity, &x), x.to_vec());
    }

    #[test]
    fn fd_hessian_of_quadratic_recovers_matrix() {
        let mut q = sample();
        let h = hessian(&mut q, &[0.2, 0.4, -1.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (h[(i, j)] - q.a[(i, j)]).abs() < 1e-9,
                    "({i},{j}): {} vs {}",
                    h[(i, j)],
                    q.a[(i, j)]
                );
            }
        }
    }

    #[test]
    fn fd_gradient_oracle_matches_exact_on_quadratic() {
        let mut q = sample();
        let x = [1.0, 2.0, -0.5];
        let exact = gradient(&mut q, &x);
        let approx = fd_gradient(|xx| q.value(xx), &x, 1e-5);
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
    }
}
