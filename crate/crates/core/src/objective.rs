//! Differentiable scalar objectives over flat parameter vectors.

/// A loss surface that can be evaluated with or without its gradient.
///
/// Non-finite values are allowed as outputs; callers decide how to treat
/// them.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, &mut g)
    }

    /// Writes the gradient into `grad` and returns the value.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adapts a closure `(x, grad) -> value` into an [`Objective`].
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

/// `0.5 * (x - center)^T H (x - center) + offset` for a symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub hessian: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    pub offset: f64,
}

impl Quadratic {
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut hessian = vec![vec![0.0; n]; n];
        for (i, &d) in diag.iter().enumerate() {
            hessian[i][i] = d;
        }
        Self {
            hessian,
            center: vec![0.0; n],
            offset: 0.0,
        }
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let mut v = 0.0;
        for (i, row) in self.hessian.iter().enumerate() {
            let hd: f64 = row.iter().zip(&d).map(|(h, di)| h * di).sum();
            grad[i] = hd;
            v += d[i] * hd;
        }
        0.5 * v + self.offset
    }
}
