//! Central finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so coordinates with vanishing gradient are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    /// Index of the checked tensor within the parameter list.
    pub tensor: usize,
    /// Flat index within that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Configured checker. By default every coordinate is checked; `sample`
/// limits the work to a seeded random subset per tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sample(mut self, per_tensor: usize, seed: u64) -> Self {
        self.max_coords = Some(per_tensor);
        self.seed = seed;
        self
    }

    /// Compares autodiff against central differences of `f` at `values`.
    /// `f` receives one tensor per entry of `values`, in order.
    pub fn run<F>(&self, f: F, values: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let leaves = values
            .iter()
            .map(|v| Tensor::param(v.shape(), v.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&leaves)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        loss.backward()?;

        let mut rng = Rng::new(self.seed);
        let mut coords = Vec::new();
        for (ti, leaf) in leaves.iter().enumerate() {
            let analytic = leaf
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let mut indices: Vec<usize> = (0..leaf.numel()).collect();
            if let Some(n) = self.max_coords {
                rng.shuffle(&mut indices);
                indices.truncate(n);
                indices.sort_unstable();
            }
            for index in indices {
                let numeric = self.central_difference(&f, values, ti, index)?;
                coords.push(CoordCheck {
                    tensor: ti,
                    index,
                    analytic: analytic[index],
                    numeric,
                    rel_error: relative_error(analytic[index], numeric),
                });
            }
        }
        let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        Ok(GradCheckReport {
            coords,
            max_rel_error,
            tol: self.tol,
        })
    }

    fn central_difference<F>(&self, f: &F, values: &[Tensor], ti: usize, index: usize) -> Result<f64>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let eval = |delta: f64| -> Result<f64> {
            let shifted = values
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    if j == ti {
                        let mut d = v.to_vec();
                        d[index] += delta;
                        Tensor::new(v.shape(), d)
                    } else {
                        Ok(v.detach())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let y = f(&shifted)?.item();
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite { index })
            }
        };
        Ok((eval(self.h)? - eval(-self.h)?) / (2.0 * self.h))
    }
}

/// Single-tensor convenience form.
pub fn grad_check<F>(f: F, p: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    GradCheck::new(h, tol).run(|ts| f(&ts[0]), std::slice::from_ref(p))
}
