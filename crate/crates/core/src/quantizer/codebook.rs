use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// `K` embeddings of width `d_code`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    embeddings: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::invalid("codebook", format!("empty codebook {size}x{dim}")));
        }
        if embeddings.len() != size * dim {
            return Err(Error::invalid(
                "codebook",
                format!("{size}x{dim} needs {} values, got {}", size * dim, embeddings.len()),
            ));
        }
        if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "codebook",
                format!("non-finite entry in row {}", i / dim),
            ));
        }
        Ok(Self { size, dim, embeddings })
    }

    /// Rows drawn from a standard normal.
    pub fn random(size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(size, dim, rng.normal_vec(size * dim))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn row(&self, index: usize) -> Result<&[f64]> {
        if index >= self.size {
            return Err(Error::invalid(
                "codebook",
                format!("index {index} out of range for K = {}", self.size),
            ));
        }
        Ok(&self.embeddings[index * self.dim..(index + 1) * self.dim])
    }

    /// Index of the row closest to `query` in Euclidean distance; ties go
    /// to the lowest index.
    pub fn nearest(&self, query: &[f64]) -> usize {
        debug_assert_eq!(query.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, row) in self.embeddings.chunks_exact(self.dim).enumerate() {
            let d: f64 = row.iter().zip(query).map(|(e, q)| (q - e) * (q - e)).sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Nearest code for every `d_code`-wide row of `latents`.
    pub fn nearest_codes(&self, latents: &[f64]) -> Result<Vec<usize>> {
        if !latents.len().is_multiple_of(self.dim) {
            return Err(Error::invalid(
                "quantize",
                format!("{} values do not split into rows of {}", latents.len(), self.dim),
            ));
        }
        Ok(latents.chunks_exact(self.dim).map(|q| self.nearest(q)).collect())
    }

    pub fn lookup(&self, codes: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(codes.len() * self.dim);
        for &c in codes {
            out.extend_from_slice(self.row(c)?);
        }
        Ok(out)
    }
}

/// Nearest-neighbour quantization of the last axis of `v`.
///
/// The returned tensor holds the selected embeddings exactly; its gradient
/// is passed straight through to `v`.
pub fn quantize(v: &Tensor, codebook: &Codebook) -> Result<(Tensor, Vec<usize>)> {
    if v.shape().last() != Some(&codebook.dim()) {
        return Err(Error::shape("quantize", v.shape(), &[codebook.size(), codebook.dim()]));
    }
    let codes = codebook.nearest_codes(v.data())?;
    let looked_up = Tensor::new(v.shape(), codebook.lookup(&codes)?)?;
    Ok((v.straight_through(&looked_up)?, codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_of_two() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let v = Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap();
        let (q, codes) = quantize(&v, &cb).unwrap();
        assert_eq!(codes, vec![0]);
        assert_eq!(q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut rows = vec![9.0; 12];
        rows[4..6].copy_from_slice(&[1.0, 0.0]);
        rows[10..12].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebook::new(6, 2, rows).unwrap();
        assert_eq!(cb.nearest(&[0.0, 0.0]), 2);
    }

    #[test]
    fn exact_row_has_zero_error() {
        let mut rng = Rng::new(1);
        let cb = Codebook::random(16, 4, &mut rng).unwrap();
        let v = Tensor::new(&[4], cb.row(11).unwrap().to_vec()).unwrap();
        let (q, codes) = quantize(&v, &cb).unwrap();
        assert_eq!(codes, vec![11]);
        assert_eq!(q.data(), v.data());
    }

    #[test]
    fn lookup_out_of_range() {
        let cb = Codebook::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(cb.lookup(&[2]).is_err());
        assert!(Codebook::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn gradient_passes_straight_through() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let v = Tensor::param(&[2, 2], vec![0.1, 0.2, 0.9, 0.7]).unwrap();
        let (q, _) = quantize(&v, &cb).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        q.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(v.grad().unwrap().data(), w.data());
    }
}
