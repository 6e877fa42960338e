use super::image::{Image, LabeledImage};
use crate::error::{Error, Result};

/// Nearest-centroid classifier on raw pixels.
#[derive(Clone, Debug)]
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(set: &[LabeledImage], num_classes: usize) -> Result<Self> {
        let dim = set
            .first()
            .ok_or_else(|| Error::invalid("probe", "empty training set"))?
            .image
            .pixels()
            .len();
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for item in set {
            if item.label >= num_classes {
                return Err(Error::invalid(
                    "probe",
                    format!("label {} >= {num_classes}", item.label),
                ));
            }
            if item.image.pixels().len() != dim {
                return Err(Error::invalid("probe", "images differ in size"));
            }
            counts[item.label] += 1;
            for (s, v) in sums[item.label].iter_mut().zip(item.image.pixels()) {
                *s += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid("probe", format!("class {c} has no examples")));
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(Self { centroids: sums })
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn predict(&self, image: &Image) -> usize {
        let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(image.pixels()).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = dist(c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn accuracy(&self, set: &[LabeledImage]) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let hits = set.iter().filter(|s| self.predict(&s.image) == s.label).count();
        hits as f64 / set.len() as f64
    }
}
