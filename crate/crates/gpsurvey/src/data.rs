//! Data containers shared by the GP backends.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::Point;

/// A finite set of 2-D sample locations with scalar measurements.
#[derive(Clone, Debug, Default)]
pub struct DataBatch {
    points: Vec<Point>,
    values: Vec<f64>,
}

impl DataBatch {
    pub fn new(points: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "batch has {} points but {} values",
                points.len(),
                values.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && values[i].is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
            }
        }
        Ok(Self { points, values })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Sample variance of the targets (population form); 0 for < 2 samples.
    pub fn target_variance(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.values.iter().sum::<f64>() / n as f64;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
    }
}

/// Gaussian posterior marginal at one query point. Variance is the latent
/// (noise-free) variance so planner entropy reflects map uncertainty rather
/// than sensor noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Read-only view of a map posterior; what the planner consumes.
pub trait MapPosterior {
    fn predict_at(&self, points: &[Point]) -> Vec<PosteriorPrediction>;

    fn predict_one(&self, p: Point) -> PosteriorPrediction {
        self.predict_at(std::slice::from_ref(&p))[0]
    }
}
