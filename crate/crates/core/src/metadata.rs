//! Cyclic sin/cos encoding of acquisition metadata and its projection into
//! the four leading encoder tokens (week, hour, lat, lon).

use crate::data::GeoTime;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const WEEK_PERIOD: f64 = 52.0;
pub const HOUR_PERIOD: f64 = 24.0;

/// Number of metadata tokens, in sequence order week, hour, lat, lon.
pub const META_TOKENS: usize = 4;
pub const META_NAMES: [&str; META_TOKENS] = ["week", "hour", "lat", "lon"];

/// `(sin θ, cos θ)` with `θ = 2π · value / period`.
pub fn cyclic_encode<T: Scalar>(value: T, period: T) -> Result<(T, T)> {
    if !(period > T::zero()) {
        return Err(Error::InvalidArgument(format!("period must be positive, got {period}")));
    }
    let theta = T::of(std::f64::consts::TAU) * value / period;
    Ok((theta.sin(), theta.cos()))
}

/// Four `(sin, cos)` pairs in week, hour, lat, lon order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetadataEncoding<T> {
    pub pairs: [(T, T); META_TOKENS],
}

impl<T: Scalar> MetadataEncoding<T> {
    /// Angle-zero encoding used when a chip carries no metadata.
    pub fn neutral() -> Self {
        Self { pairs: [(T::zero(), T::one()); META_TOKENS] }
    }

    /// The encoding as a `4 x 2` matrix.
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_fn(META_TOKENS, 2, |r, c| if c == 0 { self.pairs[r].0 } else { self.pairs[r].1 })
    }
}

pub fn encode_metadata<T: Scalar>(meta: &GeoTime, present: bool) -> MetadataEncoding<T> {
    if !present {
        return MetadataEncoding::neutral();
    }
    let angle = |theta: f64| (T::of(theta.sin()), T::of(theta.cos()));
    let pi = std::f64::consts::PI;
    MetadataEncoding {
        pairs: [
            angle(std::f64::consts::TAU * meta.week as f64 / WEEK_PERIOD),
            angle(std::f64::consts::TAU * meta.hour as f64 / HOUR_PERIOD),
            angle(pi * meta.lat as f64 / 180.0),
            angle(pi * meta.lon as f64 / 180.0),
        ],
    }
}

/// Four independent affine maps from a `(sin, cos)` pair to `d` features.
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataProjection<T> {
    /// `2 x d` weights per token.
    pub weights: [Matrix<T>; META_TOKENS],
    /// `1 x d` biases per token.
    pub biases: [Matrix<T>; META_TOKENS],
}

impl<T: Scalar> MetadataProjection<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: std::array::from_fn(|_| Matrix::zeros(2, dim)),
            biases: std::array::from_fn(|_| Matrix::zeros(1, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights[0].cols()
    }
}

/// `token_i = (sin_i, cos_i) · A_i + b_i`, returned as a `4 x d` matrix.
pub fn project_metadata<T: Scalar>(enc: &MetadataEncoding<T>, proj: &MetadataProjection<T>) -> Result<Matrix<T>> {
    let d = proj.dim();
    for i in 0..META_TOKENS {
        if proj.weights[i].shape() != (2, d) || proj.biases[i].shape() != (1, d) {
            return Err(Error::Shape(format!(
                "{} projection is {:?} + {:?}, expected (2, {d}) + (1, {d})",
                META_NAMES[i],
                proj.weights[i].shape(),
                proj.biases[i].shape()
            )));
        }
    }
    let mut out = Matrix::zeros(META_TOKENS, d);
    for (i, &(s, c)) in enc.pairs.iter().enumerate() {
        let (w, b) = (&proj.weights[i], &proj.biases[i]);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = s * w.get(0, j) + c * w.get(1, j) + b.get(0, j);
        }
    }
    Ok(out)
}
