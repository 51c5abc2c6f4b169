use nalgebra::DVector;
use serde::Serializer;

/// Serializes a vector as a plain JSON array.
pub(crate) fn ser_dvec<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}
