//! Per-input-channel activation norms.
//!
//! Sums of squares are accumulated in `f64` and rooted once in
//! [`NormAccumulator::finish`], so splitting the same rows into different
//! batches gives bitwise-identical norms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_store::NamedTensorSet;

/// Accumulated L2 norm of every input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNorms {
    pub values: Vec<f64>,
    /// Total number of activation rows folded in; 0 when loaded from a dump.
    pub token_count: u64,
}

impl ActivationNorms {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_norms(&values)?;
        Ok(Self {
            values,
            token_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiply every norm by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * t).collect(),
            token_count: self.token_count,
        }
    }
}

fn validate_norms(values: &[f64]) -> Result<()> {
    for (j, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("norm of channel {j} is {v}")));
        }
        if v < 0.0 {
            return Err(Error::Domain(format!("norm of channel {j} is negative ({v})")));
        }
    }
    Ok(())
}

/// Streaming accumulator for per-channel sums of squares.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    sum_sq: Vec<f64>,
    tokens: u64,
}

impl NormAccumulator {
    pub fn new(d_in: usize) -> Self {
        Self {
            sum_sq: vec![0.0; d_in],
            tokens: 0,
        }
    }

    /// Fold in an `n × d_in` activation batch.
    pub fn add_batch(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.sum_sq.len() {
            return Err(Error::Shape(format!(
                "batch has {} channels, accumulator expects {}",
                batch.cols(),
                self.sum_sq.len()
            )));
        }
        if batch.rows() == 0 || batch.cols() == 0 {
            return Err(Error::EmptyInput("activation batch has no rows".into()));
        }
        if let Some(pos) = batch.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation at row {}, channel {}",
                pos / batch.cols(),
                pos % batch.cols()
            )));
        }
        for row in batch.iter_rows() {
            for (acc, &x) in self.sum_sq.iter_mut().zip(row) {
                let x = x as f64;
                *acc += x * x;
            }
        }
        self.tokens += batch.rows() as u64;
        Ok(())
    }

    pub fn finish(self) -> ActivationNorms {
        ActivationNorms {
            values: self.sum_sq.into_iter().map(f64::sqrt).collect(),
            token_count: self.tokens,
        }
    }
}

/// Accumulate norms over a stream of activation batches.
pub fn accumulate_norms<'a, I>(batches: I) -> Result<ActivationNorms>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut batches = batches.into_iter();
    let first = batches
        .next()
        .ok_or_else(|| Error::EmptyInput("no activation batches".into()))?;
    let mut acc = NormAccumulator::new(first.cols());
    acc.add_batch(first)?;
    for b in batches {
        acc.add_batch(b)?;
    }
    Ok(acc.finish())
}

/// Take a pre-computed 1-D norm vector from a tensor set.
pub fn load_norms(set: &NamedTensorSet, name: &str) -> Result<ActivationNorms> {
    let entry = set
        .get(name)
        .ok_or_else(|| Error::Config(format!("no tensor named {name:?}")))?;
    if entry.shape.len() != 1 {
        return Err(Error::Shape(format!(
            "norms tensor {name:?} must be 1-D, got shape {:?}",
            entry.shape
        )));
    }
    let values: Vec<f64> = entry.data.iter().map(|&v| v as f64).collect();
    validate_norms(&values).map_err(|e| match e {
        Error::Domain(m) => Error::Domain(format!("{name}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{name}: {m}")),
        other => other,
    })?;
    Ok(ActivationNorms {
        values,
        token_count: 0,
    })
}

/// Layer name of a norms tensor: the tensor name without a `.norms` suffix.
pub fn norms_layer_name(tensor_name: &str) -> &str {
    tensor_name.strip_suffix(".norms").unwrap_or(tensor_name)
}

/// Every 1-D tensor of a norms file, keyed by layer name.
pub fn collect_layer_norms(set: &NamedTensorSet) -> Result<BTreeMap<String, ActivationNorms>> {
    let mut out = BTreeMap::new();
    for (name, entry) in set.iter() {
        if entry.shape.len() == 1 {
            out.insert(norms_layer_name(name).to_string(), load_norms(set, name)?);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no 1-D norms tensors".into()));
    }
    Ok(out)
}

/// Norms of every 2-D activation tensor (`tokens x d_in`), keyed by layer
/// name (the tensor name without a `.acts` suffix).
pub fn norms_from_activations(set: &NamedTensorSet) -> Result<BTreeMap<String, ActivationNorms>> {
    let mut out = BTreeMap::new();
    for (name, entry) in set.iter() {
        if entry.shape.len() != 2 {
            continue;
        }
        let m = entry.to_matrix()?;
        let mut acc = NormAccumulator::new(m.cols());
        acc.add_batch(&m).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{name}: {msg}")),
            Error::EmptyInput(msg) => Error::EmptyInput(format!("{name}: {msg}")),
            other => other,
        })?;
        let layer = name.strip_suffix(".acts").unwrap_or(name);
        out.insert(layer.to_string(), acc.finish());
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no 2-D activation tensors".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{DType, TensorEntry};
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_has_unit_norms() {
        let n = accumulate_norms([&m(&[&[1.0, 0.0], &[0.0, 1.0]])]).unwrap();
        assert_eq!(n.values, vec![1.0, 1.0]);
        assert_eq!(n.token_count, 2);
    }

    #[test]
    fn three_four_five() {
        let n = accumulate_norms([&m(&[&[3.0, 0.0], &[4.0, 0.0]])]).unwrap();
        assert_eq!(n.values, vec![5.0, 0.0]);
    }

    #[test]
    fn split_batches_match_joint() {
        let joint = accumulate_norms([&m(&[&[3.0, 0.0], &[4.0, 0.0]])]).unwrap();
        let split = accumulate_norms([&m(&[&[3.0, 0.0]]), &m(&[&[4.0, 0.0]])]).unwrap();
        assert_eq!(joint, split);
    }

    #[test]
    fn mismatched_width_is_shape_error() {
        let r = accumulate_norms([&m(&[&[1.0, 2.0]]), &m(&[&[1.0, 2.0, 3.0]])]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn nan_is_numeric_error() {
        let r = accumulate_norms([&m(&[&[1.0, f32::NAN]])]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn load_norms_paths() {
        let mut set = NamedTensorSet::new();
        set.insert("a", TensorEntry::new(vec![3], DType::F32, vec![1.0, 2.0, 3.0]).unwrap());
        set.insert("b", TensorEntry::new(vec![1, 3], DType::F32, vec![1.0, 2.0, 3.0]).unwrap());
        set.insert("c", TensorEntry::new(vec![2], DType::F32, vec![1.0, -0.5]).unwrap());
        let a = load_norms(&set, "a").unwrap();
        assert_eq!(a.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.token_count, 0);
        assert!(matches!(load_norms(&set, "b"), Err(Error::Shape(_))));
        assert!(matches!(load_norms(&set, "c"), Err(Error::Domain(_))));
    }

    fn rows_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>)> {
        (1usize..6).prop_flat_map(|d| {
            (
                Just(d),
                prop::collection::vec(prop::collection::vec(-100.0f32..100.0, d), 1..20),
            )
        })
    }

    proptest! {
        #[test]
        fn batch_split_is_bitwise_invariant((_d, rows) in rows_strategy(), cut in 0usize..20) {
            let joint = accumulate_norms([&Matrix::from_rows(&rows).unwrap()]).unwrap();
            let cut = cut % rows.len();
            let result = if cut == 0 {
                accumulate_norms([&Matrix::from_rows(&rows).unwrap()]).unwrap()
            } else {
                let a = Matrix::from_rows(&rows[..cut]).unwrap();
                let b = Matrix::from_rows(&rows[cut..]).unwrap();
                accumulate_norms([&a, &b]).unwrap()
            };
            prop_assert_eq!(joint, result);
        }

        #[test]
        fn scaling_scales_norms((_d, rows) in rows_strategy(), t in 0.01f64..100.0) {
            let base = accumulate_norms([&Matrix::from_rows(&rows).unwrap()]).unwrap();
            // power-of-two factors are exact in both f32 and f64
            let t = 2f64.powi(t.log2().round() as i32);
            let scaled_rows: Vec<Vec<f32>> = rows
                .iter()
                .map(|r| r.iter().map(|&x| x * t as f32).collect())
                .collect();
            let scaled = accumulate_norms([&Matrix::from_rows(&scaled_rows).unwrap()]).unwrap();
            for (a, b) in base.values.iter().zip(&scaled.values) {
                let expect = a * t;
                prop_assert!((b - expect).abs() <= f64::EPSILON * expect.abs());
            }
        }

        #[test]
        fn row_permutation_is_invariant((_d, rows) in rows_strategy(), seed in any::<u64>()) {
            let mut shuffled = rows.clone();
            // Fisher-Yates with a tiny LCG; order only has to differ
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = accumulate_norms([&Matrix::from_rows(&rows).unwrap()]).unwrap();
            let b = accumulate_norms([&Matrix::from_rows(&shuffled).unwrap()]).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs());
            }
        }
    }
}
