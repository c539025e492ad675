use std::fmt;
use std::sync::Arc;

use super::{Real, TensorError};

/// Dense row-major tensor. Immutable once built; clones share storage.
#[derive(Clone)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Arc<[R]>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    /// Same as [`Tensor::new`] for callers that have already sized the buffer.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: R) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.data.to_vec()
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> Result<R, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<R, TensorError> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().fold(R::zero(), |m, &x| m.max(x)))
    }

    pub fn sum_all(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> R {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Precision conversion (f32 <-> f64 checkpoints and test fixtures).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| S::lit(x.as_f64())).collect(),
        )
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> R {
        self.data[self.offset(index)]
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor<{}>{:?} {:?}", R::NAME, self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<R: Real> PartialEq for Tensor<R> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

/// Shape produced by broadcasting `a` against `b` with trailing alignment.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = i + rank - shape.len();
        strides[axis] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let mut base_a = 0;
        let mut base_b = 0;
        for d in 0..rank - 1 {
            base_a += idx[d] * sa[d];
            base_b += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o, base_a + j * ia_step, base_b + j * ib_step);
            o += 1;
        }
        if rank == 1 {
            return;
        }
        let mut d = rank - 2;
        loop {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                return;
            }
            d -= 1;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` along broadcast axes.
pub(crate) fn reduce_to_shape<R: Real>(grad: &[R], out: &[usize], target: &[usize]) -> Vec<R> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![R::zero(); n];
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &st, &zero, |o, it, _| acc[it] += grad[o]);
    acc
}
