//! Embedding table sharded on the embedding dimension.

use std::ops::Range;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{embedding_backward, embedding_lookup, Tensor};

pub(crate) fn forward<T: Scalar>(ids: &[usize], locals: &[Tensor<T>]) -> Result<Tensor<T>> {
    embedding_lookup(&locals[0], ids)
}

pub(crate) fn backward<T: Scalar>(
    ids: &[usize],
    dy: &Tensor<T>,
    locals: &[Tensor<T>],
    cols: Range<usize>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Tensor::zeros(locals[0].shape());
    embedding_backward(&mut g, ids, &dy.narrow(1, cols.start, cols.len())?)?;
    Ok(vec![g])
}
