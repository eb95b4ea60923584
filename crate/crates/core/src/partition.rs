//! Flat parameter buffers and the three shard layouts.
//!
//! A layer's parameters are packed shard-major: shard `j` of the flat buffer holds
//! exactly the slices of every parameter that logical shard `j` owns, so a shard
//! is a self-contained unit of computation that can travel around the ring as a
//! single message.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Padded 1-D concatenation of named parameters, split into `n_shards` equal shards.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParameter<T> {
    flat: Tensor<T>,
    segments: Vec<Segment>,
    pad_len: usize,
    n_shards: usize,
}

impl<T: Scalar> FlatParameter<T> {
    /// Concatenates the flattened parameters in order and zero-pads the tail up to a
    /// multiple of `n`.
    pub fn flatten<S: AsRef<str>>(params: &[(S, Tensor<T>)], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument(
                "partition factor must be at least 1".into(),
            ));
        }
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(params.len());
        for (name, tensor) in params {
            segments.push(Segment {
                name: name.as_ref().to_string(),
                shape: tensor.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(tensor.data());
        }
        let pad_len = (n - data.len() % n) % n;
        data.resize(data.len() + pad_len, T::zero());
        Ok(Self {
            flat: Tensor::from_vec(data),
            segments,
            pad_len,
            n_shards: n,
        })
    }

    pub fn flat(&self) -> &Tensor<T> {
        &self.flat
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn pad_len(&self) -> usize {
        self.pad_len
    }

    pub fn n_shards(&self) -> usize {
        self.n_shards
    }

    pub fn shard_len(&self) -> usize {
        self.flat.len() / self.n_shards
    }

    /// Contiguous slice `rank * len/N .. (rank + 1) * len/N`.
    pub fn shard_view(&self, rank: usize) -> Result<Tensor<T>> {
        if rank >= self.n_shards {
            return Err(Error::Argument(format!(
                "rank {rank} out of range for {} shards",
                self.n_shards
            )));
        }
        let len = self.shard_len();
        Ok(Tensor::from_vec(
            self.flat.data()[rank * len..(rank + 1) * len].to_vec(),
        ))
    }

    /// Reconstructs the original named tensors.
    pub fn unflatten(&self) -> Vec<(String, Tensor<T>)> {
        self.unflatten_buffer(self.flat.data())
            .expect("own buffer always matches its segments")
    }

    /// Interprets `buffer` (e.g. a reassembled gradient) with this parameter's segments.
    pub fn unflatten_buffer(&self, buffer: &[T]) -> Result<Vec<(String, Tensor<T>)>> {
        if buffer.len() != self.flat.len() {
            return Err(Error::dim(
                "unflatten_buffer",
                &[self.flat.len()],
                &[buffer.len()],
            ));
        }
        self.segments
            .iter()
            .map(|s| {
                let t = Tensor::new(
                    s.shape.clone(),
                    buffer[s.offset..s.offset + s.len()].to_vec(),
                )?;
                Ok((s.name.clone(), t))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PartitionStrategy {
    OutputPartition,
    HeadPartition,
    ExpertPartition,
}

/// One parameter of a layer and the axis along which it is split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub axis: usize,
}

impl ParamSpec {
    fn local_shape(&self, n: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s[self.axis] /= n;
        s
    }
}

/// Which slice of a layer each logical shard owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    strategy: PartitionStrategy,
    n: usize,
    /// Per-shard range over columns, heads or experts.
    ranges: Vec<Range<usize>>,
    params: Vec<ParamSpec>,
}

fn check_factor(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument(
            "partition factor must be at least 1".into(),
        ));
    }
    Ok(())
}

fn even_ranges(total: usize, n: usize) -> Vec<Range<usize>> {
    let step = total / n;
    (0..n).map(|j| j * step..(j + 1) * step).collect()
}

/// Linear layer `[in_dim, out_dim]` weight plus `[out_dim]` bias, split on output columns.
pub fn layout_linear(in_dim: usize, out_dim: usize, n: usize) -> Result<ShardLayout> {
    check_factor(n)?;
    if !out_dim.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "linear output dimension {out_dim} is not divisible by {n} workers; \
             choose a worker count that divides {out_dim}"
        )));
    }
    Ok(ShardLayout {
        strategy: PartitionStrategy::OutputPartition,
        n,
        ranges: even_ranges(out_dim, n),
        params: vec![
            ParamSpec {
                name: "weight",
                shape: vec![in_dim, out_dim],
                axis: 1,
            },
            ParamSpec {
                name: "bias",
                shape: vec![out_dim],
                axis: 0,
            },
        ],
    })
}

/// Bias-free `[in_dim, out_dim]` projections sharing one input, each split on its output columns.
pub fn layout_projections(
    in_dim: usize,
    out_dim: usize,
    names: &[&'static str],
    n: usize,
) -> Result<ShardLayout> {
    check_factor(n)?;
    if names.is_empty() {
        return Err(Error::Argument(
            "projection layout needs at least one matrix".into(),
        ));
    }
    if !out_dim.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "projection output dimension {out_dim} is not divisible by {n} workers; \
             choose a worker count that divides {out_dim}"
        )));
    }
    Ok(ShardLayout {
        strategy: PartitionStrategy::OutputPartition,
        n,
        ranges: even_ranges(out_dim, n),
        params: names
            .iter()
            .map(|&name| ParamSpec {
                name,
                shape: vec![in_dim, out_dim],
                axis: 1,
            })
            .collect(),
    })
}

/// Embedding table `[vocab, dim]`, split on the embedding (output) dimension.
pub fn layout_embedding(vocab: usize, dim: usize, n: usize) -> Result<ShardLayout> {
    check_factor(n)?;
    if !dim.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "embedding dimension {dim} is not divisible by {n} workers; \
             choose a worker count that divides {dim}"
        )));
    }
    Ok(ShardLayout {
        strategy: PartitionStrategy::OutputPartition,
        n,
        ranges: even_ranges(dim, n),
        params: vec![ParamSpec {
            name: "table",
            shape: vec![vocab, dim],
            axis: 1,
        }],
    })
}

/// Multi-head attention: Q/K/V projections split by head group on their columns,
/// the output projection split on the matching rows.
pub fn layout_attention(hidden: usize, heads: usize, n: usize) -> Result<ShardLayout> {
    check_factor(n)?;
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "hidden size {hidden} is not divisible by {heads} attention heads"
        )));
    }
    if !heads.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "{heads} attention heads cannot be split over {n} workers; \
             use a worker count that divides the head count"
        )));
    }
    let proj = |name| ParamSpec {
        name,
        shape: vec![hidden, hidden],
        axis: 1,
    };
    Ok(ShardLayout {
        strategy: PartitionStrategy::HeadPartition,
        n,
        ranges: even_ranges(heads, n),
        params: vec![
            proj("wq"),
            proj("wk"),
            proj("wv"),
            ParamSpec {
                name: "wo",
                shape: vec![hidden, hidden],
                axis: 0,
            },
        ],
    })
}

/// Mixture of experts with one two-layer FFN expert per shard. Expert parameters
/// are stacked along a leading expert axis.
pub fn layout_moe(n_experts: usize, hidden: usize, ffn: usize, n: usize) -> Result<ShardLayout> {
    check_factor(n)?;
    if n_experts != n {
        return Err(Error::Config(format!(
            "expert partition needs one expert per worker: {n_experts} experts vs {n} workers"
        )));
    }
    let stacked = |name, rest: &[usize]| {
        let mut shape = vec![n_experts];
        shape.extend_from_slice(rest);
        ParamSpec {
            name,
            shape,
            axis: 0,
        }
    };
    Ok(ShardLayout {
        strategy: PartitionStrategy::ExpertPartition,
        n,
        ranges: even_ranges(n_experts, n),
        params: vec![
            stacked("w1", &[hidden, ffn]),
            stacked("b1", &[ffn]),
            stacked("w2", &[ffn, hidden]),
            stacked("b2", &[hidden]),
        ],
    })
}

impl ShardLayout {
    pub fn strategy(&self) -> PartitionStrategy {
        self.strategy
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Columns (output partition), heads (head partition) or experts owned by `shard`.
    pub fn range(&self, shard: usize) -> Range<usize> {
        self.ranges[shard].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    /// Full (unsharded) element count of the layer.
    pub fn total_len(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Elements per shard.
    pub fn shard_len(&self) -> usize {
        self.total_len() / self.n
    }

    /// Shapes of the parameters inside one shard, in declaration order.
    pub fn local_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.local_shape(self.n)).collect()
    }

    fn check_params<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Argument(format!(
                "layout expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (spec, t) in self.params.iter().zip(params) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::dim("layout parameter", &spec.shape, t.shape()));
            }
        }
        Ok(())
    }

    /// Packs full parameters shard-major into a flat parameter whose shard `j`
    /// holds shard `j`'s slices in declaration order.
    pub fn pack<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<FlatParameter<T>> {
        self.check_params(params)?;
        let mut pieces = Vec::with_capacity(self.n * params.len());
        for j in 0..self.n {
            for (spec, t) in self.params.iter().zip(params) {
                let extent = spec.shape[spec.axis] / self.n;
                pieces.push((
                    format!("{}@{j}", spec.name),
                    t.narrow(spec.axis, j * extent, extent)?,
                ));
            }
        }
        FlatParameter::flatten(&pieces, self.n)
    }

    /// Inverse of [`ShardLayout::pack`] for any buffer laid out like the flat parameter.
    pub fn unpack<T: Scalar>(&self, buffer: &[T]) -> Result<Vec<Tensor<T>>> {
        let shard_len = self.shard_len();
        if buffer.len() != shard_len * self.n {
            return Err(Error::dim("unpack", &[shard_len * self.n], &[buffer.len()]));
        }
        let mut full: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(&p.shape))
            .collect();
        for j in 0..self.n {
            let locals = self.split_shard(&buffer[j * shard_len..(j + 1) * shard_len])?;
            for ((spec, dst), local) in self.params.iter().zip(full.iter_mut()).zip(&locals) {
                let extent = spec.shape[spec.axis] / self.n;
                dst.write_window(spec.axis, j * extent, local)?;
            }
        }
        Ok(full)
    }

    /// Splits one shard buffer into its local parameter tensors.
    pub fn split_shard<T: Scalar>(&self, shard: &[T]) -> Result<Vec<Tensor<T>>> {
        if shard.len() != self.shard_len() {
            return Err(Error::dim(
                "split_shard",
                &[self.shard_len()],
                &[shard.len()],
            ));
        }
        let mut offset = 0;
        self.local_shapes()
            .into_iter()
            .map(|shape| {
                let len: usize = shape.iter().product();
                let t = Tensor::new(shape, shard[offset..offset + len].to_vec());
                offset += len;
                t
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn seq(n: usize) -> Tensor<f64> {
        Tensor::from_vec((0..n).map(|v| v as f64).collect())
    }

    #[test]
    fn flatten_padding_cases() {
        let fp = FlatParameter::flatten(&[("a", seq(5)), ("b", seq(3))], 4).unwrap();
        assert_eq!((fp.flat().len(), fp.pad_len(), fp.shard_len()), (8, 0, 2));
        let fp = FlatParameter::flatten(&[("a", seq(5)), ("b", seq(2))], 4).unwrap();
        assert_eq!((fp.flat().len(), fp.pad_len()), (8, 1));
        assert_eq!(fp.flat().data()[7], 0.0);
        assert!(FlatParameter::flatten(&[("a", seq(1))], 0).is_err());
    }

    #[test]
    fn linear_weight_and_bias_share_one_flat_parameter() {
        let mut rng = SeededRng::new(1);
        let w: Tensor<f64> = rng.tensor(&[3, 4], -1.0, 1.0);
        let b: Tensor<f64> = rng.tensor(&[4], -1.0, 1.0);
        let fp = FlatParameter::flatten(&[("weight", w.clone()), ("bias", b.clone())], 2).unwrap();
        assert_eq!(fp.flat().len(), 16);
        let back = fp.unflatten();
        assert_eq!(back[0], ("weight".to_string(), w));
        assert_eq!(back[1], ("bias".to_string(), b));
    }

    #[test]
    fn shard_view_cases() {
        let fp = FlatParameter::flatten(&[("x", seq(8))], 1).unwrap();
        assert_eq!(fp.shard_view(0).unwrap(), seq(8));
        let fp = FlatParameter::flatten(&[("x", seq(8))], 4).unwrap();
        assert_eq!(fp.shard_view(2).unwrap().data(), &[4.0, 5.0]);
        let joined: Vec<f64> = (0..4)
            .flat_map(|r| fp.shard_view(r).unwrap().into_data())
            .collect();
        assert_eq!(joined, seq(8).into_data());
        assert!(fp.shard_view(4).is_err());
    }

    #[test]
    fn linear_layout_columns() {
        let l = layout_linear(3, 8, 4).unwrap();
        assert_eq!(l.range(1), 2..4);
        assert_eq!(l.strategy(), PartitionStrategy::OutputPartition);
        assert_eq!(layout_linear(3, 8, 1).unwrap().range(0), 0..8);
        assert!(matches!(layout_linear(3, 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn embedding_partitions_on_embedding_dim() {
        let l = layout_embedding(10, 8, 4).unwrap();
        assert_eq!(l.range(3), 6..8);
        assert_eq!(l.local_shapes(), vec![vec![10, 2]]);
    }

    #[test]
    fn attention_layout_heads() {
        let l = layout_attention(16, 4, 4).unwrap();
        assert_eq!(l.range(2), 2..3);
        let l = layout_attention(16, 4, 2).unwrap();
        assert_eq!(l.ranges(), &[0..2, 2..4]);
        assert_eq!(layout_attention(16, 4, 1).unwrap().range(0), 0..4);
        assert!(matches!(layout_attention(16, 4, 3), Err(Error::Config(_))));
        assert_eq!(
            layout_attention(16, 4, 2).unwrap().local_shapes(),
            vec![vec![16, 8], vec![16, 8], vec![16, 8], vec![8, 16]]
        );
    }

    #[test]
    fn moe_layout_one_expert_per_shard() {
        let l = layout_moe(4, 8, 16, 4).unwrap();
        for j in 0..4 {
            assert_eq!(l.range(j), j..j + 1);
        }
        assert_eq!(layout_moe(1, 8, 16, 1).unwrap().range(0), 0..1);
        assert!(matches!(layout_moe(2, 8, 16, 4), Err(Error::Config(_))));
    }

    #[test]
    fn pack_places_owned_columns_in_each_shard() {
        // weight[i][c] = 10 * i + c, bias[c] = 100 + c
        let w = Tensor::new(vec![2, 4], vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let b = Tensor::new(vec![4], vec![100.0, 101.0, 102.0, 103.0]).unwrap();
        let layout = layout_linear(2, 4, 2).unwrap();
        let fp = layout.pack(&[w, b]).unwrap();
        assert_eq!(fp.pad_len(), 0);
        assert_eq!(
            fp.shard_view(1).unwrap().data(),
            &[2.0, 3.0, 12.0, 13.0, 102.0, 103.0]
        );
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(sizes in proptest::collection::vec(1usize..7, 1..5), n in 1usize..6, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let params: Vec<(String, Tensor<f64>)> = sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| (format!("p{i}"), rng.tensor(&[s], -1.0, 1.0)))
                .collect();
            let fp = FlatParameter::flatten(&params, n).unwrap();
            prop_assert_eq!(fp.flat().len() % n, 0);
            prop_assert!(fp.pad_len() < n);
            prop_assert_eq!(fp.unflatten(), params);
        }

        #[test]
        fn layouts_partition_exactly(heads_per in 1usize..3, n in 1usize..5, seed in any::<u64>()) {
            let heads = heads_per * n;
            let hidden = heads * 2;
            let mut rng = SeededRng::new(seed);
            for layout in [
                layout_linear(3, 2 * n, n).unwrap(),
                layout_embedding(5, 2 * n, n).unwrap(),
                layout_attention(hidden, heads, n).unwrap(),
                layout_moe(n, 3, 4, n).unwrap(),
            ] {
                // disjoint, covering ranges
                let mut next = 0;
                for r in layout.ranges() {
                    prop_assert_eq!(r.start, next);
                    prop_assert!(r.end > r.start);
                    next = r.end;
                }
                let params: Vec<Tensor<f64>> = layout.params().iter().map(|p| rng.tensor(&p.shape, -1.0, 1.0)).collect();
                let fp = layout.pack(&params).unwrap();
                prop_assert_eq!(fp.shard_len(), layout.shard_len());
                prop_assert_eq!(fp.flat().len(), layout.total_len());
                prop_assert_eq!(layout.unpack(fp.flat().data()).unwrap(), params);
            }
        }
    }
}
