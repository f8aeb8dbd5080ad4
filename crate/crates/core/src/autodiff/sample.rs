//! Fixed sparse linear resampling (warps, downsampling).

use std::sync::Arc;

use super::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A row-sparse linear map from `src_len` input positions to `out_len` output positions,
/// applied independently to every channel.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    src_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn new(src_len: usize) -> Self {
        Self {
            src_len,
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends the next output position as a weighted sum of inputs.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in taps {
            debug_assert!(i < self.src_len);
            self.indices.push(i);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, q: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[q]..self.offsets[q + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Applies the map to `[C, src_len]` data, producing `[C, out_len]`.
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let q_len = self.out_len();
        let mut out = vec![0.0; channels * q_len];
        for c in 0..channels {
            let xc = &x[c * self.src_len..(c + 1) * self.src_len];
            let oc = &mut out[c * q_len..(c + 1) * q_len];
            for (q, o) in oc.iter_mut().enumerate() {
                *o = self.row(q).map(|(i, w)| w * xc[i]).sum();
            }
        }
        out
    }

    /// Transpose application: scatters `[C, out_len]` back onto `[C, src_len]`.
    pub fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        let q_len = self.out_len();
        let mut out = vec![0.0; channels * self.src_len];
        for c in 0..channels {
            let gc = &g[c * q_len..(c + 1) * q_len];
            let oc = &mut out[c * self.src_len..(c + 1) * self.src_len];
            for (q, &gv) in gc.iter().enumerate() {
                for (i, w) in self.row(q) {
                    oc[i] += w * gv;
                }
            }
        }
        out
    }
}

impl Graph {
    /// Applies `map` per channel: `x: [C, ...src]` to `[C, ...out_shape]`.
    pub fn resample(&mut self, x: Var, map: Arc<SparseMap>, out_shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let c = in_shape[0];
        let src: usize = in_shape[1..].iter().product();
        assert_eq!(src, map.src_len(), "resample source size");
        assert_eq!(
            out_shape.iter().product::<usize>(),
            map.out_len(),
            "resample output size"
        );
        let data = map.apply(self.value(x).data(), c);
        let mut shape = vec![c];
        shape.extend_from_slice(out_shape);
        self.op(Tensor::new(shape, data), &[x], move |g, _, _| {
            vec![Some(Tensor::new(in_shape.clone(), map.apply_transpose(g.data(), c)))]
        })
    }
}
