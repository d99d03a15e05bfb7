use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// One head shared by every task; it widens as classes arrive.
    Single,
    /// One head per task.
    Multi,
}

/// Affine layer `z = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    /// Fan-in scaled Gaussian weights, zero bias.
    pub fn he<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let weight = he_matrix(output_dim, input_dim, rng);
        Self {
            weight,
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    fn append_rows<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        let fresh = he_matrix(extra, self.input_dim(), rng);
        let mut data: Vec<f64> = self.weight.iter().copied().collect();
        data.extend(fresh.iter().copied());
        let rows = self.output_dim() + extra;
        self.weight = Array2::from_shape_vec((rows, self.input_dim()), data)
            .expect("row-major append keeps shape");
        let mut bias = self.bias.to_vec();
        bias.resize(rows, 0.0);
        self.bias = Array1::from(bias);
    }
}

pub(crate) fn he_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let std = (2.0 / cols.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Activations saved by [`MlpModel::trunk_forward`] for backprop.
///
/// `activations[0]` is the input, `activations[i + 1]` the ReLU output of
/// trunk layer `i`; the last entry is the feature matrix.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    activations: Vec<Array2<f64>>,
}

impl TrunkCache {
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input")
    }
}

/// Per-tensor gradient slots, in [`MlpModel`] tensor order.
///
/// A slot is `None` when the tensor took no part in the objective; the
/// optimizer leaves such tensors untouched (no weight decay either).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(model: &MlpModel) -> Self {
        Self {
            slots: vec![None; model.tensor_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, index: usize) -> Option<&[f64]> {
        self.slots.get(index).and_then(|s| s.as_deref())
    }

    pub fn slot_or_zeros(&mut self, index: usize, len: usize) -> &mut [f64] {
        self.slots[index].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn accumulate<'a>(&mut self, index: usize, len: usize, values: impl Iterator<Item = &'a f64>) {
        let slot = self.slot_or_zeros(index, len);
        for (g, v) in slot.iter_mut().zip(values) {
            *g += v;
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.slots.iter().position(|s| {
            s.as_ref()
                .is_some_and(|v| v.iter().any(|x| !x.is_finite()))
        })
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.slots.iter_mut().flatten() {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Multi-layer perceptron with a ReLU trunk and linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    head_mode: HeadMode,
}

impl MlpModel {
    /// He-initialized model with `hidden` trunk widths and a single first head.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        head_width: usize,
        head_mode: HeadMode,
        rng: &mut R,
    ) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &width in hidden {
            trunk.push(Dense::he(prev, width, rng));
            prev = width;
        }
        let heads = vec![Dense::he(prev, head_width, rng)];
        Self {
            input_dim,
            trunk,
            heads,
            head_mode,
        }
    }

    pub fn from_layers(
        input_dim: usize,
        trunk: Vec<Dense>,
        heads: Vec<Dense>,
        head_mode: HeadMode,
    ) -> Result<Self> {
        let mut prev = input_dim;
        for layer in &trunk {
            check_dim("trunk layer input", prev, layer.input_dim())?;
            check_dim("trunk bias", layer.output_dim(), layer.bias.len())?;
            prev = layer.output_dim();
        }
        for head in &heads {
            check_dim("head input", prev, head.input_dim())?;
            check_dim("head bias", head.output_dim(), head.bias.len())?;
        }
        if head_mode == HeadMode::Single && heads.len() != 1 {
            return Err(Error::Incompatible(format!(
                "single-head model built with {} heads",
                heads.len()
            )));
        }
        Ok(Self {
            input_dim,
            trunk,
            heads,
            head_mode,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, Dense::output_dim)
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Dense] {
        &self.heads
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_width(&self, head: usize) -> Result<usize> {
        Ok(self.head(head)?.output_dim())
    }

    /// Appends a fresh head (multi-head models only). Returns its index.
    pub fn add_head<R: Rng + ?Sized>(&mut self, width: usize, rng: &mut R) -> Result<usize> {
        if self.head_mode != HeadMode::Multi {
            return Err(Error::Incompatible("add_head on a single-head model".into()));
        }
        self.heads.push(Dense::he(self.feature_dim(), width, rng));
        Ok(self.heads.len() - 1)
    }

    /// Adds `extra` output units to the single head, keeping existing logits.
    pub fn widen_head<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) -> Result<()> {
        if self.head_mode != HeadMode::Single {
            return Err(Error::Incompatible("widen_head on a multi-head model".into()));
        }
        self.heads[0].append_rows(extra, rng);
        Ok(())
    }

    /// Replaces every head with a freshly initialized one of the same width.
    pub fn reinit_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let dim = self.feature_dim();
        for head in &mut self.heads {
            *head = Dense::he(dim, head.output_dim(), rng);
        }
    }

    fn head(&self, index: usize) -> Result<&Dense> {
        self.heads.get(index).ok_or(Error::UnknownHead {
            index,
            count: self.heads.len(),
        })
    }

    /// Penultimate-layer representation: the trunk output, no head applied.
    pub fn extract_features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("model input", self.input_dim, inputs.ncols())?;
        let mut x = inputs.to_owned();
        for layer in &self.trunk {
            x = layer.apply(x.view());
            x.mapv_inplace(relu);
        }
        Ok(x)
    }

    pub fn head_logits(&self, head: usize, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let head = self.head(head)?;
        check_dim("head input", head.input_dim(), features.ncols())?;
        Ok(head.apply(features))
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>, head: usize) -> Result<Array2<f64>> {
        self.head(head)?;
        let features = self.extract_features(inputs)?;
        self.head_logits(head, features.view())
    }

    pub fn forward_batch(&self, batch: &Batch, head: usize) -> Result<Array2<f64>> {
        self.forward(batch.inputs.view(), head)
    }

    pub fn trunk_forward(&self, inputs: ArrayView2<'_, f64>) -> Result<TrunkCache> {
        check_dim("model input", self.input_dim, inputs.ncols())?;
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(inputs.to_owned());
        for layer in &self.trunk {
            let mut a = layer.apply(activations.last().expect("non-empty").view());
            a.mapv_inplace(relu);
            activations.push(a);
        }
        Ok(TrunkCache { activations })
    }

    /// Backprop `dlogits` through `head`; accumulates head gradients and
    /// returns the gradient with respect to the features.
    pub fn head_backward(
        &self,
        head: usize,
        features: ArrayView2<'_, f64>,
        dlogits: ArrayView2<'_, f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let layer = self.head(head)?;
        check_dim("head dlogits", layer.output_dim(), dlogits.ncols())?;
        let (w_idx, b_idx) = self.head_tensor_indices(head);
        let dw = dlogits.t().dot(&features);
        grads.accumulate(w_idx, layer.weight.len(), dw.iter());
        let db = dlogits.sum_axis(Axis(0));
        grads.accumulate(b_idx, layer.bias.len(), db.iter());
        Ok(dlogits.dot(&layer.weight))
    }

    /// Backprop a feature gradient through the trunk, accumulating into `grads`.
    pub fn trunk_backward(&self, cache: &TrunkCache, dfeatures: Array2<f64>, grads: &mut Gradients) {
        let mut da = dfeatures;
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let out = &cache.activations[i + 1];
            let mut dz = da;
            dz.zip_mut_with(out, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = &cache.activations[i];
            let dw = dz.t().dot(input);
            grads.accumulate(2 * i, layer.weight.len(), dw.iter());
            let db = dz.sum_axis(Axis(0));
            grads.accumulate(2 * i + 1, layer.bias.len(), db.iter());
            if i > 0 {
                da = dz.dot(&layer.weight);
            } else {
                break;
            }
        }
    }

    /// Number of parameter tensors: a weight and a bias per trunk layer and head.
    pub fn tensor_count(&self) -> usize {
        2 * (self.trunk.len() + self.heads.len())
    }

    pub fn trunk_tensors(&self) -> Range<usize> {
        0..2 * self.trunk.len()
    }

    pub fn head_tensor_indices(&self, head: usize) -> (usize, usize) {
        let base = 2 * (self.trunk.len() + head);
        (base, base + 1)
    }

    pub fn is_weight_tensor(&self, index: usize) -> bool {
        index % 2 == 0
    }

    fn layer_of(&self, index: usize) -> &Dense {
        let layer = index / 2;
        if layer < self.trunk.len() {
            &self.trunk[layer]
        } else {
            &self.heads[layer - self.trunk.len()]
        }
    }

    fn layer_of_mut(&mut self, index: usize) -> &mut Dense {
        let layer = index / 2;
        let trunk_len = self.trunk.len();
        if layer < trunk_len {
            &mut self.trunk[layer]
        } else {
            &mut self.heads[layer - trunk_len]
        }
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        let layer = self.layer_of(index);
        if index % 2 == 0 {
            layer.weight.as_slice().expect("standard layout")
        } else {
            layer.bias.as_slice().expect("standard layout")
        }
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let layer = self.layer_of_mut(index);
        if index % 2 == 0 {
            layer.weight.as_slice_mut().expect("standard layout")
        } else {
            layer.bias.as_slice_mut().expect("standard layout")
        }
    }

    /// Copies of every parameter tensor, in tensor order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        (0..self.tensor_count()).map(|i| self.tensor(i).to_vec()).collect()
    }

    pub fn trunk_snapshot(&self) -> Vec<Vec<f64>> {
        self.trunk_tensors().map(|i| self.tensor(i).to_vec()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.tensor_count()).map(|i| self.tensor(i).len()).sum()
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{Purpose, SeedStreams};
    use ndarray::array;

    fn naive_matmul_t(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        let out = w.nrows();
        let mut z = Array2::zeros((n, out));
        for i in 0..n {
            for o in 0..out {
                let mut acc = b[o];
                for k in 0..d {
                    acc += x[[i, k]] * w[[o, k]];
                }
                z[[i, o]] = acc;
            }
        }
        z
    }

    fn random_model(hidden: &[usize]) -> MlpModel {
        let mut rng = SeedStreams::new(11).rng(Purpose::Init);
        let mut m = MlpModel::new(5, hidden, 3, HeadMode::Multi, &mut rng);
        m.add_head(2, &mut rng).unwrap();
        m
    }

    #[test]
    fn identity_model_passes_input_through() {
        let eye = Dense {
            weight: array![[1.0, 0.0], [0.0, 1.0]],
            bias: array![0.0, 0.0],
        };
        let m = MlpModel::from_layers(2, vec![eye.clone()], vec![eye], HeadMode::Single).unwrap();
        let logits = m.forward(array![[1.0, 0.0]].view(), 0).unwrap();
        assert_eq!(logits, array![[1.0, 0.0]]);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = MlpModel::from_layers(
            3,
            vec![Dense::zeros(3, 4)],
            vec![Dense::zeros(4, 2)],
            HeadMode::Single,
        )
        .unwrap();
        let logits = m.forward(array![[0.3, -2.0, 9.0], [1.0, 1.0, 1.0]].view(), 0).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        let m = random_model(&[7, 6]);
        let mut rng = SeedStreams::new(3).rng(Purpose::Data);
        let x = he_matrix(4, 5, &mut rng);
        let mut h = x.clone();
        for layer in m.trunk() {
            h = naive_matmul_t(&h, &layer.weight, &layer.bias).mapv(|v| v.max(0.0));
        }
        for head in 0..2 {
            let oracle = naive_matmul_t(&h, &m.heads()[head].weight, &m.heads()[head].bias);
            let got = m.forward(x.view(), head).unwrap();
            for (a, b) in got.iter().zip(oracle.iter()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn features_compose_with_heads() {
        let m = random_model(&[8]);
        let mut rng = SeedStreams::new(4).rng(Purpose::Data);
        let x = he_matrix(6, 5, &mut rng);
        let f = m.extract_features(x.view()).unwrap();
        assert_eq!(f.dim(), (6, 8));
        let via = m.head_logits(1, f.view()).unwrap();
        let full = m.forward(x.view(), 1).unwrap();
        for (a, b) in via.iter().zip(full.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_trunk_is_identity() {
        let m = random_model(&[]);
        let x = array![[1.0, -2.0, 3.0, 0.5, 0.0]];
        assert_eq!(m.extract_features(x.view()).unwrap(), x);
    }

    #[test]
    fn shape_and_head_errors() {
        let m = random_model(&[4]);
        assert!(matches!(
            m.forward(array![[1.0, 2.0]].view(), 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.forward(Array2::zeros((1, 5)).view(), 9),
            Err(Error::UnknownHead { index: 9, .. })
        ));
        assert!(MlpModel::from_layers(3, vec![Dense::zeros(4, 2)], vec![], HeadMode::Multi).is_err());
    }

    #[test]
    fn widening_keeps_existing_logits() {
        let mut rng = SeedStreams::new(5).rng(Purpose::Init);
        let mut m = MlpModel::new(4, &[6], 2, HeadMode::Single, &mut rng);
        let x = he_matrix(3, 4, &mut rng);
        let before = m.forward(x.view(), 0).unwrap();
        m.widen_head(3, &mut rng).unwrap();
        let after = m.forward(x.view(), 0).unwrap();
        assert_eq!(after.ncols(), 5);
        assert_eq!(after.slice(ndarray::s![.., ..2]), before);
        assert!(m.add_head(2, &mut rng).is_err());
    }
}
