//! Deterministic forward pass for small CNNs with mid-inference bit flips.
//!
//! Every layer output is a feature map; its elements are addressed by
//! [`ElementAddr`] (layer index, flat index). Injection happens on a layer's
//! output after the whole layer is computed and before the next layer reads it.

mod layer;
mod propagate;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use layer::{Layer, LayerKind};
pub use propagate::Propagator;

use crate::error::ModelError;
use crate::tensor::{flip_bit, BitLoc, Tensor};

/// Loss value substituted for NaN, infinite or overflowing losses.
pub const LOSS_SENTINEL: f64 = 1.0e6;

/// Coordinates of one feature-map element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementAddr {
    pub layer: usize,
    pub index: usize,
}

impl ElementAddr {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

/// A validated layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Global index of the first element of each layer, plus the total.
    offsets: Vec<usize>,
}

impl Model {
    /// Checks that each layer's declared input shape matches what its
    /// predecessor produces.
    pub fn new(layers: Vec<Layer>) -> Result<Self, ModelError> {
        let first = layers.first().ok_or(ModelError::Empty)?;
        let input_shape = first.input_shape().to_vec();
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_shape() != pair[1].input_shape() {
                return Err(ModelError::IncompatibleShapes {
                    layer: i + 1,
                    declared: pair[1].input_shape().to_vec(),
                    produced: pair[0].output_shape().to_vec(),
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for layer in &layers {
            total += layer.output_len();
            offsets.push(total);
        }
        Ok(Self {
            input_shape,
            layers,
            offsets,
        })
    }

    /// Builds a model by chaining layer kinds from `input_shape`; each entry
    /// carries that layer's parameters (weights then biases).
    pub fn sequential(
        input_shape: Vec<usize>,
        specs: impl IntoIterator<Item = (LayerKind, Vec<f32>)>,
    ) -> Result<Self, ModelError> {
        let mut shape = input_shape;
        let mut layers = Vec::new();
        for (i, (kind, params)) in specs.into_iter().enumerate() {
            let layer = Layer::new(i, kind, shape, params)?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Self::new(layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].output_len()
    }

    /// True when the final layer is a softmax, so the output is already a
    /// probability vector.
    pub fn outputs_probabilities(&self) -> bool {
        matches!(self.layers[self.layers.len() - 1].kind(), LayerKind::Softmax)
    }

    /// Total number of feature-map elements, `|E|`.
    pub fn element_count(&self) -> usize {
        self.offsets[self.layers.len()]
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    pub fn is_valid_addr(&self, addr: ElementAddr) -> bool {
        addr.layer < self.layers.len() && addr.index < self.layers[addr.layer].output_len()
    }

    pub fn check_addr(&self, addr: ElementAddr) -> Result<(), ModelError> {
        if self.is_valid_addr(addr) {
            Ok(())
        } else {
            Err(ModelError::InvalidAddress {
                layer: addr.layer,
                element: addr.index,
            })
        }
    }

    /// Position of `addr` in [`Model::enumerate_elements`] order.
    pub fn global_index(&self, addr: ElementAddr) -> usize {
        self.offsets[addr.layer] + addr.index
    }

    pub fn addr_of(&self, global: usize) -> ElementAddr {
        let layer = self.offsets.partition_point(|&o| o <= global) - 1;
        ElementAddr::new(layer, global - self.offsets[layer])
    }

    /// Every feature-map element, layer-major then flat index ascending.
    pub fn enumerate_elements(&self) -> Vec<ElementAddr> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(j, l)| (0..l.output_len()).map(move |k| ElementAddr::new(j, k)))
            .collect()
    }

    pub fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(ModelError::InputShape {
                expected: self.input_shape.clone(),
                found: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn check_label(&self, label: usize) -> Result<(), ModelError> {
        if label >= self.class_count() {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.class_count(),
            });
        }
        Ok(())
    }

    /// Runs inference with `plan` applied and scores the output against `label`.
    pub fn forward(&self, input: &Tensor, label: usize, plan: &InjectionPlan) -> Result<InferenceTrace, ModelError> {
        self.run(input, label, plan, false)
    }

    /// As [`Model::forward`], also returning every layer's output.
    pub fn forward_retaining(
        &self,
        input: &Tensor,
        label: usize,
        plan: &InjectionPlan,
    ) -> Result<InferenceTrace, ModelError> {
        self.run(input, label, plan, true)
    }

    /// Predicted class of an uninjected pass.
    pub fn predict(&self, input: &Tensor) -> Result<usize, ModelError> {
        self.check_input(input)?;
        let maps = self.feature_maps(input.data(), &[]);
        Ok(argmax(maps.last().map(Vec::as_slice).unwrap_or(&[])))
    }

    fn run(&self, input: &Tensor, label: usize, plan: &InjectionPlan, retain: bool) -> Result<InferenceTrace, ModelError> {
        self.check_input(input)?;
        self.check_label(label)?;
        for &(addr, _) in plan.entries() {
            self.check_addr(addr)?;
        }
        let mut maps = self.feature_maps(input.data(), plan.entries());
        let output = maps.pop().expect("model has at least one layer");
        let loss = self.output_loss(&output, label);
        let predicted_class = argmax(&output);
        let logits = Tensor::new(self.layers[self.layers.len() - 1].output_shape().to_vec(), output)?;
        let feature_maps = if retain {
            let mut kept = Vec::with_capacity(self.layers.len());
            for (layer, map) in self.layers.iter().zip(maps) {
                kept.push(Tensor::new(layer.output_shape().to_vec(), map)?);
            }
            kept.push(logits.clone());
            Some(kept)
        } else {
            None
        };
        Ok(InferenceTrace {
            logits,
            predicted_class,
            loss,
            feature_maps,
        })
    }

    /// Computes every layer output in order, flipping planned bits as each
    /// layer finishes.
    pub(crate) fn feature_maps(&self, input: &[f32], flips: &[(ElementAddr, BitLoc)]) -> Vec<Vec<f32>> {
        let mut maps: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            let src = if j == 0 { input } else { &maps[j - 1] };
            let mut out: Vec<f32> = (0..layer.output_len()).map(|k| layer.compute(src, k)).collect();
            for &(addr, bit) in flips.iter().filter(|(a, _)| a.layer == j) {
                out[addr.index] = flip_bit(out[addr.index], bit);
            }
            maps.push(out);
        }
        maps
    }

    /// Truncated SHA-256 of the model's LSNM encoding.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(crate::io::encode_model(self));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cross-entropy of the model output against `label`: softmax cross-
    /// entropy on logits, or negative log-likelihood when the model already
    /// ends in a softmax.
    pub fn output_loss(&self, output: &[f32], label: usize) -> f64 {
        if self.outputs_probabilities() {
            nll(output, label)
        } else {
            loss(output, label)
        }
    }
}

/// Flip set applied during one inference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionPlan {
    entries: Vec<(ElementAddr, BitLoc)>,
}

impl InjectionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates addresses against `model` and rejects repeated (addr, bit)
    /// pairs, which would cancel each other.
    pub fn new(model: &Model, entries: Vec<(ElementAddr, BitLoc)>) -> Result<Self, ModelError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(addr, bit) in &entries {
            model.check_addr(addr)?;
            if !seen.insert((addr, bit)) {
                return Err(ModelError::DuplicateInjection {
                    layer: addr.layer,
                    element: addr.index,
                    bit: bit.index(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn single(model: &Model, addr: ElementAddr, bit: BitLoc) -> Result<Self, ModelError> {
        Self::new(model, vec![(addr, bit)])
    }

    pub fn entries(&self) -> &[(ElementAddr, BitLoc)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub logits: Tensor,
    pub predicted_class: usize,
    pub loss: f64,
    /// Layer outputs in order (the last equals `logits`), when retained.
    pub feature_maps: Option<Vec<Tensor>>,
}

impl InferenceTrace {
    /// Bit-level equality of logits, prediction and loss.
    pub fn bit_eq(&self, other: &InferenceTrace) -> bool {
        self.logits.bit_eq(&other.logits)
            && self.predicted_class == other.predicted_class
            && self.loss.to_bits() == other.loss.to_bits()
    }
}

/// Index of the largest value; lowest index wins ties and NaN never wins.
/// Returns 0 when every value is NaN.
pub fn argmax(values: &[f32]) -> usize {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Softmax cross-entropy of `logits` at `label`, computed in f64.
///
/// Any non-finite logit, or a loss above [`LOSS_SENTINEL`], yields the sentinel.
pub fn loss(logits: &[f32], label: usize) -> f64 {
    if logits.iter().any(|v| !v.is_finite()) {
        return LOSS_SENTINEL;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let value = max + sum.ln() - logits[label] as f64;
    clamp_loss(value)
}

/// Negative log-likelihood of a probability vector at `label`.
pub fn nll(probs: &[f32], label: usize) -> f64 {
    if probs.iter().any(|v| !v.is_finite()) {
        return LOSS_SENTINEL;
    }
    clamp_loss(-(probs[label] as f64).ln())
}

fn clamp_loss(value: f64) -> f64 {
    if value.is_nan() || value > LOSS_SENTINEL {
        LOSS_SENTINEL
    } else {
        value.max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_model(inputs: usize, outputs: usize) -> Model {
        let params: Vec<f32> = (0..inputs * outputs + outputs).map(|i| (i as f32 * 0.37).sin()).collect();
        Model::sequential(vec![inputs], [(LayerKind::Dense { out_features: outputs }, params)]).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        assert!((loss(&[0.3; 10], 4) - 10f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.3; 10], 4) - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_approach_zero_loss() {
        let mut logits = [0.0f32; 10];
        logits[3] = 80.0;
        assert!(loss(&logits, 3) < 1e-30);
        assert!(loss(&logits, 3) >= 0.0);
    }

    #[test]
    fn non_finite_logits_hit_the_sentinel() {
        let mut logits = [0.0f32; 10];
        logits[7] = f32::INFINITY;
        assert_eq!(loss(&logits, 2), LOSS_SENTINEL);
        logits[7] = f32::NAN;
        assert_eq!(loss(&logits, 2), LOSS_SENTINEL);
        // Finite but astronomically wrong outputs are capped too.
        let huge = [3.0e38f32, 0.0];
        assert_eq!(loss(&huge, 1), LOSS_SENTINEL);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[f32::NAN, -1.0, -2.0]), 1);
        assert_eq!(argmax(&[f32::NAN, f32::NAN]), 0);
    }

    #[test]
    fn single_dense_layer_enumerates_ten_elements() {
        let model = dense_model(4, 10);
        let elems = model.enumerate_elements();
        assert_eq!(elems.len(), 10);
        assert!(elems.iter().enumerate().all(|(k, a)| a.layer == 0 && a.index == k));
        assert_eq!(model.enumerate_elements(), elems);
    }

    #[test]
    fn global_index_round_trips() {
        let model = Model::sequential(
            vec![4],
            [
                (LayerKind::Dense { out_features: 3 }, vec![0.1; 15]),
                (LayerKind::Relu, vec![]),
                (LayerKind::Dense { out_features: 2 }, vec![0.1; 8]),
            ],
        )
        .unwrap();
        for (g, addr) in model.enumerate_elements().into_iter().enumerate() {
            assert_eq!(model.global_index(addr), g);
            assert_eq!(model.addr_of(g), addr);
        }
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let a = Layer::new(0, LayerKind::Dense { out_features: 3 }, vec![4], vec![0.0; 15]).unwrap();
        let b = Layer::new(1, LayerKind::Dense { out_features: 2 }, vec![5], vec![0.0; 12]).unwrap();
        assert!(matches!(
            Model::new(vec![a, b]),
            Err(ModelError::IncompatibleShapes { layer: 1, .. })
        ));
    }

    #[test]
    fn duplicate_injection_is_rejected() {
        let model = dense_model(4, 3);
        let addr = ElementAddr::new(0, 1);
        let bit = BitLoc::new(30).unwrap();
        let err = InjectionPlan::new(&model, vec![(addr, bit), (addr, bit)]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateInjection { layer: 0, element: 1, bit: 30 }));
        // Different bits of one element are fine.
        assert!(InjectionPlan::new(&model, vec![(addr, bit), (addr, BitLoc::SIGN)]).is_ok());
    }

    #[test]
    fn invalid_plan_address_and_shapes() {
        let model = dense_model(4, 3);
        assert!(InjectionPlan::single(&model, ElementAddr::new(0, 3), BitLoc::SIGN).is_err());
        assert!(InjectionPlan::single(&model, ElementAddr::new(1, 0), BitLoc::SIGN).is_err());
        let bad = Tensor::new(vec![5], vec![0.0; 5]).unwrap();
        assert!(matches!(
            model.forward(&bad, 0, &InjectionPlan::empty()),
            Err(ModelError::InputShape { .. })
        ));
        let x = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            model.forward(&x, 3, &InjectionPlan::empty()),
            Err(ModelError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn sign_flip_of_max_logit_changes_prediction_iff_it_stops_being_max() {
        // Identity-like dense layer so logits equal the input.
        let mut params = vec![0.0f32; 9];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        params.extend([0.0; 3]);
        let model = Model::sequential(vec![3], [(LayerKind::Dense { out_features: 3 }, params)]).unwrap();
        let cases: [([f32; 3], usize); 2] = [([0.5, 2.0, -1.0], 0), ([-0.5, 2.0, -3.0], 0)];
        for (values, expected_after) in cases {
            let x = Tensor::new(vec![3], values.to_vec()).unwrap();
            let base = model.forward(&x, 1, &InjectionPlan::empty()).unwrap();
            assert_eq!(base.predicted_class, 1);
            let plan = InjectionPlan::single(&model, ElementAddr::new(0, 1), BitLoc::SIGN).unwrap();
            let hit = model.forward(&x, 1, &plan).unwrap();
            // By hand: logit 1 becomes -2.0, the max of the rest is at index 0.
            assert_eq!(hit.logits.data()[1], -2.0);
            assert_eq!(hit.predicted_class, expected_after);
        }
        // A max logit that survives negation keeps the prediction.
        let x = Tensor::new(vec![3], vec![-5.0, 0.0, -4.0]).unwrap();
        let plan = InjectionPlan::single(&model, ElementAddr::new(0, 1), BitLoc::SIGN).unwrap();
        assert_eq!(model.forward(&x, 1, &plan).unwrap().predicted_class, 1);
    }

    #[test]
    fn softmax_output_is_normalised_and_scored_by_nll() {
        let model = Model::sequential(
            vec![4],
            [
                (LayerKind::Dense { out_features: 5 }, (0..25).map(|i| (i as f32).cos()).collect()),
                (LayerKind::Softmax, vec![]),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![4], vec![0.2, -0.4, 1.0, 0.3]).unwrap();
        let trace = model.forward(&x, 2, &InjectionPlan::empty()).unwrap();
        let sum: f32 = trace.logits.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!((trace.loss + (trace.logits.data()[2] as f64).ln()).abs() < 1e-12);
    }
}
