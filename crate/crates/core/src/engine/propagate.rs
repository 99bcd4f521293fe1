//! Incremental re-evaluation of a faulted inference.
//!
//! A [`Propagator`] keeps the clean feature maps of one input. Evaluating a
//! flip set only recomputes elements downstream of a changed value, using the
//! same per-element kernels as [`Model::forward`], so outputs are bit-identical
//! to a full pass with the same plan.

use crate::engine::{ElementAddr, Model};
use crate::error::ModelError;
use crate::tensor::{flip_bit, BitLoc, Tensor};

pub struct Propagator<'m> {
    model: &'m Model,
    /// `base[0]` is the input, `base[j + 1]` the clean output of layer `j`.
    base: Vec<Vec<f32>>,
    work: Vec<Vec<f32>>,
    touched: Vec<Vec<usize>>,
    stamp: Vec<Vec<u32>>,
    epoch: u32,
    changed: Vec<usize>,
    next: Vec<usize>,
    sorted: Vec<(ElementAddr, BitLoc)>,
}

impl<'m> Propagator<'m> {
    pub fn new(model: &'m Model, input: &Tensor) -> Result<Self, ModelError> {
        model.check_input(input)?;
        let mut base = Vec::with_capacity(model.layers().len() + 1);
        base.push(input.data().to_vec());
        base.extend(model.feature_maps(input.data(), &[]));
        let work = base.clone();
        let touched = base.iter().map(|_| Vec::new()).collect();
        let stamp = base.iter().map(|b| vec![0; b.len()]).collect();
        Ok(Self {
            model,
            base,
            work,
            touched,
            stamp,
            epoch: 0,
            changed: Vec::new(),
            next: Vec::new(),
            sorted: Vec::new(),
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Clean output of layer `layer`.
    pub fn clean_map(&self, layer: usize) -> &[f32] {
        &self.base[layer + 1]
    }

    /// Clean final output (logits or probabilities).
    pub fn clean_output(&self) -> &[f32] {
        &self.base[self.base.len() - 1]
    }

    /// Applies `flips` and passes the faulted final output to `score`.
    ///
    /// Flips hitting the same (element, bit) twice cancel, as on hardware.
    /// Addresses must be valid for the model.
    pub fn evaluate<R>(&mut self, flips: &[(ElementAddr, BitLoc)], score: impl FnOnce(&[f32]) -> R) -> R {
        let layers = self.model.layers();
        self.sorted.clear();
        self.sorted.extend_from_slice(flips);
        self.sorted.sort_unstable_by_key(|(a, _)| a.layer);
        let Some(first) = self.sorted.first().map(|(a, _)| a.layer) else {
            return score(self.clean_output());
        };
        let last_flip_layer = self.sorted[self.sorted.len() - 1].0.layer;

        self.changed.clear();
        let mut cursor = 0;
        for j in first..layers.len() {
            let layer = &layers[j];
            let (inputs, outputs) = self.work.split_at_mut(j + 1);
            let src = &inputs[j];
            let dst = &mut outputs[0];
            let base_out = &self.base[j + 1];
            self.next.clear();

            if !self.changed.is_empty() {
                if layer.is_dense_dependency() {
                    for o in 0..layer.output_len() {
                        let v = layer.compute(src, o);
                        if v.to_bits() != base_out[o].to_bits() {
                            dst[o] = v;
                            self.touched[j + 1].push(o);
                            self.next.push(o);
                        }
                    }
                } else {
                    self.epoch = self.epoch.wrapping_add(1);
                    if self.epoch == 0 {
                        self.stamp.iter_mut().for_each(|s| s.fill(0));
                        self.epoch = 1;
                    }
                    let epoch = self.epoch;
                    let stamp = &mut self.stamp[j + 1];
                    let touched = &mut self.touched[j + 1];
                    let next = &mut self.next;
                    for &i in &self.changed {
                        layer.for_each_dependent(i, |o| {
                            if stamp[o] != epoch {
                                stamp[o] = epoch;
                                let v = layer.compute(src, o);
                                if v.to_bits() != base_out[o].to_bits() {
                                    dst[o] = v;
                                    touched.push(o);
                                    next.push(o);
                                }
                            }
                        });
                    }
                }
            }

            while cursor < self.sorted.len() && self.sorted[cursor].0.layer == j {
                let (addr, bit) = self.sorted[cursor];
                dst[addr.index] = flip_bit(dst[addr.index], bit);
                self.touched[j + 1].push(addr.index);
                if !self.next.contains(&addr.index) {
                    self.next.push(addr.index);
                }
                cursor += 1;
            }
            if j <= last_flip_layer {
                self.next.retain(|&k| dst[k].to_bits() != base_out[k].to_bits());
            }

            std::mem::swap(&mut self.changed, &mut self.next);
            if self.changed.is_empty() && j >= last_flip_layer {
                break;
            }
        }

        let out = score(&self.work[self.work.len() - 1]);
        self.restore();
        out
    }

    fn restore(&mut self) {
        for (b, touched) in self.touched.iter_mut().enumerate() {
            for &i in touched.iter() {
                self.work[b][i] = self.base[b][i];
            }
            touched.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{InjectionPlan, LayerKind};
    use proptest::prelude::*;

    fn small_cnn() -> Model {
        let p = |n: usize, s: f32| (0..n).map(|i| ((i as f32 + 1.0) * s).sin() * 0.6).collect::<Vec<f32>>();
        Model::sequential(
            vec![1, 6, 6],
            [
                (
                    LayerKind::Conv2d {
                        out_channels: 2,
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        padding: 1,
                    },
                    p(2 * 9 + 2, 0.71),
                ),
                (LayerKind::Relu, vec![]),
                (LayerKind::MaxPool { window: 2, stride: 2 }, vec![]),
                (
                    LayerKind::Conv2d {
                        out_channels: 3,
                        kernel_h: 2,
                        kernel_w: 2,
                        stride: 1,
                        padding: 0,
                    },
                    p(3 * 2 * 4 + 3, 0.43),
                ),
                (LayerKind::AvgPool { window: 2, stride: 1 }, vec![]),
                (LayerKind::Flatten, vec![]),
                (LayerKind::Dense { out_features: 5 }, p(3 * 5 + 5, 0.29)),
                (LayerKind::Relu, vec![]),
                (LayerKind::Dense { out_features: 3 }, p(5 * 3 + 3, 0.53)),
                (LayerKind::Softmax, vec![]),
            ],
        )
        .unwrap()
    }

    fn input(seed: u32) -> Tensor {
        let data = (0..36).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 1000) as f32 / 1000.0).collect();
        Tensor::new(vec![1, 6, 6], data).unwrap()
    }

    #[test]
    fn empty_flip_set_returns_clean_output() {
        let model = small_cnn();
        let x = input(3);
        let mut prop = Propagator::new(&model, &x).unwrap();
        let full = model.forward(&x, 0, &InjectionPlan::empty()).unwrap();
        let out = prop.evaluate(&[], |o| o.to_vec());
        assert!(out.iter().zip(full.logits.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn every_single_flip_matches_full_forward() {
        let model = small_cnn();
        let x = input(11);
        let mut prop = Propagator::new(&model, &x).unwrap();
        for addr in model.enumerate_elements() {
            for bit in BitLoc::all() {
                let plan = InjectionPlan::single(&model, addr, bit).unwrap();
                let full = model.forward(&x, 0, &plan).unwrap();
                let fast = prop.evaluate(plan.entries(), |o| o.to_vec());
                let same = fast.iter().zip(full.logits.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{addr:?} bit {bit}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn multi_flip_plans_match_full_forward(
            seed in any::<u32>(),
            picks in proptest::collection::vec((0usize..10_000, 0u8..32), 1..6),
        ) {
            let model = small_cnn();
            let x = input(seed);
            let n = model.element_count();
            let mut entries: Vec<(ElementAddr, BitLoc)> = picks
                .into_iter()
                .map(|(g, b)| (model.addr_of(g % n), BitLoc::new(b).unwrap()))
                .collect();
            entries.sort();
            entries.dedup();
            let plan = InjectionPlan::new(&model, entries).unwrap();
            let full = model.forward(&x, 1, &plan).unwrap();
            let mut prop = Propagator::new(&model, &x).unwrap();
            let fast = prop.evaluate(plan.entries(), |o| o.to_vec());
            for (a, b) in fast.iter().zip(full.logits.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            // State is restored: an empty evaluation is clean again.
            let clean = prop.evaluate(&[], |o| o.to_vec());
            let base = model.forward(&x, 1, &InjectionPlan::empty()).unwrap();
            for (a, b) in clean.iter().zip(base.logits.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
