//! Bit gradients, per-target sensitivity and top-N target selection.
//!
//! A bit gradient is the finite loss change caused by flipping one bit of one
//! feature-map element. A target's sensitivity is the mean bit gradient over
//! the bits it spans. Gradient sums are kept in a fixed-point accumulator so
//! that sums over bits, targets and inputs are exact and order-independent.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ElementAddr, InjectionPlan, Model, Propagator};
use crate::error::{ModelError, ShapeError, SimError};
use crate::tensor::{bits_of, BitLoc, Granularity, Tensor, WORD_BITS};

/// Exact sum of gradients in fixed point with [`GradientSum::FRACTION_BITS`]
/// fractional bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GradientSum(i128);

impl GradientSum {
    pub const FRACTION_BITS: i32 = 80;
    /// Spacing of representable values.
    pub const RESOLUTION: f64 = 1.0 / (1u128 << Self::FRACTION_BITS) as f64;

    /// Rounds a finite gradient onto the fixed-point grid.
    pub fn from_f64(value: f64) -> Self {
        debug_assert!(value.is_finite());
        let scaled = value * (1u128 << Self::FRACTION_BITS) as f64;
        Self(scaled.round() as i128)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 * Self::RESOLUTION
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn mean(self, n: u32) -> f64 {
        self.to_f64() / n as f64
    }
}

impl Add for GradientSum {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl AddAssign for GradientSum {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sum for GradientSum {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// What the attacker wants the loss to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Increase the loss against the true label.
    Untargeted { label: usize },
    /// Decrease the loss against the attacker's class; gradients are negated
    /// so that a positive value still means "helps the attacker".
    Targeted { target: usize },
}

impl Objective {
    pub fn label(self) -> usize {
        match self {
            Objective::Untargeted { label } => label,
            Objective::Targeted { target } => target,
        }
    }

    fn gradient(self, faulted_loss: f64, clean_loss: f64) -> f64 {
        match self {
            Objective::Untargeted { .. } => faulted_loss - clean_loss,
            Objective::Targeted { .. } => clean_loss - faulted_loss,
        }
    }
}

/// Loss change from flipping `loc` of element `addr`, relative to the clean
/// pass, both computed with full forward passes.
pub fn bit_gradient(model: &Model, x: &Tensor, label: usize, addr: ElementAddr, loc: BitLoc) -> Result<f64, ModelError> {
    let clean = model.forward(x, label, &InjectionPlan::empty())?;
    let faulted = model.forward(x, label, &InjectionPlan::single(model, addr, loc)?)?;
    Ok(faulted.loss - clean.loss)
}

/// Gradients of all 32 bits of every element for one input and objective.
#[derive(Debug, Clone, PartialEq)]
pub struct BitGradients {
    objective: Objective,
    values: Vec<f64>,
}

impl BitGradients {
    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn element_count(&self) -> usize {
        self.values.len() / WORD_BITS as usize
    }

    /// Gradient of `bit` of the element at global index `element`.
    pub fn get(&self, element: usize, bit: BitLoc) -> f64 {
        self.values[element * WORD_BITS as usize + bit.index() as usize]
    }

    fn element(&self, element: usize) -> &[f64] {
        let w = WORD_BITS as usize;
        &self.values[element * w..(element + 1) * w]
    }
}

/// Flips every bit of every element once and records the gradient under
/// each objective. One faulted pass serves all objectives.
pub fn sweep_bit_gradients(model: &Model, x: &Tensor, objectives: &[Objective]) -> Result<Vec<BitGradients>, ModelError> {
    for o in objectives {
        model.check_label(o.label())?;
    }
    let mut prop = Propagator::new(model, x)?;
    let clean: Vec<f64> = objectives
        .iter()
        .map(|o| model.output_loss(prop.clean_output(), o.label()))
        .collect();
    let total = model.element_count() * WORD_BITS as usize;
    let mut values: Vec<Vec<f64>> = objectives.iter().map(|_| Vec::with_capacity(total)).collect();
    for g in 0..model.element_count() {
        let addr = model.addr_of(g);
        for bit in BitLoc::all() {
            prop.evaluate(&[(addr, bit)], |out| {
                for ((o, c), vals) in objectives.iter().zip(&clean).zip(values.iter_mut()) {
                    vals.push(o.gradient(model.output_loss(out, o.label()), *c));
                }
            });
        }
    }
    Ok(objectives
        .iter()
        .zip(values)
        .map(|(&objective, values)| BitGradients { objective, values })
        .collect())
}

/// Which candidate targets a table holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScheme {
    Element,
    Exponent,
    Mantissa,
    /// Exponent and mantissa parts ranked together.
    Parts,
    Bit,
}

impl TargetScheme {
    pub fn granularities(self) -> &'static [Granularity] {
        match self {
            TargetScheme::Element => &[Granularity::Element],
            TargetScheme::Exponent => &[Granularity::Exponent],
            TargetScheme::Mantissa => &[Granularity::Mantissa],
            TargetScheme::Parts => &[Granularity::Exponent, Granularity::Mantissa],
            TargetScheme::Bit => &[Granularity::Bit],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetScheme::Element => "element",
            TargetScheme::Exponent => "exponent",
            TargetScheme::Mantissa => "mantissa",
            TargetScheme::Parts => "parts",
            TargetScheme::Bit => "bit",
        }
    }
}

impl fmt::Display for TargetScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetScheme {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "element" => Ok(TargetScheme::Element),
            "exponent" => Ok(TargetScheme::Exponent),
            "mantissa" => Ok(TargetScheme::Mantissa),
            "parts" | "part" => Ok(TargetScheme::Parts),
            "bit" => Ok(TargetScheme::Bit),
            other => Err(ShapeError::UnknownGranularity(other.to_string())),
        }
    }
}

/// An element, element part or single bit that faults may be aimed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateTarget {
    pub addr: ElementAddr,
    pub granularity: Granularity,
    pub anchor: Option<BitLoc>,
}

impl CandidateTarget {
    pub fn new(addr: ElementAddr, granularity: Granularity, anchor: Option<BitLoc>) -> Result<Self, ShapeError> {
        bits_of(granularity, anchor)?;
        Ok(Self {
            addr,
            granularity,
            anchor,
        })
    }

    pub fn element(addr: ElementAddr) -> Self {
        Self {
            addr,
            granularity: Granularity::Element,
            anchor: None,
        }
    }

    /// Bits spanned by the target, ascending.
    pub fn bits(&self) -> Vec<BitLoc> {
        bits_of(self.granularity, self.anchor).expect("anchor invariant checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub target: CandidateTarget,
    /// Exact sum of the bit gradients of the target's bits.
    pub gradient_sum: GradientSum,
    /// Mean bit gradient, `gradient_sum / n`.
    pub score: f64,
}

impl SensitivityEntry {
    pub fn new(target: CandidateTarget, gradient_sum: GradientSum) -> Self {
        let score = gradient_sum.mean(target.granularity.bit_count());
        Self {
            target,
            gradient_sum,
            score,
        }
    }
}

/// One entry per candidate target, in candidate order: element order, then
/// exponent before mantissa, then anchor bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub scheme: TargetScheme,
    pub fingerprint: String,
    pub entries: Vec<SensitivityEntry>,
}

impl SensitivityTable {
    pub fn from_gradients(model: &Model, grads: &BitGradients, scheme: TargetScheme) -> Self {
        let mut entries = Vec::with_capacity(grads.element_count() * 2);
        for g in 0..grads.element_count() {
            let addr = model.addr_of(g);
            let word = grads.element(g);
            let sum_bits = |range: std::ops::Range<usize>| -> GradientSum {
                word[range].iter().map(|&v| GradientSum::from_f64(v)).sum()
            };
            for &granularity in scheme.granularities() {
                match granularity {
                    Granularity::Bit => {
                        for bit in BitLoc::all() {
                            let target = CandidateTarget::new(addr, Granularity::Bit, Some(bit)).expect("anchored");
                            let i = bit.index() as usize;
                            entries.push(SensitivityEntry::new(target, sum_bits(i..i + 1)));
                        }
                    }
                    g => {
                        let range = match g {
                            Granularity::Element => 0..32,
                            Granularity::Exponent => 23..31,
                            _ => 0..23,
                        };
                        entries.push(SensitivityEntry::new(CandidateTarget::new(addr, g, None).expect("unanchored"), sum_bits(range)));
                    }
                }
            }
        }
        Self {
            scheme,
            fingerprint: model.fingerprint(),
            entries,
        }
    }

    /// Adds `other`'s gradient sums entry by entry.
    pub fn accumulate(&mut self, other: &SensitivityTable) -> Result<(), SimError> {
        if self.scheme != other.scheme || self.entries.len() != other.entries.len() || self.fingerprint != other.fingerprint {
            return Err(SimError::Invalid("sensitivity tables differ in model or scheme".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(a.target, b.target);
            *a = SensitivityEntry::new(a.target, a.gradient_sum + b.gradient_sum);
        }
        Ok(())
    }
}

/// A selected target with its sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTarget {
    pub target: CandidateTarget,
    pub score: f64,
}

/// Up to `limit` targets with positive sensitivity, most sensitive first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub targets: Vec<ScoredTarget>,
    pub limit: usize,
}

impl TargetSet {
    pub fn empty(limit: usize) -> Self {
        Self {
            targets: Vec::new(),
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidateTarget> {
        self.targets.iter().map(|t| &t.target)
    }
}

/// Top-`n` entries by sensitivity among those with `S > 0`; ties keep
/// candidate order.
pub fn get_top_set(table: &SensitivityTable, n: usize) -> Result<TargetSet, SimError> {
    if n == 0 {
        return Err(SimError::NonPositive("N"));
    }
    let mut positive: Vec<&SensitivityEntry> = table.entries.iter().filter(|e| e.score > 0.0).collect();
    positive.sort_by(|a, b| b.score.total_cmp(&a.score));
    positive.truncate(n);
    Ok(TargetSet {
        targets: positive
            .into_iter()
            .map(|e| ScoredTarget {
                target: e.target,
                score: e.score,
            })
            .collect(),
        limit: n,
    })
}

/// Sensitivity of every candidate target for one input.
pub fn evaluate_sensitivity(
    model: &Model,
    x: &Tensor,
    objective: Objective,
    scheme: TargetScheme,
) -> Result<SensitivityTable, ModelError> {
    let grads = sweep_bit_gradients(model, x, &[objective])?;
    Ok(SensitivityTable::from_gradients(model, &grads[0], scheme))
}

pub fn input_dependent_search(
    model: &Model,
    x: &Tensor,
    objective: Objective,
    n: usize,
    scheme: TargetScheme,
) -> Result<TargetSet, SimError> {
    if n == 0 {
        return Err(SimError::NonPositive("N"));
    }
    let table = evaluate_sensitivity(model, x, objective, scheme)?;
    get_top_set(&table, n)
}

/// Sensitivities summed over a sample of (input, label) pairs.
///
/// Per-input sweeps run in parallel; the fixed-point sum makes the result
/// independent of sample order.
pub fn accumulate_sensitivity(
    model: &Model,
    sample: &[(Tensor, usize)],
    scheme: TargetScheme,
    targeted: Option<usize>,
) -> Result<SensitivityTable, SimError> {
    if sample.is_empty() {
        return Err(SimError::Empty("input sample"));
    }
    let tables: Vec<SensitivityTable> = sample
        .par_iter()
        .map(|(x, label)| {
            let objective = match targeted {
                Some(target) => Objective::Targeted { target },
                None => Objective::Untargeted { label: *label },
            };
            evaluate_sensitivity(model, x, objective, scheme)
        })
        .collect::<Result<_, _>>()?;
    let mut iter = tables.into_iter();
    let mut total = iter.next().expect("non-empty sample");
    for t in iter {
        total.accumulate(&t)?;
    }
    Ok(total)
}

pub fn input_independent_search(
    model: &Model,
    sample: &[(Tensor, usize)],
    n: usize,
    scheme: TargetScheme,
) -> Result<TargetSet, SimError> {
    if n == 0 {
        return Err(SimError::NonPositive("N"));
    }
    let table = accumulate_sensitivity(model, sample, scheme, None)?;
    get_top_set(&table, n)
}
