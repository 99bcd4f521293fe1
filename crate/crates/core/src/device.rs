//! Parametric DVFS fault model.
//!
//! The safe boundary is linear in frequency. A glitch pair below it has a
//! positive stress, which drives per-millisecond crash and no-response hazards
//! and a Poisson fault count. Faults land on feature-map elements whose
//! (jittered) execution windows overlap the glitch.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ElementAddr, Model};
use crate::error::SimError;
use crate::tensor::BitLoc;

/// The full glitch parameter tuple. Frequencies in MHz, voltages in mV,
/// times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultParams {
    /// CPU frequency; carried but inert.
    pub f_c: f64,
    /// CPU voltage; carried but inert.
    pub v_c: f64,
    /// GPU baseline frequency.
    pub f_g: f64,
    /// GPU baseline voltage.
    pub v_g: f64,
    /// Glitch frequency.
    pub f_h: f64,
    /// Glitch voltage.
    pub v_l: f64,
    /// Wait from inference start to the glitch.
    pub t_w: f64,
    /// Glitch hold duration.
    pub t_d: f64,
}

impl FaultParams {
    pub fn validate(&self, profile: &DeviceProfile) -> Result<(), SimError> {
        let positive = [
            ("F_C", self.f_c),
            ("V_C", self.v_c),
            ("F_G", self.f_g),
            ("V_G", self.v_g),
            ("F_h", self.f_h),
            ("V_l", self.v_l),
            ("T_d", self.t_d),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.t_w.is_finite() && self.t_w >= 0.0) {
            return Err(SimError::Params(format!("T_W must be non-negative, got {}", self.t_w)));
        }
        let needed = profile.safe_boundary_voltage(self.f_g);
        if self.v_g < needed {
            return Err(SimError::Params(format!(
                "V_G {} mV is below the safe boundary {needed} mV at F_G {} MHz",
                self.v_g, self.f_g
            )));
        }
        Ok(())
    }

    /// Glitch frequency expressed as an offset over the baseline.
    pub fn frequency_offset(&self) -> f64 {
        self.f_h - self.f_g
    }
}

/// Device constants. See the field docs for units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Normal (F MHz, V mV) operating pairs.
    pub reference_pairs: Vec<(f64, f64)>,
    /// `a` in `V_min(F) = a + b·F`, mV.
    pub boundary_intercept_mv: f64,
    /// `b` in `V_min(F) = a + b·F`, mV per MHz.
    pub boundary_slope_mv_per_mhz: f64,
    /// Voltage deficit corresponding to unit stress, mV.
    pub stress_scale_mv: f64,
    pub crash_stress_threshold: f64,
    pub no_response_stress_threshold: f64,
    /// Width of the stress logistics.
    pub stress_logistic_width: f64,
    /// Saturation of the stress-driven hazards, per ms.
    pub stress_hazard_per_ms: f64,
    /// Voltage below which the device browns out and crashes.
    pub brownout_mv: Option<f64>,
    pub brownout_width_mv: f64,
    /// Frequency above which the device stops responding.
    pub max_stable_mhz: Option<f64>,
    pub max_stable_width_mhz: f64,
    /// Mean faulted bits per unit stress per ms.
    pub fault_rate: f64,
    /// Cap on bits flipped by one glitch.
    pub max_bits_per_glitch: Option<u32>,
    /// Cost of one multiply-accumulate at `reference_mhz`.
    pub cost_per_op_ms: f64,
    pub reference_mhz: f64,
    /// Half-width of the per-trial uniform schedule shift.
    pub jitter_ms: f64,
    pub seed: u64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DeviceProfile {
    /// Default calibrated profile. The best single-bit cell of the default
    /// calibration grid is 710 mV at +235 MHz over a 1500 MHz baseline.
    pub fn calibrated() -> Self {
        Self {
            reference_pairs: vec![(1200.0, 700.0), (1350.0, 750.0), (1500.0, 800.0), (1650.0, 850.0), (1800.0, 900.0)],
            boundary_intercept_mv: 26.0,
            boundary_slope_mv_per_mhz: 0.4,
            stress_scale_mv: 10.0,
            crash_stress_threshold: 3.0,
            no_response_stress_threshold: 2.5,
            stress_logistic_width: 0.25,
            stress_hazard_per_ms: 0.5,
            brownout_mv: Some(705.0),
            brownout_width_mv: 1.0,
            max_stable_mhz: Some(1747.0),
            max_stable_width_mhz: 3.0,
            fault_rate: 0.5,
            max_bits_per_glitch: None,
            cost_per_op_ms: 0.5,
            reference_mhz: 1500.0,
            jitter_ms: 0.5,
            seed: 0,
        }
    }

    /// Near-ideal attacker device: every stressed glitch flips exactly one
    /// bit, never crashes, and the schedule has no jitter.
    pub fn ideal() -> Self {
        Self {
            stress_hazard_per_ms: 0.0,
            brownout_mv: None,
            max_stable_mhz: None,
            fault_rate: 50.0,
            max_bits_per_glitch: Some(1),
            jitter_ms: 0.0,
            ..Self::calibrated()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Profile(m));
        if !(self.boundary_slope_mv_per_mhz >= 0.0) {
            return err("boundary slope must be non-negative".into());
        }
        if !self.boundary_intercept_mv.is_finite() {
            return err("boundary intercept must be finite".into());
        }
        for &(f, v) in &self.reference_pairs {
            if !(f > 0.0 && v > 0.0) {
                return err(format!("reference pair ({f}, {v}) must be positive"));
            }
            let b = self.safe_boundary_voltage(f);
            if b > v {
                return err(format!("boundary {b} mV exceeds reference voltage {v} mV at {f} MHz"));
            }
        }
        let positive = [
            ("stress scale", self.stress_scale_mv),
            ("stress logistic width", self.stress_logistic_width),
            ("brownout width", self.brownout_width_mv),
            ("max stable width", self.max_stable_width_mhz),
            ("cost per op", self.cost_per_op_ms),
            ("reference frequency", self.reference_mhz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.no_response_stress_threshold > 0.0 && self.crash_stress_threshold > self.no_response_stress_threshold) {
            return err("stress thresholds must satisfy 0 < no-response < crash".into());
        }
        if !(0.0..=1.0).contains(&self.stress_hazard_per_ms) {
            return err("stress hazard must lie in [0, 1]".into());
        }
        if !(self.fault_rate.is_finite() && self.fault_rate >= 0.0) {
            return err("fault rate must be non-negative".into());
        }
        if !(self.jitter_ms.is_finite() && self.jitter_ms >= 0.0) {
            return err("jitter must be non-negative".into());
        }
        if self.max_bits_per_glitch == Some(0) {
            return err("bit cap must be at least 1".into());
        }
        Ok(())
    }

    /// Lowest safe voltage at frequency `f`.
    pub fn safe_boundary_voltage(&self, f: f64) -> f64 {
        self.boundary_intercept_mv + self.boundary_slope_mv_per_mhz * f
    }

    pub fn stress(&self, params: &FaultParams) -> f64 {
        self.stress_at(params.f_h, params.v_l)
    }

    pub fn stress_at(&self, f_h: f64, v_l: f64) -> f64 {
        ((self.safe_boundary_voltage(f_h) - v_l) / self.stress_scale_mv).max(0.0)
    }

    fn stress_hazard(&self, stress: f64, threshold: f64) -> f64 {
        self.stress_hazard_per_ms * logistic((stress - threshold) / self.stress_logistic_width)
    }

    /// Probability that a glitch at `params` crashes the device.
    pub fn crash_probability(&self, params: &FaultParams) -> f64 {
        let s = self.stress(params);
        if s <= 0.0 {
            return 0.0;
        }
        let brownout = self
            .brownout_mv
            .map_or(0.0, |v| logistic((v - params.v_l) / self.brownout_width_mv));
        let h = 1.0 - (1.0 - self.stress_hazard(s, self.crash_stress_threshold)) * (1.0 - brownout);
        1.0 - (1.0 - h).powf(params.t_d)
    }

    /// Probability that a glitch at `params` leaves the device unresponsive,
    /// given that it did not crash.
    pub fn no_response_probability(&self, params: &FaultParams) -> f64 {
        let s = self.stress(params);
        if s <= 0.0 {
            return 0.0;
        }
        let ceiling = self
            .max_stable_mhz
            .map_or(0.0, |f| logistic((params.f_h - f) / self.max_stable_width_mhz));
        let h = 1.0 - (1.0 - self.stress_hazard(s, self.no_response_stress_threshold)) * (1.0 - ceiling);
        1.0 - (1.0 - h).powf(params.t_d)
    }

    /// Mean of the (uncapped) fault count.
    pub fn expected_fault_count(&self, params: &FaultParams) -> f64 {
        self.fault_rate * self.stress(params) * params.t_d
    }

    /// Per-trial schedule shift in `[-jitter, +jitter]`.
    pub fn draw_jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.jitter_ms > 0.0 {
            rng.random_range(-self.jitter_ms..=self.jitter_ms)
        } else {
            0.0
        }
    }

    /// Samples the device response to one glitch, without fault positions.
    pub fn sample_glitch_kind<R: Rng + ?Sized>(&self, params: &FaultParams, rng: &mut R) -> GlitchKind {
        let s = self.stress(params);
        if s <= 0.0 {
            return GlitchKind::NoEffect;
        }
        if rng.random::<f64>() < self.crash_probability(params) {
            return GlitchKind::Crash;
        }
        if rng.random::<f64>() < self.no_response_probability(params) {
            return GlitchKind::NoResponse;
        }
        let mean = self.expected_fault_count(params);
        let mut count = if mean > 0.0 {
            Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
        } else {
            0
        };
        if let Some(cap) = self.max_bits_per_glitch {
            count = count.min(cap as u64);
        }
        if count == 0 {
            GlitchKind::NoEffect
        } else {
            GlitchKind::Faults(count as u32)
        }
    }
}

/// Outcome class of a glitch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlitchKind {
    NoEffect,
    Faults(u32),
    Crash,
    NoResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GlitchOutcome {
    NoEffect,
    Faults { positions: Vec<(ElementAddr, BitLoc)> },
    Crash,
    NoResponse,
}

impl GlitchOutcome {
    pub fn fault_count(&self) -> usize {
        match self {
            GlitchOutcome::Faults { positions } => positions.len(),
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GlitchOutcome::NoEffect => "no_effect",
            GlitchOutcome::Faults { .. } => "faults",
            GlitchOutcome::Crash => "crash",
            GlitchOutcome::NoResponse => "no_response",
        }
    }
}

/// Per-element execution windows at one GPU frequency, in
/// `Model::enumerate_elements` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionSchedule {
    frequency_mhz: f64,
    /// `bounds[g]` is the start of element `g`; the last entry is the total.
    bounds: Vec<f64>,
}

impl ExecutionSchedule {
    pub fn frequency_mhz(&self) -> f64 {
        self.frequency_mhz
    }

    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_duration(&self) -> f64 {
        self.bounds[self.bounds.len() - 1]
    }

    /// `[start, end)` of the element with global index `g`.
    pub fn window(&self, g: usize) -> (f64, f64) {
        (self.bounds[g], self.bounds[g + 1])
    }

    /// Global indices of elements whose windows, shifted by `shift`, overlap
    /// `[start, end)`.
    pub fn overlapping(&self, start: f64, end: f64, shift: f64) -> std::ops::Range<usize> {
        let n = self.len();
        // First element whose shifted end exceeds `start`.
        let lo = self.bounds[1..].partition_point(|&e| e + shift <= start);
        // First element whose shifted start is at or after `end`.
        let hi = self.bounds[..n].partition_point(|&s| s + shift < end);
        lo..hi.max(lo)
    }
}

/// Lays out element windows back to back; each element costs its op count
/// times the per-op cost, scaled by `reference / f`.
pub fn build_schedule(model: &Model, profile: &DeviceProfile, f: f64) -> Result<ExecutionSchedule, SimError> {
    if !(f.is_finite() && f > 0.0) {
        return Err(SimError::Params(format!("frequency must be positive, got {f}")));
    }
    let scale = profile.reference_mhz / f;
    let mut bounds = Vec::with_capacity(model.element_count() + 1);
    let mut ops: u64 = 0;
    bounds.push(0.0);
    for layer in model.layers() {
        let per = layer.ops_per_element();
        for _ in 0..layer.output_len() {
            ops += per;
            bounds.push(ops as f64 * profile.cost_per_op_ms * scale);
        }
    }
    Ok(ExecutionSchedule { frequency_mhz: f, bounds })
}

/// Samples one glitch against an inference whose schedule is shifted by
/// `shift` ms.
pub fn sample_glitch_outcome<R: Rng + ?Sized>(
    profile: &DeviceProfile,
    params: &FaultParams,
    model: &Model,
    schedule: &ExecutionSchedule,
    shift: f64,
    rng: &mut R,
) -> GlitchOutcome {
    let hit = schedule.overlapping(params.t_w, params.t_w + params.t_d, shift);
    if hit.is_empty() {
        return GlitchOutcome::NoEffect;
    }
    match profile.sample_glitch_kind(params, rng) {
        GlitchKind::NoEffect => GlitchOutcome::NoEffect,
        GlitchKind::Crash => GlitchOutcome::Crash,
        GlitchKind::NoResponse => GlitchOutcome::NoResponse,
        GlitchKind::Faults(k) => {
            let positions = (0..k)
                .map(|_| {
                    let g = rng.random_range(hit.clone());
                    let bit = BitLoc::new(rng.random_range(0..32)).expect("in range");
                    (model.addr_of(g), bit)
                })
                .collect();
            GlitchOutcome::Faults { positions }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCell {
    pub v_l: f64,
    pub f_h: f64,
    pub offset: f64,
    pub stress: f64,
    pub rate_no_effect: f64,
    pub rate_fault: f64,
    pub rate_single_bit: f64,
    pub rate_crash: f64,
    pub rate_no_response: f64,
    /// Mean faulted bits over glitches that neither crashed nor hung.
    pub mean_bits: f64,
}

/// Tries every (V_l, F_G + offset) cell `trials` times. Cells use independent
/// RNG streams derived from `seed`, so the result does not depend on
/// evaluation order.
pub fn calibrate_sweep(
    profile: &DeviceProfile,
    base: &FaultParams,
    v_grid: &[f64],
    offset_grid: &[f64],
    t_d: f64,
    trials: u32,
    seed: u64,
) -> Result<Vec<CalibrationCell>, SimError> {
    if v_grid.is_empty() || offset_grid.is_empty() {
        return Err(SimError::Empty("calibration grid"));
    }
    if trials == 0 {
        return Err(SimError::NonPositive("trials per cell"));
    }
    profile.validate()?;
    let cells: Vec<(usize, f64, f64)> = v_grid
        .iter()
        .flat_map(|&v| offset_grid.iter().map(move |&o| (v, o)))
        .enumerate()
        .map(|(i, (v, o))| (i, v, o))
        .collect();
    cells
        .par_iter()
        .map(|&(i, v_l, offset)| {
            let params = FaultParams {
                f_h: base.f_g + offset,
                v_l,
                t_d,
                ..*base
            };
            params.validate(profile)?;
            let mut rng = crate::derive_rng(seed, &[i as u64]);
            let (mut none, mut fault, mut single, mut crash, mut hung, mut bits) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
            for _ in 0..trials {
                match profile.sample_glitch_kind(&params, &mut rng) {
                    GlitchKind::NoEffect => none += 1,
                    GlitchKind::Faults(k) => {
                        fault += 1;
                        single += (k == 1) as u64;
                        bits += k as u64;
                    }
                    GlitchKind::Crash => crash += 1,
                    GlitchKind::NoResponse => hung += 1,
                }
            }
            let n = trials as f64;
            let alive = none + fault;
            Ok(CalibrationCell {
                v_l,
                f_h: params.f_h,
                offset,
                stress: profile.stress(&params),
                rate_no_effect: none as f64 / n,
                rate_fault: fault as f64 / n,
                rate_single_bit: single as f64 / n,
                rate_crash: crash as f64 / n,
                rate_no_response: hung as f64 / n,
                mean_bits: if alive > 0 { bits as f64 / alive as f64 } else { 0.0 },
            })
        })
        .collect()
}

/// Grid of `start, start + step, ...` up to and including `end`.
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || end < start {
        return Vec::new();
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}
