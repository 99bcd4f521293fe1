//! Attacker cycle against the simulated device: wait, glitch, recover, repeat
//! within one inference, then read the prediction.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{sample_glitch_outcome, DeviceProfile, ExecutionSchedule, FaultParams, GlitchOutcome};
use crate::engine::{argmax, ElementAddr, Model, Propagator};
use crate::error::SimError;
use crate::sensitivity::{
    accumulate_sensitivity, get_top_set, sweep_bit_gradients, CandidateTarget, Objective, ScoredTarget, SensitivityTable,
    TargetScheme, TargetSet,
};
use crate::tensor::{BitLoc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMode {
    NonTargeted,
    Targeted { target: usize },
}

impl AttackMode {
    /// Sensitivity objective used to rank targets for an input with `label`.
    pub fn objective(self, label: usize) -> Objective {
        match self {
            AttackMode::NonTargeted => Objective::Untargeted { label },
            AttackMode::Targeted { target } => Objective::Targeted { target },
        }
    }
}

/// One planned glitch covering one or more targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAttempt {
    pub targets: Vec<CandidateTarget>,
    pub t_w: f64,
    pub t_d: f64,
}

/// Centres a glitch of length `T_d` on each target's window, then merges
/// glitches that would overlap. A merged glitch holds until the later of the
/// merged glitches would have ended.
pub fn plan_injections(
    model: &Model,
    schedule: &ExecutionSchedule,
    targets: &TargetSet,
    params: &FaultParams,
) -> Result<Vec<PlannedAttempt>, SimError> {
    let mut planned = Vec::with_capacity(targets.len());
    for t in targets.iter() {
        if !model.is_valid_addr(t.addr) || model.global_index(t.addr) >= schedule.len() {
            return Err(SimError::TargetNotScheduled {
                layer: t.addr.layer,
                element: t.addr.index,
            });
        }
        let (start, end) = schedule.window(model.global_index(t.addr));
        let t_w = ((start + end) / 2.0 - params.t_d / 2.0).max(0.0);
        planned.push((t_w, *t));
    }
    planned.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<PlannedAttempt> = Vec::new();
    for (t_w, target) in planned {
        match out.last_mut() {
            Some(last) if t_w < last.t_w + last.t_d => {
                last.t_d = last.t_d.max(t_w + params.t_d - last.t_w);
                last.targets.push(target);
            }
            _ => out.push(PlannedAttempt {
                targets: vec![target],
                t_w,
                t_d: params.t_d,
            }),
        }
    }
    Ok(out)
}

/// Moves every planned glitch by `delta` ms, clamping at zero.
pub fn shift_plan(plan: &[PlannedAttempt], delta: f64) -> Vec<PlannedAttempt> {
    plan.iter()
        .map(|a| PlannedAttempt {
            t_w: (a.t_w + delta).max(0.0),
            ..a.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub targets: Vec<CandidateTarget>,
    pub t_w: f64,
    pub t_d: f64,
    pub f_h: f64,
    pub v_l: f64,
    pub outcome: GlitchOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed { predicted: usize },
    DeviceCrash,
    DeviceNoResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub input_id: usize,
    pub true_label: usize,
    pub mode: AttackMode,
    pub baseline_class: usize,
    pub status: TrialStatus,
    pub attempts: Vec<AttemptRecord>,
    /// Faults that cancelled because the same bit was hit twice.
    pub spent_faults: usize,
}

impl TrialResult {
    pub fn final_class(&self) -> Option<usize> {
        match self.status {
            TrialStatus::Completed { predicted } => Some(predicted),
            _ => None,
        }
    }

    pub fn fault_count(&self) -> usize {
        self.attempts.iter().map(|a| a.outcome.fault_count()).sum()
    }
}

/// Ranges a random-baseline glitch is drawn from. Draws below the safe
/// boundary only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFaultSpace {
    pub offset_mhz: (f64, f64),
    pub v_l_mv: (f64, f64),
    pub t_d_ms: (f64, f64),
    pub glitches_per_trial: u32,
}

impl Default for RandomFaultSpace {
    fn default() -> Self {
        Self {
            offset_mhz: (10.0, 300.0),
            v_l_mv: (650.0, 800.0),
            t_d_ms: (1.0, 4.0),
            glitches_per_trial: 1,
        }
    }
}

impl RandomFaultSpace {
    fn draw<R: Rng + ?Sized>(&self, profile: &DeviceProfile, base: &FaultParams, horizon: f64, rng: &mut R) -> Result<FaultParams, SimError> {
        let pick = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        for _ in 0..10_000 {
            let p = FaultParams {
                f_h: base.f_g + pick(rng, self.offset_mhz),
                v_l: pick(rng, self.v_l_mv),
                t_d: pick(rng, self.t_d_ms),
                t_w: if horizon > 0.0 { rng.random_range(0.0..horizon) } else { 0.0 },
                ..*base
            };
            if profile.stress(&p) > 0.0 && p.validate(profile).is_ok() {
                return Ok(p);
            }
        }
        Err(SimError::Params("random fault space has no faulting parameters".into()))
    }
}

/// How faults reach the inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    /// Each target gets exactly one flip: its anchor bit, or a uniformly
    /// random bit of its span.
    Precise,
    /// Planned glitches through the device model.
    Device { profile: DeviceProfile, params: FaultParams },
    /// Glitches at uniformly random times with random faulting parameters.
    Random {
        profile: DeviceProfile,
        base: FaultParams,
        space: RandomFaultSpace,
    },
}

/// Faults applied so far in one trial; a second hit on the same bit cancels.
#[derive(Default)]
struct FlipSet {
    flips: Vec<(ElementAddr, BitLoc)>,
    spent: usize,
}

impl FlipSet {
    fn toggle(&mut self, f: (ElementAddr, BitLoc)) {
        if let Some(i) = self.flips.iter().position(|&g| g == f) {
            self.flips.swap_remove(i);
            self.spent += 2;
        } else {
            self.flips.push(f);
        }
    }
}

/// Context shared by all trials of a campaign.
struct Runner<'a> {
    model: &'a Model,
    mechanism: &'a Mechanism,
    schedule: Option<ExecutionSchedule>,
    mode: AttackMode,
    seed: u64,
}

impl<'a> Runner<'a> {
    fn new(model: &'a Model, mechanism: &'a Mechanism, mode: AttackMode, seed: u64) -> Result<Self, SimError> {
        let schedule = match mechanism {
            Mechanism::Precise => None,
            Mechanism::Device { profile, params } => {
                profile.validate()?;
                params.validate(profile)?;
                Some(crate::device::build_schedule(model, profile, params.f_g)?)
            }
            Mechanism::Random { profile, base, .. } => {
                profile.validate()?;
                base.validate(profile)?;
                Some(crate::device::build_schedule(model, profile, base.f_g)?)
            }
        };
        if let AttackMode::Targeted { target } = mode {
            model.check_label(target)?;
        }
        Ok(Self {
            model,
            mechanism,
            schedule,
            mode,
            seed,
        })
    }

    fn plan(&self, targets: &TargetSet, shift: f64) -> Result<Vec<PlannedAttempt>, SimError> {
        match (self.mechanism, &self.schedule) {
            (Mechanism::Device { params, .. }, Some(s)) => Ok(shift_plan(&plan_injections(self.model, s, targets, params)?, shift)),
            _ => Ok(Vec::new()),
        }
    }

    fn trial(
        &self,
        prop: &mut Propagator,
        trial: usize,
        input_id: usize,
        label: usize,
        targets: &TargetSet,
        plan: &[PlannedAttempt],
    ) -> Result<TrialResult, SimError> {
        let model = self.model;
        let baseline_class = argmax(prop.clean_output());
        let mut rng = crate::derive_rng(self.seed, &[trial as u64]);
        let mut flips = FlipSet::default();
        let mut attempts = Vec::new();
        let mut status = None;

        match self.mechanism {
            Mechanism::Precise => {
                for t in targets.iter() {
                    let bit = match t.anchor {
                        Some(b) => b,
                        None => {
                            let bits = t.bits();
                            bits[rng.random_range(0..bits.len())]
                        }
                    };
                    flips.toggle((t.addr, bit));
                    attempts.push(AttemptRecord {
                        targets: vec![*t],
                        t_w: 0.0,
                        t_d: 0.0,
                        f_h: 0.0,
                        v_l: 0.0,
                        outcome: GlitchOutcome::Faults {
                            positions: vec![(t.addr, bit)],
                        },
                    });
                }
            }
            Mechanism::Device { profile, params } => {
                let schedule = self.schedule.as_ref().expect("device schedule");
                let jitter = profile.draw_jitter(&mut rng);
                for (a, planned) in plan.iter().enumerate() {
                    let p = FaultParams {
                        t_w: planned.t_w,
                        t_d: planned.t_d,
                        ..*params
                    };
                    let mut arng = crate::derive_rng(self.seed, &[trial as u64, a as u64 + 1]);
                    let outcome = sample_glitch_outcome(profile, &p, model, schedule, jitter, &mut arng);
                    let stop = record(&mut attempts, &mut flips, planned.targets.clone(), &p, outcome);
                    if stop.is_some() {
                        status = stop;
                        break;
                    }
                }
            }
            Mechanism::Random { profile, base, space } => {
                let schedule = self.schedule.as_ref().expect("device schedule");
                let jitter = profile.draw_jitter(&mut rng);
                let mut glitches = Vec::with_capacity(space.glitches_per_trial as usize);
                for _ in 0..space.glitches_per_trial {
                    glitches.push(space.draw(profile, base, schedule.total_duration(), &mut rng)?);
                }
                glitches.sort_by(|a, b| a.t_w.total_cmp(&b.t_w));
                for (a, p) in glitches.iter().enumerate() {
                    let mut arng = crate::derive_rng(self.seed, &[trial as u64, a as u64 + 1]);
                    let outcome = sample_glitch_outcome(profile, p, model, schedule, jitter, &mut arng);
                    let stop = record(&mut attempts, &mut flips, Vec::new(), p, outcome);
                    if stop.is_some() {
                        status = stop;
                        break;
                    }
                }
            }
        }

        let status = match status {
            Some(s) => s,
            None => {
                let predicted = prop.evaluate(&flips.flips, argmax);
                TrialStatus::Completed { predicted }
            }
        };
        Ok(TrialResult {
            trial,
            input_id,
            true_label: label,
            mode: self.mode,
            baseline_class,
            status,
            attempts,
            spent_faults: flips.spent,
        })
    }
}

/// Appends an attempt record; returns the terminal status if the device
/// crashed or hung.
fn record(
    attempts: &mut Vec<AttemptRecord>,
    flips: &mut FlipSet,
    targets: Vec<CandidateTarget>,
    p: &FaultParams,
    outcome: GlitchOutcome,
) -> Option<TrialStatus> {
    let stop = match &outcome {
        GlitchOutcome::Crash => Some(TrialStatus::DeviceCrash),
        GlitchOutcome::NoResponse => Some(TrialStatus::DeviceNoResponse),
        GlitchOutcome::Faults { positions } => {
            for &f in positions {
                flips.toggle(f);
            }
            None
        }
        GlitchOutcome::NoEffect => None,
    };
    attempts.push(AttemptRecord {
        targets,
        t_w: p.t_w,
        t_d: p.t_d,
        f_h: p.f_h,
        v_l: p.v_l,
        outcome,
    });
    stop
}

/// Runs one trial on input `x`. The device is reset before the trial and
/// after each glitch; the only state carried between glitches is the set of
/// flipped bits.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_trial(
    model: &Model,
    x: &Tensor,
    label: usize,
    mode: AttackMode,
    targets: &TargetSet,
    mechanism: &Mechanism,
    seed: u64,
    trial: usize,
) -> Result<TrialResult, SimError> {
    model.check_label(label)?;
    let runner = Runner::new(model, mechanism, mode, seed)?;
    let plan = runner.plan(targets, 0.0)?;
    let mut prop = Propagator::new(model, x)?;
    runner.trial(&mut prop, trial, 0, label, targets, &plan)
}

/// Which targets each input is attacked at.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetPlan {
    /// One set per input, indexed by input id.
    PerInput(Vec<TargetSet>),
    Shared(TargetSet),
}

impl TargetPlan {
    fn get(&self, input: usize) -> &TargetSet {
        match self {
            TargetPlan::PerInput(v) => &v[input],
            TargetPlan::Shared(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetedStats {
    pub target: usize,
    /// Completed trials whose baseline was the true label and the true label
    /// differs from the target.
    pub eligible: usize,
    pub successes: usize,
}

impl TargetedStats {
    pub fn rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.successes as f64 / self.eligible as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub trials: usize,
    pub completed: usize,
    pub crashed: usize,
    pub no_response: usize,
    /// Percentage of completed trials whose unattacked prediction was right.
    pub baseline_accuracy: f64,
    /// Percentage of completed trials whose attacked prediction was right.
    pub attacked_accuracy: f64,
    pub total_faults: usize,
    pub spent_faults: usize,
    /// Rows are true labels, columns attacked predictions (completed trials).
    pub confusion: Vec<Vec<u64>>,
    pub targeted: Option<TargetedStats>,
    #[serde(skip)]
    pub records: Vec<TrialResult>,
}

impl CampaignReport {
    pub fn from_records(records: Vec<TrialResult>, classes: usize, mode: AttackMode) -> Self {
        let mut confusion = vec![vec![0u64; classes]; classes];
        let (mut completed, mut crashed, mut no_response) = (0, 0, 0);
        let (mut base_ok, mut att_ok, mut total_faults, mut spent) = (0usize, 0usize, 0, 0);
        let mut targeted = match mode {
            AttackMode::Targeted { target } => Some(TargetedStats {
                target,
                eligible: 0,
                successes: 0,
            }),
            AttackMode::NonTargeted => None,
        };
        for r in &records {
            total_faults += r.fault_count();
            spent += r.spent_faults;
            match r.status {
                TrialStatus::Completed { predicted } => {
                    completed += 1;
                    base_ok += (r.baseline_class == r.true_label) as usize;
                    att_ok += (predicted == r.true_label) as usize;
                    confusion[r.true_label][predicted] += 1;
                    if let Some(t) = targeted.as_mut() {
                        if r.baseline_class == r.true_label && r.true_label != t.target {
                            t.eligible += 1;
                            t.successes += (predicted == t.target) as usize;
                        }
                    }
                }
                TrialStatus::DeviceCrash => crashed += 1,
                TrialStatus::DeviceNoResponse => no_response += 1,
            }
        }
        let pct = |k: usize| if completed == 0 { 0.0 } else { 100.0 * k as f64 / completed as f64 };
        Self {
            trials: records.len(),
            completed,
            crashed,
            no_response,
            baseline_accuracy: pct(base_ok),
            attacked_accuracy: pct(att_ok),
            total_faults,
            spent_faults: spent,
            confusion,
            targeted,
            records,
        }
    }

    /// Baseline minus attacked accuracy over completed trials, in points.
    pub fn degradation(&self) -> f64 {
        self.baseline_accuracy - self.attacked_accuracy
    }

    /// Degradation weighted by the completion rate; a crashed trial counts as
    /// a failed attack.
    pub fn effective_degradation(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.degradation() * self.completed as f64 / self.trials as f64
        }
    }

    pub fn crash_rate(&self) -> f64 {
        self.rate(self.crashed)
    }

    pub fn no_response_rate(&self) -> f64 {
        self.rate(self.no_response)
    }

    fn rate(&self, k: usize) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            k as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignSpec {
    pub mode: AttackMode,
    pub trials: usize,
    pub seed: u64,
    /// Added to every planned glitch time.
    pub t_w_shift: f64,
}

/// Runs `spec.trials` trials; trial `i` attacks input `i mod |dataset|`.
/// Inputs are processed in parallel and records returned in trial order.
pub fn run_campaign_with_targets(
    model: &Model,
    dataset: &[(Tensor, usize)],
    targets: &TargetPlan,
    mechanism: &Mechanism,
    spec: &CampaignSpec,
) -> Result<CampaignReport, SimError> {
    if spec.trials == 0 {
        return Err(SimError::NonPositive("trials"));
    }
    if dataset.is_empty() {
        return Err(SimError::Empty("dataset"));
    }
    if let TargetPlan::PerInput(v) = targets {
        if v.len() < dataset.len().min(spec.trials) {
            return Err(SimError::Invalid(format!(
                "{} per-input target sets for {} inputs",
                v.len(),
                dataset.len().min(spec.trials)
            )));
        }
    }
    let runner = Runner::new(model, mechanism, spec.mode, spec.seed)?;
    let shared_plan = match targets {
        TargetPlan::Shared(t) => Some(runner.plan(t, spec.t_w_shift)?),
        TargetPlan::PerInput(_) => None,
    };
    let used = dataset.len().min(spec.trials);
    let per_input: Vec<Vec<TrialResult>> = (0..used)
        .into_par_iter()
        .map(|input| {
            let (x, label) = &dataset[input];
            model.check_label(*label)?;
            let set = targets.get(input);
            let own_plan;
            let plan = match &shared_plan {
                Some(p) => p,
                None => {
                    own_plan = runner.plan(set, spec.t_w_shift)?;
                    &own_plan
                }
            };
            let mut prop = Propagator::new(model, x)?;
            (input..spec.trials)
                .step_by(dataset.len())
                .map(|trial| runner.trial(&mut prop, trial, input, *label, set, plan))
                .collect()
        })
        .collect::<Result<_, SimError>>()?;
    let mut records: Vec<TrialResult> = per_input.into_iter().flatten().collect();
    records.sort_by_key(|r| r.trial);
    Ok(CampaignReport::from_records(records, model.class_count(), spec.mode))
}

/// How targets are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection<'a> {
    /// Per-input sensitivity.
    InputDependent,
    /// Sensitivity accumulated over a sample.
    InputIndependent(&'a [(Tensor, usize)]),
    /// Uniformly random distinct elements, for comparison.
    RandomElements { seed: u64 },
    /// No targets; the random-fault baseline.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig<'a> {
    pub n: usize,
    pub scheme: TargetScheme,
    pub selection: Selection<'a>,
}

/// Chooses targets for the first `min(trials, |dataset|)` inputs.
pub fn select_targets(
    model: &Model,
    dataset: &[(Tensor, usize)],
    trials: usize,
    mode: AttackMode,
    search: &SearchConfig,
) -> Result<TargetPlan, SimError> {
    if search.n == 0 && search.selection != Selection::None {
        return Err(SimError::NonPositive("N"));
    }
    let used = dataset.len().min(trials);
    match &search.selection {
        Selection::InputDependent => {
            let mut plans = input_dependent_plans(model, &dataset[..used], &[mode], &[search.scheme], search.n)?;
            Ok(plans.remove(0).remove(0))
        }
        Selection::InputIndependent(sample) => {
            let targeted = match mode {
                AttackMode::Targeted { target } => Some(target),
                AttackMode::NonTargeted => None,
            };
            let table: SensitivityTable = accumulate_sensitivity(model, sample, search.scheme, targeted)?;
            Ok(TargetPlan::Shared(get_top_set(&table, search.n)?))
        }
        Selection::RandomElements { seed } => {
            let sets = (0..used)
                .map(|i| random_target_set(model, search.n, &mut crate::derive_rng(*seed, &[i as u64])))
                .collect();
            Ok(TargetPlan::PerInput(sets))
        }
        Selection::None => Ok(TargetPlan::Shared(TargetSet::empty(search.n.max(1)))),
    }
}

/// Per-input top-`n` sets for several attack modes and schemes at once, as
/// `plans[mode][scheme]`. Each input is swept once for all of them.
pub fn input_dependent_plans(
    model: &Model,
    dataset: &[(Tensor, usize)],
    modes: &[AttackMode],
    schemes: &[TargetScheme],
    n: usize,
) -> Result<Vec<Vec<TargetPlan>>, SimError> {
    if n == 0 {
        return Err(SimError::NonPositive("N"));
    }
    let per_input: Vec<Vec<Vec<TargetSet>>> = dataset
        .par_iter()
        .map(|(x, label)| {
            let objectives: Vec<Objective> = modes.iter().map(|m| m.objective(*label)).collect();
            let grads = sweep_bit_gradients(model, x, &objectives)?;
            grads
                .iter()
                .map(|g| {
                    schemes
                        .iter()
                        .map(|&s| get_top_set(&SensitivityTable::from_gradients(model, g, s), n))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, SimError>>()
        })
        .collect::<Result<_, SimError>>()?;
    let mut plans: Vec<Vec<Vec<TargetSet>>> = vec![vec![Vec::with_capacity(dataset.len()); schemes.len()]; modes.len()];
    for input in per_input {
        for (m, by_scheme) in input.into_iter().enumerate() {
            for (s, set) in by_scheme.into_iter().enumerate() {
                plans[m][s].push(set);
            }
        }
    }
    Ok(plans
        .into_iter()
        .map(|by_scheme| by_scheme.into_iter().map(TargetPlan::PerInput).collect())
        .collect())
}

/// Full campaign: target selection followed by the trials.
pub fn run_campaign(
    model: &Model,
    dataset: &[(Tensor, usize)],
    search: &SearchConfig,
    mechanism: &Mechanism,
    spec: &CampaignSpec,
) -> Result<CampaignReport, SimError> {
    let targets = select_targets(model, dataset, spec.trials, spec.mode, search)?;
    run_campaign_with_targets(model, dataset, &targets, mechanism, spec)
}

/// `n` distinct elements drawn uniformly, as element targets.
pub fn random_target_set<R: Rng + ?Sized>(model: &Model, n: usize, rng: &mut R) -> TargetSet {
    let count = n.min(model.element_count());
    let mut picks = index::sample(rng, model.element_count(), count).into_vec();
    picks.sort_unstable();
    TargetSet {
        targets: picks
            .into_iter()
            .map(|g| ScoredTarget {
                target: CandidateTarget::element(model.addr_of(g)),
                score: 0.0,
            })
            .collect(),
        limit: n,
    }
}
