//! Genetic refinement of glitch parameters `(F_h, V_l, T_W, T_d)`.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{plan_injections, run_campaign_with_targets, AttackMode, CampaignReport, CampaignSpec, Mechanism, TargetPlan};
use crate::device::{build_schedule, DeviceProfile, FaultParams};
use crate::engine::Model;
use crate::error::SimError;
use crate::sensitivity::TargetSet;
use crate::tensor::Tensor;

pub const GENES: usize = 4;
/// Mutation step per gene: 1 MHz, 10 mV, 1 ms, 1 ms.
pub const MUTATION_STEPS: [f64; GENES] = [1.0, 10.0, 1.0, 1.0];

/// One candidate parameter set. `t_w` is the absolute wait before the first
/// planned glitch; later glitches keep their planned spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub f_h: f64,
    pub v_l: f64,
    pub t_w: f64,
    pub t_d: f64,
}

impl Seed {
    pub fn new(f_h: f64, v_l: f64, t_w: f64, t_d: f64) -> Self {
        Self { f_h, v_l, t_w, t_d }
    }

    pub fn genes(&self) -> [f64; GENES] {
        [self.f_h, self.v_l, self.t_w, self.t_d]
    }

    pub fn from_genes(g: [f64; GENES]) -> Self {
        Self::new(g[0], g[1], g[2], g[3])
    }

    fn key(&self) -> [u64; GENES] {
        self.genes().map(f64::to_bits)
    }
}

/// Inclusive legal range of each gene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneBounds {
    pub lo: [f64; GENES],
    pub hi: [f64; GENES],
}

impl GeneBounds {
    pub fn validate(&self) -> Result<(), SimError> {
        for i in 0..GENES {
            if !(self.lo[i].is_finite() && self.hi[i].is_finite() && self.lo[i] <= self.hi[i]) {
                return Err(SimError::Invalid(format!("gene {i} range {}..={} is empty", self.lo[i], self.hi[i])));
            }
        }
        if self.lo[0] <= 0.0 || self.lo[1] <= 0.0 || self.lo[2] < 0.0 || self.lo[3] <= 0.0 {
            return Err(SimError::Invalid("gene ranges must be positive (T_W non-negative)".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, s: Seed) -> Seed {
        let mut g = s.genes();
        for (i, v) in g.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
        Seed::from_genes(g)
    }

    pub fn contains(&self, s: &Seed) -> bool {
        s.genes().iter().enumerate().all(|(i, v)| (self.lo[i]..=self.hi[i]).contains(v))
    }

    fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Seed {
        let mut g = [0.0; GENES];
        for (i, v) in g.iter_mut().enumerate() {
            *v = if self.hi[i] > self.lo[i] {
                rng.random_range(self.lo[i]..=self.hi[i])
            } else {
                self.lo[i]
            };
        }
        Seed::from_genes(g)
    }
}

/// Swaps genes in `range` between `a` and `b`.
pub fn crossover_range(a: Seed, b: Seed, range: Range<usize>) -> (Seed, Seed) {
    let (mut x, mut y) = (a.genes(), b.genes());
    for i in range {
        std::mem::swap(&mut x[i], &mut y[i]);
    }
    (Seed::from_genes(x), Seed::from_genes(y))
}

/// Swaps a uniformly chosen contiguous (possibly empty) gene range.
pub fn crossover<R: Rng + ?Sized>(a: Seed, b: Seed, bounds: &GeneBounds, rng: &mut R) -> (Seed, Seed) {
    let i = rng.random_range(0..=GENES);
    let j = rng.random_range(0..=GENES);
    let (x, y) = crossover_range(a, b, i.min(j)..i.max(j));
    (bounds.clamp(x), bounds.clamp(y))
}

/// Applies per-gene moves: `Some(true)` steps up, `Some(false)` down.
pub fn apply_mutation(s: Seed, moves: [Option<bool>; GENES], bounds: &GeneBounds) -> Seed {
    let mut g = s.genes();
    for i in 0..GENES {
        if let Some(up) = moves[i] {
            g[i] += if up { MUTATION_STEPS[i] } else { -MUTATION_STEPS[i] };
        }
    }
    bounds.clamp(Seed::from_genes(g))
}

/// Each gene moves one step with probability `p`, direction uniform.
pub fn mutate<R: Rng + ?Sized>(s: Seed, p: f64, bounds: &GeneBounds, rng: &mut R) -> Seed {
    let mut moves = [None; GENES];
    for m in &mut moves {
        if rng.random_bool(p) {
            *m = Some(rng.random_bool(0.5));
        }
    }
    apply_mutation(s, moves, bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub tournament: usize,
    pub mutation_probability: f64,
    /// A seed selected more than this many times loses its tournaments.
    pub max_selections: u32,
    pub generations: usize,
    /// Stop once the best fitness reaches this value.
    pub target_fitness: Option<f64>,
    pub bounds: GeneBounds,
}

impl GaConfig {
    pub fn new(bounds: GeneBounds) -> Self {
        Self {
            population: 32,
            tournament: 2,
            mutation_probability: 0.005,
            max_selections: 20,
            generations: 200,
            target_fitness: None,
            bounds,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.generations == 0 {
            return Err(SimError::NonPositive("generation budget"));
        }
        if self.tournament < 2 {
            return Err(SimError::Invalid("tournament size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            return Err(SimError::Invalid("mutation probability must lie in [0, 1]".into()));
        }
        self.bounds.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best fitness seen so far.
    pub best_fitness: f64,
    /// Mean fitness of this generation's population.
    pub mean_fitness: f64,
    pub best: Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    pub best: Seed,
    pub best_fitness: f64,
    pub trace: Vec<GenerationStats>,
    /// Distinct seeds evaluated.
    pub evaluations: usize,
    /// Largest selection count observed at any selection decision.
    pub max_selection_count_seen: u32,
}

struct Selector<'a> {
    counts: HashMap<[u64; GENES], u32>,
    config: &'a GaConfig,
    max_seen: u32,
}

impl Selector<'_> {
    fn count(&self, s: &Seed) -> u32 {
        self.counts.get(&s.key()).copied().unwrap_or(0)
    }

    fn select<R: Rng + ?Sized>(&mut self, pop: &[Seed], fit: &[f64], rng: &mut R) -> Seed {
        let picks = rand::seq::index::sample(rng, pop.len(), self.config.tournament.min(pop.len()));
        let mut contenders: Vec<usize> = picks.into_vec();
        contenders.sort_unstable();
        // Best first; ties keep the lower index.
        contenders.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]));
        for &i in &contenders {
            self.max_seen = self.max_seen.max(self.count(&pop[i]));
        }
        let limit = self.config.max_selections;
        let chosen = match contenders.iter().find(|&&i| self.count(&pop[i]) <= limit) {
            Some(&i) => pop[i],
            None => {
                let eligible: Vec<usize> = (0..pop.len()).filter(|&i| self.count(&pop[i]) <= limit).collect();
                if eligible.is_empty() {
                    self.config.bounds.random(rng)
                } else {
                    pop[eligible[rng.random_range(0..eligible.len())]]
                }
            }
        };
        *self.counts.entry(chosen.key()).or_insert(0) += 1;
        chosen
    }
}

/// Evolves `initial` for at most `config.generations` generations.
///
/// Each generation keeps its best seed unchanged and fills the rest with
/// tournament-selected parents after crossover and mutation. A seed already
/// selected more than `max_selections` times is passed over in favour of the
/// next tournament contender. Fitness values are cached by genes.
pub fn refine_parameters<F>(initial: Vec<Seed>, fitness: F, config: &GaConfig, seed: u64) -> Result<GaOutcome, SimError>
where
    F: Fn(&Seed) -> Result<f64, SimError> + Sync,
{
    config.validate()?;
    if initial.is_empty() {
        return Err(SimError::Empty("initial population"));
    }
    let mut pop: Vec<Seed> = initial.into_iter().map(|s| config.bounds.clamp(s)).collect();
    let size = pop.len();
    let mut cache: HashMap<[u64; GENES], f64> = HashMap::new();
    let mut selector = Selector {
        counts: HashMap::new(),
        config,
        max_seen: 0,
    };
    let mut best: Option<(Seed, f64)> = None;
    let mut trace = Vec::new();

    for generation in 0..config.generations {
        let mut fresh: Vec<Seed> = pop.iter().filter(|s| !cache.contains_key(&s.key())).copied().collect();
        fresh.sort_by_key(|s| s.key());
        fresh.dedup_by_key(|s| s.key());
        let scores: Vec<f64> = fresh.par_iter().map(&fitness).collect::<Result<_, _>>()?;
        for (s, f) in fresh.iter().zip(scores) {
            cache.insert(s.key(), f);
        }
        let fit: Vec<f64> = pop.iter().map(|s| cache[&s.key()]).collect();

        let (elite_idx, &elite_fit) = fit
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, f)| match acc {
                Some((_, bf)) if bf >= f => acc,
                _ => Some((i, f)),
            })
            .expect("non-empty population");
        if best.is_none_or(|(_, bf)| elite_fit > bf) {
            best = Some((pop[elite_idx], elite_fit));
        }
        let (best_seed, best_fit) = best.expect("set above");
        trace.push(GenerationStats {
            generation,
            best_fitness: best_fit,
            mean_fitness: fit.iter().sum::<f64>() / size as f64,
            best: best_seed,
        });
        if config.target_fitness.is_some_and(|t| best_fit >= t) || generation + 1 == config.generations {
            break;
        }

        let mut rng = crate::derive_rng(seed, &[generation as u64]);
        let mut next = Vec::with_capacity(size);
        next.push(pop[elite_idx]);
        while next.len() < size {
            let a = selector.select(&pop, &fit, &mut rng);
            let b = selector.select(&pop, &fit, &mut rng);
            let (c, d) = crossover(a, b, &config.bounds, &mut rng);
            next.push(mutate(c, config.mutation_probability, &config.bounds, &mut rng));
            if next.len() < size {
                next.push(mutate(d, config.mutation_probability, &config.bounds, &mut rng));
            }
        }
        pop = next;
    }

    let (best, best_fitness) = best.expect("at least one generation");
    Ok(GaOutcome {
        best,
        best_fitness,
        trace,
        evaluations: cache.len(),
        max_selection_count_seen: selector.max_seen,
    })
}

/// `size` seeds around `center`, each gene perturbed uniformly by up to
/// `spread` in whole steps, clamped. The first seed is `center` itself.
pub fn initial_population<R: Rng + ?Sized>(center: Seed, size: usize, spread: [f64; GENES], bounds: &GeneBounds, rng: &mut R) -> Vec<Seed> {
    let mut pop = Vec::with_capacity(size);
    if size > 0 {
        pop.push(bounds.clamp(center));
    }
    while pop.len() < size {
        let mut g = center.genes();
        for i in 0..GENES {
            let steps = (spread[i] / MUTATION_STEPS[i]).floor() as i64;
            if steps > 0 {
                g[i] += rng.random_range(-steps..=steps) as f64 * MUTATION_STEPS[i];
            }
        }
        pop.push(bounds.clamp(Seed::from_genes(g)));
    }
    pop
}

/// Everything a fitness evaluation needs besides the seed.
pub struct FitnessContext<'a> {
    pub model: &'a Model,
    pub dataset: &'a [(Tensor, usize)],
    pub targets: &'a TargetSet,
    pub profile: &'a DeviceProfile,
    pub base: FaultParams,
    pub trials: usize,
    pub eval_seed: u64,
}

impl FitnessContext<'_> {
    /// First planned glitch time for a hold of `t_d`.
    pub fn planned_start(&self, t_d: f64) -> Result<Option<f64>, SimError> {
        let schedule = build_schedule(self.model, self.profile, self.base.f_g)?;
        let plan = plan_injections(self.model, &schedule, self.targets, &FaultParams { t_d, ..self.base })?;
        Ok(plan.first().map(|a| a.t_w))
    }

    /// The seed with its gene-level timing converted back into a wait.
    pub fn nominal_seed(&self, f_h: f64, v_l: f64, t_d: f64) -> Result<Seed, SimError> {
        Ok(Seed::new(f_h, v_l, self.planned_start(t_d)?.unwrap_or(0.0), t_d))
    }

    /// Campaign with the seed substituted into the base parameters.
    pub fn campaign(&self, s: &Seed, trials: usize, seed: u64) -> Result<CampaignReport, SimError> {
        let params = FaultParams {
            f_h: s.f_h,
            v_l: s.v_l,
            t_d: s.t_d,
            ..self.base
        };
        let shift = self.planned_start(s.t_d)?.map_or(0.0, |start| s.t_w - start);
        run_campaign_with_targets(
            self.model,
            self.dataset,
            &TargetPlan::Shared(self.targets.clone()),
            &Mechanism::Device {
                profile: self.profile.clone(),
                params,
            },
            &CampaignSpec {
                mode: AttackMode::NonTargeted,
                trials,
                seed,
                t_w_shift: shift,
            },
        )
    }

    /// Completion-weighted accuracy degradation in points.
    pub fn evaluate(&self, s: &Seed) -> Result<f64, SimError> {
        Ok(self.campaign(s, self.trials, self.eval_seed)?.effective_degradation())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> GeneBounds {
        GeneBounds {
            lo: [1000.0, 600.0, 0.0, 0.5],
            hi: [2000.0, 800.0, 100.0, 10.0],
        }
    }

    #[test]
    fn crossover_examples() {
        let a = Seed::new(100.0, 700.0, 5.0, 2.0);
        let b = Seed::new(200.0, 800.0, 7.0, 3.0);
        assert_eq!(crossover_range(a, b, 0..4), (b, a));
        assert_eq!(crossover_range(a, b, 2..2), (a, b));
        assert_eq!(
            crossover_range(a, b, 1..2),
            (Seed::new(100.0, 800.0, 5.0, 2.0), Seed::new(200.0, 700.0, 7.0, 3.0))
        );
    }

    #[test]
    fn mutation_examples() {
        let b = bounds();
        let s = Seed::new(1500.0, 700.0, 10.0, 2.0);
        assert_eq!(apply_mutation(s, [None; 4], &b), s);
        assert_eq!(apply_mutation(s, [None, Some(true), None, None], &b).v_l, 710.0);
        let moved = apply_mutation(s, [Some(false), None, Some(true), Some(false)], &b);
        assert_eq!(moved, Seed::new(1499.0, 700.0, 11.0, 1.0));
        let edge = Seed::new(2000.0, 800.0, 100.0, 0.5);
        assert_eq!(apply_mutation(edge, [Some(true), Some(true), Some(true), Some(false)], &b), edge);
        let mut rng = crate::derive_rng(0, &[]);
        assert_eq!(mutate(s, 0.0, &b, &mut rng), s);
    }

    #[test]
    fn empirical_mutation_rate() {
        let b = bounds();
        let s = Seed::new(1500.0, 700.0, 50.0, 5.0);
        let mut rng = crate::derive_rng(42, &[]);
        let draws = 250_000;
        let mut moved = 0u64;
        for _ in 0..draws {
            let m = mutate(s, 0.005, &b, &mut rng);
            moved += s.genes().iter().zip(m.genes()).filter(|(x, y)| *x != y).count() as u64;
        }
        let n = (draws * GENES) as f64;
        let se = (0.005 * 0.995 / n).sqrt();
        assert!((moved as f64 / n - 0.005).abs() < 3.0 * se);
    }

    fn quadratic(s: &Seed) -> Result<f64, SimError> {
        Ok(100.0 - ((s.f_h - 1735.0) / 50.0).powi(2) - ((s.v_l - 710.0) / 20.0).powi(2) - (s.t_d - 2.0).powi(2))
    }

    #[test]
    fn budget_one_returns_best_initial() {
        let b = bounds();
        let init = vec![Seed::new(1600.0, 700.0, 5.0, 2.0), Seed::new(1730.0, 710.0, 5.0, 2.0)];
        let out = refine_parameters(init.clone(), quadratic, &GaConfig { generations: 1, ..GaConfig::new(b) }, 1).unwrap();
        assert_eq!(out.best, init[1]);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.evaluations, 2);
    }

    #[test]
    fn trace_is_monotone_and_genes_stay_legal() {
        let b = bounds();
        let mut rng = crate::derive_rng(3, &[]);
        let init = initial_population(Seed::new(1650.0, 740.0, 20.0, 4.0), 32, [80.0, 40.0, 5.0, 2.0], &b, &mut rng);
        let cfg = GaConfig {
            generations: 60,
            mutation_probability: 0.2,
            ..GaConfig::new(b)
        };
        let out = refine_parameters(init, |s| {
            assert!(b.contains(s));
            quadratic(s)
        }, &cfg, 9)
        .unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].best_fitness >= w[0].best_fitness));
        assert!(out.best_fitness > out.trace[0].best_fitness);
        assert!(out.max_selection_count_seen <= cfg.max_selections + 1);
    }

    #[test]
    fn stops_at_target_fitness() {
        let b = bounds();
        let init = vec![Seed::new(1735.0, 710.0, 5.0, 2.0); 4];
        let cfg = GaConfig {
            generations: 50,
            target_fitness: Some(99.0),
            ..GaConfig::new(b)
        };
        let out = refine_parameters(init, quadratic, &cfg, 0).unwrap();
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn rejects_bad_configuration() {
        let b = bounds();
        assert!(refine_parameters(vec![], quadratic, &GaConfig::new(b), 0).is_err());
        let zero = GaConfig { generations: 0, ..GaConfig::new(b) };
        assert!(refine_parameters(vec![Seed::new(1500.0, 700.0, 1.0, 1.0)], quadratic, &zero, 0).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let b = bounds();
        let mut rng = crate::derive_rng(5, &[]);
        let init = initial_population(Seed::new(1650.0, 740.0, 20.0, 4.0), 16, [80.0, 40.0, 5.0, 2.0], &b, &mut rng);
        let cfg = GaConfig { generations: 20, ..GaConfig::new(b) };
        let a = refine_parameters(init.clone(), quadratic, &cfg, 4).unwrap();
        let c = refine_parameters(init, quadratic, &cfg, 4).unwrap();
        assert_eq!(a, c);
    }
}
