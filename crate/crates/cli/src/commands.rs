use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dvfault_core::attack::{
    run_campaign, select_targets, AttackMode, CampaignReport, CampaignSpec, Mechanism, RandomFaultSpace, SearchConfig,
    Selection, TargetPlan,
};
use dvfault_core::device::{calibrate_sweep, grid, DeviceProfile, FaultParams};
use dvfault_core::engine::Model;
use dvfault_core::genetic::{initial_population, refine_parameters, FitnessContext, GaConfig, GeneBounds};
use dvfault_core::io::{
    calibration_csv, confusion_csv, ga_trace_csv, load_idx, load_model, parse_profile, read_trials_jsonl,
    sensitivity_csv, summary_csv, trials_jsonl, CampaignConfig, Dataset, Delivery, Provenance, SearchMode,
};
use dvfault_core::sensitivity::{accumulate_sensitivity, evaluate_sensitivity, get_top_set, Objective, TargetScheme};

use crate::{CalibrateArgs, CampaignArgs, ReportArgs, SensitivityArgs};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn model(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    load_idx(images, labels).with_context(|| format!("loading dataset {}", images.display()))
}

pub fn sensitivity(mut a: SensitivityArgs) -> Result<()> {
    // The output path is not part of the run's identity.
    let out = std::mem::take(&mut a.out);
    let scheme: TargetScheme = a.granularity.parse()?;
    let model = model(&a.model)?;
    let data = dataset(&a.images, &a.labels)?;
    let mut table = match a.sample {
        Some(n) => {
            let sample = data.subsample(n, a.seed);
            accumulate_sensitivity(&model, &sample.samples, scheme, a.target_class)?
        }
        None => {
            let i = a.index.unwrap_or(0);
            let Some((x, label)) = data.samples.get(i) else {
                bail!("input index {i} is out of range for {} inputs", data.len());
            };
            let objective = match a.target_class {
                Some(target) => Objective::Targeted { target },
                None => Objective::Untargeted { label: *label },
            };
            evaluate_sensitivity(&model, x, objective, scheme)?
        }
    };
    if let Some(n) = a.top {
        let top = get_top_set(&table, n)?;
        let keep: Vec<_> = top.iter().copied().collect();
        table.entries.retain(|e| keep.contains(&e.target));
        table.entries.sort_by_key(|e| keep.iter().position(|t| *t == e.target));
    }
    let prov = Provenance::new(a.seed, format!("{a:?}").as_bytes());
    write(&out, &sensitivity_csv(&prov, &table))
}

/// A parsed config plus everything it points at.
struct Campaign {
    cfg: CampaignConfig,
    /// Config text followed by any command-line overrides; hashed into the
    /// provenance line.
    identity: Vec<u8>,
    model: Model,
    test: Dataset,
    profile: DeviceProfile,
}

impl Campaign {
    fn load(a: &CampaignArgs) -> Result<Self> {
        let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
        let base = a.config.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut cfg = CampaignConfig::parse(&text, &base).with_context(|| format!("in {}", a.config.display()))?;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        if let Some(t) = a.target_class {
            cfg.target_class = Some(t);
        }
        if let Some(t) = a.trials {
            cfg.trials = t;
        }
        let mut identity = text.into_bytes();
        identity.extend(format!("\n#overrides seed={:?} target_class={:?} trials={:?}\n", a.seed, a.target_class, a.trials).bytes());
        let model = model(&cfg.model)?;
        let test = dataset(&cfg.test_images, &cfg.test_labels)?.head(cfg.inputs);
        let profile_text = fs::read_to_string(&cfg.profile).with_context(|| format!("reading {}", cfg.profile.display()))?;
        let profile = parse_profile(&profile_text).with_context(|| format!("in {}", cfg.profile.display()))?;
        Ok(Self {
            cfg,
            identity,
            model,
            test,
            profile,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(self.cfg.seed, &self.identity)
    }

    fn mode(&self) -> AttackMode {
        match self.cfg.target_class {
            Some(target) => AttackMode::Targeted { target },
            None => AttackMode::NonTargeted,
        }
    }

    /// Training inputs the independent search accumulates over.
    fn sample(&self) -> Result<Dataset> {
        let (Some(images), Some(labels)) = (&self.cfg.train_images, &self.cfg.train_labels) else {
            bail!("independent search needs train_images and train_labels in the config");
        };
        Ok(dataset(images, labels)?.subsample(self.cfg.sample_size, self.cfg.sample_seed))
    }

    fn write_campaign(&self, out: &Path, report: &CampaignReport) -> Result<()> {
        out_dir(out)?;
        let prov = self.provenance();
        write(&out.join("trials.jsonl"), &trials_jsonl(&prov, &report.records))?;
        write(&out.join("summary.csv"), &summary_csv(&prov, report))?;
        write(&out.join("confusion.csv"), &confusion_csv(&prov, &report.confusion))?;
        println!(
            "trials {} completed {} baseline {:.1}% attacked {:.1}% degradation {:.1} points",
            report.trials,
            report.completed,
            report.baseline_accuracy,
            report.attacked_accuracy,
            report.degradation()
        );
        Ok(())
    }

    fn spec(&self) -> CampaignSpec {
        CampaignSpec {
            mode: self.mode(),
            trials: self.cfg.trials,
            seed: self.cfg.seed,
            t_w_shift: 0.0,
        }
    }
}

pub fn attack(a: CampaignArgs) -> Result<()> {
    let c = Campaign::load(&a)?;
    let sample;
    let selection = match c.cfg.search {
        SearchMode::Dependent => Selection::InputDependent,
        SearchMode::Independent => {
            sample = c.sample()?;
            Selection::InputIndependent(&sample.samples)
        }
        SearchMode::Random => Selection::RandomElements { seed: c.cfg.seed },
    };
    let search = SearchConfig {
        n: c.cfg.n,
        scheme: c.cfg.scheme,
        selection,
    };
    let mechanism = match c.cfg.delivery {
        Delivery::Precise => Mechanism::Precise,
        Delivery::Device => Mechanism::Device {
            profile: c.profile.clone(),
            params: c.cfg.params,
        },
    };
    let report = run_campaign(&c.model, &c.test.samples, &search, &mechanism, &c.spec())?;
    c.write_campaign(&a.out, &report)
}

pub fn baseline(a: CampaignArgs) -> Result<()> {
    if a.target_class.is_some() {
        bail!("the random baseline is untargeted; drop --target-class");
    }
    let c = Campaign::load(&a)?;
    let search = SearchConfig {
        n: c.cfg.n,
        scheme: c.cfg.scheme,
        selection: Selection::None,
    };
    let mechanism = Mechanism::Random {
        profile: c.profile.clone(),
        base: c.cfg.params,
        space: RandomFaultSpace {
            offset_mhz: c.cfg.random_offset,
            v_l_mv: c.cfg.random_v,
            t_d_ms: c.cfg.random_td,
            glitches_per_trial: c.cfg.random_glitches,
        },
    };
    let spec = CampaignSpec {
        mode: AttackMode::NonTargeted,
        ..c.spec()
    };
    let report = run_campaign(&c.model, &c.test.samples, &search, &mechanism, &spec)?;
    c.write_campaign(&a.out, &report)
}

pub fn evolve(a: CampaignArgs) -> Result<()> {
    if a.target_class.is_some() {
        bail!("the genetic search is untargeted; drop --target-class");
    }
    let c = Campaign::load(&a)?;
    let sample = c.sample()?;
    let targets = match select_targets(
        &c.model,
        &c.test.samples,
        c.cfg.trials,
        AttackMode::NonTargeted,
        &SearchConfig {
            n: c.cfg.n,
            scheme: c.cfg.scheme,
            selection: Selection::InputIndependent(&sample.samples),
        },
    )? {
        TargetPlan::Shared(t) => t,
        TargetPlan::PerInput(_) => unreachable!("independent search yields one shared set"),
    };
    let ctx = FitnessContext {
        model: &c.model,
        dataset: &c.test.samples,
        targets: &targets,
        profile: &c.profile,
        base: c.cfg.params,
        trials: c.cfg.ga_fitness_trials,
        eval_seed: c.cfg.seed,
    };
    let r = c.cfg.ga_ranges;
    let bounds = GeneBounds {
        lo: [r[0].0, r[1].0, r[2].0, r[3].0],
        hi: [r[0].1, r[1].1, r[2].1, r[3].1],
    };
    let mut ga = GaConfig::new(bounds);
    ga.population = c.cfg.ga_population;
    ga.generations = c.cfg.ga_generations;
    ga.mutation_probability = c.cfg.ga_mutation_probability;
    ga.max_selections = c.cfg.ga_max_selections;
    ga.target_fitness = c.cfg.ga_target_fitness;
    let p = c.cfg.params;
    let center = bounds.clamp(ctx.nominal_seed(p.f_h, p.v_l, p.t_d)?);
    let mut rng = dvfault_core::derive_rng(c.cfg.seed, &[0]);
    let initial = initial_population(center, ga.population, c.cfg.ga_spread, &bounds, &mut rng);
    let outcome = refine_parameters(initial, |s| ctx.evaluate(s), &ga, c.cfg.seed)?;

    out_dir(&a.out)?;
    let prov = c.provenance();
    write(&a.out.join("ga_trace.csv"), &ga_trace_csv(&prov, &outcome.trace))?;
    let b = outcome.best;
    let best = format!(
        "{}f_h = {}\nv_l = {}\nt_w = {}\nt_d = {}\n# fitness = {}\n# evaluations = {}\n",
        prov.csv_line(),
        b.f_h,
        b.v_l,
        b.t_w,
        b.t_d,
        outcome.best_fitness,
        outcome.evaluations
    );
    write(&a.out.join("best.conf"), &best)?;
    println!(
        "best F_h {} V_l {} T_W {} T_d {} fitness {:.2} after {} generations",
        b.f_h,
        b.v_l,
        b.t_w,
        b.t_d,
        outcome.best_fitness,
        outcome.trace.len()
    );
    Ok(())
}

/// Parses `START..END:STEP`.
fn parse_grid(spec: &str, name: &str) -> Result<Vec<f64>> {
    let parsed = spec.split_once(':').and_then(|(range, step)| {
        let (a, b) = range.split_once("..")?;
        Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?, step.trim().parse::<f64>().ok()?))
    });
    let Some((start, end, step)) = parsed else {
        bail!("{name}: expected START..END:STEP, got {spec:?}");
    };
    let g = grid(start, end, step);
    if g.is_empty() {
        bail!("{name}: {spec:?} is empty");
    }
    Ok(g)
}

pub fn calibrate(mut a: CalibrateArgs) -> Result<()> {
    let out = std::mem::take(&mut a.out);
    let text = fs::read_to_string(&a.profile).with_context(|| format!("reading {}", a.profile.display()))?;
    let profile = parse_profile(&text).with_context(|| format!("in {}", a.profile.display()))?;
    let v = parse_grid(&a.v_grid, "--v-grid")?;
    let offsets = parse_grid(&a.offset_grid, "--offset-grid")?;
    let base = FaultParams {
        f_c: 3000.0,
        v_c: 1100.0,
        f_g: a.f_g,
        v_g: a.v_g,
        f_h: a.f_g,
        v_l: a.v_g,
        t_w: 0.0,
        t_d: a.t_d,
    };
    let cells = calibrate_sweep(&profile, &base, &v, &offsets, a.t_d, a.trials, a.seed)?;
    let mut identity = text.into_bytes();
    identity.extend(format!("{a:?}").bytes());
    write(&out, &calibration_csv(&Provenance::new(a.seed, &identity), &cells))?;
    if let Some(best) = cells.iter().max_by(|x, y| x.rate_single_bit.total_cmp(&y.rate_single_bit)) {
        println!(
            "best single-bit cell: V_l {} mV, offset +{} MHz ({:.3})",
            best.v_l, best.offset, best.rate_single_bit
        );
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.trials).with_context(|| format!("reading {}", a.trials.display()))?;
    let (prov, records) = read_trials_jsonl(&text).with_context(|| format!("in {}", a.trials.display()))?;
    let Some(first) = records.first() else {
        bail!("{} has no trial records", a.trials.display());
    };
    if let Some(bad) = records.iter().find(|r| r.true_label >= a.classes || r.final_class().is_some_and(|c| c >= a.classes)) {
        bail!("trial {} has a class outside 0..{}", bad.trial, a.classes);
    }
    let mode = first.mode;
    let report = CampaignReport::from_records(records, a.classes, mode);
    let prov = prov.unwrap_or_else(|| Provenance::new(0, text.as_bytes()));
    out_dir(&a.out)?;
    write(&a.out.join("summary.csv"), &summary_csv(&prov, &report))?;
    write(&a.out.join("confusion.csv"), &confusion_csv(&prov, &report.confusion))?;
    Ok(())
}
