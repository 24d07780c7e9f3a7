//! `oap`: command-line driver for data generation, training, attacks,
//! purification and experiments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use oap_core::attacks::{AttackMethod, AttackSpec, Defense, NoDefense, Norm, Surrogate, ThreatModel};
use oap_core::diffusion::{DiffusionDefense, DiffusionSchedule, ScoreFn};
use oap_core::dualpath::{ideal_oracle_purify, DualPathConfig, DualPathDefense, SinkhornConfig, TargetBank};
use oap_core::granularity::{granularity_experiment, reverse_with_taps, write_granularity_csv, Granularity};
use oap_core::harness::data::{gen_split, Dataset, DatasetKind};
use oap_core::harness::{bench_time_cost, evaluate, run_experiment, BenchPlan, ExperimentConfig};
use oap_core::models::{train_classifier, train_score_model, Classifier, ClassifierArch, Purifier, ScoreModel, TrainConfig};
use oap_core::numcore::{Checkpoint, TensorFile};
use oap_core::oap::{build_oap_dataset, train_baseline_purifier, train_noise_conditioned_purifier, OapConfig, OapDataset};
use oap_core::rng::derive_seed;

#[derive(Parser)]
#[command(name = "oap", version, about = "Adversarial purification testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural dataset split.
    GenData {
        #[arg(long, default_value = "shapes16")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    TrainClassifier {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "cnn-tiny")]
        arch: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss curve.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train a noise-prediction network on the inputs of a dataset.
    TrainScore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Largest diffusion time sampled during training.
        #[arg(long, default_value_t = 100)]
        t_max: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Opposite-adversarial-path data.
    Oap {
        #[command(subcommand)]
        cmd: OapCmd,
    },
    /// Train a purifier on (x_adv, x^K) pairs.
    TrainPurifier {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Train on inputs diffused to random times up to this depth.
        #[arg(long)]
        noise_tstar: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    Attack {
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Diffusion purification, optionally guided.
    Purify {
        #[arg(long, default_value = "diffpure")]
        mode: String,
        #[arg(long, default_value_t = 20)]
        tstar: usize,
        #[arg(long, default_value_t = 2.5e-3)]
        eta: f32,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        purifier: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Every intermediate reverse state.
        #[arg(long)]
        taps: Option<PathBuf>,
    },
    /// Dual-path purification against a target bank.
    Dualpath {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 20)]
        tstar: usize,
        #[arg(long, default_value_t = 2.5e-3)]
        eta: f32,
        /// Entropic blur of the transport solver.
        #[arg(long, default_value_t = 0.05)]
        sinkhorn_eps: f64,
        #[arg(long, default_value_t = 2)]
        paths: usize,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        purifier: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Diagnostic: pull the guided chain toward a chain started from
        /// these clean images instead of running the defense.
        #[arg(long)]
        ideal_oracle: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        pull: f32,
    },
    /// Robust accuracy under single-call and per-step gradients.
    Granularity {
        #[arg(long, value_delimiter = ',', default_value = "coarse,fine")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        eot: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        tstar: usize,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f32,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean and robust accuracy over seeds.
    Evaluate {
        #[command(flatten)]
        attack: AttackArgs,
        /// Report clean accuracy only.
        #[arg(long)]
        no_attack: bool,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Purification and attack wall-clock, with an EOT scaling table.
    Bench {
        #[command(flatten)]
        attack: AttackArgs,
        #[command(flatten)]
        defense: DefenseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        eots: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a JSON experiment config end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum OapCmd {
    /// Build (x_adv, x^K) training pairs.
    Gen {
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Step size of the opposite walk (defaults to --eps).
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f32,
        #[arg(long, default_value_t = 7)]
        attack_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One OAP-walked image per class, the dual-path target bank.
    Bank {
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f32,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Std of Gaussian noise added to training inputs.
    #[arg(long, default_value_t = 0.0)]
    noise_augment: f32,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            noise_augment: self.noise_augment,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value = "pgd")]
    method: String,
    #[arg(long, default_value = "linf")]
    norm: String,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f32,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    eot: usize,
    /// Backward rule through the purifier: identity, exact or coarse.
    #[arg(long, default_value = "identity")]
    surrogate: String,
    #[arg(long)]
    random_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackArgs {
    fn spec(&self) -> Result<AttackSpec> {
        let norm = match self.norm.as_str() {
            "linf" => Norm::Linf,
            "l2" => Norm::L2,
            other => bail!("unknown norm {other:?}"),
        };
        let surrogate = match self.surrogate.as_str() {
            "identity" => Surrogate::Identity,
            "exact" => Surrogate::Exact,
            "coarse" => Surrogate::Coarse,
            other => bail!("unknown surrogate {other:?}"),
        };
        let mut threat = ThreatModel::new(norm, self.eps, self.steps);
        threat.random_start = self.random_start;
        threat.validate()?;
        Ok(AttackSpec::new(AttackMethod::parse(&self.method)?, threat).with_eot(self.eot).with_surrogate(surrogate))
    }
}

/// Which defense sits in front of the classifier: a target bank selects
/// dual-path purification, a score model alone diffusion purification
/// (guided when a purifier is given), a purifier alone the purifier itself.
#[derive(Args)]
struct DefenseArgs {
    #[arg(long)]
    score: Option<PathBuf>,
    #[arg(long)]
    purifier: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    tstar: usize,
    #[arg(long, default_value_t = 2.5e-3)]
    eta: f32,
    #[arg(long, default_value_t = 2)]
    paths: usize,
}

impl DefenseArgs {
    fn build(&self) -> Result<Box<dyn Defense>> {
        let purifier = self.purifier.as_deref().map(load_purifier).transpose()?;
        let Some(score) = &self.score else {
            return Ok(match purifier {
                Some(p) => Box::new(p),
                None => Box::new(NoDefense),
            });
        };
        let score = ScoreFn::Network(load_score(score)?);
        let sched = DiffusionSchedule::standard();
        if let Some(bank) = &self.bank {
            let cfg = DualPathConfig { paths: self.paths, ..Default::default() };
            let guide = purifier.map(|p| (p, self.eta));
            return Ok(Box::new(DualPathDefense::new(sched, score, self.tstar, guide, load_bank(bank)?, cfg)?));
        }
        let mut d = DiffusionDefense::new(sched, score, self.tstar)?;
        if let Some(p) = purifier {
            d = d.with_guidance(p, self.eta)?;
        }
        Ok(Box::new(d))
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    let f = TensorFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::from_file(&f)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_classifier(path: &Path) -> Result<Classifier> {
    Ok(Classifier::from_checkpoint(&load_checkpoint(path)?)?)
}

fn load_score(path: &Path) -> Result<ScoreModel> {
    Ok(ScoreModel::from_checkpoint(&load_checkpoint(path)?)?)
}

fn load_purifier(path: &Path) -> Result<Purifier> {
    Ok(Purifier::from_checkpoint(&load_checkpoint(path)?)?)
}

fn load_bank(path: &Path) -> Result<TargetBank> {
    let d = load_data(path)?;
    Ok(TargetBank::new(d.inputs, d.labels)?)
}

fn write_curve(curve: &oap_core::models::TrainCurve, path: Option<&PathBuf>) -> Result<()> {
    if let Some(p) = path {
        curve.write_csv(p)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { kind, n, seed, split, out } => {
            let d = gen_split(DatasetKind::parse(&kind)?, n, seed, &split)?;
            d.to_file().save(&out)?;
            println!("{} {} items of {} -> {}", split, d.len(), kind, out.display());
        }
        Cmd::TrainClassifier { input, arch, train, out, curve } => {
            let data = load_data(&input)?;
            let (m, c) = train_classifier(&data, ClassifierArch::from_tag(&arch)?, &train.config())?;
            m.to_checkpoint().save(&out)?;
            write_curve(&c, curve.as_ref())?;
            println!("train accuracy {:.4}", m.accuracy(&data.inputs, &data.labels)?);
        }
        Cmd::TrainScore { input, width, t_max, train, out, curve } => {
            let data = load_data(&input)?;
            let (m, c) = train_score_model(&data.inputs, &DiffusionSchedule::standard(), width, t_max, &train.config())?;
            m.to_checkpoint().save(&out)?;
            write_curve(&c, curve.as_ref())?;
            println!("loss {:.4} -> {:.4}", c.head_mean(20), c.tail_mean(20));
        }
        Cmd::Oap { cmd: OapCmd::Gen { k, alpha, eps, attack_steps, seed, model, input, out } } => {
            let f = load_classifier(&model)?;
            let data = load_data(&input)?;
            let mut cfg = OapConfig::new(eps).with_k(k);
            cfg.alpha = alpha.unwrap_or(eps);
            cfg.inner_attack_steps = attack_steps;
            let ds = build_oap_dataset(&f, &data, &cfg, &ThreatModel::linf(eps, attack_steps), seed)?;
            ds.to_file()?.save(&out)?;
            println!("{} pairs with K={k} -> {}", ds.len(), out.display());
        }
        Cmd::Oap { cmd: OapCmd::Bank { eps, model, input, out } } => {
            let f = load_classifier(&model)?;
            let data = load_data(&input)?;
            let bank = TargetBank::build(&f, &data, &OapConfig::new(eps))?;
            Dataset::new(data.kind, bank.images().clone(), bank.labels().to_vec(), "bank", data.seed)?.to_file().save(&out)?;
            println!("{} bank images -> {}", bank.len(), out.display());
        }
        Cmd::TrainPurifier { input, width, noise_tstar, train, out, curve } => {
            let ds = OapDataset::from_file(&TensorFile::load(&input)?)?;
            let (p, c) = match noise_tstar {
                Some(t) => train_noise_conditioned_purifier(&ds, &DiffusionSchedule::standard(), t, width, &train.config())?,
                None => train_baseline_purifier(&ds, width, &train.config())?,
            };
            p.to_checkpoint().save(&out)?;
            write_curve(&c, curve.as_ref())?;
            println!("L1 {:.4} -> {:.4}", c.head_mean(20), c.tail_mean(20));
        }
        Cmd::Attack { attack, defense, input, model, out, report } => {
            let (f, data) = (load_classifier(&model)?, load_data(&input)?);
            let d = defense.build()?;
            let r = attack.spec()?.run(d.as_ref(), &f, &data.inputs, &data.labels, attack.seed)?;
            data.with_inputs(r.adv.clone())?.to_file().save(&out)?;
            if let Some(p) = report {
                r.write_csv(p)?;
            }
            println!("success rate {:.4} over {} images", r.success_rate(), r.len());
        }
        Cmd::Purify { mode, tstar, eta, score, purifier, seed, input, out, taps } => {
            let data = load_data(&input)?;
            let mut d = DiffusionDefense::new(DiffusionSchedule::standard(), ScoreFn::Network(load_score(&score)?), tstar)?;
            match (mode.as_str(), purifier) {
                ("diffpure", _) => {}
                ("oap-guided", Some(p)) => d = d.with_guidance(load_purifier(&p)?, eta)?,
                ("oap-guided", None) => bail!("oap-guided purification needs --purifier"),
                (other, _) => bail!("unknown purify mode {other:?}"),
            }
            let pure = d.purify(&data.inputs, seed)?;
            data.with_inputs(pure)?.to_file().save(&out)?;
            if let Some(p) = taps {
                let trace = reverse_with_taps(&d, &data.inputs, seed)?;
                let file = trace
                    .states
                    .into_iter()
                    .enumerate()
                    .fold(TensorFile::new(serde_json::json!({ "t_star": tstar, "seed": seed })), |f, (k, s)| {
                        f.with(&format!("step_{k:04}"), s)
                    });
                file.save(p)?;
            }
        }
        Cmd::Dualpath {
            bank,
            tstar,
            eta,
            sinkhorn_eps,
            paths,
            score,
            purifier,
            seed,
            input,
            out,
            trace,
            ideal_oracle,
            pull,
        } => {
            let data = load_data(&input)?;
            let cfg = DualPathConfig { paths, sinkhorn: SinkhornConfig { blur: sinkhorn_eps, ..Default::default() }, ..Default::default() };
            let guide = purifier.as_deref().map(load_purifier).transpose()?.map(|p| (p, eta));
            let score = ScoreFn::Network(load_score(&score)?);
            let d = DualPathDefense::new(DiffusionSchedule::standard(), score, tstar, guide, load_bank(&bank)?, cfg)?;
            if let Some(clean) = ideal_oracle {
                let clean = load_data(&clean)?;
                let pure = ideal_oracle_purify(&d, &data.inputs, &clean.inputs, pull, seed)?;
                data.with_inputs(pure)?.to_file().save(&out)?;
                return Ok(());
            }
            let mut items = Vec::with_capacity(data.len());
            let mut traces = Vec::with_capacity(data.len());
            for i in 0..data.len() {
                let (p, t) = d.purify_traced(&data.inputs.select(i), derive_seed(seed, i as u64))?;
                items.push(p);
                traces.push(t);
            }
            data.with_inputs(oap_core::numcore::Tensor::stack(&items)?)?.to_file().save(&out)?;
            if let Some(p) = trace {
                std::fs::write(p, serde_json::to_string_pretty(&traces)?)?;
            }
        }
        Cmd::Granularity { modes, eot, tstar, score, model, input, eps, steps, seeds, out } => {
            let modes = modes.iter().map(|m| Granularity::parse(m)).collect::<oap_core::Result<Vec<_>>>()?;
            let (f, data) = (load_classifier(&model)?, load_data(&input)?);
            let d = DiffusionDefense::new(DiffusionSchedule::standard(), ScoreFn::Network(load_score(&score)?), tstar)?;
            let rows = granularity_experiment(&d, &f, &data, &ThreatModel::linf(eps, steps), &modes, &eot, &seeds)?;
            write_granularity_csv(&rows, &out)?;
            for r in &rows {
                println!("{} eot={} seed={} robust {:.4}", r.mode.tag(), r.eot, r.seed, r.robust_accuracy);
            }
        }
        Cmd::Evaluate { attack, no_attack, defense, input, model, seeds, subset, out } => {
            let (f, data) = (load_classifier(&model)?, load_data(&input)?);
            let d = defense.build()?;
            let spec = if no_attack { None } else { Some(attack.spec()?) };
            let e = evaluate(d.as_ref(), &f, &data, spec.as_ref(), &seeds, subset)?;
            if let Some(p) = out {
                e.write_csv(p)?;
            }
            println!("{}: clean {} robust {}", e.defense, e.clean, e.robust);
        }
        Cmd::Bench { attack, defense, input, model, n, repeats, eots, out } => {
            let (f, data) = (load_classifier(&model)?, load_data(&input)?);
            let data = data.head(n);
            let d = defense.build()?;
            let paths = if defense.bank.is_some() { defense.paths } else { 1 };
            let plan = BenchPlan { repeats, eots, t_star: defense.tstar, paths, ..Default::default() };
            let r = bench_time_cost(d.as_ref(), &f, &attack.spec()?, &data.inputs, &data.labels, &plan)?;
            r.write_csv(&out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: purify {:.4}s/img, attack {:.4}s/img, ratio {:.1}, EOT scaling error {:.1}%",
                r.defense,
                r.purify_seconds,
                r.attack_seconds,
                r.ratio,
                100.0 * r.linear_scaling_error()
            );
        }
        Cmd::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_experiment(&cfg)?;
            if let Some(e) = &s.evaluation {
                println!("{}: clean {} robust {}", e.defense, e.clean, e.robust);
            }
            println!("artifacts in {}", cfg.output.display());
        }
    }
    Ok(())
}
