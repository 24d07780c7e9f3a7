//! Config-driven experiments: train or load models, build a defense,
//! evaluate it and leave reproducible artifacts on disk.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{gen_split, Dataset, DatasetKind};
use super::eval::{evaluate, Evaluation};
use crate::attacks::{AttackSpec, Defense, NoDefense, ThreatModel};
use crate::diffusion::{DiffusionDefense, DiffusionSchedule, ScoreFn};
use crate::dualpath::{DualPathConfig, DualPathDefense, TargetBank};
use crate::error::{Error, Result};
use crate::models::{train_classifier, train_score_model, Classifier, ClassifierArch, Purifier, ScoreModel, TrainConfig};
use crate::numcore::{Checkpoint, Tensor};
use crate::oap::{build_oap_dataset, train_baseline_purifier, train_noise_conditioned_purifier, OapConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassifierSpec {
    Train { arch: ClassifierArch, train: TrainConfig },
    Checkpoint { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSpec {
    /// Closed-form score of a Gaussian fitted to the training inputs.
    GaussianFit,
    Train { width: usize, t_max: usize, train: TrainConfig },
    Checkpoint { path: PathBuf },
}

/// A purifier trained on OAP pairs built from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifierSpec {
    pub k: usize,
    pub epsilon: f32,
    pub width: usize,
    pub train: TrainConfig,
    /// Train on diffusion-noised inputs up to the defense's `t_star`.
    #[serde(default)]
    pub noise_conditioned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DefenseSpec {
    None,
    Purifier {
        purifier: PurifierSpec,
    },
    Diffusion {
        t_star: usize,
        score: ScoreSpec,
        #[serde(default)]
        guidance: Option<GuidanceSpec>,
    },
    DualPath {
        t_star: usize,
        score: ScoreSpec,
        #[serde(default)]
        guidance: Option<GuidanceSpec>,
        /// Radius of the OAP walk that turns bank images into targets.
        bank_epsilon: f32,
        #[serde(default)]
        dual: DualPathConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub eta: f32,
    pub purifier: PurifierSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DataSpec,
    pub classifier: ClassifierSpec,
    pub defense: DefenseSpec,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub subset: Option<usize>,
    pub output: PathBuf,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(bad(format!("checkpoint {} does not exist", p.display())))
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Everything that can be checked without computing: schema version,
    /// sizes, checkpoint paths and defense/dataset compatibility.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad(format!("config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.seeds.is_empty() {
            return Err(bad("at least one seed is required"));
        }
        let c = self.dataset.kind.classes();
        if self.dataset.train < c || self.dataset.test < c {
            return Err(bad(format!("train and test splits need at least {c} items")));
        }
        if self.subset == Some(0) {
            return Err(bad("subset must be positive"));
        }
        if let ClassifierSpec::Checkpoint { path } = &self.classifier {
            check_file(path)?;
        }
        if let Some(a) = &self.attack {
            a.threat.validate()?;
        }
        let images = self.dataset.kind == DatasetKind::Shapes16;
        let sched = DiffusionSchedule::standard();
        let score_ok = |s: &ScoreSpec| -> Result<()> {
            match s {
                ScoreSpec::Checkpoint { path } => check_file(path),
                ScoreSpec::Train { .. } if !images => Err(bad("trained score networks need image data")),
                ScoreSpec::Train { t_max, .. } => sched.check_t(*t_max),
                ScoreSpec::GaussianFit => Ok(()),
            }
        };
        let needs_images = |what: &str| -> Result<()> {
            if images {
                Ok(())
            } else {
                Err(bad(format!("{what} needs image data")))
            }
        };
        match &self.defense {
            DefenseSpec::None => {}
            DefenseSpec::Purifier { .. } => needs_images("a purifier defense")?,
            DefenseSpec::Diffusion { t_star, score, guidance } => {
                sched.check_t(*t_star)?;
                score_ok(score)?;
                if guidance.is_some() {
                    needs_images("guidance")?;
                }
            }
            DefenseSpec::DualPath { t_star, score, guidance, dual, .. } => {
                sched.check_t(*t_star)?;
                score_ok(score)?;
                if guidance.is_some() {
                    needs_images("guidance")?;
                }
                if !(1..=2).contains(&dual.paths) {
                    return Err(bad("dual-path paths must be 1 or 2"));
                }
                dual.sinkhorn.validate()?;
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
}

/// What a run left behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_sha256: String,
    pub stages: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub evaluation: Option<Evaluation>,
    pub error: Option<String>,
}

struct Run {
    dir: PathBuf,
    summary: RunSummary,
}

impl Run {
    fn save(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.summary.artifacts.push(Artifact { name: name.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn stage(&mut self, name: &str) {
        self.summary.stages.push(name.into());
    }
}

fn gaussian_fit(data: &Dataset) -> Result<ScoreFn> {
    let (n, per) = (data.len(), data.inputs.item_len());
    let mut mean = vec![0.0f64; per];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.inputs.item_slice(i)) {
            *m += *v as f64 / n as f64;
        }
    }
    let mut var = 0.0;
    for i in 0..n {
        for (m, v) in mean.iter().zip(data.inputs.item_slice(i)) {
            var += (*v as f64 - m).powi(2);
        }
    }
    let var = (var / (n * per) as f64).max(1e-6);
    let mut shape = vec![1];
    shape.extend_from_slice(data.item_shape());
    let mean = Tensor::new(shape, mean.into_iter().map(|v| v as f32).collect())?;
    Ok(ScoreFn::Gaussian { mean, var })
}

fn train_purifier(
    run: &mut Run,
    f: &Classifier,
    train: &Dataset,
    spec: &PurifierSpec,
    t_star: usize,
    name: &str,
) -> Result<Purifier> {
    let cfg = OapConfig::new(spec.epsilon).with_k(spec.k);
    let attack = ThreatModel::linf(spec.epsilon, cfg.inner_attack_steps);
    let pairs = build_oap_dataset(f, train, &cfg, &attack, spec.train.seed)?;
    let (p, _) = if spec.noise_conditioned {
        train_noise_conditioned_purifier(&pairs, &DiffusionSchedule::standard(), t_star, spec.width, &spec.train)?
    } else {
        train_baseline_purifier(&pairs, spec.width, &spec.train)?
    };
    run.save(name, &p.to_checkpoint().to_bytes()?)?;
    run.stage(name.trim_end_matches(".ck"));
    Ok(p)
}

fn build_score(run: &mut Run, train: &Dataset, spec: &ScoreSpec) -> Result<ScoreFn> {
    let score = match spec {
        ScoreSpec::GaussianFit => gaussian_fit(train)?,
        ScoreSpec::Checkpoint { path } => ScoreFn::Network(ScoreModel::from_checkpoint(&Checkpoint::load(path)?)?),
        ScoreSpec::Train { width, t_max, train: tc } => {
            let (m, _) = train_score_model(&train.inputs, &DiffusionSchedule::standard(), *width, *t_max, tc)?;
            run.save("score.ck", &m.to_checkpoint().to_bytes()?)?;
            ScoreFn::Network(m)
        }
    };
    run.stage("score");
    Ok(score)
}

fn build_defense(run: &mut Run, cfg: &ExperimentConfig, f: &Classifier, train: &Dataset) -> Result<Box<dyn Defense>> {
    let sched = DiffusionSchedule::standard();
    let guide = |run: &mut Run, g: &Option<GuidanceSpec>, t_star: usize| -> Result<Option<(Purifier, f32)>> {
        match g {
            None => Ok(None),
            Some(g) => Ok(Some((train_purifier(run, f, train, &g.purifier, t_star, "guide.ck")?, g.eta))),
        }
    };
    Ok(match &cfg.defense {
        DefenseSpec::None => Box::new(NoDefense),
        DefenseSpec::Purifier { purifier } => Box::new(train_purifier(run, f, train, purifier, 0, "purifier.ck")?),
        DefenseSpec::Diffusion { t_star, score, guidance } => {
            let score = build_score(run, train, score)?;
            let mut d = DiffusionDefense::new(sched, score, *t_star)?;
            if let Some((p, eta)) = guide(run, guidance, *t_star)? {
                d = d.with_guidance(p, eta)?;
            }
            Box::new(d)
        }
        DefenseSpec::DualPath { t_star, score, guidance, bank_epsilon, dual } => {
            let score = build_score(run, train, score)?;
            let g = guide(run, guidance, *t_star)?;
            let bank = TargetBank::build(f, train, &OapConfig::new(*bank_epsilon))?;
            Box::new(DualPathDefense::new(sched, score, *t_star, g, bank, dual.clone())?)
        }
    })
}

fn stages(run: &mut Run, cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.dataset;
    let train = gen_split(d.kind, d.train, d.seed, "train")?;
    let test = gen_split(d.kind, d.test, d.seed, "test")?;
    run.stage("data");
    let f = match &cfg.classifier {
        ClassifierSpec::Checkpoint { path } => Classifier::from_checkpoint(&Checkpoint::load(path)?)?,
        ClassifierSpec::Train { arch, train: tc } => {
            let (f, _) = train_classifier(&train, *arch, tc)?;
            run.save("classifier.ck", &f.to_checkpoint().to_bytes()?)?;
            f
        }
    };
    run.stage("classifier");
    let defense = build_defense(run, cfg, &f, &train)?;
    run.stage("defense");
    let t = Instant::now();
    let ev = evaluate(defense.as_ref(), &f, &test, cfg.attack.as_ref(), &cfg.seeds, cfg.subset)?;
    let path = run.dir.join("metrics.csv");
    ev.write_csv(&path)?;
    let bytes = std::fs::read(&path)?;
    run.summary.artifacts.push(Artifact { name: "metrics.csv".into(), sha256: sha256_hex(&bytes) });
    let mut timing = Vec::new();
    writeln!(timing, "seed,attack_seconds_per_image")?;
    for r in &ev.runs {
        writeln!(timing, "{},{:.6}", r.seed, r.attack_seconds_per_image)?;
    }
    writeln!(timing, "total,{:.6}", t.elapsed().as_secs_f64())?;
    std::fs::write(run.dir.join("timing.csv"), timing)?;
    run.summary.evaluation = Some(ev);
    run.stage("evaluate");
    Ok(())
}

/// Validates `cfg`, then runs data generation, model training or loading,
/// defense construction and evaluation, writing artifacts into
/// `cfg.output` as each stage completes. `provenance.json` is written even
/// when a stage fails, in which case the error is returned afterwards.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output)?;
    let json = cfg.to_json()?;
    let mut run = Run {
        dir: cfg.output.clone(),
        summary: RunSummary {
            config_sha256: sha256_hex(json.as_bytes()),
            stages: vec![],
            artifacts: vec![],
            evaluation: None,
            error: None,
        },
    };
    std::fs::write(run.dir.join("config.json"), &json)?;
    let outcome = stages(&mut run, cfg);
    if let Err(e) = &outcome {
        run.summary.error = Some(e.to_string());
    }
    let provenance = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_sha256": run.summary.config_sha256,
        "seeds": cfg.seeds,
        "dataset_seed": cfg.dataset.seed,
        "stages": run.summary.stages,
        "artifacts": run.summary.artifacts,
        "clean": run.summary.evaluation.as_ref().map(|e| e.clean.to_string()),
        "robust": run.summary.evaluation.as_ref().map(|e| e.robust.to_string()),
        "error": run.summary.error,
    });
    std::fs::write(run.dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
    outcome.map(|_| run.summary)
}
