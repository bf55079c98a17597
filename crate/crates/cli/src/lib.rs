//! Command-line driver: reads one TOML run configuration per invocation and
//! writes every output under the configured output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lpips_core::attack::{attack_2afc_triplet, AttackSpec, AttackTarget};
use lpips_core::backbone::{Backbone, BackboneConfig};
use lpips_core::checkpoint::{load_checkpoint, save_checkpoint};
use lpips_core::datasets::{
    load_bapps_layout, load_labeled_images, synth_base_images, synth_generate, synth_labeled,
    write_bapps_layout, write_labeled_images, SynthOptions, TwoAFCTriplet,
};
use lpips_core::metric::MetricModel;
use lpips_core::perceptual::{
    clean_accuracy, train_classifier, ClassifierTrainConfig, ConvClassifier, PerceptualAttackSpec,
};
use lpips_core::report::{
    distance_histogram, eval_2afc, opt_crafter, robust_accuracy_report, write_json, write_text,
    AttackCondition, EvalRequest, ReportMetadata,
};
use lpips_core::trainer::{adversarial_tune, tune_metric_clean, TrainConfig, INNER_ATTACK_STEPS};

/// Overrides the configured output directory (a `--output` flag wins).
pub const OUTPUT_ENV: &str = "LPIPS_OUTPUT";

#[derive(Parser, Debug)]
#[command(name = "lpips", version, about = "Perceptual distance tuning, attacks and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tune a metric on clean triplets (or, with --classifier, train the classifier).
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the labeled-image classifier instead of a metric.
        #[arg(long)]
        classifier: bool,
    },
    /// Adversarially tune a metric, starting from `paths.checkpoint` when set.
    TuneAdv(Common),
    /// Attack the triplets of a split and save the perturbed triplets.
    Attack(Common),
    /// Score a metric checkpoint on a split, clean and under the configured attacks.
    #[command(name = "eval-2afc")]
    Eval2afc(Common),
    /// Distance histogram of natural vs robust metric on feature-attack examples.
    Histogram(Common),
    /// Robust accuracy of a classifier under perceptual attacks bounded by both metrics.
    RobustAcc(Common),
    /// Generate synthetic triplets and a labeled image set.
    SynthData(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Replaces the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of the triplet directory layout.
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    /// Primary metric checkpoint (natural metric for histogram/robust-acc).
    pub checkpoint: Option<PathBuf>,
    pub robust_checkpoint: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Root of the class-per-directory image layout.
    pub labeled_root: Option<PathBuf>,
    pub labeled_train_split: String,
    pub labeled_eval_split: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: None,
            train_split: "train".into(),
            eval_split: "val".into(),
            checkpoint: None,
            robust_checkpoint: None,
            classifier: None,
            labeled_root: None,
            labeled_train_split: "train".into(),
            labeled_eval_split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_triplets: usize,
    pub eval_triplets: usize,
    pub base_images: usize,
    pub image_size: usize,
    pub labeled_per_class: usize,
    pub labeled_eval_per_class: usize,
    pub options: SynthOptions,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train_triplets: 200,
            eval_triplets: 100,
            base_images: 32,
            image_size: 32,
            labeled_per_class: 20,
            labeled_eval_per_class: 5,
            options: SynthOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSection {
    /// Number of reference images to attack (taken in index order).
    pub images: usize,
    pub attack: AttackSpec,
}

impl Default for HistogramSection {
    fn default() -> Self {
        Self {
            images: 200,
            attack: lpips_core::report::default_opt_spec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    /// Backbone for freshly created metrics; defaults to the three-layer net.
    pub backbone: Option<BackboneConfig>,
    pub train: TrainConfig,
    pub classifier: ClassifierTrainConfig,
    /// Inner attack for `tune-adv`.
    pub adversarial_attack: AttackSpec,
    pub eval: EvalRequest,
    /// Conditions applied by `attack`.
    pub attacks: Vec<AttackCondition>,
    pub perceptual: PerceptualAttackSpec,
    pub histogram: HistogramSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            paths: Paths::default(),
            backbone: None,
            train: TrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            adversarial_attack: AttackSpec::linf(8.0 / 255.0).with_steps(INNER_ATTACK_STEPS),
            eval: EvalRequest::default(),
            attacks: vec![AttackCondition {
                target: AttackTarget::X0,
                spec: AttackSpec::linf(8.0 / 255.0),
            }],
            perceptual: PerceptualAttackSpec::default(),
            histogram: HistogramSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.paths.data_root,
            &mut self.paths.checkpoint,
            &mut self.paths.robust_checkpoint,
            &mut self.paths.classifier,
            &mut self.paths.labeled_root,
            &mut self.train.checkpoint_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Pushes the global seed into every seeded component.
    fn apply_seed(&mut self) {
        let s = self.seed;
        self.train.seed = s;
        self.classifier.seed = s;
        self.adversarial_attack.seed = s;
        self.perceptual.seed = s;
        self.histogram.attack.seed = s;
        self.synth.options.seed = s;
        for a in self.eval.attacks.iter_mut().chain(self.attacks.iter_mut()) {
            a.spec.seed = s;
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .with_context(|| format!("config does not set `{what}`"))?;
    if !p.exists() {
        bail!("{what} not found: {}", p.display());
    }
    Ok(p)
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

fn metadata(cfg: &RunConfig, checkpoint: Option<&Path>, flavor: Option<&str>) -> ReportMetadata {
    ReportMetadata {
        checkpoint: checkpoint.map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        flavor: flavor.map(str::to_string),
        seed: cfg.seed,
        timestamp: Some(timestamp()),
    }
}

fn read_split(root: &Path, split: &str) -> Result<Vec<TwoAFCTriplet>> {
    let (stream, manifest) = load_bapps_layout(root, split)
        .with_context(|| format!("cannot list split `{split}` under {}", root.display()))?;
    log::info!("split {split}: {} triplets", manifest.total);
    Ok(stream.collect::<lpips_core::Result<Vec<_>>>()?)
}

fn fresh_model(cfg: &RunConfig) -> Result<MetricModel> {
    let backbone = match &cfg.backbone {
        Some(b) => Backbone::from_config(b.clone())?,
        None => Backbone::random(BackboneConfig::tiny_net(cfg.seed), cfg.seed)?,
    };
    Ok(MetricModel::new(backbone, cfg.seed))
}

fn load_model(p: &Path) -> Result<MetricModel> {
    load_checkpoint(p).with_context(|| format!("cannot load checkpoint {}", p.display()))
}

fn run_command(cmd: Command) -> Result<()> {
    let (common, classifier_flag) = match &cmd {
        Command::Train { common, classifier } => (common.clone(), *classifier),
        Command::TuneAdv(c)
        | Command::Attack(c)
        | Command::Eval2afc(c)
        | Command::Histogram(c)
        | Command::RobustAcc(c)
        | Command::SynthData(c) => (c.clone(), false),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.apply_seed();
    if let Some(o) = common.output {
        cfg.output_dir = o;
    } else if let Some(o) = std::env::var_os(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(o);
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;

    match cmd {
        Command::SynthData(_) => {
            let s = &cfg.synth;
            let bases = synth_base_images(s.base_images, s.image_size, 3, cfg.seed);
            let data_root = out.join("data");
            let train = synth_generate(&bases, s.train_triplets, &s.options)?;
            let eval_opts = SynthOptions {
                seed: s.options.seed ^ 0xe7a1,
                ..s.options.clone()
            };
            let eval = synth_generate(&bases, s.eval_triplets, &eval_opts)?;
            write_bapps_layout(&data_root, &cfg.paths.train_split, &train)?;
            write_bapps_layout(&data_root, &cfg.paths.eval_split, &eval)?;
            let labeled_root = out.join("labeled");
            let train_set = synth_labeled(s.labeled_per_class, s.image_size, cfg.seed);
            let eval_set = synth_labeled(s.labeled_eval_per_class, s.image_size, cfg.seed ^ 0xe7a1);
            write_labeled_images(&labeled_root, &cfg.paths.labeled_train_split, &train_set)?;
            write_labeled_images(&labeled_root, &cfg.paths.labeled_eval_split, &eval_set)?;
            println!("wrote {} and {}", data_root.display(), labeled_root.display());
        }
        Command::Train { .. } if classifier_flag => {
            let root = require(&cfg.paths.labeled_root, "paths.labeled_root")?;
            let set = load_labeled_images(root, &cfg.paths.labeled_train_split)?;
            let size = set
                .items
                .first()
                .map(|(x, _)| x.shape())
                .context("labeled training split is empty")?;
            let mut clf = ConvClassifier::small(size[0], size[2], set.classes.len().max(2), cfg.seed)?;
            let losses = train_classifier(&mut clf, &set.items, &cfg.classifier)?;
            let acc = clean_accuracy(&clf, &set.items)?;
            clf.save(&out.join("classifier.ckpt"))?;
            write_json(
                &out.join("classifier_report.json"),
                &serde_json::json!({ "epoch_loss": losses, "train_accuracy": acc }),
            )?;
            println!("classifier train accuracy {acc:.1}%");
        }
        Command::Train { .. } => {
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let data = read_split(root, &cfg.paths.train_split)?;
            let mut tcfg = cfg.train.clone();
            tcfg.adversarial = false;
            tcfg.inner_attack = None;
            let (model, report) = tune_metric_clean(&fresh_model(&cfg)?, &data, &tcfg)?;
            save_checkpoint(&model, &out.join("natural.ckpt"))?;
            write_json(&out.join("train_report.json"), &report)?;
            println!("saved {}", out.join("natural.ckpt").display());
        }
        Command::TuneAdv(_) => {
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let init = match &cfg.paths.checkpoint {
                Some(_) => load_model(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?,
                None => fresh_model(&cfg)?,
            };
            let data = read_split(root, &cfg.paths.train_split)?;
            let mut tcfg = cfg.train.clone();
            tcfg.adversarial = true;
            tcfg.inner_attack = Some(cfg.adversarial_attack.clone());
            let (model, report) = adversarial_tune(&init, &data, &tcfg)?;
            save_checkpoint(&model, &out.join("robust.ckpt"))?;
            write_json(&out.join("train_adv_report.json"), &report)?;
            println!("saved {}", out.join("robust.ckpt").display());
        }
        Command::Attack(_) => {
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            let model = load_model(ckpt)?;
            let data = read_split(root, &cfg.paths.eval_split)?;
            let mut traces = Vec::new();
            for cond in &cfg.attacks {
                let mut attacked = Vec::with_capacity(data.len());
                for (i, t) in data.iter().enumerate() {
                    let spec = cond.spec.clone().with_seed(cond.spec.seed ^ i as u64);
                    let (adv, result) = attack_2afc_triplet(&model, t, cond.target, &spec)?;
                    traces.push(serde_json::json!({
                        "condition": cond.label(),
                        "index": i,
                        "result": result,
                    }));
                    attacked.push(adv);
                }
                let split = format!("{}-{}", cfg.paths.eval_split, cond.label().replace('/', "-"));
                write_bapps_layout(&out.join("attacked"), &split, &attacked)?;
            }
            write_json(&out.join("attack_traces.json"), &traces)?;
        }
        Command::Eval2afc(_) => {
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let ckpt = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            let model = load_model(ckpt)?;
            let data = read_split(root, &cfg.paths.eval_split)?;
            let report = eval_2afc(
                &model,
                &data,
                &cfg.eval,
                metadata(&cfg, Some(ckpt), Some(model.flavor.label())),
            )?;
            write_json(&out.join("eval_report.json"), &report)?;
            write_text(&out.join("eval_report.csv"), &report.to_csv())?;
            for c in &report.cells {
                match c.score {
                    Some(s) => println!("{:<12} {:<10} {s:.2}", c.category.as_str(), c.condition),
                    None => println!("{:<12} {:<10} absent", c.category.as_str(), c.condition),
                }
            }
        }
        Command::Histogram(_) => {
            let natural = load_model(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
            let robust = load_model(require(&cfg.paths.robust_checkpoint, "paths.robust_checkpoint")?)?;
            let root = require(&cfg.paths.data_root, "paths.data_root")?;
            let images: Vec<_> = read_split(root, &cfg.paths.eval_split)?
                .into_iter()
                .take(cfg.histogram.images)
                .map(|t| t.x)
                .collect();
            let craft = opt_crafter(&natural, cfg.histogram.attack.clone());
            let report = distance_histogram(&natural, &robust, &images, &craft, metadata(&cfg, None, None))?;
            write_json(&out.join("histogram.json"), &report)?;
            println!(
                "median natural {:.4}, robust {:.4}",
                report.natural.median, report.robust.median
            );
        }
        Command::RobustAcc(_) => {
            let clf_path = require(&cfg.paths.classifier, "paths.classifier")?;
            let nat_path = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
            let rob_path = require(&cfg.paths.robust_checkpoint, "paths.robust_checkpoint")?;
            let root = require(&cfg.paths.labeled_root, "paths.labeled_root")?;
            let clf = ConvClassifier::load(clf_path)
                .with_context(|| format!("cannot load classifier {}", clf_path.display()))?;
            let natural = load_model(nat_path)?;
            let robust = load_model(rob_path)?;
            let set = load_labeled_images(root, &cfg.paths.labeled_eval_split)?;
            let report = robust_accuracy_report(
                &clf,
                &natural,
                &robust,
                &set.items,
                &cfg.perceptual,
                metadata(&cfg, Some(clf_path), None),
            )?;
            write_json(&out.join("robust_accuracy.json"), &report)?;
            write_text(&out.join("robust_accuracy.csv"), &report.to_csv())?;
            write_text(&out.join("robust_accuracy_outcomes.jsonl"), &report.outcomes_jsonl()?)?;
            println!("clean {:.1}%", report.clean_accuracy);
            for c in &report.cells {
                println!("{:<5} {:<8} {:.1}%", c.attack.label(), c.metric, c.accuracy);
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs the selected subcommand. Returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
