use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use groundkit::asr::{write_asr_log, WordSnapper};
use groundkit::datagen::{Dataset, SplitMode};
use groundkit::grounder::{write_grounder_log, train_grounder, GrounderModel, GrounderTrainConfig};
use groundkit::phonetics::AudioFeatures;
use groundkit::pipeline::{
    self, dataset_for, examples, grounder_vocab, load_asr, run_ablation, run_ground_once, run_pca_report, save_asr, train_asr_on,
    transcribe, RunConfig, Utterance, Variant,
};
use groundkit::scenegraph::{build_scene_graph, WorldModel, DEFAULT_EPSILON};

#[derive(Parser)]
#[command(name = "groundkit", version, about = "Speech and scene-graph grounding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration JSON; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output and artifact directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Audio noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_parser = ["name", "utterance"])]
    split_mode: Option<String>,
    /// Use the large model widths instead of the small defaults.
    #[arg(long)]
    large_dims: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.sigma {
            cfg.dataset.noise_sigma = s;
        }
        if let Some(m) = &self.split_mode {
            cfg.dataset.split_mode = m.parse::<SplitMode>()?;
        }
        if self.large_dims {
            cfg.use_large_dims();
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset (dataset.jsonl) under --out.
    DatasetGen(Common),
    /// Train the recogniser on the training split.
    TrainAsr(Common),
    /// Train one grounder variant (needs a trained recogniser under --out).
    TrainGrounder {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a trained grounder variant on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train and evaluate all variants; writes report.md and report.csv.
    Ablate(Common),
    /// Project probe-word latents with PCA; writes pca.csv and pca.svg.
    Pca(Common),
    /// Ground one utterance against a detection list.
    Ground {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Detection records, JSON Lines.
        #[arg(long)]
        scene: PathBuf,
        /// Audio features JSON ({"frames": [[...]], "valid_length": n}).
        #[arg(long, conflicts_with = "text")]
        audio: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
    },
    /// Build a scene graph from detection JSON Lines and print it.
    SceneGraph {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Also write the graph to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GROUNDKIT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("GROUNDKIT_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what}: {} (run the producing subcommand first)", path.display());
    }
    Ok(())
}

fn load_asr_or_train(cfg: &RunConfig, out: &Path, ds: &Dataset) -> Result<groundkit::asr::AsrModel> {
    if out.join("asr.gkpt").exists() {
        return Ok(load_asr(out)?);
    }
    let phonetics = cfg.phonetic_model()?;
    let (asr, log) = train_asr_on(cfg, &phonetics, &ds.train)?;
    write_asr_log(&log, fs::File::create(out.join("asr_log.csv"))?)?;
    save_asr(&asr, out)?;
    Ok(asr)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DatasetGen(c) => {
            let cfg = c.run_config()?;
            let path = c.out.join("dataset.jsonl");
            if path.exists() {
                fs::remove_file(&path)?;
            }
            let (ds, hash) = dataset_for(&cfg, &cfg.phonetic_model()?, &c.out)?;
            fs::write(c.out.join("dataset_config.json"), serde_json::to_string_pretty(&cfg.dataset)?)?;
            println!("{}", serde_json::json!({"path": path, "train": ds.train.len(), "test": ds.test.len(), "sha256": hash}));
        }
        Command::TrainAsr(c) => {
            let cfg = c.run_config()?;
            let phonetics = cfg.phonetic_model()?;
            let (ds, _) = dataset_for(&cfg, &phonetics, &c.out)?;
            let (asr, log) = train_asr_on(&cfg, &phonetics, &ds.train)?;
            write_asr_log(&log, fs::File::create(c.out.join("asr_log.csv"))?)?;
            save_asr(&asr, &c.out)?;
            let snapper = WordSnapper::new(&phonetics, &cfg.command_words(), cfg.snap_threshold)?;
            let audio: Vec<&AudioFeatures> = ds.test.iter().map(|s| &s.audio).collect();
            let wer = transcribe(&asr, &phonetics, &snapper, &audio)?.word_error_rate(&ds.test);
            println!("{}", serde_json::json!({"final_train_loss": log.last().map(|l| l.mean_ctc_loss), "test_wer": wer}));
        }
        Command::TrainGrounder { common: c, variant } => {
            let cfg = c.run_config()?;
            let variant = Variant::parse(&variant)?;
            let phonetics = cfg.phonetic_model()?;
            let (ds, _) = dataset_for(&cfg, &phonetics, &c.out)?;
            let asr = load_asr_or_train(&cfg, &c.out, &ds)?;
            let snapper = WordSnapper::new(&phonetics, &cfg.command_words(), cfg.snap_threshold)?;
            let t_train = transcribe(&asr, &phonetics, &snapper, &ds.train.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
            let t_test = transcribe(&asr, &phonetics, &snapper, &ds.test.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
            let mut model = pipeline::new_grounder(&cfg, variant, grounder_vocab(&cfg, &ds.train), &t_train)?;
            let asr_words = variant != Variant::TextOnly;
            let train = examples(&model, &ds.train, Some(&t_train), asr_words)?;
            let test = examples(&model, &ds.test, Some(&t_test), asr_words)?;
            let tc = GrounderTrainConfig {
                seed: groundkit::datagen::sample_seed(cfg.seed, "grounder-shuffle", variant as usize),
                ..cfg.grounder_train.clone()
            };
            let log = train_grounder(&mut model, &train, &test, &tc)?;
            write_grounder_log(&log, fs::File::create(c.out.join(format!("{}_log.csv", variant.name())))?)?;
            model.save(&c.out, &format!("grounder_{}", variant.name()))?;
            let last = log.iter().rev().find(|l| l.split == "test").map(|l| l.accuracy);
            println!("{}", serde_json::json!({"variant": variant.name(), "test_accuracy": last}));
        }
        Command::Eval { common: c, variant } => {
            let cfg = c.run_config()?;
            let variant = Variant::parse(&variant)?;
            let stem = format!("grounder_{}", variant.name());
            require(&c.out.join(format!("{stem}.gkpt")), "grounder checkpoint")?;
            require(&c.out.join("asr.gkpt"), "ASR checkpoint")?;
            let phonetics = cfg.phonetic_model()?;
            let (ds, hash) = dataset_for(&cfg, &phonetics, &c.out)?;
            let model = GrounderModel::load(&c.out, &stem)?;
            let asr = load_asr(&c.out)?;
            let snapper = WordSnapper::new(&phonetics, &cfg.command_words(), cfg.snap_threshold)?;
            let t_test = transcribe(&asr, &phonetics, &snapper, &ds.test.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
            let (on_asr, _) = model.evaluate(&examples(&model, &ds.test, Some(&t_test), true)?, false)?;
            let mut result = serde_json::json!({
                "variant": variant.name(),
                "dataset_sha256": hash,
                "test_wer": t_test.word_error_rate(&ds.test),
                "accuracy_asr_text": on_asr,
            });
            if variant == Variant::TextOnly {
                let (on_gt, _) = model.evaluate(&examples(&model, &ds.test, None, false)?, false)?;
                result["accuracy_ground_truth_text"] = on_gt.into();
            }
            if variant == Variant::Full {
                let (zeroed, _) = model.evaluate(&examples(&model, &ds.test, Some(&t_test), true)?, true)?;
                result["accuracy_zeroed_speech"] = zeroed.into();
            }
            println!("{result}");
        }
        Command::Ablate(c) => {
            let cfg = c.run_config()?;
            let report = run_ablation(&cfg, &c.out)?;
            print!("{}", report.to_markdown());
        }
        Command::Pca(c) => {
            let cfg = c.run_config()?;
            let phonetics = cfg.phonetic_model()?;
            let asr = if c.out.join("asr.gkpt").exists() {
                load_asr(&c.out)?
            } else {
                let (ds, _) = dataset_for(&cfg, &phonetics, &c.out)?;
                load_asr_or_train(&cfg, &c.out, &ds)?
            };
            let report = run_pca_report(&asr, &phonetics, &pipeline::default_pca_groups())?;
            fs::write(c.out.join("pca.csv"), report.to_csv())?;
            fs::write(c.out.join("pca.svg"), report.to_svg())?;
            println!(
                "{}",
                serde_json::json!({"points": report.points.len(), "clustering_ratio": report.clustering_ratio, "explained_variance": report.explained_variance})
            );
        }
        Command::Ground {
            common: c,
            variant,
            scene,
            audio,
            text,
        } => {
            let cfg = c.run_config()?;
            let variant = Variant::parse(&variant)?;
            let stem = format!("grounder_{}", variant.name());
            require(&c.out.join(format!("{stem}.gkpt")), "grounder checkpoint")?;
            require(&scene, "scene file")?;
            let model = GrounderModel::load(&c.out, &stem)?;
            let asr = if c.out.join("asr.gkpt").exists() { Some(load_asr(&c.out)?) } else { None };
            let phonetics = cfg.phonetic_model()?;
            let snapper = WordSnapper::new(&phonetics, &cfg.command_words(), cfg.snap_threshold)?;
            let world = WorldModel::from_jsonl(BufReader::new(fs::File::open(&scene)?))?;
            let utterance = match (audio, text) {
                (Some(p), _) => Utterance::Audio(serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?),
                (None, Some(t)) => Utterance::Text(t),
                (None, None) => bail!("pass --audio or --text"),
            };
            let result = run_ground_once(&model, asr.as_ref(), &phonetics, &snapper, &world, utterance, cfg.dataset.epsilon)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::SceneGraph { detections, epsilon, out } => {
            let world = WorldModel::from_jsonl(BufReader::new(
                fs::File::open(&detections).with_context(|| format!("opening {}", detections.display()))?,
            ))?;
            let graph = build_scene_graph(&world, epsilon)?;
            let json = graph.to_json()?;
            if let Some(p) = out {
                fs::write(&p, &json)?;
            }
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
