//! Experiment orchestration: run configuration, the four-variant ablation,
//! the latent-space PCA report and single-shot grounding.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use numcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{train_asr, write_asr_log, AsrConfig, AsrEpochLog, AsrExample, AsrModel, AsrTrainConfig, WordSnapper, DEFAULT_SNAP_THRESHOLD};
use crate::datagen::{build_dataset, file_sha256, sample_seed, Dataset, DatasetConfig, GroundingSample};
use crate::error::{Error, Result};
use crate::grounder::{pool_speech, train_grounder, SpeechNorm, write_grounder_log, GrounderConfig, GrounderModel, GrounderTrainConfig, GroundingExample, Prediction, Vocab};
use crate::phonetics::{default_probe_groups, synthesize_audio, AudioFeatures, Phonetics};
use crate::scenegraph::{build_scene_graph, WorldModel, PREDICATE_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    /// Text-only model trained on ground-truth text, evaluated on ASR and on ground-truth text.
    pub text_only: bool,
    /// Fusion model without the speech token, trained and evaluated on ASR text.
    pub no_speech: bool,
    /// Full fusion model with the speech token.
    pub full: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            text_only: true,
            no_speech: true,
            full: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; dataset, initialisation and shuffling seeds derive from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub asr: AsrConfig,
    pub asr_train: AsrTrainConfig,
    pub grounder: GrounderConfig,
    pub grounder_train: GrounderTrainConfig,
    pub snap_threshold: f64,
    /// Independent renditions of each training command in the ASR pretraining corpus.
    pub asr_renditions: usize,
    pub variants: VariantFlags,
    /// Optional path to a phonetic model JSON; the built-in model otherwise.
    pub phonetics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig {
                noise_sigma: DEFAULT_SIGMA,
                ..DatasetConfig::default()
            },
            asr: AsrConfig::default(),
            asr_train: AsrTrainConfig::default(),
            grounder: GrounderConfig::default(),
            grounder_train: GrounderTrainConfig::default(),
            snap_threshold: DEFAULT_SNAP_THRESHOLD,
            asr_renditions: 1,
            variants: VariantFlags::default(),
            phonetics: None,
        }
    }
}

/// Audio noise level of the default corrupted-channel experiment.
pub const DEFAULT_SIGMA: f64 = 0.65;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grounder.validate()?;
        self.dataset.vocabulary.validate(self.dataset.split_mode)?;
        if self.grounder.speech_dim != self.asr.hidden {
            return Err(Error::Config(format!(
                "grounder speech_dim {} must equal ASR hidden width {}",
                self.grounder.speech_dim, self.asr.hidden
            )));
        }
        if self.asr_renditions == 0 {
            return Err(Error::Config("asr_renditions must be at least 1".into()));
        }
        if !(self.snap_threshold >= 0.0) {
            return Err(Error::Config("snap_threshold must be >= 0".into()));
        }
        if self.dataset.train_size == 0 || self.dataset.test_size == 0 {
            return Err(Error::Config("train and test sizes must be positive".into()));
        }
        Ok(())
    }

    /// Switches to the large model widths.
    pub fn use_large_dims(&mut self) {
        let use_speech = self.grounder.use_speech;
        self.grounder = GrounderConfig {
            use_speech,
            ..GrounderConfig::large_dims()
        };
        self.asr.hidden = self.grounder.speech_dim;
    }

    pub fn phonetic_model(&self) -> Result<Phonetics> {
        match &self.phonetics {
            Some(path) => Phonetics::from_json(&fs::read_to_string(path)?),
            None => Ok(Phonetics::default()),
        }
    }

    /// Every word a command can contain, for transcript snapping.
    pub fn command_words(&self) -> Vec<String> {
        let t = &self.dataset.template;
        let mut words: Vec<String> = t
            .verbs
            .iter()
            .chain(&t.prepositions)
            .cloned()
            .chain(
                self.dataset
                    .vocabulary
                    .classes
                    .iter()
                    .flat_map(|c| c.all_names())
                    .flat_map(|n| n.split_whitespace().map(str::to_string)),
            )
            .collect();
        words.sort();
        words.dedup();
        words
    }

    fn with_seed(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.seed;
        c.asr_train.seed = sample_seed(self.seed, "asr", 0);
        c.grounder_train.seed = sample_seed(self.seed, "grounder", 0);
        c
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// ASR outputs for a list of samples.
#[derive(Clone, Debug, Default)]
pub struct Transcriptions {
    /// Encoder latents of the valid frames, one `L×H` matrix per sample.
    pub speech: Vec<Tensor>,
    pub words: Vec<Vec<String>>,
}

impl Transcriptions {
    pub fn word_error_rate(&self, samples: &[GroundingSample]) -> f64 {
        let refs: Vec<Vec<String>> = samples.iter().map(|s| words(&s.command_text)).collect();
        crate::asr::word_error_rate(refs.iter().map(Vec::as_slice).zip(self.words.iter().map(Vec::as_slice)))
    }
}

/// Runs the recogniser on every sample: valid-frame latents and snapped words.
pub fn transcribe(asr: &AsrModel, phonetics: &Phonetics, snapper: &WordSnapper, audio: &[&AudioFeatures]) -> Result<Transcriptions> {
    let out: Vec<(Tensor, Vec<String>)> = audio
        .par_iter()
        .map(|a| {
            let (latents, lp) = asr.run(a)?;
            let h = latents.cols();
            let speech = Tensor::new(vec![a.valid_length, h], latents.data()[..a.valid_length * h].to_vec())?;
            let decoded = crate::asr::greedy_decode(&lp);
            Ok((speech, snapper.words(phonetics, &decoded)))
        })
        .collect::<Result<_>>()?;
    let (speech, words) = out.into_iter().unzip();
    Ok(Transcriptions { speech, words })
}

fn audio_of(samples: &[GroundingSample]) -> Vec<&AudioFeatures> {
    samples.iter().map(|s| &s.audio).collect()
}

pub fn new_asr(config: &RunConfig, phonetics: &Phonetics) -> Result<AsrModel> {
    AsrModel::new(phonetics.inventory().dim(), phonetics.inventory().len(), config.asr.clone(), sample_seed(config.seed, "asr-init", 0))
}

/// Trains a fresh recogniser on a pretraining corpus: the training-split
/// commands re-rendered with independent durations and noise, so the
/// grounder's own training audio stays unseen by the recogniser.
pub fn train_asr_on(config: &RunConfig, phonetics: &Phonetics, train: &[GroundingSample]) -> Result<(AsrModel, Vec<AsrEpochLog>)> {
    let config = config.with_seed();
    let mut asr = new_asr(&config, phonetics)?;
    let corpus = asr_corpus(&config, phonetics, train)?;
    let examples = corpus
        .iter()
        .map(|(audio, label, words)| AsrExample {
            audio,
            label: label.clone(),
            words: words.clone(),
        })
        .collect::<Vec<_>>();
    let snapper = WordSnapper::new(phonetics, &config.command_words(), config.snap_threshold)?;
    let log = train_asr(&mut asr, &examples, &config.asr_train, phonetics, &snapper)?;
    Ok((asr, log))
}

type CorpusItem = (AudioFeatures, Vec<usize>, Vec<String>);

fn asr_corpus(config: &RunConfig, phonetics: &Phonetics, train: &[GroundingSample]) -> Result<Vec<CorpusItem>> {
    let n = train.len();
    (0..n * config.asr_renditions)
        .into_par_iter()
        .map(|i| {
            let s = &train[i % n];
            let seq = phonetics.text_to_phonemes(&s.command_text)?;
            let audio = synthesize_audio(&seq, phonetics.inventory(), config.dataset.noise_sigma, sample_seed(config.seed, "asr-corpus", i))?;
            Ok((audio, seq.ids, words(&s.command_text)))
        })
        .collect()
}

/// Grounder vocabulary: training sentences, class texts and predicate tokens.
pub fn grounder_vocab(config: &RunConfig, train: &[GroundingSample]) -> Vocab {
    let classes = config.dataset.vocabulary.class_names();
    Vocab::build(
        train
            .iter()
            .map(|s| s.command_text.as_str())
            .chain(classes.iter().map(String::as_str))
            .chain(PREDICATE_TOKENS),
    )
}

/// Which model input a variant sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    TextOnly,
    NoSpeech,
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::NoSpeech => "fusion-no-speech",
            Variant::Full => "fusion-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text-only" | "text" => Ok(Variant::TextOnly),
            "fusion-no-speech" | "no-speech" => Ok(Variant::NoSpeech),
            "fusion-full" | "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant {other:?} (text, no-speech, full)"))),
        }
    }

    fn uses_speech(self) -> bool {
        self == Variant::Full
    }

    fn trains_on_asr_text(self) -> bool {
        self != Variant::TextOnly
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Fresh grounder for `variant`; speech variants get a latent
/// standardisation fitted on `train_speech`.
pub fn new_grounder(config: &RunConfig, variant: Variant, vocab: Vocab, train_speech: &Transcriptions) -> Result<GrounderModel> {
    let gc = GrounderConfig {
        use_speech: variant.uses_speech(),
        ..config.grounder.clone()
    };
    let mut model = GrounderModel::new(gc, vocab, config.dataset.vocabulary.class_names(), sample_seed(config.seed, "grounder-init", variant.index()))?;
    if variant.uses_speech() {
        model.set_speech_norm(Some(SpeechNorm::fit(&train_speech.speech)?))?;
    }
    Ok(model)
}

/// Builds model inputs; `asr_words` replaces the ground-truth transcript when given.
pub fn examples(model: &GrounderModel, samples: &[GroundingSample], asr: Option<&Transcriptions>, use_asr_words: bool) -> Result<Vec<GroundingExample>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let speech = if model.config().use_speech {
                Some(&asr.ok_or_else(|| Error::Config("speech model needs ASR outputs".into()))?.speech[i])
            } else {
                None
            };
            let w = match (use_asr_words, asr) {
                (true, Some(t)) => t.words[i].clone(),
                (true, None) => return Err(Error::Config("ASR text requested without ASR outputs".into())),
                (false, _) => words(&s.command_text),
            };
            model.prepare(&s.scene_graph, speech, &w, Some(&s.target_class))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: String,
    /// `Z` decoded text, `Z*` ground-truth text, `Λ` speech (decoded text plus latents).
    pub input: String,
    /// Percent, or `None` when training diverged.
    pub accuracy: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub dataset_sha256: String,
    pub sigma: f64,
    pub test_wer: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn accuracy(&self, method: &str, input: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.input == input).and_then(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,sigma,dataset_sha256,test_wer,method,input,accuracy,status\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a:.2}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.3},{},{:.4},{},{},{},{}", self.seed, self.sigma, self.dataset_sha256, self.test_wer, r.method, r.input, acc, r.status);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Grounding ablation\n\n");
        let _ = writeln!(s, "- seed: {}", self.seed);
        let _ = writeln!(s, "- audio noise sigma: {:.3}", self.sigma);
        let _ = writeln!(s, "- test word error rate: {:.2} %", 100.0 * self.test_wer);
        let _ = writeln!(s, "- dataset sha256: `{}`\n", self.dataset_sha256);
        s.push_str("| method | input | accuracy (%) |\n|---|---|---|\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a:.2}")).unwrap_or_else(|| r.status.clone());
            let _ = writeln!(s, "| {} | {} | {} |", r.method, r.input, acc);
        }
        s
    }
}

/// Loads `out/dataset.jsonl` if present, otherwise generates and writes it.
/// Training always uses the re-read file so every variant sees the same bytes.
pub fn dataset_for(config: &RunConfig, phonetics: &Phonetics, out: &Path) -> Result<(Dataset, String)> {
    let path = out.join("dataset.jsonl");
    let cfg = config.with_seed();
    if !path.exists() {
        let ds = build_dataset(&cfg.dataset, phonetics)?;
        ds.write_jsonl(&path)?;
    }
    Ok((Dataset::read_jsonl(&path)?, file_sha256(&path)?))
}

fn train_variant(
    config: &RunConfig,
    variant: Variant,
    vocab: &Vocab,
    ds: &Dataset,
    asr_train: &Transcriptions,
    asr_test: &Transcriptions,
    out: &Path,
) -> Result<GrounderModel> {
    let cfg = config.with_seed();
    let mut model = new_grounder(&cfg, variant, vocab.clone(), asr_train)?;
    let asr_words = variant.trains_on_asr_text();
    let train = examples(&model, &ds.train, Some(asr_train), asr_words)?;
    let test = examples(&model, &ds.test, Some(asr_test), asr_words)?;
    let train_cfg = GrounderTrainConfig {
        seed: sample_seed(cfg.seed, "grounder-shuffle", variant.index()),
        ..cfg.grounder_train.clone()
    };
    let log = train_grounder(&mut model, &train, &test, &train_cfg)?;
    write_grounder_log(&log, fs::File::create(out.join(format!("{}_log.csv", variant.name())))?)?;
    model.save(out, &format!("grounder_{}", variant.name()))?;
    Ok(model)
}

/// Trains the recogniser and the enabled variants on one dataset and
/// writes `report.md` and `report.csv` to `out`.
pub fn run_ablation(config: &RunConfig, out: &Path) -> Result<AblationReport> {
    config.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(config)?)?;
    let phonetics = config.phonetic_model()?;
    let (ds, hash) = dataset_for(config, &phonetics, out)?;

    let (asr, asr_log) = train_asr_on(config, &phonetics, &ds.train)?;
    write_asr_log(&asr_log, fs::File::create(out.join("asr_log.csv"))?)?;
    save_asr(&asr, out)?;
    let snapper = WordSnapper::new(&phonetics, &config.command_words(), config.snap_threshold)?;
    let asr_train = transcribe(&asr, &phonetics, &snapper, &audio_of(&ds.train))?;
    let asr_test = transcribe(&asr, &phonetics, &snapper, &audio_of(&ds.test))?;
    let vocab = grounder_vocab(config, &ds.train);

    let mut rows = Vec::new();
    let mut push = |method: &str, input: &str, result: Result<f64>| {
        let (accuracy, status) = match result {
            Ok(a) => (Some(100.0 * a), "ok".to_string()),
            Err(e) => (None, format!("failed: {e}").replace(',', ";")),
        };
        rows.push(AblationRow {
            method: method.to_string(),
            input: input.to_string(),
            accuracy,
            status,
        });
    };
    if config.variants.text_only {
        let v = Variant::TextOnly;
        match train_variant(config, v, &vocab, &ds, &asr_train, &asr_test, out) {
            Ok(model) => {
                let on_asr = examples(&model, &ds.test, Some(&asr_test), true).and_then(|e| model.evaluate(&e, false));
                let on_gt = examples(&model, &ds.test, None, false).and_then(|e| model.evaluate(&e, false));
                push(v.name(), "Z", on_asr.map(|r| r.0));
                push(v.name(), "Z*", on_gt.map(|r| r.0));
            }
            Err(e) => {
                let msg = e.to_string();
                push(v.name(), "Z", Err(Error::Diverged { context: msg.clone() }));
                push(v.name(), "Z*", Err(Error::Diverged { context: msg }));
            }
        }
    }
    for (flag, v) in [(config.variants.no_speech, Variant::NoSpeech), (config.variants.full, Variant::Full)] {
        if !flag {
            continue;
        }
        let acc = train_variant(config, v, &vocab, &ds, &asr_train, &asr_test, out)
            .and_then(|model| examples(&model, &ds.test, Some(&asr_test), true).and_then(|e| model.evaluate(&e, false)))
            .map(|r| r.0);
        push(v.name(), "Λ", acc);
    }

    let report = AblationReport {
        seed: config.seed,
        dataset_sha256: hash,
        sigma: config.dataset.noise_sigma,
        test_wer: asr_test.word_error_rate(&ds.test),
        rows,
    };
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.md"), report.to_markdown())?;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct AsrMeta {
    config: AsrConfig,
    input_dim: usize,
    num_outputs: usize,
}

pub fn save_asr(asr: &AsrModel, out: &Path) -> Result<()> {
    asr.save(out.join("asr.gkpt"))?;
    let meta = AsrMeta {
        config: asr.config().clone(),
        input_dim: asr.params.tensors()[0].rows() / asr.config().kernel,
        num_outputs: asr.num_outputs(),
    };
    fs::write(out.join("asr.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_asr(dir: &Path) -> Result<AsrModel> {
    let meta: AsrMeta = serde_json::from_str(&fs::read_to_string(dir.join("asr.json"))?)?;
    AsrModel::load(dir.join("asr.gkpt"), meta.input_dim, meta.num_outputs, meta.config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaPoint {
    pub word: String,
    pub group: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaReport {
    pub points: Vec<PcaPoint>,
    pub explained_variance: [f64; 2],
    /// Mean intra-group over mean inter-group distance in the 2-D projection.
    pub clustering_ratio: f64,
}

/// Number of clean renditions averaged per probe word.
pub const PCA_RENDITIONS: usize = 4;

/// Mean-pooled latent of a clean rendition of every word, averaged over a
/// few duration draws, projected onto the top two principal components.
pub fn run_pca_report(asr: &AsrModel, phonetics: &Phonetics, groups: &[(String, Vec<String>)]) -> Result<PcaReport> {
    let items: Vec<(&str, &str)> = groups.iter().flat_map(|(g, ws)| ws.iter().map(move |w| (w.as_str(), g.as_str()))).collect();
    if items.len() < 3 {
        return Err(Error::Config("the PCA report needs at least 3 words".into()));
    }
    let rows = items
        .par_iter()
        .map(|(word, _)| {
            let seq = phonetics.text_to_phonemes(word)?;
            let mut mean = vec![0.0; asr.hidden()];
            for r in 0..PCA_RENDITIONS {
                let audio = synthesize_audio(&seq, phonetics.inventory(), 0.0, r as u64)?;
                let pooled = pool_speech(&asr.encode(&audio)?, audio.valid_length.max(1))?;
                mean.iter_mut().zip(&pooled).for_each(|(m, p)| *m += p / PCA_RENDITIONS as f64);
            }
            Ok(mean)
        })
        .collect::<Result<Vec<_>>>()?;
    let pca = numcore::pca_top2(&Tensor::from_rows(&rows)?)?;
    let points: Vec<PcaPoint> = items
        .iter()
        .enumerate()
        .map(|(i, (w, g))| PcaPoint {
            word: w.to_string(),
            group: g.to_string(),
            x: pca.projections.at(i, 0),
            y: pca.projections.at(i, 1),
        })
        .collect();
    Ok(PcaReport {
        clustering_ratio: clustering_ratio(&points),
        explained_variance: pca.explained_variance,
        points,
    })
}

pub fn clustering_ratio(points: &[PcaPoint]) -> f64 {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i].x - points[j].x).hypot(points[i].y - points[j].y);
            if points[i].group == points[j].group {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64) / (inter / n_inter.max(1) as f64)
}

impl PcaReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("word,group,pc1,pc2\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", p.word, p.group, p.x, p.y);
        }
        s
    }

    /// Scatter plot, one colour per group.
    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let (w, h, m) = (640.0, 480.0, 40.0);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
        let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
        let mut groups: Vec<&str> = self.points.iter().map(|p| p.group.as_str()).collect();
        groups.dedup();
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n");
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        let _ = writeln!(s, "<text x=\"{m}\" y=\"20\" font-size=\"13\">Word latents, first two principal components</text>");
        for p in &self.points {
            let color = PALETTE[groups.iter().position(|g| *g == p.group).unwrap_or(0) % PALETTE.len()];
            let (cx, cy) = (sx(p.x), sy(p.y));
            let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"{color}\"/>");
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{color}\">{}</text>", cx + 5.0, cy - 3.0, p.word);
        }
        for (i, g) in groups.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = 40.0 + 14.0 * i as f64;
            let _ = writeln!(s, "<circle cx=\"{:.0}\" cy=\"{y}\" r=\"4\" fill=\"{color}\"/><text x=\"{:.0}\" y=\"{:.0}\">{g}-</text>", w - 70.0, w - 60.0, y + 4.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn default_pca_groups() -> Vec<(String, Vec<String>)> {
    default_probe_groups()
}

/// What the user said, for [`run_ground_once`].
pub enum Utterance {
    Audio(AudioFeatures),
    /// Rendered as clean audio when a recogniser is available, used verbatim otherwise.
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundOnce {
    pub predicted_class: String,
    pub transcript: Vec<String>,
    pub distribution: Vec<(String, f64)>,
}

/// Single-shot inference from a detection list and an utterance.
pub fn run_ground_once(
    grounder: &GrounderModel,
    asr: Option<&AsrModel>,
    phonetics: &Phonetics,
    snapper: &WordSnapper,
    world: &WorldModel,
    utterance: Utterance,
    epsilon: f64,
) -> Result<GroundOnce> {
    let graph = build_scene_graph(world, epsilon)?;
    let audio = match utterance {
        Utterance::Audio(a) => Some(a),
        Utterance::Text(t) if asr.is_some() => Some(synthesize_audio(&phonetics.text_to_phonemes(&t)?, phonetics.inventory(), 0.0, 0)?),
        Utterance::Text(t) => {
            if grounder.config().use_speech {
                return Err(Error::Config("this grounder needs speech latents; provide an ASR checkpoint".into()));
            }
            return finish(grounder, &graph, None, words(&t));
        }
    };
    let audio = audio.expect("audio set above");
    let asr = asr.ok_or_else(|| Error::Config("audio input needs an ASR checkpoint".into()))?;
    let t = transcribe(asr, phonetics, snapper, &[&audio])?;
    let speech = grounder.config().use_speech.then(|| &t.speech[0]);
    finish(grounder, &graph, speech, t.words[0].clone())
}

fn finish(grounder: &GrounderModel, graph: &crate::scenegraph::SceneGraph, speech: Option<&Tensor>, transcript: Vec<String>) -> Result<GroundOnce> {
    let Prediction { class, probabilities, .. } = grounder.ground(graph, speech, &transcript)?;
    Ok(GroundOnce {
        predicted_class: class,
        transcript,
        distribution: grounder.classes().iter().cloned().zip(probabilities).collect(),
    })
}
