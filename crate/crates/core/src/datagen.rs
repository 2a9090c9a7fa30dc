//! Synthetic grounding dataset: templated commands, random scene graphs
//! with distractors, train/test splitting and surrogate audio.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phonetics::{synthesize_audio, AudioFeatures, Phonetics};
use crate::scenegraph::{build_scene_graph, ObjectRecord, SceneGraph, WorldModel, DEFAULT_EPSILON};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandTemplate {
    pub verbs: Vec<String>,
    pub prepositions: Vec<String>,
    /// Render as "object preposition verb" instead of "verb preposition object".
    #[serde(default)]
    pub object_first: bool,
}

impl Default for CommandTemplate {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            verbs: s(&["go", "move", "walk", "head", "run", "come", "drive", "step"]),
            prepositions: s(&["to", "toward", "near", "by", "past", "around"]),
            object_first: false,
        }
    }
}

impl CommandTemplate {
    pub fn render(&self, verb: &str, preposition: &str, name: &str) -> String {
        if self.object_first {
            format!("{name} {preposition} {verb}")
        } else {
            format!("{verb} {preposition} {name}")
        }
    }

    pub fn combinations(&self) -> usize {
        self.verbs.len() * self.prepositions.len()
    }
}

/// One target class with its spoken names, partitioned for name-disjoint
/// splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassNames {
    /// Node text of objects of this class, e.g. "red box".
    pub class: String,
    pub train_names: Vec<String>,
    pub test_names: Vec<String>,
}

impl ClassNames {
    pub fn all_names(&self) -> impl Iterator<Item = &String> {
        self.train_names.iter().chain(&self.test_names)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectVocabulary {
    pub classes: Vec<ClassNames>,
}

impl Default for ObjectVocabulary {
    fn default() -> Self {
        let c = |class: &str, train: &[&str], test: &[&str]| ClassNames {
            class: class.to_string(),
            train_names: train.iter().map(|s| s.to_string()).collect(),
            test_names: test.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            classes: vec![
                c("bicycle", &["bicycle", "bike"], &["cycle"]),
                c("sign", &["sign", "signboard", "poster"], &["placard"]),
                c("desk", &["desk", "table", "stand"], &["bench"]),
                c("door", &["door", "gate", "doorway"], &["entrance"]),
                c("window", &["window", "pane"], &["glass"]),
                c("red box", &["red box", "red crate"], &["red case"]),
                c("blue box", &["blue box", "blue crate"], &["blue case"]),
                c("black box", &["black box", "black crate"], &["black case"]),
                c("car", &["car", "auto", "vehicle", "sedan"], &["van"]),
                c("suitcase", &["suitcase", "luggage"], &["bag"]),
            ],
        }
    }
}

impl ObjectVocabulary {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class.clone()).collect()
    }

    pub fn validate(&self, mode: SplitMode) -> Result<()> {
        if self.classes.len() < 3 {
            return Err(Error::Config("the object vocabulary needs at least 3 classes".into()));
        }
        let mut classes = HashSet::new();
        let mut names = HashSet::new();
        for c in &self.classes {
            if !classes.insert(c.class.as_str()) {
                return Err(Error::Config(format!("duplicate class {:?}", c.class)));
            }
            if c.class.split_whitespace().count() == 0 {
                return Err(Error::Config("empty class name".into()));
            }
            for n in c.all_names() {
                if !names.insert(n.as_str()) {
                    return Err(Error::Config(format!("object name {n:?} is used twice")));
                }
            }
            let ok = match mode {
                SplitMode::Name => !c.train_names.is_empty() && !c.test_names.is_empty(),
                SplitMode::Utterance => c.all_names().next().is_some(),
            };
            if !ok {
                return Err(Error::Config(format!("class {:?} lacks names for {mode:?} splitting", c.class)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Test object names never occur in training.
    Name,
    /// Names are shared; test sentences never occur in training.
    Utterance,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "name" => Ok(Self::Name),
            "utterance" => Ok(Self::Utterance),
            other => Err(Error::Config(format!("unknown split mode {other:?} (expected name or utterance)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub text: String,
    pub name: String,
    pub class: String,
}

/// `count_per_name` distinct verb–preposition combinations for every name,
/// sampled without replacement.
pub fn generate_commands(vocab: &ObjectVocabulary, template: &CommandTemplate, count_per_name: usize, seed: u64) -> Result<Vec<Command>> {
    if template.verbs.is_empty() || template.prepositions.is_empty() {
        return Err(Error::Config("command template needs verbs and prepositions".into()));
    }
    if count_per_name > template.combinations() {
        return Err(Error::Config(format!(
            "{count_per_name} commands per name exceed the {} verb-preposition combinations",
            template.combinations()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in &vocab.classes {
        for name in c.all_names() {
            let mut combos: Vec<(usize, usize)> = (0..template.verbs.len())
                .flat_map(|v| (0..template.prepositions.len()).map(move |p| (v, p)))
                .collect();
            combos.shuffle(&mut rng);
            for &(v, p) in &combos[..count_per_name] {
                out.push(Command {
                    text: template.render(&template.verbs[v], &template.prepositions[p], name),
                    name: name.clone(),
                    class: c.class.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn record_for(id: String, class: &str, position: [f64; 3]) -> ObjectRecord {
    let mut words: Vec<&str> = class.split_whitespace().collect();
    let head = words.pop().unwrap_or_default().to_string();
    ObjectRecord {
        id,
        class_name: head,
        attributes: words.into_iter().map(str::to_string).collect(),
        position,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledScene {
    pub objects: Vec<ObjectRecord>,
    pub graph: SceneGraph,
    pub target_node_id: String,
}

/// Target object plus `U{min..=max}` distractors of other distinct classes,
/// uniformly placed in `[−5, 5]²` at z = 0, with shuffled ids.
pub fn sample_scene_graph(
    classes: &[String],
    target_class: &str,
    distractors: (usize, usize),
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<SampledScene> {
    let others: Vec<&String> = classes.iter().filter(|c| *c != target_class).collect();
    if classes.len() < 3 || others.len() == classes.len() {
        return Err(Error::Config(format!("need at least 3 classes including {target_class:?}")));
    }
    let (lo, hi) = distractors;
    if lo > hi || hi > others.len() {
        return Err(Error::Config(format!("cannot draw {lo}..={hi} distractors from {} other classes", others.len())));
    }
    let k = rng.random_range(lo..=hi);
    let mut chosen: Vec<&str> = vec![target_class];
    chosen.extend(others.choose_multiple(rng, k).map(|c| c.as_str()));
    let mut ids: Vec<usize> = (0..chosen.len()).collect();
    ids.shuffle(rng);
    let objects: Vec<ObjectRecord> = chosen
        .iter()
        .zip(&ids)
        .map(|(class, id)| {
            let pos = [rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0), 0.0];
            record_for(format!("obj{id}"), class, pos)
        })
        .collect();
    let world: WorldModel = objects.iter().cloned().collect();
    let graph = build_scene_graph(&world, epsilon)?;
    Ok(SampledScene {
        target_node_id: objects[0].id.clone(),
        objects,
        graph,
    })
}

/// Sorted `(class text, x, y)` with positions quantised to 0.1 m.
pub fn graph_signature(objects: &[ObjectRecord]) -> Vec<(String, i64, i64)> {
    let mut sig: Vec<(String, i64, i64)> = objects
        .iter()
        .map(|o| (o.feature_text(), (o.position[0] / 0.1).round() as i64, (o.position[1] / 0.1).round() as i64))
        .collect();
    sig.sort();
    sig
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub split: String,
    pub index: usize,
    pub command_text: String,
    pub object_name: String,
    pub target_class: String,
    pub target_node_id: String,
    pub objects: Vec<ObjectRecord>,
    pub scene_graph: SceneGraph,
    pub audio: AudioFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub vocabulary: ObjectVocabulary,
    pub template: CommandTemplate,
    pub commands_per_name: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub split_mode: SplitMode,
    /// Share of each name's sentences held out in utterance-disjoint mode.
    pub test_sentence_fraction: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub epsilon: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            vocabulary: ObjectVocabulary::default(),
            template: CommandTemplate::default(),
            commands_per_name: 40,
            train_size: 1200,
            test_size: 400,
            noise_sigma: 0.0,
            seed: 0,
            split_mode: SplitMode::Utterance,
            test_sentence_fraction: 0.25,
            min_distractors: 2,
            max_distractors: 8,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<GroundingSample>,
    pub test: Vec<GroundingSample>,
}

/// Deterministic seed for item `index` of the stream named `stream`
/// (a split name, or a model role) under the master seed.
pub fn sample_seed(master: u64, stream: &str, index: usize) -> u64 {
    let tag = stream.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| splitmix64(h ^ u64::from(b)));
    splitmix64(splitmix64(master ^ tag) ^ index as u64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sentence pools per class for both splits.
fn sentence_pools(config: &DatasetConfig, commands: &[Command]) -> Result<(BTreeMap<String, Vec<Command>>, BTreeMap<String, Vec<Command>>)> {
    let mut train: BTreeMap<String, Vec<Command>> = BTreeMap::new();
    let mut test: BTreeMap<String, Vec<Command>> = BTreeMap::new();
    match config.split_mode {
        SplitMode::Name => {
            for c in &config.vocabulary.classes {
                for cmd in commands.iter().filter(|cmd| cmd.class == c.class) {
                    let pool = if c.train_names.contains(&cmd.name) { &mut train } else { &mut test };
                    pool.entry(c.class.clone()).or_default().push(cmd.clone());
                }
            }
        }
        SplitMode::Utterance => {
            if !(config.test_sentence_fraction > 0.0 && config.test_sentence_fraction < 1.0) {
                return Err(Error::Config("test_sentence_fraction must lie strictly between 0 and 1".into()));
            }
            let per_name = config.commands_per_name;
            let held_out = ((per_name as f64 * config.test_sentence_fraction).round() as usize).clamp(1, per_name.saturating_sub(1));
            if per_name < 2 {
                return Err(Error::Config("utterance-disjoint splitting needs at least 2 commands per name".into()));
            }
            // Commands are grouped by name in generation order.
            for chunk in commands.chunks(per_name) {
                let class = chunk[0].class.clone();
                train.entry(class.clone()).or_default().extend_from_slice(&chunk[held_out..]);
                test.entry(class).or_default().extend_from_slice(&chunk[..held_out]);
            }
        }
    }
    Ok((train, test))
}

/// Generates both splits. Sample `i` of a split targets class `i mod C`;
/// everything else about it is drawn from its own seed, so the result does
/// not depend on thread count.
pub fn build_dataset(config: &DatasetConfig, phonetics: &Phonetics) -> Result<Dataset> {
    config.vocabulary.validate(config.split_mode)?;
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {}", config.noise_sigma)));
    }
    let commands = generate_commands(&config.vocabulary, &config.template, config.commands_per_name, config.seed)?;
    for cmd in &commands {
        phonetics.text_to_phonemes(&cmd.text)?;
    }
    let (train_pool, test_pool) = sentence_pools(config, &commands)?;
    let classes = config.vocabulary.class_names();
    let build = |split: &str, size: usize, pool: &BTreeMap<String, Vec<Command>>| -> Result<Vec<GroundingSample>> {
        (0..size)
            .into_par_iter()
            .map(|index| {
                let class = &classes[index % classes.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, split, index));
                let cmds = pool
                    .get(class)
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| Error::Config(format!("no {split} sentences for class {class:?}")))?;
                let cmd = cmds.choose(&mut rng).expect("non-empty pool");
                let scene = sample_scene_graph(&classes, class, (config.min_distractors, config.max_distractors), config.epsilon, &mut rng)?;
                let seq = phonetics.text_to_phonemes(&cmd.text)?;
                let audio = synthesize_audio(&seq, phonetics.inventory(), config.noise_sigma, rng.random())?;
                Ok(GroundingSample {
                    split: split.to_string(),
                    index,
                    command_text: cmd.text.clone(),
                    object_name: cmd.name.clone(),
                    target_class: class.clone(),
                    target_node_id: scene.target_node_id,
                    objects: scene.objects,
                    scene_graph: scene.graph,
                    audio,
                })
            })
            .collect()
    };
    let dataset = Dataset {
        train: build("train", config.train_size, &train_pool)?,
        test: build("test", config.test_size, &test_pool)?,
    };
    for s in dataset.train.iter().chain(&dataset.test) {
        lint_sample(s)?;
    }
    Ok(dataset)
}

/// Checks the invariants every stored sample must satisfy.
pub fn lint_sample(s: &GroundingSample) -> Result<()> {
    let fail = |msg: String| Err(Error::Dataset(format!("{} sample {}: {msg}", s.split, s.index)));
    s.scene_graph.validate()?;
    s.audio.validate()?;
    let matching: Vec<_> = s.scene_graph.nodes.iter().filter(|n| n.text == s.target_class).collect();
    if matching.len() != 1 {
        return fail(format!("target class {:?} occurs {} times", s.target_class, matching.len()));
    }
    if matching[0].id != s.target_node_id {
        return fail("target node id does not carry the target class".into());
    }
    let mut texts: Vec<&str> = s.scene_graph.nodes.iter().map(|n| n.text.as_str()).collect();
    texts.sort_unstable();
    if texts.windows(2).any(|w| w[0] == w[1]) {
        return fail("a class occurs more than once".into());
    }
    if !s.command_text.split_whitespace().collect::<Vec<_>>().windows(s.object_name.split_whitespace().count()).any(|w| w.join(" ") == s.object_name) {
        return fail(format!("command {:?} does not mention {:?}", s.command_text, s.object_name));
    }
    let world: WorldModel = s.objects.iter().cloned().collect();
    if world.len() != s.scene_graph.len() {
        return fail("object list and graph disagree".into());
    }
    Ok(())
}

impl Dataset {
    /// JSON Lines: training samples, then test samples.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for s in self.train.iter().chain(&self.test) {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut ds = Dataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: GroundingSample = serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            lint_sample(&s)?;
            match s.split.as_str() {
                "train" => ds.train.push(s),
                "test" => ds.test.push(s),
                other => return Err(Error::Dataset(format!("line {}: unknown split {other:?}", n + 1))),
            }
        }
        Ok(ds)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_counts() {
        let vocab = ObjectVocabulary::default();
        let one = CommandTemplate {
            verbs: vec!["go".into()],
            prepositions: vec!["to".into()],
            object_first: false,
        };
        let cmds = generate_commands(&vocab, &one, 1, 0).unwrap();
        assert_eq!(cmds.len(), 35);
        assert_eq!(cmds[0].text, "go to bicycle");
        let t = CommandTemplate::default();
        let full = generate_commands(&vocab, &t, t.combinations(), 0).unwrap();
        assert_eq!(full.len(), 35 * 48);
        assert!(generate_commands(&vocab, &t, 49, 0).is_err());
        let mut seen = HashSet::new();
        for c in generate_commands(&vocab, &t, 40, 3).unwrap() {
            assert!(seen.insert(c.text.clone()), "duplicate {}", c.text);
        }
    }

    #[test]
    fn scene_graph_extremes() {
        let classes = ObjectVocabulary::default().class_names();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let min = sample_scene_graph(&classes, "car", (2, 2), 0.05, &mut rng).unwrap();
        assert_eq!((min.graph.nodes.len(), min.graph.edges.len()), (3, 6));
        let max = sample_scene_graph(&classes, "car", (8, 8), 0.05, &mut rng).unwrap();
        assert_eq!((max.graph.nodes.len(), max.graph.edges.len()), (9, 72));
        assert!(sample_scene_graph(&classes, "car", (2, 10), 0.05, &mut rng).is_err());
        assert!(sample_scene_graph(&classes[..2], "car", (1, 1), 0.05, &mut rng).is_err());
        let red = max.objects.iter().find(|o| o.feature_text() == "red box").unwrap();
        assert_eq!((red.class_name.as_str(), red.attributes.as_slice()), ("box", &["red".to_string()][..]));
    }

    #[test]
    fn split_mode_parsing() {
        assert_eq!("name".parse::<SplitMode>().unwrap(), SplitMode::Name);
        assert_eq!(serde_json::to_string(&SplitMode::Utterance).unwrap(), "\"utterance\"");
        assert!("both".parse::<SplitMode>().is_err());
    }

    #[test]
    fn vocabulary_validation() {
        let mut v = ObjectVocabulary::default();
        v.validate(SplitMode::Name).unwrap();
        v.classes[0].test_names.clear();
        assert!(v.validate(SplitMode::Name).is_err());
        v.validate(SplitMode::Utterance).unwrap();
        v.classes[1].train_names.push("bike".into());
        assert!(v.validate(SplitMode::Utterance).is_err());
    }
}
