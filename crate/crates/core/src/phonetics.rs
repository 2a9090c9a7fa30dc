//! Articulatory phoneme model, lexicon, surrogate audio synthesis and the
//! acoustic similarity metric.
//!
//! Every phoneme carries a small articulatory feature vector (voicing,
//! place, manner, vowel height and backness, plus a pause flag). Audio is
//! synthesised by holding each phoneme's feature vector for a random
//! number of frames and adding Gaussian noise, so phonemes that share
//! features produce nearby frames. Index 0 is the CTC blank and has the
//! all-zero feature vector, which is also what padding frames contain.

use std::collections::{BTreeMap, HashMap, HashSet};

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed utterance length in frames.
pub const FRAMES: usize = 126;
pub const BLANK: usize = 0;
pub const BLANK_SYMBOL: &str = "<b>";
/// Symbol of the word-boundary pause phoneme.
pub const PAUSE_SYMBOL: &str = "_";
pub const MIN_DURATION: usize = 2;
pub const MAX_DURATION: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeEntry {
    pub symbol: String,
    pub features: Vec<f64>,
}

/// JSON form of a [`Phonetics`] model. The blank is implicit and must not
/// be listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneticsDoc {
    pub phonemes: Vec<PhonemeEntry>,
    pub lexicon: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    features: Vec<Vec<f64>>,
    pause: usize,
}

impl PhonemeInventory {
    pub fn new(entries: &[PhonemeEntry]) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.features.len())
            .ok_or_else(|| Error::InvalidPhonetics("empty inventory".into()))?;
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        let mut features = vec![vec![0.0; dim]];
        let mut seen = HashSet::new();
        for e in entries {
            if e.symbol == BLANK_SYMBOL || !seen.insert(e.symbol.clone()) {
                return Err(Error::InvalidPhonetics(format!("duplicate or reserved symbol {:?}", e.symbol)));
            }
            if e.features.len() != dim {
                return Err(Error::InvalidPhonetics(format!("{:?} has {} features, expected {dim}", e.symbol, e.features.len())));
            }
            if e.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidPhonetics(format!("{:?} has features outside [0, 1]", e.symbol)));
            }
            if features.contains(&e.features) {
                return Err(Error::InvalidPhonetics(format!("{:?} duplicates another feature vector", e.symbol)));
            }
            symbols.push(e.symbol.clone());
            features.push(e.features.clone());
        }
        let pause = symbols
            .iter()
            .position(|s| s == PAUSE_SYMBOL)
            .ok_or_else(|| Error::InvalidPhonetics(format!("inventory lacks the pause symbol {PAUSE_SYMBOL:?}")))?;
        Ok(Self { symbols, features, pause })
    }

    /// Number of symbols including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn features(&self, id: usize) -> &[f64] {
        &self.features[id]
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn pause(&self) -> usize {
        self.pause
    }

    pub fn entries(&self) -> Vec<PhonemeEntry> {
        self.symbols
            .iter()
            .zip(&self.features)
            .skip(1)
            .map(|(s, f)| PhonemeEntry {
                symbol: s.clone(),
                features: f.clone(),
            })
            .collect()
    }

    fn feature_distance(&self, a: usize, b: usize) -> f64 {
        self.features[a]
            .iter()
            .zip(&self.features[b])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn indel_cost(&self, a: usize) -> f64 {
        self.features[a].iter().map(|x| x * x).sum::<f64>().sqrt() + 0.5
    }
}

/// A phoneme string (blank excluded) and the text it was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub source: String,
}

/// Inventory plus pronunciation lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct Phonetics {
    inventory: PhonemeInventory,
    lexicon: BTreeMap<String, Vec<usize>>,
}

impl Phonetics {
    pub fn from_doc(doc: &PhoneticsDoc) -> Result<Self> {
        let inventory = PhonemeInventory::new(&doc.phonemes)?;
        let mut lexicon = BTreeMap::new();
        let mut pronunciations: HashMap<Vec<usize>, &str> = HashMap::new();
        for (word, symbols) in &doc.lexicon {
            if word.is_empty() || word.contains(char::is_whitespace) || symbols.is_empty() {
                return Err(Error::InvalidPhonetics(format!("bad lexicon entry {word:?}")));
            }
            let ids = symbols
                .iter()
                .map(|s| {
                    inventory
                        .id_of(s)
                        .filter(|&id| id != BLANK && id != inventory.pause())
                        .ok_or_else(|| Error::InvalidPhonetics(format!("{word:?} uses unknown phoneme {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidPhonetics(format!("{word:?} repeats a phoneme back to back")));
            }
            if let Some(other) = pronunciations.insert(ids.clone(), word) {
                return Err(Error::InvalidPhonetics(format!("{word:?} and {other:?} share a pronunciation")));
            }
            lexicon.insert(word.clone(), ids);
        }
        Ok(Self { inventory, lexicon })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }

    pub fn to_doc(&self) -> PhoneticsDoc {
        PhoneticsDoc {
            phonemes: self.inventory.entries(),
            lexicon: self
                .lexicon
                .iter()
                .map(|(w, ids)| (w.clone(), ids.iter().map(|&i| self.inventory.symbol(i).to_string()).collect()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.lexicon.keys().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.lexicon.contains_key(word)
    }

    pub fn pronunciation(&self, word: &str) -> Result<&[usize]> {
        self.lexicon
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    /// Concatenates word pronunciations with a pause between words.
    pub fn text_to_phonemes(&self, text: &str) -> Result<PhonemeSequence> {
        let mut ids = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                ids.push(self.inventory.pause());
            }
            ids.extend_from_slice(self.pronunciation(word)?);
        }
        Ok(PhonemeSequence {
            ids,
            source: text.to_string(),
        })
    }

    /// Space-separated phoneme symbols.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.inventory.symbol(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn distance(&self, a: &[usize], b: &[usize]) -> f64 {
        acoustic_distance(&self.inventory, a, b)
    }
}

/// Synthetic acoustic frames for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "AudioRepr", try_from = "AudioRepr")]
pub struct AudioFeatures {
    /// `FRAMES × dim` matrix; rows from `valid_length` on are zero.
    pub frames: Tensor,
    pub valid_length: usize,
}

#[derive(Serialize, Deserialize)]
struct AudioRepr {
    frames: Vec<Vec<f64>>,
    valid_length: usize,
}

impl From<AudioFeatures> for AudioRepr {
    fn from(a: AudioFeatures) -> Self {
        Self {
            frames: (0..a.frames.rows()).map(|i| a.frames.row(i).to_vec()).collect(),
            valid_length: a.valid_length,
        }
    }
}

impl TryFrom<AudioRepr> for AudioFeatures {
    type Error = Error;

    fn try_from(r: AudioRepr) -> Result<Self> {
        let frames = Tensor::from_rows(&r.frames)?;
        let audio = AudioFeatures {
            frames,
            valid_length: r.valid_length,
        };
        audio.validate()?;
        Ok(audio)
    }
}

impl AudioFeatures {
    pub fn silence(dim: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[FRAMES, dim]),
            valid_length: 0,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rank() != 2 || self.num_frames() != FRAMES {
            return Err(Error::WrongFrameCount {
                expected: FRAMES,
                actual: self.frames.rows(),
            });
        }
        if self.valid_length > FRAMES || !self.frames.is_finite() {
            return Err(Error::Dataset("audio frames are not finite or valid_length exceeds T".into()));
        }
        let tail = &self.frames.data()[self.valid_length * self.frames.cols()..];
        if tail.iter().any(|&v| v != 0.0) {
            return Err(Error::Dataset("padding frames must be zero".into()));
        }
        Ok(())
    }
}

/// Renders `seq` as frames: each phoneme holds its feature vector for a
/// uniformly drawn duration in `[2, 5]` frames, then `N(0, σ²)` noise is
/// added to every spoken frame. Deterministic in `seed`.
pub fn synthesize_audio(seq: &PhonemeSequence, inventory: &PhonemeInventory, noise_sigma: f64, seed: u64) -> Result<AudioFeatures> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let durations: Vec<usize> = seq.ids.iter().map(|_| rng.random_range(MIN_DURATION..=MAX_DURATION)).collect();
    let total: usize = durations.iter().sum();
    if total > FRAMES {
        return Err(Error::SequenceTooLong {
            needed: total,
            available: FRAMES,
        });
    }
    let dim = inventory.dim();
    let mut frames = Tensor::zeros(&[FRAMES, dim]);
    let data = frames.data_mut();
    let mut t = 0;
    for (&id, &dur) in seq.ids.iter().zip(&durations) {
        for _ in 0..dur {
            data[t * dim..(t + 1) * dim].copy_from_slice(inventory.features(id));
            t += 1;
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma validated");
        for v in &mut data[..total * dim] {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(AudioFeatures {
        frames,
        valid_length: total,
    })
}

/// Weighted edit distance between phoneme strings: substitution costs the
/// Euclidean distance between feature vectors, insertion and deletion cost
/// the feature norm plus 0.5.
pub fn acoustic_distance(inventory: &PhonemeInventory, a: &[usize], b: &[usize]) -> f64 {
    let mut prev: Vec<f64> = Vec::with_capacity(b.len() + 1);
    prev.push(0.0);
    for &pb in b {
        let last = *prev.last().unwrap();
        prev.push(last + inventory.indel_cost(pb));
    }
    let mut cur = vec![0.0; b.len() + 1];
    for &pa in a {
        cur[0] = prev[0] + inventory.indel_cost(pa);
        for (j, &pb) in b.iter().enumerate() {
            let sub = prev[j] + inventory.feature_distance(pa, pb);
            let del = prev[j + 1] + inventory.indel_cost(pa);
            let ins = cur[j] + inventory.indel_cost(pb);
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusablePair {
    pub first: String,
    pub second: String,
    pub distance: f64,
}

/// The `k` closest distinct word pairs, ordered by distance and then
/// lexicographically by `(first, second)` with `first < second`.
pub fn confusable_pairs(phonetics: &Phonetics, vocabulary: &[&str], k: usize) -> Result<Vec<ConfusablePair>> {
    let mut words: Vec<&str> = vocabulary.to_vec();
    words.sort_unstable();
    words.dedup();
    if words.len() < 2 {
        return Err(Error::Config("confusable_pairs needs at least two distinct words".into()));
    }
    let prons = words
        .iter()
        .map(|w| phonetics.pronunciation(w))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(words.len() * (words.len() - 1) / 2);
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            pairs.push(ConfusablePair {
                first: words[i].to_string(),
                second: words[j].to_string(),
                distance: phonetics.distance(prons[i], prons[j]),
            });
        }
    }
    pairs.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.first.cmp(&b.first))
            .then_with(|| a.second.cmp(&b.second))
    });
    pairs.truncate(k);
    Ok(pairs)
}

mod defaults {
    use super::*;

    // voicing | labial coronal postalveolar velar glottal | stop fricative nasal approximant vowel | height backness | pause
    fn consonant(voiced: bool, place: usize, manner: usize) -> Vec<f64> {
        let mut f = vec![0.0; 14];
        f[0] = if voiced { 1.0 } else { 0.0 };
        f[1 + place] = 1.0;
        f[6 + manner] = 1.0;
        f
    }

    fn vowel(height: f64, backness: f64) -> Vec<f64> {
        let mut f = vec![0.0; 14];
        f[0] = 1.0;
        f[10] = 1.0;
        f[11] = height;
        f[12] = backness;
        f
    }

    const LABIAL: usize = 0;
    const CORONAL: usize = 1;
    const POSTALVEOLAR: usize = 2;
    const VELAR: usize = 3;
    const GLOTTAL: usize = 4;
    const STOP: usize = 0;
    const FRICATIVE: usize = 1;
    const NASAL: usize = 2;
    const APPROXIMANT: usize = 3;

    pub(super) fn inventory() -> Vec<PhonemeEntry> {
        let mut glide_y = consonant(true, POSTALVEOLAR, APPROXIMANT);
        glide_y[11] = 1.0;
        let mut glide_w = consonant(true, LABIAL, APPROXIMANT);
        glide_w[11] = 1.0;
        glide_w[12] = 1.0;
        let mut pause = vec![0.0; 14];
        pause[13] = 1.0;
        let table: Vec<(&str, Vec<f64>)> = vec![
            ("p", consonant(false, LABIAL, STOP)),
            ("b", consonant(true, LABIAL, STOP)),
            ("m", consonant(true, LABIAL, NASAL)),
            ("f", consonant(false, LABIAL, FRICATIVE)),
            ("v", consonant(true, LABIAL, FRICATIVE)),
            ("w", glide_w),
            ("t", consonant(false, CORONAL, STOP)),
            ("d", consonant(true, CORONAL, STOP)),
            ("n", consonant(true, CORONAL, NASAL)),
            ("s", consonant(false, CORONAL, FRICATIVE)),
            ("z", consonant(true, CORONAL, FRICATIVE)),
            ("l", consonant(true, CORONAL, APPROXIMANT)),
            ("r", consonant(true, POSTALVEOLAR, APPROXIMANT)),
            ("sh", consonant(false, POSTALVEOLAR, FRICATIVE)),
            ("ch", consonant(false, POSTALVEOLAR, STOP)),
            ("j", consonant(true, POSTALVEOLAR, STOP)),
            ("y", glide_y),
            ("k", consonant(false, VELAR, STOP)),
            ("g", consonant(true, VELAR, STOP)),
            ("h", consonant(false, GLOTTAL, FRICATIVE)),
            ("a", vowel(0.0, 0.5)),
            ("e", vowel(0.5, 0.0)),
            ("i", vowel(1.0, 0.0)),
            ("o", vowel(0.5, 1.0)),
            ("u", vowel(1.0, 1.0)),
            (PAUSE_SYMBOL, pause),
        ];
        table
            .into_iter()
            .map(|(s, f)| PhonemeEntry {
                symbol: s.to_string(),
                features: f,
            })
            .collect()
    }

    /// Command words plus the probe words used for latent-space reports.
    pub(super) const LEXICON: &[(&str, &str)] = &[
        // verbs
        ("go", "g o"),
        ("move", "m u v"),
        ("walk", "w o k"),
        ("head", "h e d"),
        ("run", "r a n"),
        ("come", "k a m"),
        ("drive", "d r a i v"),
        ("step", "s t e p"),
        // prepositions
        ("to", "t u"),
        ("toward", "t o w o r d"),
        ("near", "n i r"),
        ("by", "b a i"),
        ("past", "p a s t"),
        ("around", "a r a u n d"),
        // object names
        ("bicycle", "b a i s i k l"),
        ("bike", "b a i k"),
        ("cycle", "s a i k l"),
        ("sign", "s a i n"),
        ("signboard", "s a i n b o r d"),
        ("poster", "p o s t e r"),
        ("placard", "p l a k a r d"),
        ("desk", "d e s k"),
        ("table", "t e b l"),
        ("stand", "s t a n d"),
        ("bench", "b e n ch"),
        ("door", "d o r"),
        ("gate", "g e t"),
        ("doorway", "d o r w e"),
        ("entrance", "e n t r a n s"),
        ("window", "w i n d o"),
        ("pane", "p e n"),
        ("glass", "g l a s"),
        ("red", "r e d"),
        ("blue", "b l u"),
        ("black", "b l a k"),
        ("box", "b o k s"),
        ("crate", "k r e t"),
        ("case", "k e s"),
        ("car", "k a r"),
        ("auto", "o t o"),
        ("vehicle", "v i h i k l"),
        ("sedan", "s e d a n"),
        ("van", "v a n"),
        ("suitcase", "s u t k e s"),
        ("luggage", "l a g e j"),
        ("bag", "b a g"),
        // box nouns used as node text
        // probe words: five initial-consonant groups of ten syllables each
        ("ja", "j a"),
        ("je", "j e"),
        ("ji", "j i"),
        ("jo", "j o"),
        ("ju", "j u"),
        ("jan", "j a n"),
        ("jen", "j e n"),
        ("jin", "j i n"),
        ("jon", "j o n"),
        ("jun", "j u n"),
        ("ha", "h a"),
        ("he", "h e"),
        ("hi", "h i"),
        ("ho", "h o"),
        ("hu", "h u"),
        ("han", "h a n"),
        ("hen", "h e n"),
        ("hin", "h i n"),
        ("hon", "h o n"),
        ("hun", "h u n"),
        ("sa", "s a"),
        ("se", "s e"),
        ("si", "s i"),
        ("so", "s o"),
        ("su", "s u"),
        ("san", "s a n"),
        ("sen", "s e n"),
        ("sin", "s i n"),
        ("son", "s o n"),
        ("sun", "s u n"),
        ("ba", "b a"),
        ("be", "b e"),
        ("bi", "b i"),
        ("bo", "b o"),
        ("bu", "b u"),
        ("ban", "b a n"),
        ("ben", "b e n"),
        ("bin", "b i n"),
        ("bon", "b o n"),
        ("bun", "b u n"),
        ("da", "d a"),
        ("de", "d e"),
        ("di", "d i"),
        ("do", "d o"),
        ("du", "d u"),
        ("dan", "d a n"),
        ("den", "d e n"),
        ("din", "d i n"),
        ("don", "d o n"),
        ("dun", "d u n"),
    ];

    pub(super) fn doc() -> PhoneticsDoc {
        PhoneticsDoc {
            phonemes: inventory(),
            lexicon: LEXICON
                .iter()
                .map(|(w, p)| (w.to_string(), p.split(' ').map(str::to_string).collect()))
                .collect(),
        }
    }
}

/// Probe words grouped by initial consonant, ten per group.
pub fn default_probe_groups() -> Vec<(String, Vec<String>)> {
    ["j", "h", "s", "b", "d"]
        .iter()
        .map(|&c| {
            let words = ["a", "e", "i", "o", "u", "an", "en", "in", "on", "un"]
                .iter()
                .map(|rime| format!("{c}{rime}"))
                .collect();
            (c.to_string(), words)
        })
        .collect()
}

impl Default for Phonetics {
    fn default() -> Self {
        Self::from_doc(&defaults::doc()).expect("built-in phonetic model is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        let p = Phonetics::default();
        assert_eq!(p.inventory().len(), 27);
        assert_eq!(p.inventory().features(BLANK), &[0.0; 14]);
        assert_eq!(p.inventory().symbol(p.inventory().pause()), PAUSE_SYMBOL);
        for (_, words) in default_probe_groups() {
            for w in words {
                assert!(p.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn text_to_phonemes_examples() {
        let p = Phonetics::default();
        assert!(p.text_to_phonemes("").unwrap().ids.is_empty());
        let car = p.text_to_phonemes("car").unwrap();
        assert_eq!(car.ids, p.pronunciation("car").unwrap());
        let two = p.text_to_phonemes("go to").unwrap();
        let mut expected = p.pronunciation("go").unwrap().to_vec();
        expected.push(p.inventory().pause());
        expected.extend_from_slice(p.pronunciation("to").unwrap());
        assert_eq!(two.ids, expected);
        match p.text_to_phonemes("go to the moon") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "the"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthesis_examples() {
        let p = Phonetics::default();
        let inv = p.inventory();
        let empty = PhonemeSequence {
            ids: vec![],
            source: String::new(),
        };
        let a = synthesize_audio(&empty, inv, 0.3, 1).unwrap();
        assert_eq!(a.valid_length, 0);
        assert!(a.frames.data().iter().all(|&v| v == 0.0));

        let one = PhonemeSequence {
            ids: vec![inv.id_of("k").unwrap()],
            source: "k".into(),
        };
        for seed in 0..20 {
            let a = synthesize_audio(&one, inv, 0.0, seed).unwrap();
            assert!((MIN_DURATION..=MAX_DURATION).contains(&a.valid_length));
            for t in 0..a.valid_length {
                assert_eq!(a.frames.row(t), inv.features(one.ids[0]));
            }
            a.validate().unwrap();
        }

        let seq = p.text_to_phonemes("go to bike").unwrap();
        assert_eq!(synthesize_audio(&seq, inv, 0.5, 9).unwrap(), synthesize_audio(&seq, inv, 0.5, 9).unwrap());
        assert_ne!(synthesize_audio(&seq, inv, 0.5, 9).unwrap(), synthesize_audio(&seq, inv, 0.5, 10).unwrap());
    }

    #[test]
    fn synthesis_rejects_overlong_sequences() {
        let p = Phonetics::default();
        let seq = PhonemeSequence {
            ids: [1, 2].repeat(40),
            source: String::new(),
        };
        assert!(matches!(synthesize_audio(&seq, p.inventory(), 0.0, 0), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn audio_json_round_trip() {
        let p = Phonetics::default();
        let seq = p.text_to_phonemes("run to car").unwrap();
        let a = synthesize_audio(&seq, p.inventory(), 0.4, 3).unwrap();
        let text = serde_json::to_string(&a).unwrap();
        let back: AudioFeatures = serde_json::from_str(&text).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn lexicon_validation() {
        let mut doc = Phonetics::default().to_doc();
        doc.lexicon.insert("bye".into(), vec!["b".into(), "a".into(), "i".into()]);
        assert!(Phonetics::from_doc(&doc).is_err(), "duplicate pronunciation");
        let mut doc = Phonetics::default().to_doc();
        doc.lexicon.insert("aa".into(), vec!["a".into(), "a".into()]);
        assert!(Phonetics::from_doc(&doc).is_err(), "repeated phoneme");
        let mut doc = Phonetics::default().to_doc();
        doc.lexicon.insert("zzz".into(), vec!["q".into()]);
        assert!(Phonetics::from_doc(&doc).is_err(), "unknown phoneme");
        let mut doc = Phonetics::default().to_doc();
        doc.phonemes.retain(|e| e.symbol != PAUSE_SYMBOL);
        assert!(Phonetics::from_doc(&doc).is_err(), "missing pause");
    }

    #[test]
    fn json_round_trip() {
        let p = Phonetics::default();
        let back = Phonetics::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn confusable_pair_examples() {
        let p = Phonetics::default();
        // "bike" and "pike" differ by voicing of the first phoneme only.
        let mut doc = p.to_doc();
        doc.lexicon.insert("pike".into(), vec!["p".into(), "a".into(), "i".into(), "k".into()]);
        let p = Phonetics::from_doc(&doc).unwrap();
        let pairs = confusable_pairs(&p, &["bike", "pike", "entrance"], 1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].first.as_str(), pairs[0].second.as_str()), ("bike", "pike"));
        assert!((pairs[0].distance - 1.0).abs() < 1e-12);
        assert!(confusable_pairs(&p, &["bike", "pike"], 0).unwrap().is_empty());
        assert_eq!(confusable_pairs(&p, &["bike", "pike", "car"], 10).unwrap().len(), 3);
        assert!(confusable_pairs(&p, &["bike"], 1).is_err());
    }
}
