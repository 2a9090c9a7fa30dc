//! Toy CTC speech recogniser: a temporal-convolution encoder whose per-step
//! hidden states are the speech latents, a linear decoder over the phoneme
//! alphabet (blank at 0), CTC training and greedy decoding.

use std::io::Write;
use std::path::Path;

use numcore::{log_sum_exp, AdamW, AdamWConfig, CosineRestartSchedule, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonetics::{AudioFeatures, Phonetics, BLANK, FRAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            kernel: 5,
            layers: 2,
        }
    }
}

const CONV_BIAS_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub params: ParamStore,
    config: AsrConfig,
    input_dim: usize,
    num_outputs: usize,
    conv: Vec<(ParamId, ParamId)>,
    dec_w: ParamId,
    dec_b: ParamId,
}

impl AsrModel {
    /// `num_outputs` counts the blank.
    pub fn new(input_dim: usize, num_outputs: usize, config: AsrConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.kernel.is_multiple_of(2) || num_outputs < 2 {
            return Err(Error::Config(format!("invalid ASR configuration {config:?} with {num_outputs} outputs")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut conv = Vec::new();
        let mut c_in = input_dim;
        for l in 0..config.layers {
            let k = config.kernel;
            let w = params.add_he(format!("asr.conv{l}.w"), k * c_in, config.hidden, &mut rng);
            let b = params.add(format!("asr.conv{l}.b"), Tensor::full(&[config.hidden], CONV_BIAS_INIT));
            conv.push((w, b));
            c_in = config.hidden;
        }
        let dec_w = params.add_xavier("asr.dec.w", config.hidden, num_outputs, &mut rng);
        let dec_b = params.add_zeros("asr.dec.b", &[num_outputs]);
        Ok(Self {
            params,
            config,
            input_dim,
            num_outputs,
            conv,
            dec_w,
            dec_b,
        })
    }

    /// Restores a model whose architecture is described by `config`.
    pub fn load(path: impl AsRef<Path>, input_dim: usize, num_outputs: usize, config: AsrConfig) -> Result<Self> {
        let mut model = Self::new(input_dim, num_outputs, config, 0)?;
        let stored = ParamStore::load(path)?;
        model.params.load_values_from(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn config(&self) -> &AsrConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn last_encoder_layer(&self) -> (ParamId, ParamId) {
        *self.conv.last().expect("at least one layer")
    }

    fn check_audio(&self, audio: &AudioFeatures) -> Result<()> {
        let shape = audio.frames.shape();
        if shape.len() != 2 || shape[0] != FRAMES {
            return Err(Error::WrongFrameCount {
                expected: FRAMES,
                actual: audio.frames.rows(),
            });
        }
        if shape[1] != self.input_dim {
            return Err(Error::Config(format!("audio has {} features, model expects {}", shape[1], self.input_dim)));
        }
        if audio.valid_length == 0 || audio.valid_length > FRAMES {
            return Err(Error::Config(format!("audio valid_length {} outside 1..={FRAMES}", audio.valid_length)));
        }
        Ok(())
    }

    /// Records the encoder and decoder on `tape`; returns `(latents T×H, log_probs)`.
    /// Only the `valid_length` leading frames are decoded, so `log_probs` has that many rows.
    pub fn forward(&self, tape: &mut Tape, audio: &AudioFeatures) -> Result<(Var, Var)> {
        self.check_audio(audio)?;
        let mut h = tape.constant(audio.frames.clone());
        for &(w, b) in &self.conv {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.conv1d(h, w, b, self.config.kernel)?;
            h = tape.relu(z)?;
        }
        let valid = tape.slice(h, 0, 0, audio.valid_length)?;
        let logits = tape.matmul(valid, tape.param(self.dec_w))?;
        let logits = tape.add(logits, tape.param(self.dec_b))?;
        let log_probs = tape.log_softmax(logits)?;
        Ok((h, log_probs))
    }

    /// Per-step latents, `T×H`. Rows past `valid_length` are computed as usual.
    pub fn encode(&self, audio: &AudioFeatures) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let (h, _) = self.forward(&mut tape, audio)?;
        Ok(tape.value(h).clone())
    }

    pub fn log_probs(&self, audio: &AudioFeatures) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let (_, lp) = self.forward(&mut tape, audio)?;
        Ok(tape.value(lp).clone())
    }

    /// Latents and log-probabilities from a single forward pass.
    pub fn run(&self, audio: &AudioFeatures) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::with_params(&self.params);
        let (h, lp) = self.forward(&mut tape, audio)?;
        Ok((tape.value(h).clone(), tape.value(lp).clone()))
    }
}

fn validate_ctc_inputs(log_probs: &Tensor, label: &[usize]) -> Result<()> {
    if log_probs.rank() != 2 {
        return Err(Error::Config(format!("log_probs must be a matrix, got {:?}", log_probs.shape())));
    }
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if t_len == 0 {
        return Err(Error::LabelTooLong {
            label: label.len(),
            frames: 0,
        });
    }
    for t in 0..t_len {
        let sum: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
        if !((sum - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidDistribution { row: t, sum });
        }
    }
    if let Some(&bad) = label.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::Config(format!("label token {bad} is blank or outside the alphabet")));
    }
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    if label.len() + repeats > t_len {
        return Err(Error::LabelTooLong {
            label: label.len(),
            frames: t_len,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `label` and its gradient with respect to
/// every entry of `log_probs`, via the log-space forward-backward recursion
/// over the blank-interleaved label.
pub fn ctc_forward_backward(log_probs: &Tensor, label: &[usize]) -> Result<(f64, Tensor)> {
    validate_ctc_inputs(log_probs, label)?;
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { label[s / 2] }).collect();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs.at(t, ext[s]);
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], neg, neg];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_sum_exp(&[alpha[last + s_len - 1], alpha[last + s_len - 2]])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::Diverged {
            context: "ctc: label has zero probability".into(),
        });
    }

    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = [next[s], neg, neg];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && skip(s + 2) {
                terms[2] = next[s + 2];
            }
            beta[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }

    // d(−log p)/d lp[t][k] = −Σ_{s: ext[s]=k} exp(α + β − lp − log p)
    let mut grad = Tensor::zeros(&[t_len, classes]);
    let g = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a == neg {
                continue;
            }
            g[t * classes + ext[s]] -= (a - lp(t, s) - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(log_probs: &Tensor, label: &[usize]) -> Result<f64> {
    ctc_forward_backward(log_probs, label).map(|(l, _)| l)
}

/// Records the CTC loss of `label` under `log_probs` on the tape.
pub fn ctc_loss_var(tape: &mut Tape, log_probs: Var, label: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(tape.value(log_probs), label)?;
    Ok(tape.custom_scalar("ctc_loss", loss, vec![(log_probs, grad)])?)
}

/// Decoded phoneme ids (no blanks).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub ids: Vec<usize>,
}

impl Transcript {
    pub fn render(&self, phonetics: &Phonetics) -> String {
        phonetics.render(&self.ids)
    }
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Transcript {
    let mut ids = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if Some(best) != prev && best != BLANK {
            ids.push(best);
        }
        prev = Some(best);
    }
    Transcript { ids }
}

/// Maps decoded phoneme segments to the acoustically nearest vocabulary word.
#[derive(Clone, Debug)]
pub struct WordSnapper {
    words: Vec<(String, Vec<usize>)>,
    threshold: f64,
}

pub const DEFAULT_SNAP_THRESHOLD: f64 = 3.0;

impl WordSnapper {
    pub fn new(phonetics: &Phonetics, vocabulary: &[String], threshold: f64) -> Result<Self> {
        let mut words = vocabulary
            .iter()
            .map(|w| Ok((w.clone(), phonetics.pronunciation(w)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        words.sort();
        words.dedup();
        Ok(Self { words, threshold })
    }

    /// Splits `transcript` at pauses and snaps every segment. Segments with
    /// no word within the threshold are emitted as their raw phoneme string.
    pub fn words(&self, phonetics: &Phonetics, transcript: &Transcript) -> Vec<String> {
        let pause = phonetics.inventory().pause();
        transcript
            .ids
            .split(|&id| id == pause)
            .filter(|seg| !seg.is_empty())
            .map(|seg| self.snap(phonetics, seg))
            .collect()
    }

    pub fn snap(&self, phonetics: &Phonetics, segment: &[usize]) -> String {
        let mut best: Option<(f64, &str)> = None;
        for (word, pron) in &self.words {
            let d = phonetics.distance(segment, pron);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, word));
            }
        }
        match best {
            Some((d, w)) if d <= self.threshold => w.to_string(),
            _ => segment.iter().map(|&i| phonetics.inventory().symbol(i)).collect(),
        }
    }
}

/// Word-level Levenshtein distance.
pub fn word_edit_distance(reference: &[String], hypothesis: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(r != h)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Corpus WER: total word edits over total reference words.
pub fn word_error_rate<'a>(pairs: impl IntoIterator<Item = (&'a [String], &'a [String])>) -> f64 {
    let (mut edits, mut words) = (0, 0);
    for (r, h) in pairs {
        edits += word_edit_distance(r, h);
        words += r.len();
    }
    if words == 0 {
        0.0
    } else {
        edits as f64 / words as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Linear learning-rate ramp length, in optimizer steps.
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            lr_min: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

/// One training utterance.
#[derive(Clone, Debug)]
pub struct AsrExample<'a> {
    pub audio: &'a AudioFeatures,
    pub label: Vec<usize>,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsrEpochLog {
    pub epoch: usize,
    pub mean_ctc_loss: f64,
    pub greedy_word_error_rate: f64,
}

pub fn write_asr_log(log: &[AsrEpochLog], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,mean_ctc_loss,greedy_word_error_rate")?;
    for e in log {
        writeln!(w, "{},{:.6},{:.6}", e.epoch, e.mean_ctc_loss, e.greedy_word_error_rate)?;
    }
    Ok(())
}

/// Trains with AdamW and one cosine decay over the whole run. The reported
/// WER of an epoch is measured on the forward passes used for training, so
/// it reflects the parameters before each update.
pub fn train_asr(
    model: &mut AsrModel,
    data: &[AsrExample],
    config: &AsrTrainConfig,
    phonetics: &Phonetics,
    snapper: &WordSnapper,
) -> Result<Vec<AsrEpochLog>> {
    if data.is_empty() {
        return Err(Error::Dataset("ASR training set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("ASR epochs and batch size must be positive".into()));
    }
    for (i, ex) in data.iter().enumerate() {
        let repeats = ex.label.windows(2).filter(|w| w[0] == w[1]).count();
        if ex.label.len() + repeats > ex.audio.valid_length {
            return Err(Error::Dataset(format!(
                "ASR sample {i}: transcript does not fit in {} frames",
                ex.audio.valid_length
            )));
        }
    }
    let steps_per_epoch = data.len().div_ceil(config.batch_size) as u64;
    let schedule = CosineRestartSchedule::new(config.lr_min.min(config.lr), config.lr, steps_per_epoch * config.epochs as u64, 1);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model.params.tensors(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut edits = 0;
        let mut ref_words = 0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor>, Transcript)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &data[i];
                    let mut tape = Tape::with_params(&model.params);
                    let (_, lp) = model.forward(&mut tape, ex.audio)?;
                    let loss = ctc_loss_var(&mut tape, lp, &ex.label)?;
                    let decoded = greedy_decode(tape.value(lp));
                    let value = tape.value(loss).item();
                    let grads = tape.backward(loss)?.into_param_grads();
                    Ok((value, grads, decoded))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(e, batch))?;
            let mut sum: Option<Vec<Tensor>> = None;
            for ((loss, grads, decoded), &i) in results.into_iter().zip(batch) {
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        context: format!("ASR sample {i}: loss {loss}"),
                    });
                }
                total_loss += loss;
                let hyp = snapper.words(phonetics, &decoded);
                edits += word_edit_distance(&data[i].words, &hyp);
                ref_words += data[i].words.len();
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => accumulate(acc, &grads),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            let ramp = if step < config.warmup_steps { (step + 1) as f64 / config.warmup_steps as f64 } else { 1.0 };
            opt.step(model.params.tensors_mut(), &grads, schedule.lr(step) * ramp)
                .map_err(|e| Error::Diverged {
                    context: format!("ASR update at epoch {epoch}: {e}"),
                })?;
            step += 1;
        }
        log.push(AsrEpochLog {
            epoch,
            mean_ctc_loss: total_loss / data.len() as f64,
            greedy_word_error_rate: if ref_words == 0 { 0.0 } else { edits as f64 / ref_words as f64 },
        });
    }
    Ok(log)
}

pub(crate) fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

fn diverged(e: Error, batch: &[usize]) -> Error {
    match e {
        Error::Num(numcore::NumError::NonFinite { op }) => Error::Diverged {
            context: format!("non-finite {op} in batch with samples {batch:?}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::check_gradients;
    use rand::Rng;

    fn log_probs_from(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = log_probs_from(&[vec![0.3, 0.7]]);
        assert!((ctc_loss(&lp, &[1]).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        let lp = log_probs_from(&[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]);
        assert!((ctc_loss(&lp, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lp = log_probs_from(&[vec![0.5, 0.5]]);
        assert!(matches!(ctc_loss(&lp, &[1, 1]), Err(Error::LabelTooLong { .. })));
        assert!(ctc_loss(&lp, &[0]).is_err());
        let bad = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(ctc_loss(&bad, &[1]), Err(Error::InvalidDistribution { .. })));
        // A repeated label needs a blank between its copies.
        let lp3 = log_probs_from(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.2, 0.8]]);
        let expected = -(0.8 * 0.5 * 0.8f64).ln();
        assert!((ctc_loss(&lp3, &[1, 1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blank() {
        let lp = log_probs_from(&[vec![0.6, 0.4], vec![0.9, 0.1]]);
        assert!((ctc_loss(&lp, &[]).unwrap() + (0.54f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_through_log_softmax_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let logits = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let report = check_gradients(&[logits], 1e-5, |tape, v| {
                let lp = tape.log_softmax(v[0])?;
                ctc_loss_var(tape, lp, &[1, 3, 3]).map_err(|e| match e {
                    Error::Num(n) => n,
                    other => panic!("{other}"),
                })
            })
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn greedy_examples() {
        let onehot = |path: &[usize]| {
            let rows: Vec<Vec<f64>> = path
                .iter()
                .map(|&k| (0..3).map(|c| if c == k { 0.9 } else { 0.05 }).collect())
                .collect();
            log_probs_from(&rows)
        };
        assert!(greedy_decode(&onehot(&[0, 0, 0])).ids.is_empty());
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 2])).ids, vec![1, 2]);
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1, 2])).ids, vec![1, 1, 2]);
    }

    #[test]
    fn wer_examples() {
        let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        assert_eq!(word_edit_distance(&w("go to car"), &w("go to car")), 0);
        assert_eq!(word_edit_distance(&w("go to car"), &w("go car")), 1);
        assert_eq!(word_edit_distance(&w("go to car"), &w("run to van now")), 3);
        let (r, h) = (w("a b c d"), w("a x c"));
        assert!((word_error_rate([(r.as_slice(), h.as_slice())]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn snapping_and_raw_fallback() {
        let p = Phonetics::default();
        let vocab: Vec<String> = ["go", "to", "car", "bike"].iter().map(|s| s.to_string()).collect();
        let snapper = WordSnapper::new(&p, &vocab, DEFAULT_SNAP_THRESHOLD).unwrap();
        let mut ids = p.text_to_phonemes("go to").unwrap().ids;
        ids.push(p.inventory().pause());
        // "pike" is one voicing flip away from "bike".
        ids.extend(["p", "a", "i", "k"].iter().map(|s| p.inventory().id_of(s).unwrap()));
        ids.push(p.inventory().pause());
        ids.extend(["sh", "u", "sh", "u", "sh"].iter().map(|s| p.inventory().id_of(s).unwrap()));
        let words = snapper.words(&p, &Transcript { ids });
        assert_eq!(words, ["go", "to", "bike", "shushush"]);
    }

    #[test]
    fn zero_last_layer_gives_zero_latents() {
        let p = Phonetics::default();
        let mut m = AsrModel::new(p.inventory().dim(), p.inventory().len(), AsrConfig::default(), 1).unwrap();
        let (w, b) = m.last_encoder_layer();
        m.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let seq = p.text_to_phonemes("go to car").unwrap();
        let audio = crate::phonetics::synthesize_audio(&seq, p.inventory(), 0.2, 0).unwrap();
        assert!(m.encode(&audio).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(m.encode(&AudioFeatures { frames: Tensor::zeros(&[10, 14]), valid_length: 0 }), Err(Error::WrongFrameCount { .. })));
    }
}
