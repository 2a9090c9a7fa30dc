//! Fusion grounder: scene-graph nodes and edges embedded from their text,
//! an edge-featured graph attention encoder with max-pool readout, pooled
//! speech latents, and a small transformer over
//! `[CLS] v_sg′ v_speech′ text… [SEP]` whose `[CLS]` output is classified
//! over the object-class vocabulary.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use numcore::{AdamW, AdamWConfig, CosineRestartSchedule, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::accumulate;
use crate::error::{Error, Result};
use crate::scenegraph::SceneGraph;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

/// Word-level token vocabulary with the reserved tokens at ids 0–3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by every whitespace-separated word of
    /// `texts`, sorted and deduplicated.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !SPECIAL_TOKENS.contains(w))
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words).collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrounderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub text_layers: usize,
    pub gat_layers: usize,
    pub gat_dim: usize,
    pub speech_dim: usize,
    pub max_len: usize,
    /// Whether the fused sequence carries the pooled speech token.
    pub use_speech: bool,
    pub speech_pooling: SpeechPooling,
}

/// How per-step speech latents become the single speech token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeechPooling {
    /// Plain average over valid frames.
    Mean,
    /// Learned softmax weights over valid frames, scored from each frame's
    /// latent and its relative position in the utterance.
    #[default]
    Attention,
}

/// Radial basis features of relative frame position used by attention pooling.
pub const POSITION_BASIS: usize = 8;

/// `L×POSITION_BASIS` Gaussian bumps over `(t + 0.5) / L`, centres evenly spaced on [0, 1].
pub fn position_features(len: usize) -> Tensor {
    let width = 1.0 / (POSITION_BASIS - 1) as f64;
    let mut data = Vec::with_capacity(len * POSITION_BASIS);
    for t in 0..len {
        let r = (t as f64 + 0.5) / len as f64;
        for b in 0..POSITION_BASIS {
            let z = (r - b as f64 * width) / width;
            data.push((-0.5 * z * z).exp());
        }
    }
    Tensor::new(vec![len, POSITION_BASIS], data).expect("shape matches")
}

/// Per-feature standardisation of speech latents, fitted on training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SpeechNorm {
    const MIN_STD: f64 = 1e-3;

    pub fn fit<'a>(latents: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in latents {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            if m.cols() != sum.len() {
                return Err(Error::Config("speech latents disagree on width".into()));
            }
            for t in 0..m.rows() {
                for (j, &v) in m.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::EmptySpeech);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(Self::MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.cols() != self.mean.len() {
            return Err(Error::Config(format!("speech latents have {} features, normaliser {}", latents.cols(), self.mean.len())));
        }
        let d = self.mean.len();
        let mut out = latents.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }
}

impl Default for GrounderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn: 128,
            text_layers: 2,
            gat_layers: 2,
            gat_dim: 32,
            speech_dim: 32,
            max_len: 32,
            use_speech: true,
            speech_pooling: SpeechPooling::default(),
        }
    }
}

impl GrounderConfig {
    /// Large model widths (756-wide fused tokens,
    /// 128-wide graph encoder, 256-wide speech latents).
    pub fn large_dims() -> Self {
        Self {
            d_model: 756,
            heads: 4,
            ffn: 1512,
            gat_dim: 128,
            speech_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.gat_layers == 0 || self.gat_dim == 0 || self.ffn == 0 || self.speech_dim == 0 {
            return Err(Error::Config("grounder widths and GAT depth must be positive".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must leave room for [CLS], graph, text and [SEP]".into()));
        }
        Ok(())
    }
}

/// Mean of the first `valid_length` rows of a `T×H` latent matrix.
pub fn pool_speech(latents: &Tensor, valid_length: usize) -> Result<Vec<f64>> {
    if valid_length == 0 {
        return Err(Error::EmptySpeech);
    }
    if valid_length > latents.rows() {
        return Err(Error::Config(format!("valid_length {valid_length} exceeds {} rows", latents.rows())));
    }
    let mut out = vec![0.0; latents.cols()];
    for t in 0..valid_length {
        for (o, v) in out.iter_mut().zip(latents.row(t)) {
            *o += v;
        }
    }
    let n = valid_length as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Clone, Debug)]
struct TextLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct GatLayer {
    w: ParamId,
    w_edge: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
    a_edge: ParamId,
}

/// A scene graph reduced to token ids and index tables.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGraph {
    n: usize,
    node_tokens: Vec<usize>,
    node_pool: Tensor,
    pred_tokens: Vec<usize>,
    pred_pool: Option<Tensor>,
    /// Unique-predicate index of every `(i, j)` cell, row-major; the
    /// diagonal is 0 and masked out.
    edge_index: Vec<usize>,
    present: Vec<usize>,
}

impl PreparedGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Class indices that occur in the graph, ascending.
    pub fn present_classes(&self) -> &[usize] {
        &self.present
    }
}

/// Matrix averaging consecutive token groups: row `g` holds `1/len_g` over
/// the columns of group `g`.
fn pooling_matrix(groups: &[usize]) -> Tensor {
    let total: usize = groups.iter().sum();
    let mut m = Tensor::zeros(&[groups.len(), total]);
    let mut col = 0;
    for (g, &len) in groups.iter().enumerate() {
        for c in col..col + len {
            m.data_mut()[g * total + c] = 1.0 / len as f64;
        }
        col += len;
    }
    m
}

fn group_tokens(vocab: &Vocab, texts: &[&str]) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut sizes = Vec::new();
    for t in texts {
        let mut ids = vocab.encode(t);
        if ids.is_empty() {
            ids.push(UNK);
        }
        sizes.push(ids.len());
        tokens.extend(ids);
    }
    (tokens, sizes)
}

/// One grounding query ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingExample {
    pub graph: PreparedGraph,
    /// Standardised latents of the valid frames, `L×H`; required when the model uses speech.
    pub speech: Option<Tensor>,
    pub tokens: Vec<usize>,
    pub target: usize,
}

/// Class distribution over the whole class vocabulary; absent classes get 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class_index: usize,
    pub class: String,
    pub probabilities: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GrounderMeta {
    config: GrounderConfig,
    vocab: Vocab,
    classes: Vec<String>,
    #[serde(default)]
    speech_norm: Option<SpeechNorm>,
}

#[derive(Clone, Debug)]
pub struct GrounderModel {
    pub params: ParamStore,
    config: GrounderConfig,
    vocab: Vocab,
    classes: Vec<String>,
    class_index: HashMap<String, usize>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    text_layers: Vec<TextLayer>,
    gat_layers: Vec<GatLayer>,
    proj_sg: (ParamId, ParamId),
    proj_speech: Option<(ParamId, ParamId)>,
    speech_attention: Option<(ParamId, ParamId)>,
    speech_norm: Option<SpeechNorm>,
    classifier: (ParamId, ParamId),
}

impl GrounderModel {
    pub fn new(config: GrounderConfig, vocab: Vocab, classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::Config("class vocabulary is empty".into()));
        }
        let class_index: HashMap<String, usize> = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        if class_index.len() != classes.len() {
            return Err(Error::Config("class vocabulary has duplicates".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let tok_emb = p.add_xavier("tok_emb", vocab.len(), d, &mut rng);
        let pos_emb = p.add_xavier("pos_emb", config.max_len, d, &mut rng);
        let add_ln = |p: &mut ParamStore, name: &str| {
            (
                p.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
                p.add_zeros(format!("{name}.beta"), &[d]),
            )
        };
        let text_layers = (0..config.text_layers)
            .map(|l| {
                let wq = p.add_xavier(format!("text{l}.wq"), d, d, &mut rng);
                let wk = p.add_xavier(format!("text{l}.wk"), d, d, &mut rng);
                let wv = p.add_xavier(format!("text{l}.wv"), d, d, &mut rng);
                let wo = p.add_xavier(format!("text{l}.wo"), d, d, &mut rng);
                let ln1 = add_ln(&mut p, &format!("text{l}.ln1"));
                let ff1 = (p.add_xavier(format!("text{l}.ff1.w"), d, config.ffn, &mut rng), p.add_zeros(format!("text{l}.ff1.b"), &[config.ffn]));
                let ff2 = (p.add_xavier(format!("text{l}.ff2.w"), config.ffn, d, &mut rng), p.add_zeros(format!("text{l}.ff2.b"), &[d]));
                let ln2 = add_ln(&mut p, &format!("text{l}.ln2"));
                TextLayer {
                    wq,
                    wk,
                    wv,
                    wo,
                    ln1,
                    ff1,
                    ff2,
                    ln2,
                }
            })
            .collect();
        let k = config.gat_dim;
        let gat_layers = (0..config.gat_layers)
            .map(|l| {
                let fan_in = if l == 0 { d } else { k };
                GatLayer {
                    w: p.add_xavier(format!("gat{l}.w"), fan_in, k, &mut rng),
                    w_edge: p.add_xavier(format!("gat{l}.w_edge"), d, k, &mut rng),
                    a_src: p.add_xavier(format!("gat{l}.a_src"), k, 1, &mut rng),
                    a_dst: p.add_xavier(format!("gat{l}.a_dst"), k, 1, &mut rng),
                    a_edge: p.add_xavier(format!("gat{l}.a_edge"), k, 1, &mut rng),
                }
            })
            .collect();
        let proj_sg = (p.add_xavier("proj_sg.w", k, d, &mut rng), p.add_zeros("proj_sg.b", &[d]));
        let proj_speech = config
            .use_speech
            .then(|| (p.add_xavier("proj_speech.w", config.speech_dim, d, &mut rng), p.add_zeros("proj_speech.b", &[d])));
        let speech_attention = (config.use_speech && config.speech_pooling == SpeechPooling::Attention).then(|| {
            (
                p.add_zeros("speech_att.w", &[config.speech_dim, 1]),
                p.add_zeros("speech_att.pos", &[POSITION_BASIS, 1]),
            )
        });
        let classifier = (p.add_xavier("cls.w", d, classes.len(), &mut rng), p.add_zeros("cls.b", &[classes.len()]));
        Ok(Self {
            params: p,
            config,
            vocab,
            classes,
            class_index,
            tok_emb,
            pos_emb,
            text_layers,
            gat_layers,
            proj_sg,
            proj_speech,
            speech_attention,
            speech_norm: None,
            classifier,
        })
    }

    pub fn config(&self) -> &GrounderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn speech_norm(&self) -> Option<&SpeechNorm> {
        self.speech_norm.as_ref()
    }

    /// Sets the standardisation applied by [`GrounderModel::prepare`] to
    /// speech latents. Examples prepared earlier keep their old scaling.
    pub fn set_speech_norm(&mut self, norm: Option<SpeechNorm>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.config.speech_dim || n.std.len() != self.config.speech_dim {
                return Err(Error::Config(format!("speech normaliser width must be {}", self.config.speech_dim)));
            }
        }
        self.speech_norm = norm;
        Ok(())
    }

    pub fn class_id(&self, class: &str) -> Option<usize> {
        self.class_index.get(class).copied()
    }

    /// Writes `<stem>.gkpt` (parameters) and `<stem>.json` (architecture,
    /// vocabulary and classes).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.params.save(dir.join(format!("{stem}.gkpt")))?;
        let meta = GrounderMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            classes: self.classes.clone(),
            speech_norm: self.speech_norm.clone(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: GrounderMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mut model = Self::new(meta.config, meta.vocab, meta.classes, 0)?;
        model.speech_norm = meta.speech_norm;
        let stored = ParamStore::load(dir.join(format!("{stem}.gkpt")))?;
        model.params.load_values_from(&stored)?;
        Ok(model)
    }

    pub fn prepare_graph(&self, graph: &SceneGraph) -> Result<PreparedGraph> {
        let n = graph.nodes.len();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let texts: Vec<&str> = graph.nodes.iter().map(|node| node.text.as_str()).collect();
        let (node_tokens, sizes) = group_tokens(&self.vocab, &texts);
        let mut preds: Vec<&str> = Vec::new();
        let mut edge_index = vec![0; n * n];
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let p = graph.predicate(i, j);
                let k = match preds.iter().position(|q| *q == p) {
                    Some(k) => k,
                    None => {
                        preds.push(p);
                        preds.len() - 1
                    }
                };
                edge_index[i * n + j] = k;
            }
        }
        let (pred_tokens, pred_sizes) = group_tokens(&self.vocab, &preds);
        let mut present: Vec<usize> = texts.iter().filter_map(|t| self.class_id(t)).collect();
        present.sort_unstable();
        present.dedup();
        if present.is_empty() {
            return Err(Error::AllClassesMasked);
        }
        Ok(PreparedGraph {
            n,
            node_tokens,
            node_pool: pooling_matrix(&sizes),
            pred_tokens,
            pred_pool: (!preds.is_empty()).then(|| pooling_matrix(&pred_sizes)),
            edge_index,
            present,
        })
    }

    /// Builds a model input. `speech` holds the ASR latents of the valid
    /// frames (`L×H`); `words` is the transcript (ground truth or decoded);
    /// `target_class` may be `None` for inference.
    pub fn prepare(&self, graph: &SceneGraph, speech: Option<&Tensor>, words: &[String], target_class: Option<&str>) -> Result<GroundingExample> {
        let graph = self.prepare_graph(graph)?;
        let speech = match (self.config.use_speech, speech) {
            (false, _) => None,
            (true, None) => return Err(Error::Config("model uses speech but no speech latent was given".into())),
            (true, Some(s)) => {
                if s.shape().len() != 2 || s.cols() != self.config.speech_dim {
                    return Err(Error::Config(format!("speech latents have shape {:?}, model expects L×{}", s.shape(), self.config.speech_dim)));
                }
                if s.rows() == 0 {
                    return Err(Error::EmptySpeech);
                }
                Some(match &self.speech_norm {
                    Some(n) => n.apply(s)?,
                    None => s.clone(),
                })
            }
        };
        let target = match target_class {
            Some(c) => {
                let id = self.class_id(c).ok_or_else(|| Error::Dataset(format!("target class {c:?} not in class vocabulary")))?;
                if !graph.present.contains(&id) {
                    return Err(Error::Dataset(format!("target class {c:?} is absent from the graph")));
                }
                id
            }
            None => graph.present[0],
        };
        Ok(GroundingExample {
            graph,
            speech,
            tokens: words.iter().map(|w| self.vocab.id(w)).collect(),
            target,
        })
    }

    /// Mean-pooled token embeddings of node texts (`N×d`) and of the
    /// predicate of every ordered pair (`N×N×d`, zero diagonal).
    pub fn encode_node_edge_text(&self, graph: &SceneGraph) -> Result<(Tensor, Tensor)> {
        let g = self.prepare_graph(graph)?;
        let mut tape = Tape::with_params(&self.params);
        let (x, e) = self.graph_inputs(&mut tape, &g)?;
        let x = tape.value(x).clone();
        let d = self.config.d_model;
        let mut dense = Tensor::zeros(&[g.n, g.n, d]);
        if let Some(e) = e {
            let table = tape.value(e);
            for i in 0..g.n {
                for j in (0..g.n).filter(|&j| j != i) {
                    let cell = (i * g.n + j) * d;
                    dense.data_mut()[cell..cell + d].copy_from_slice(table.row(g.edge_index[i * g.n + j]));
                }
            }
        }
        Ok((x, dense))
    }

    fn graph_inputs(&self, tape: &mut Tape, g: &PreparedGraph) -> Result<(Var, Option<Var>)> {
        let emb = tape.param(self.tok_emb);
        let rows = tape.embedding_lookup(emb, &g.node_tokens)?;
        let pool = tape.constant(g.node_pool.clone());
        let x = tape.matmul(pool, rows)?;
        let e = match &g.pred_pool {
            Some(pp) => {
                let rows = tape.embedding_lookup(emb, &g.pred_tokens)?;
                let pool = tape.constant(pp.clone());
                Some(tape.matmul(pool, rows)?)
            }
            None => None,
        };
        Ok((x, e))
    }

    /// Graph attention layers over node features `x` (`N×d`). `edges` holds
    /// one feature row per distinct predicate and `edge_index` maps every
    /// `(i, j)` cell to its row. Returns node embeddings and each layer's
    /// attention matrix.
    pub fn gat_forward(&self, tape: &mut Tape, x: Var, edges: Option<Var>, edge_index: &[usize]) -> Result<(Var, Vec<Tensor>)> {
        let n = tape.value(x).rows();
        let keep: Vec<bool> = (0..n * n).map(|c| c / n != c % n).collect();
        let mut h = x;
        let mut attention = Vec::new();
        for layer in &self.gat_layers {
            let wx = tape.matmul(h, tape.param(layer.w))?;
            let (edges, n) = match edges {
                Some(e) if n > 1 => (e, n),
                _ => {
                    h = tape.relu(wx)?;
                    attention.push(Tensor::zeros(&[n, n]));
                    continue;
                }
            };
            // s_ij = LeakyReLU(a_srcᵀ Wx_i + a_dstᵀ Wx_j + a_edgeᵀ W_e e_ij)
            let src = tape.matmul(wx, tape.param(layer.a_src))?;
            let dst = tape.matmul(wx, tape.param(layer.a_dst))?;
            let dst = tape.transpose(dst)?;
            let we = tape.matmul(edges, tape.param(layer.w_edge))?;
            let edge_scores = tape.matmul(we, tape.param(layer.a_edge))?;
            let grid = tape.gather(edge_scores, edge_index, &[n, n])?;
            let s = tape.add(grid, src)?;
            let s = tape.add(s, dst)?;
            let s = tape.leaky_relu(s, GAT_LEAKY_SLOPE)?;
            let alpha = tape.masked_softmax(s, &keep)?;
            attention.push(tape.value(alpha).clone());
            let agg = tape.matmul(alpha, wx)?;
            h = tape.relu(agg)?;
        }
        Ok((h, attention))
    }

    /// Graph vector `v_sg` (`1×k`) by coordinate-wise max over nodes.
    pub fn graph_vector(&self, tape: &mut Tape, g: &PreparedGraph) -> Result<(Var, Vec<Tensor>)> {
        let (x, e) = self.graph_inputs(tape, g)?;
        let (h, att) = self.gat_forward(tape, x, e, &g.edge_index)?;
        Ok((tape.max_axis(h, 0)?, att))
    }

    /// The `1×H` speech summary before projection.
    fn pool_speech_var(&self, tape: &mut Tape, latents: &Tensor) -> Result<Var> {
        let h = tape.constant(latents.clone());
        match self.speech_attention {
            None => Ok(tape.mean_axis(h, 0)?),
            Some(att) => {
                let alpha = self.speech_alpha(tape, h, att)?;
                Ok(tape.matmul(alpha, h)?)
            }
        }
    }

    /// `1×L` softmax weights from frame content and relative position.
    fn speech_alpha(&self, tape: &mut Tape, h: Var, (w, pos): (ParamId, ParamId)) -> Result<Var> {
        let content = tape.matmul(h, tape.param(w))?;
        let phi = tape.constant(position_features(tape.value(h).rows()));
        let place = tape.matmul(phi, tape.param(pos))?;
        let scores = tape.add(content, place)?;
        let scores = tape.transpose(scores)?;
        Ok(tape.softmax(scores)?)
    }

    /// Frame weights of the speech summary for a prepared input; uniform
    /// under mean pooling.
    pub fn speech_weights(&self, ex: &GroundingExample) -> Result<Option<Vec<f64>>> {
        let Some(s) = &ex.speech else { return Ok(None) };
        let Some(att) = self.speech_attention else {
            return Ok(Some(vec![1.0 / s.rows() as f64; s.rows()]));
        };
        let mut tape = Tape::with_params(&self.params);
        let h = tape.constant(s.clone());
        let alpha = self.speech_alpha(&mut tape, h, att)?;
        Ok(Some(tape.value(alpha).data().to_vec()))
    }

    fn linear(&self, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let y = tape.matmul(x, tape.param(w))?;
        Ok(tape.add(y, tape.param(b))?)
    }

    fn text_layer(&self, tape: &mut Tape, x: Var, layer: &TextLayer) -> Result<Var> {
        let len = tape.value(x).rows();
        let d = self.config.d_model;
        let dh = d / self.config.heads;
        let q = tape.matmul(x, tape.param(layer.wq))?;
        let k = tape.matmul(x, tape.param(layer.wk))?;
        let v = tape.matmul(x, tape.param(layer.wv))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for hd in 0..self.config.heads {
            let qh = tape.slice(q, 1, hd * dh, dh)?;
            let kh = tape.slice(k, 1, hd * dh, dh)?;
            let vh = tape.slice(v, 1, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = tape.softmax(scores)?;
            debug_assert_eq!(tape.value(att).shape(), &[len, len]);
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let attn = tape.matmul(cat, tape.param(layer.wo))?;
        let x = tape.add(x, attn)?;
        let x = tape.layer_norm(x, tape.param(layer.ln1.0), tape.param(layer.ln1.1))?;
        let f = self.linear(tape, x, layer.ff1)?;
        let f = tape.relu(f)?;
        let f = self.linear(tape, f, layer.ff2)?;
        let x = tape.add(x, f)?;
        Ok(tape.layer_norm(x, tape.param(layer.ln2.0), tape.param(layer.ln2.1))?)
    }

    /// Unmasked class logits (`1×C`). With `zero_speech` the speech token is
    /// replaced by its projection of the zero vector.
    pub fn logits(&self, tape: &mut Tape, ex: &GroundingExample, zero_speech: bool) -> Result<Var> {
        let (v_sg, _) = self.graph_vector(tape, &ex.graph)?;
        let mut seq = Vec::with_capacity(4 + ex.tokens.len());
        let emb = tape.param(self.tok_emb);
        seq.push(tape.embedding_lookup(emb, &[CLS])?);
        seq.push(self.linear(tape, v_sg, self.proj_sg)?);
        if let Some(proj) = self.proj_speech {
            let s = ex.speech.as_ref().ok_or_else(|| Error::Config("model uses speech but the example has none".into()))?;
            let pooled = if zero_speech {
                tape.constant(Tensor::zeros(&[1, s.cols()]))
            } else {
                self.pool_speech_var(tape, s)?
            };
            seq.push(self.linear(tape, pooled, proj)?);
        }
        let room = self.config.max_len - seq.len() - 1;
        let tokens = &ex.tokens[..ex.tokens.len().min(room)];
        if !tokens.is_empty() {
            seq.push(tape.embedding_lookup(emb, tokens)?);
        }
        seq.push(tape.embedding_lookup(emb, &[SEP])?);
        let x = tape.concat(&seq, 0)?;
        let len = tape.value(x).rows();
        let pos = tape.slice(tape.param(self.pos_emb), 0, 0, len)?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.text_layers {
            x = self.text_layer(tape, x, layer)?;
        }
        let cls = tape.slice(x, 0, 0, 1)?;
        self.linear(tape, cls, self.classifier)
    }

    /// Cross-entropy of the target over the classes present in the graph,
    /// which equals masking absent classes to −∞.
    pub fn loss(&self, tape: &mut Tape, ex: &GroundingExample) -> Result<(Var, Var)> {
        let logits = self.logits(tape, ex, false)?;
        let present = &ex.graph.present;
        let target = present
            .iter()
            .position(|&c| c == ex.target)
            .ok_or_else(|| Error::Dataset("target class absent from graph".into()))?;
        let picked = tape.gather(logits, present, &[1, present.len()])?;
        Ok((tape.cross_entropy(picked, &[target])?, logits))
    }

    pub fn predict(&self, ex: &GroundingExample, zero_speech: bool) -> Result<Prediction> {
        let mut tape = Tape::with_params(&self.params);
        let logits = self.logits(&mut tape, ex, zero_speech)?;
        Ok(self.masked_prediction(tape.value(logits).data(), &ex.graph.present))
    }

    fn masked_prediction(&self, logits: &[f64], present: &[usize]) -> Prediction {
        let max = present.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut probabilities = vec![0.0; logits.len()];
        let mut total = 0.0;
        for &c in present {
            probabilities[c] = (logits[c] - max).exp();
            total += probabilities[c];
        }
        probabilities.iter_mut().for_each(|p| *p /= total);
        let class_index = present
            .iter()
            .copied()
            .fold(present[0], |best, c| if logits[c] > logits[best] { c } else { best });
        Prediction {
            class_index,
            class: self.classes[class_index].clone(),
            probabilities,
        }
    }

    /// Scene graph plus transcript (and speech latent if the model uses it)
    /// to a class distribution.
    pub fn ground(&self, graph: &SceneGraph, speech: Option<&Tensor>, words: &[String]) -> Result<Prediction> {
        let ex = self.prepare(graph, speech, words, None)?;
        self.predict(&ex, false)
    }

    /// Loss value and parameter gradients for one example.
    pub fn loss_and_grads(&self, ex: &GroundingExample) -> Result<(f64, Vec<Tensor>, usize)> {
        let mut tape = Tape::with_params(&self.params);
        let (loss, logits) = self.loss(&mut tape, ex)?;
        let pred = self.masked_prediction(tape.value(logits).data(), &ex.graph.present).class_index;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?.into_param_grads(), pred))
    }

    pub fn loss_value(&self, ex: &GroundingExample) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let (loss, _) = self.loss(&mut tape, ex)?;
        Ok(tape.value(loss).item())
    }

    /// Accuracy (fraction) and mean loss over `data`.
    pub fn evaluate(&self, data: &[GroundingExample], zero_speech: bool) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((0.0, 0.0));
        }
        let results: Vec<(bool, f64)> = data
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::with_params(&self.params);
                let logits = self.logits(&mut tape, ex, zero_speech)?;
                let pred = self.masked_prediction(tape.value(logits).data(), &ex.graph.present);
                let p = pred.probabilities[ex.target].max(f64::MIN_POSITIVE);
                Ok((pred.class_index == ex.target, -p.ln()))
            })
            .collect::<Result<_>>()?;
        let correct = results.iter().filter(|r| r.0).count();
        let loss: f64 = results.iter().map(|r| r.1).sum();
        Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrounderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// First restart period, in epochs.
    pub t0_epochs: usize,
    pub t_mult: u64,
    pub seed: u64,
}

impl Default for GrounderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            t0_epochs: 10,
            t_mult: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrounderEpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn write_grounder_log(log: &[GrounderEpochLog], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,split,accuracy,mean_loss")?;
    for e in log {
        writeln!(w, "{},{},{:.6},{:.6}", e.epoch, e.split, e.accuracy, e.mean_loss)?;
    }
    Ok(())
}

/// Mini-batch AdamW training with cosine annealing and warm restarts.
/// Train-split metrics come from the forward passes used for the updates;
/// the test split (if any) is evaluated after every epoch.
pub fn train_grounder(
    model: &mut GrounderModel,
    train: &[GroundingExample],
    test: &[GroundingExample],
    config: &GrounderTrainConfig,
) -> Result<Vec<GrounderEpochLog>> {
    if train.is_empty() {
        return Err(Error::Dataset("grounder training set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 || config.t0_epochs == 0 || config.t_mult == 0 {
        return Err(Error::Config("grounder epochs, batch size, t0 and t_mult must be positive".into()));
    }
    if let Some(i) = train.iter().position(|ex| ex.target >= model.classes.len()) {
        return Err(Error::Dataset(format!("training sample {i}: target outside the class vocabulary")));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let schedule = CosineRestartSchedule::new(config.lr_min.min(config.lr), config.lr, config.t0_epochs as u64 * steps_per_epoch, config.t_mult);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model.params.tensors(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor>, usize)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Num(numcore::NumError::NonFinite { op }) => Error::Diverged {
                        context: format!("non-finite {op} in batch with samples {batch:?}"),
                    },
                    other => other,
                })?;
            let mut sum: Option<Vec<Tensor>> = None;
            for ((loss, grads, pred), &i) in results.into_iter().zip(batch) {
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        context: format!("grounder sample {i}: loss {loss}"),
                    });
                }
                total += loss;
                correct += usize::from(pred == train[i].target);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => accumulate(acc, &grads),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            opt.step(model.params.tensors_mut(), &grads, schedule.lr(step))
                .map_err(|e| Error::Diverged {
                    context: format!("grounder update at epoch {epoch}: {e}"),
                })?;
            step += 1;
        }
        log.push(GrounderEpochLog {
            epoch,
            split: "train",
            accuracy: correct as f64 / train.len() as f64,
            mean_loss: total / train.len() as f64,
        });
        if !test.is_empty() {
            let (accuracy, mean_loss) = model.evaluate(test, false)?;
            log.push(GrounderEpochLog {
                epoch,
                split: "test",
                accuracy,
                mean_loss,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{build_scene_graph, ObjectRecord, WorldModel};

    fn small_config() -> GrounderConfig {
        GrounderConfig {
            d_model: 16,
            heads: 2,
            ffn: 24,
            text_layers: 1,
            gat_layers: 2,
            gat_dim: 8,
            speech_dim: 4,
            max_len: 16,
            use_speech: true,
            speech_pooling: SpeechPooling::Attention,
        }
    }

    fn latents(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, 4], (0..rows * 4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap()
    }

    fn world(objects: &[(&str, &str, f64, f64)]) -> SceneGraph {
        let w: WorldModel = objects
            .iter()
            .map(|&(id, text, x, y)| {
                let mut parts: Vec<&str> = text.split(' ').collect();
                let class = parts.pop().unwrap();
                ObjectRecord::new(id, class, &parts, [x, y, 0.0])
            })
            .collect();
        build_scene_graph(&w, 0.05).unwrap()
    }

    fn model() -> GrounderModel {
        let classes: Vec<String> = ["car", "red box", "door"].iter().map(|s| s.to_string()).collect();
        let vocab = Vocab::build(["go to car", "red box", "door", "left right front behind near"]);
        GrounderModel::new(small_config(), vocab, classes, 5).unwrap()
    }

    #[test]
    fn vocab_reserves_specials() {
        let v = Vocab::build(["b a", "a c"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("a b c"), vec![4, 5, 6]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn pool_speech_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![9.0, 9.0]]).unwrap();
        assert_eq!(pool_speech(&t, 1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool_speech(&t, 2).unwrap(), vec![2.0, 4.0]);
        assert!(matches!(pool_speech(&t, 0), Err(Error::EmptySpeech)));
    }

    #[test]
    fn node_and_edge_text_encoding() {
        let m = model();
        let g = world(&[("a", "car", 0.0, 0.0), ("b", "car", 1.0, 0.0), ("c", "door", 0.0, 0.0)]);
        let (x, e) = m.encode_node_edge_text(&g).unwrap();
        assert_eq!(x.row(0), x.row(1));
        // Single-token text is that token's embedding row.
        let emb = m.params.get(m.tok_emb);
        assert_eq!(x.row(2), emb.row(m.vocab.id("door")));
        assert_eq!(e.shape(), &[3, 3, 16]);

        let near = world(&[("a", "car", 0.0, 0.0), ("b", "door", 0.0, 0.0), ("c", "red box", 0.01, 0.0)]);
        let (_, e) = m.encode_node_edge_text(&near).unwrap();
        let d = 16;
        let first = e.data()[d..2 * d].to_vec();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                let cell = (i * 3 + j) * d;
                assert_eq!(&e.data()[cell..cell + d], &first[..]);
            }
        }
    }

    #[test]
    fn single_node_is_relu_of_transform() {
        let m = model();
        let g = world(&[("a", "car", 0.0, 0.0)]);
        let pg = m.prepare_graph(&g).unwrap();
        let mut tape = Tape::with_params(&m.params);
        let (v, _) = m.graph_vector(&mut tape, &pg).unwrap();
        let mut h: Vec<f64> = m.params.get(m.tok_emb).row(m.vocab.id("car")).to_vec();
        for layer in &m.gat_layers {
            let w = m.params.get(layer.w);
            h = (0..w.cols())
                .map(|c| (0..h.len()).map(|r| h[r] * w.at(r, c)).sum::<f64>().max(0.0))
                .collect();
        }
        let got = tape.value(v).data();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_symmetric_nodes_attend_fully() {
        let m = model();
        let g = world(&[("a", "car", 0.0, 0.0), ("b", "car", 0.0, 0.0)]);
        let pg = m.prepare_graph(&g).unwrap();
        let mut tape = Tape::with_params(&m.params);
        let (_, att) = m.graph_vector(&mut tape, &pg).unwrap();
        for a in att {
            assert_eq!(a.data(), &[0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn single_candidate_is_certain_and_all_masked_errors() {
        let m = model();
        let g = world(&[("a", "car", 0.0, 0.0), ("b", "bench", 1.0, 2.0)]);
        let words: Vec<String> = vec!["go".into(), "to".into(), "car".into()];
        let speech = Tensor::full(&[3, 4], 0.1);
        let p = m.ground(&g, Some(&speech), &words).unwrap();
        assert_eq!(p.class, "car");
        assert_eq!(p.probabilities[m.class_id("car").unwrap()], 1.0);
        let none = world(&[("a", "bench", 0.0, 0.0)]);
        assert!(matches!(m.ground(&none, Some(&speech), &words), Err(Error::AllClassesMasked)));
        assert!(m.ground(&g, None, &words).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_fd() {
        let mut m = model();
        let g = world(&[("a", "car", 0.0, 0.0), ("b", "red box", 1.0, 2.0), ("c", "door", -1.0, 0.5)]);
        let words: Vec<String> = vec!["go".into(), "to".into(), "door".into()];
        let ex = m.prepare(&g, Some(&latents(5, 3)), &words, Some("door")).unwrap();
        // Move the attention parameters off zero so their gradients are generic.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for name in ["speech_att.w", "speech_att.pos"] {
            let id = m.params.ids().find(|&id| m.params.name(id) == name).unwrap();
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rand::Rng::random_range(&mut rng, -0.5..0.5));
        }
        let (_, grads, _) = m.loss_and_grads(&ex).unwrap();
        let h = 1e-5;
        for id in m.params.ids().collect::<Vec<_>>() {
            let j = m.params.get(id).numel() / 2;
            let orig = m.params.get(id).data()[j];
            m.params.get_mut(id).data_mut()[j] = orig + h;
            let up = m.loss_value(&ex).unwrap();
            m.params.get_mut(id).data_mut()[j] = orig - h;
            let down = m.loss_value(&ex).unwrap();
            m.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].data()[j];
            let rel = numcore::gradcheck::relative_error(analytic, numeric);
            assert!(rel < 1e-3, "{}: {analytic} vs {numeric}", m.params.name(id));
        }
    }

    #[test]
    fn zero_attention_equals_mean_pooling() {
        let att = model();
        let mean = GrounderModel::new(
            GrounderConfig {
                speech_pooling: SpeechPooling::Mean,
                ..small_config()
            },
            att.vocab.clone(),
            att.classes.clone(),
            0,
        )
        .unwrap();
        let g = world(&[("a", "car", 0.0, 0.0), ("b", "door", 1.0, 0.0)]);
        let words: Vec<String> = vec!["go".into(), "to".into(), "car".into()];
        let s = latents(7, 1);
        let ex = att.prepare(&g, Some(&s), &words, None).unwrap();
        let w = att.speech_weights(&ex).unwrap().unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));

        let mut tape = Tape::with_params(&att.params);
        let a = att.pool_speech_var(&mut tape, &s).unwrap();
        let a = tape.value(a).data().to_vec();
        let mut tape = Tape::with_params(&mean.params);
        let m = mean.pool_speech_var(&mut tape, &s).unwrap();
        let expected = pool_speech(&s, 7).unwrap();
        for ((x, y), z) in a.iter().zip(tape.value(m).data()).zip(&expected) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut m = model();
        let id = m.params.ids().find(|&id| m.params.name(id) == "speech_att.pos").unwrap();
        m.params.get_mut(id).data_mut()[POSITION_BASIS - 1] = 3.0;
        let g = world(&[("a", "car", 0.0, 0.0)]);
        let ex = m.prepare(&g, Some(&latents(20, 2)), &[], None).unwrap();
        let w = m.speech_weights(&ex).unwrap().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // A positive weight on the last basis function favours late frames.
        assert!(w[19] > w[0]);
    }

    #[test]
    fn position_features_shape_and_peaks() {
        let phi = position_features(9);
        assert_eq!(phi.shape(), &[9, POSITION_BASIS]);
        assert!(phi.row(0)[0] > phi.row(0)[POSITION_BASIS - 1]);
        assert!(phi.row(8)[POSITION_BASIS - 1] > phi.row(8)[0]);
    }

    #[test]
    fn speech_norm_standardises_training_frames() {
        let a = latents(6, 4);
        let b = latents(3, 5);
        let norm = SpeechNorm::fit([&a, &b]).unwrap();
        let za = norm.apply(&a).unwrap();
        let zb = norm.apply(&b).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|t| za.row(t)[j]).chain((0..3).map(|t| zb.row(t)[j])).collect();
            let mean = col.iter().sum::<f64>() / 9.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        assert!(SpeechNorm::fit(std::iter::empty::<&Tensor>()).is_err());
        let mut m = model();
        assert!(m.set_speech_norm(Some(SpeechNorm { mean: vec![0.0; 3], std: vec![1.0; 3] })).is_err());
        m.set_speech_norm(Some(norm)).unwrap();
        let g = world(&[("a", "car", 0.0, 0.0)]);
        let ex = m.prepare(&g, Some(&a), &[], None).unwrap();
        assert_eq!(ex.speech.unwrap(), za);
    }
}
