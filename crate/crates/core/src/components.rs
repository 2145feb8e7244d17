//! Band-wise model components, the fusion head, and the assembled models.
//!
//! A [`FusionModel`] is a list of branches feeding one fully connected head.
//! Each branch reads one input slot (a `[B,T,C]` batch), optionally gates its
//! channels with a mask row, and maps it to a fixed-width embedding through a
//! [`Component`]. The three architectures differ only in their slots:
//!
//! * `Plain` - one branch over all signals aligned to the fastest rate.
//! * `MultiWave` - one branch per frequency component of a grouping plan,
//!   plus an optional baseline branch over the aligned original signals.
//! * `Fft` - twin branches over magnitude spectra and raw signals, fused by a
//!   two-layer head.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouping::{assemble_inputs, resample_linear, GroupingPlan, SignalSpec};
use crate::masking::{apply_masks, MaskBank, MaskRow};
use crate::tensor::{Bindings, Graph, ParamId, ParamStore, Tensor, Var};
use crate::wavelet::{decompose, Band, Signal, WaveletFilters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    Mlp,
    Lstm,
    CnnAttn,
    CnnLstm,
    Fcn,
    Transformer,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::Mlp,
        ComponentKind::Lstm,
        ComponentKind::CnnAttn,
        ComponentKind::CnnLstm,
        ComponentKind::Fcn,
        ComponentKind::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Mlp => "mlp",
            ComponentKind::Lstm => "lstm",
            ComponentKind::CnnAttn => "cnn-attn",
            ComponentKind::CnnLstm => "cnn-lstm",
            ComponentKind::Fcn => "fcn",
            ComponentKind::Transformer => "transformer",
        }
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown component kind `{s}` (expected one of mlp, lstm, cnn-attn, cnn-lstm, fcn, transformer)"
                ))
            })
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Size knobs of a component. `hidden` is the LSTM cell size, CNN channel
/// width, or transformer embedding size, and always the embedding width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentConfig {
    pub kind: ComponentKind,
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ComponentConfig {
    fn default() -> Self {
        ComponentConfig {
            kind: ComponentKind::Lstm,
            hidden: 16,
            kernel: 7,
            layers: 1,
            heads: 3,
        }
    }
}

impl ComponentConfig {
    pub fn new(kind: ComponentKind, hidden: usize) -> Self {
        ComponentConfig { kind, hidden, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.kernel == 0 || self.heads == 0 {
            return Err(Error::invalid(format!("component sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    out: usize,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: store.add_uniform(format!("{name}.w"), &[inp, out], inp, rng),
            b: store.add_uniform(format!("{name}.b"), &[out], inp, rng),
            out,
        }
    }

    /// `[N, in] -> [N, out]`
    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_trailing(y, p[self.b])
    }

    /// `[B, T, in] -> [B, T, out]`
    fn forward_seq(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.forward(g, p, flat)?;
        g.reshape(y, &[s[0], s[1], self.out])
    }
}

#[derive(Clone, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
    size: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, size: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = size * cin;
        Conv {
            kernel: store.add_uniform(format!("{name}.kernel"), &[size, cin, cout], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng),
            size,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p[self.kernel], (self.size - 1) / 2)?;
        let y = g.add_trailing(y, p[self.bias])?;
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl LstmLayer {
    fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmLayer {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[inp, 4 * hidden], hidden, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[4 * hidden], hidden, rng),
            hidden,
        }
    }

    /// Runs over `x [B,T,C]`; returns the final hidden state and, when
    /// requested, the hidden sequence `[B,T,H]`.
    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, keep_sequence: bool) -> Result<(Var, Option<Var>)> {
        let s = g.value(x).shape().to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let h4 = 4 * self.hidden;
        let flat = g.reshape(x, &[b * t, c])?;
        let proj = g.matmul(flat, p[self.w_ih])?;
        let proj = g.add_trailing(proj, p[self.bias])?;
        let proj = g.reshape(proj, &[b, t, h4])?;
        let hd = self.hidden;
        let mut h: Option<Var> = None;
        let mut cell: Option<Var> = None;
        let mut seq = Vec::new();
        for step in 0..t {
            let mut gates = g.time_step(proj, step)?;
            if let Some(hp) = h {
                let rec = g.matmul(hp, p[self.w_hh])?;
                gates = g.add(gates, rec)?;
            }
            let both = g.lstm_cell(gates, cell)?;
            let h_new = g.slice_last(both, 0, hd)?;
            let c_new = g.slice_last(both, hd, 2 * hd)?;
            cell = Some(c_new);
            h = Some(h_new);
            if keep_sequence {
                seq.push(h_new);
            }
        }
        let last = h.ok_or_else(|| Error::invalid("lstm: empty sequence"))?;
        let sequence = if keep_sequence {
            let cat = g.concat(&seq)?;
            Some(g.reshape(cat, &[b, t, hd])?)
        } else {
            None
        };
        Ok((last, sequence))
    }
}

#[derive(Clone, Debug)]
struct AttentionPool {
    score: Dense,
    v: ParamId,
}

impl AttentionPool {
    fn forward(&self, g: &mut Graph, p: &Bindings, h: Var) -> Result<Var> {
        let s = g.value(h).shape().to_vec();
        let e = self.score.forward_seq(g, p, h)?;
        let e = g.tanh(e)?;
        let flat = g.reshape(e, &[s[0] * s[1], self.score.out])?;
        let scores = g.matmul(flat, p[self.v])?;
        let scores = g.reshape(scores, &[s[0], s[1]])?;
        let weights = g.softmax(scores)?;
        g.weighted_time_sum(h, weights)
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln1: (ParamId, ParamId),
    ff1: Dense,
    ff2: Dense,
    ln2: (ParamId, ParamId),
    heads: usize,
    head_dim: usize,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let head_dim = (d / heads).max(1);
        let inner = heads * head_dim;
        EncoderBlock {
            q: Dense::new(store, &format!("{name}.q"), d, inner, rng),
            k: Dense::new(store, &format!("{name}.k"), d, inner, rng),
            v: Dense::new(store, &format!("{name}.v"), d, inner, rng),
            o: Dense::new(store, &format!("{name}.o"), inner, d, rng),
            ln1: (
                store.add(format!("{name}.ln1.gain"), Tensor::full(&[d], 1.0)),
                store.add(format!("{name}.ln1.bias"), Tensor::zeros(&[d])),
            ),
            ff1: Dense::new(store, &format!("{name}.ff1"), d, 2 * d, rng),
            ff2: Dense::new(store, &format!("{name}.ff2"), 2 * d, d, rng),
            ln2: (
                store.add(format!("{name}.ln2.gain"), Tensor::full(&[d], 1.0)),
                store.add(format!("{name}.ln2.bias"), Tensor::zeros(&[d])),
            ),
            heads,
            head_dim,
        }
    }

    fn norm(g: &mut Graph, p: &Bindings, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let n = g.mul_trailing(n, p[gain])?;
        g.add_trailing(n, p[bias])
    }

    /// Post-norm encoder layer over `x [B,T,d]`.
    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let q = self.q.forward_seq(g, p, x)?;
        let k = self.k.forward_seq(g, p, x)?;
        let v = self.v.forward_seq(g, p, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = g.slice_last(q, lo, hi)?;
            let kh = g.slice_last(k, lo, hi)?;
            let vh = g.slice_last(v, lo, hi)?;
            let scores = g.bmm(qh, kh, true)?;
            let scores = g.scale(scores, scale)?;
            let att = g.softmax(scores)?;
            heads.push(g.bmm(att, vh, false)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        let attn = self.o.forward_seq(g, p, cat)?;
        let x = g.add(x, attn)?;
        let x = Self::norm(g, p, x, self.ln1)?;
        let f = self.ff1.forward_seq(g, p, x)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward_seq(g, p, f)?;
        let x = g.add(x, f)?;
        Self::norm(g, p, x, self.ln2)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Mlp(Vec<Dense>),
    Lstm(Vec<LstmLayer>),
    CnnAttn(Vec<Conv>, AttentionPool),
    CnnLstm(Vec<Conv>, LstmLayer),
    Fcn(Vec<Conv>),
    Transformer(Dense, Vec<EncoderBlock>),
}

/// One trainable sequence model `Φ_j` mapping `[B,T,C]` to `[B,hidden]`.
#[derive(Clone, Debug)]
pub struct Component {
    pub config: ComponentConfig,
    pub input_width: usize,
    body: Body,
}

fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::raw(vec![t, d], data)
}

/// Half-sample symmetric extension indices padding `len` up to `target`.
fn symmetric_pad_index(len: usize, target: usize) -> Vec<usize> {
    let left = (target - len) / 2;
    (0..target)
        .map(|o| {
            let mut i = o as isize - left as isize;
            let n = len as isize;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    break i as usize;
                }
            }
        })
        .collect()
}

impl Component {
    pub fn new(config: &ComponentConfig, input_width: usize, store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::invalid("component input width must be positive"));
        }
        let h = config.hidden;
        let convs = |store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Vec<Conv> {
            (0..config.layers)
                .map(|l| {
                    let cin = if l == 0 { input_width } else { h };
                    Conv::new(store, &format!("{name}.conv{l}"), config.kernel, cin, h, rng)
                })
                .collect()
        };
        let body = match config.kind {
            ComponentKind::Mlp => Body::Mlp(
                (0..config.layers)
                    .map(|l| {
                        let inp = if l == 0 { input_width } else { h };
                        Dense::new(store, &format!("{name}.dense{l}"), inp, h, rng)
                    })
                    .collect(),
            ),
            ComponentKind::Lstm => Body::Lstm(
                (0..config.layers)
                    .map(|l| {
                        let inp = if l == 0 { input_width } else { h };
                        LstmLayer::new(store, &format!("{name}.lstm{l}"), inp, h, rng)
                    })
                    .collect(),
            ),
            ComponentKind::CnnAttn => {
                let c = convs(store, rng);
                let score = Dense::new(store, &format!("{name}.attn"), h, h, rng);
                let v = store.add_uniform(format!("{name}.attn.v"), &[h, 1], h, rng);
                Body::CnnAttn(c, AttentionPool { score, v })
            }
            ComponentKind::CnnLstm => {
                let c = convs(store, rng);
                Body::CnnLstm(c, LstmLayer::new(store, &format!("{name}.lstm"), h, h, rng))
            }
            ComponentKind::Fcn => Body::Fcn(convs(store, rng)),
            ComponentKind::Transformer => {
                let input = Dense::new(store, &format!("{name}.embed"), input_width, h, rng);
                let blocks = (0..config.layers)
                    .map(|l| EncoderBlock::new(store, &format!("{name}.block{l}"), h, config.heads, rng))
                    .collect();
                Body::Transformer(input, blocks)
            }
        };
        Ok(Component { config: config.clone(), input_width, body })
    }

    pub fn embedding_width(&self) -> usize {
        self.config.hidden
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.input_width {
            return Err(Error::shape("component_forward", &shape, &[0, 0, self.input_width]));
        }
        let run_convs = |g: &mut Graph, convs: &[Conv], mut x: Var| -> Result<Var> {
            let t = g.value(x).shape()[1];
            if t < self.config.kernel {
                x = g.gather_time(x, &symmetric_pad_index(t, self.config.kernel))?;
            }
            for c in convs {
                x = c.forward(g, p, x)?;
            }
            Ok(x)
        };
        match &self.body {
            Body::Mlp(layers) => {
                let mut h = x;
                for d in layers {
                    h = d.forward_seq(g, p, h)?;
                    h = g.relu(h)?;
                }
                g.mean_time(h)
            }
            Body::Lstm(layers) => {
                let mut h = x;
                let mut last = None;
                for (i, l) in layers.iter().enumerate() {
                    let keep = i + 1 < layers.len();
                    let (hl, seq) = l.forward(g, p, h, keep)?;
                    last = Some(hl);
                    if let Some(s) = seq {
                        h = s;
                    }
                }
                Ok(last.expect("at least one layer"))
            }
            Body::CnnAttn(convs, pool) => {
                let h = run_convs(g, convs, x)?;
                pool.forward(g, p, h)
            }
            Body::CnnLstm(convs, lstm) => {
                let h = run_convs(g, convs, x)?;
                Ok(lstm.forward(g, p, h, false)?.0)
            }
            Body::Fcn(convs) => {
                let h = run_convs(g, convs, x)?;
                g.mean_time(h)
            }
            Body::Transformer(embed, blocks) => {
                let mut h = embed.forward_seq(g, p, x)?;
                let pe = g.constant(sinusoidal_positions(shape[1], self.config.hidden));
                h = g.add_trailing(h, pe)?;
                for b in blocks {
                    h = b.forward(g, p, h)?;
                }
                g.mean_time(h)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    /// Head width: one output for regression and binary classification.
    pub fn output_width(&self) -> usize {
        match *self {
            Task::Regression => 1,
            Task::Classification { classes } if classes <= 2 => 1,
            Task::Classification { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Architecture {
    Plain,
    MultiWave {
        plan: GroupingPlan,
        wavelet: String,
        masks: bool,
        add_baseline: bool,
        init_mask: f64,
    },
    Fft,
}

/// Everything needed to rebuild a model deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub component: ComponentConfig,
    pub signals: Vec<SignalSpec>,
    pub task: Task,
    pub seed: u64,
}

impl ModelSpec {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(FusionModel::build(self)?.store.scalar_count())
    }
}

#[derive(Clone, Debug)]
struct BranchMask {
    param: ParamId,
    signals: Vec<String>,
    bands: Vec<Band>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    /// `"1"`, `"2"`, ... for frequency components, otherwise a role name.
    pub label: String,
    pub slot: usize,
    mask: Option<BranchMask>,
    pub component: Component,
}

impl Branch {
    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }
}

/// Branches plus fully connected fusion head over their concatenated embeddings.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub branches: Vec<Branch>,
    head: Vec<Dense>,
}

fn fastest_len(signals: &[SignalSpec]) -> usize {
    signals
        .iter()
        .max_by(|a, b| a.rate.total_cmp(&b.rate))
        .map_or(0, |s| s.len)
}

fn is_uniform(signals: &[SignalSpec]) -> bool {
    signals.windows(2).all(|w| w[0].rate == w[1].rate && w[0].len == w[1].len)
}

/// Row-major `[T, C]` tensor from `C` equally long series.
fn channels_last(series: &[Vec<f64>]) -> Tensor {
    let t = series.first().map_or(0, Vec::len);
    let c = series.len();
    let mut data = vec![0.0; t * c];
    for (ci, s) in series.iter().enumerate() {
        for (ti, v) in s.iter().enumerate() {
            data[ti * c + ci] = *v;
        }
    }
    Tensor::raw(vec![t, c], data)
}

/// Magnitude of the real FFT, bins `0..=n/2`.
pub fn magnitude_spectrum(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

impl FusionModel {
    /// Creates the architecture described by `spec` with fresh parameters.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        if spec.signals.is_empty() {
            return Err(Error::invalid("model needs at least one signal"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let m = spec.signals.len();
        let cfg = &spec.component;
        let mut branches = Vec::new();
        let mut push = |store: &mut ParamStore, label: String, slot: usize, width: usize, mask: Option<(Vec<String>, Vec<Band>, f64)>, rng: &mut ChaCha8Rng| -> Result<()> {
            let component = Component::new(cfg, width, store, &format!("branch{slot}"), rng)?;
            let mask = mask.map(|(signals, bands, init)| BranchMask {
                param: store.add(format!("mask.{label}"), Tensor::full(&[signals.len()], init)),
                signals,
                bands,
            });
            branches.push(Branch { label, slot, mask, component });
            Ok(())
        };
        match &spec.architecture {
            Architecture::Plain => push(&mut store, "plain".into(), 0, m, None, &mut rng)?,
            Architecture::Fft => {
                if !is_uniform(&spec.signals) {
                    return Err(Error::invalid("the FFT comparison model needs uniformly sampled signals"));
                }
                push(&mut store, "spectrum".into(), 0, m, None, &mut rng)?;
                push(&mut store, "signal".into(), 1, m, None, &mut rng)?;
            }
            Architecture::MultiWave { plan, masks, add_baseline, init_mask, .. } => {
                if plan.signals.len() != m || plan.signals.iter().zip(&spec.signals).any(|(p, s)| p.name != s.name) {
                    return Err(Error::invalid("grouping plan does not match the model signals"));
                }
                for (j, entries) in plan.components.iter().enumerate() {
                    let mask = masks.then(|| {
                        (
                            entries.iter().map(|e| e.name.clone()).collect(),
                            entries.iter().map(|e| e.band).collect(),
                            *init_mask,
                        )
                    });
                    push(&mut store, (j + 1).to_string(), j, entries.len(), mask, &mut rng)?;
                }
                if *add_baseline {
                    let mask = masks.then(|| {
                        (
                            spec.signals.iter().map(|s| s.name.clone()).collect(),
                            spec.signals.iter().map(|s| Band { low_hz: 0.0, high_hz: s.rate }).collect(),
                            *init_mask,
                        )
                    });
                    push(&mut store, "baseline".into(), plan.components.len(), m, mask, &mut rng)?;
                }
            }
        }
        let fused: usize = branches.iter().map(|b| b.component.embedding_width()).sum();
        let out = spec.task.output_width();
        let head = match spec.architecture {
            Architecture::Fft => vec![
                Dense::new(&mut store, "head.fc0", fused, cfg.hidden, &mut rng),
                Dense::new(&mut store, "head.fc1", cfg.hidden, out, &mut rng),
            ],
            _ => vec![Dense::new(&mut store, "head.fc", fused, out, &mut rng)],
        };
        Ok(FusionModel { spec: spec.clone(), store, branches, head })
    }

    pub fn slot_count(&self) -> usize {
        self.branches.iter().map(|b| b.slot + 1).max().unwrap_or(0)
    }

    /// Converts one sample (one series per signal, in spec order) into the
    /// `[T, C]` input of every slot.
    pub fn featurize(&self, series: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let signals = &self.spec.signals;
        if series.len() != signals.len() {
            return Err(Error::invalid(format!(
                "sample has {} signals, model expects {}",
                series.len(),
                signals.len()
            )));
        }
        let aligned = || -> Tensor {
            let t = fastest_len(signals);
            let rows: Vec<Vec<f64>> = series.iter().map(|s| resample_linear(s, t)).collect();
            channels_last(&rows)
        };
        match &self.spec.architecture {
            Architecture::Plain => Ok(vec![aligned()]),
            Architecture::Fft => {
                let spectra: Vec<Vec<f64>> = series.iter().map(|s| magnitude_spectrum(s)).collect();
                Ok(vec![channels_last(&spectra), channels_last(series)])
            }
            Architecture::MultiWave { plan, wavelet, add_baseline, .. } => {
                let filters = WaveletFilters::by_name(wavelet)?;
                let decs = series
                    .iter()
                    .zip(&plan.signals)
                    .map(|(s, p)| decompose(&Signal::new(p.name.clone(), s.clone(), p.rate)?, &filters, p.levels))
                    .collect::<Result<Vec<_>>>()?;
                let mut slots: Vec<Tensor> = assemble_inputs(&decs, plan)?
                    .into_iter()
                    .map(|c| channels_last(&c.series))
                    .collect();
                if *add_baseline {
                    slots.push(aligned());
                }
                Ok(slots)
            }
        }
    }

    pub fn mask_params(&self) -> Vec<ParamId> {
        self.branches.iter().filter_map(|b| b.mask.as_ref().map(|m| m.param)).collect()
    }

    pub fn mask_bank(&self) -> MaskBank {
        MaskBank {
            rows: self
                .branches
                .iter()
                .filter_map(|b| {
                    b.mask.as_ref().map(|m| MaskRow {
                        component: b.label.clone(),
                        signals: m.signals.clone(),
                        bands: m.bands.clone(),
                        raw: self.store.get(m.param).data().to_vec(),
                    })
                })
                .collect(),
        }
    }

    /// Embeddings of every branch, masks applied, in branch order.
    pub fn embeddings(&self, g: &mut Graph, p: &Bindings, slots: &[Var]) -> Result<Vec<Var>> {
        if slots.len() != self.slot_count() {
            return Err(Error::invalid(format!(
                "model has {} input slots, got {}",
                self.slot_count(),
                slots.len()
            )));
        }
        self.branches
            .iter()
            .map(|b| {
                let mut x = slots[b.slot];
                if let Some(m) = &b.mask {
                    x = apply_masks(g, x, p[m.param])?;
                }
                b.component.forward(g, p, x)
            })
            .collect()
    }

    /// Head output `[B, out]` for batched slots `[B,T_s,C_s]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, slots: &[Var]) -> Result<Var> {
        let embs = self.embeddings(g, p, slots)?;
        let mut h = if embs.len() == 1 { embs[0] } else { g.concat(&embs)? };
        for (i, d) in self.head.iter().enumerate() {
            if i > 0 {
                h = g.relu(h)?;
            }
            h = d.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// Convenience forward pass without gradients.
    pub fn predict(&self, batch: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let slots: Vec<Var> = batch.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &p, &slots)?;
        Ok(g.value(out).clone())
    }
}

/// Stacks per-sample `[T, C]` slot tensors into `[B, T, C]` batches.
pub fn stack_batch(samples: &[&[Tensor]]) -> Result<Vec<Tensor>> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    (0..first.len())
        .map(|s| {
            let shape = first[s].shape().to_vec();
            let mut data = Vec::with_capacity(samples.len() * first[s].len());
            for sample in samples {
                if sample[s].shape() != shape.as_slice() {
                    return Err(Error::shape("stack_batch", &shape, sample[s].shape()));
                }
                data.extend_from_slice(sample[s].data());
            }
            let mut full = vec![samples.len()];
            full.extend(shape);
            Ok(Tensor::raw(full, data))
        })
        .collect()
}

/// Smallest `hidden` whose parameter count lands closest to `target`.
pub fn match_hidden(target: usize, max_hidden: usize, build: impl Fn(usize) -> Result<ModelSpec>) -> Result<usize> {
    let mut best = (usize::MAX, 1);
    for h in 1..=max_hidden {
        let n = build(h)?.parameter_count()?;
        let diff = n.abs_diff(target);
        if diff < best.0 {
            best = (diff, h);
        }
        if n > target {
            break;
        }
    }
    Ok(best.1)
}
