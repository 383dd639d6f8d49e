//! Toy bidirectional masked-diffusion transformer with a row-partitioned forward pass.
//!
//! Each block is pre-normalized with residuals, `x + Attn(LN₁(x))` followed by
//! `+ FFN(LN₂(·))`, where the FFN is gated: `W_down(SiLU(x·W_gate) ⊙ x·W_up)`.
//! Positions are encoded by an additive learned table and attention is fully
//! bidirectional.
//!
//! [`forward_partial`] computes only the requested rows. Every other row is
//! *resident*: it issues no query, runs no projection or FFN, and contributes
//! keys and values read from the per-layer [`LayerKVCache`]. Its block input
//! passes through unchanged, so nothing else about it is needed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::GemmCounter;
use crate::numkit::{self, layer_norm, matmul_rows, silu, softmax_in_place, Matrix};
use crate::rng::SeededRng;

/// Standard deviation of the default parameter initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vocabulary size, including the MASK id (always the last id).
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The acceptance toy: V=32, d=32, 2 layers, room for 16 + 16 positions.
    pub fn toy() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 64,
            max_seq: 32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn mask_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig("vocab_size must be at least 3".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// Seed the parameters were drawn from, if they were generated.
    pub seed: Option<u64>,
    pub embedding: Matrix,
    pub positional: Matrix,
    pub layers: Vec<LayerWeights>,
    pub head: Matrix,
}

fn random_vec(len: usize, std: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..len).map(|_| rng.normal(0.0, std)).collect()
}

/// Parameters drawn i.i.d. from `N(0, 0.02²)`.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    init_weights_with_std(cfg, seed, INIT_STD)
}

/// Parameters drawn i.i.d. from `N(0, std²)` through one splitmix64/Box–Muller
/// stream, in this order: embedding, positional table, then each layer in
/// index order (`w_q, w_k, w_v, w_o, ln1_gain, ln1_bias, ln2_gain, ln2_bias,
/// w_up, w_gate, w_down`), then the output head. Matrices fill row by row.
pub fn init_weights_with_std(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Weights> {
    cfg.validate()?;
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::InvalidConfig(format!("init std {std} must be finite and ≥ 0")));
    }
    let mut rng = SeededRng::new(seed);
    let d = cfg.d_model;
    let kv = cfg.kv_dim();
    let embedding = Matrix::random_normal(cfg.vocab_size, d, std, &mut rng);
    let positional = Matrix::random_normal(cfg.max_seq, d, std, &mut rng);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            w_q: Matrix::random_normal(d, d, std, &mut rng),
            w_k: Matrix::random_normal(d, kv, std, &mut rng),
            w_v: Matrix::random_normal(d, kv, std, &mut rng),
            w_o: Matrix::random_normal(d, d, std, &mut rng),
            ln1_gain: random_vec(d, std, &mut rng),
            ln1_bias: random_vec(d, std, &mut rng),
            ln2_gain: random_vec(d, std, &mut rng),
            ln2_bias: random_vec(d, std, &mut rng),
            w_up: Matrix::random_normal(d, cfg.d_ff, std, &mut rng),
            w_gate: Matrix::random_normal(d, cfg.d_ff, std, &mut rng),
            w_down: Matrix::random_normal(cfg.d_ff, d, std, &mut rng),
        })
        .collect();
    let head = Matrix::random_normal(d, cfg.vocab_size, std, &mut rng);
    Ok(Weights {
        config: cfg.clone(),
        seed: Some(seed),
        embedding,
        positional,
        layers,
        head,
    })
}

impl Weights {
    /// Every parameter multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut w = self.clone();
        w.for_each_param_mut(|x| *x *= s);
        w
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let mut apply = |xs: &mut [f64]| xs.iter_mut().for_each(&mut f);
        apply(self.embedding.data_mut());
        apply(self.positional.data_mut());
        for l in &mut self.layers {
            apply(l.w_q.data_mut());
            apply(l.w_k.data_mut());
            apply(l.w_v.data_mut());
            apply(l.w_o.data_mut());
            apply(&mut l.ln1_gain);
            apply(&mut l.ln1_bias);
            apply(&mut l.ln2_gain);
            apply(&mut l.ln2_bias);
            apply(l.w_up.data_mut());
            apply(l.w_gate.data_mut());
            apply(l.w_down.data_mut());
        }
        apply(self.head.data_mut());
    }

    /// Named tensors in the fixed fill order.
    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), Tensor::from(&self.embedding)),
            ("positional".to_string(), Tensor::from(&self.positional)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            out.push((p("w_q"), Tensor::from(&l.w_q)));
            out.push((p("w_k"), Tensor::from(&l.w_k)));
            out.push((p("w_v"), Tensor::from(&l.w_v)));
            out.push((p("w_o"), Tensor::from(&l.w_o)));
            out.push((p("ln1_gain"), Tensor::Vector(l.ln1_gain.clone())));
            out.push((p("ln1_bias"), Tensor::Vector(l.ln1_bias.clone())));
            out.push((p("ln2_gain"), Tensor::Vector(l.ln2_gain.clone())));
            out.push((p("ln2_bias"), Tensor::Vector(l.ln2_bias.clone())));
            out.push((p("w_up"), Tensor::from(&l.w_up)));
            out.push((p("w_gate"), Tensor::from(&l.w_gate)));
            out.push((p("w_down"), Tensor::from(&l.w_down)));
        }
        out.push(("head".to_string(), Tensor::from(&self.head)));
        out
    }

    pub fn to_file_format(&self) -> WeightFile {
        WeightFile {
            config: self.config.clone(),
            seed: self.seed,
            tensors: self.tensors().into_iter().collect(),
        }
    }

    pub fn from_file_format(file: WeightFile) -> Result<Self> {
        let cfg = file.config;
        cfg.validate()?;
        let mut tensors = file.tensors;
        let d = cfg.d_model;
        let kv = cfg.kv_dim();
        let mut take_matrix = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
            match tensors.remove(&name) {
                Some(Tensor::Matrix(r)) => {
                    let m = Matrix::from_rows(&r)
                        .map_err(|_| Error::WeightFile(format!("{name}: ragged rows")))?;
                    if m.shape() != (rows, cols) {
                        return Err(Error::WeightFile(format!(
                            "{name}: shape {:?}, expected ({rows}, {cols})",
                            m.shape()
                        )));
                    }
                    Ok(m)
                }
                Some(Tensor::Vector(_)) => {
                    Err(Error::WeightFile(format!("{name}: expected a matrix")))
                }
                None => Err(Error::WeightFile(format!("missing tensor {name}"))),
            }
        };
        let embedding = take_matrix("embedding".into(), cfg.vocab_size, d)?;
        let positional = take_matrix("positional".into(), cfg.max_seq, d)?;
        let mut layer_mats = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |name: &str| format!("layers.{i}.{name}");
            layer_mats.push((
                take_matrix(p("w_q"), d, d)?,
                take_matrix(p("w_k"), d, kv)?,
                take_matrix(p("w_v"), d, kv)?,
                take_matrix(p("w_o"), d, d)?,
                take_matrix(p("w_up"), d, cfg.d_ff)?,
                take_matrix(p("w_gate"), d, cfg.d_ff)?,
                take_matrix(p("w_down"), cfg.d_ff, d)?,
            ));
        }
        let head = take_matrix("head".into(), d, cfg.vocab_size)?;

        let mut take_vector = |name: String| -> Result<Vec<f64>> {
            match tensors.remove(&name) {
                Some(Tensor::Vector(v)) if v.len() == d => Ok(v),
                Some(Tensor::Vector(v)) => Err(Error::WeightFile(format!(
                    "{name}: length {}, expected {d}",
                    v.len()
                ))),
                Some(Tensor::Matrix(_)) => {
                    Err(Error::WeightFile(format!("{name}: expected a vector")))
                }
                None => Err(Error::WeightFile(format!("missing tensor {name}"))),
            }
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (i, (w_q, w_k, w_v, w_o, w_up, w_gate, w_down)) in layer_mats.into_iter().enumerate() {
            let p = |name: &str| format!("layers.{i}.{name}");
            layers.push(LayerWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                ln1_gain: take_vector(p("ln1_gain"))?,
                ln1_bias: take_vector(p("ln1_bias"))?,
                ln2_gain: take_vector(p("ln2_gain"))?,
                ln2_bias: take_vector(p("ln2_bias"))?,
                w_up,
                w_gate,
                w_down,
            });
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::WeightFile(format!("unexpected tensor {name}")));
        }
        let w = Weights {
            config: cfg,
            seed: file.seed,
            embedding,
            positional,
            layers,
            head,
        };
        if !w.is_finite() {
            return Err(Error::WeightFile("non-finite parameter".into()));
        }
        Ok(w)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| match t {
            Tensor::Matrix(rows) => rows.iter().flatten().all(|x| x.is_finite()),
            Tensor::Vector(v) => v.iter().all(|x| x.is_finite()),
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_file_format())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let parsed: WeightFile = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_file_format(parsed)
    }
}

/// On-disk weight document: `{config, seed?, tensors}` with row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tensor {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor::Matrix(m.to_rows())
    }
}

/// Keys and values of one layer for every position, with a per-row validity bit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    keys: Matrix,
    values: Matrix,
    valid: Vec<bool>,
}

impl LayerKVCache {
    pub fn new(seq_len: usize, kv_dim: usize) -> Self {
        Self {
            keys: Matrix::zeros(seq_len, kv_dim),
            values: Matrix::zeros(seq_len, kv_dim),
            valid: vec![false; seq_len],
        }
    }

    /// One empty cache per layer.
    pub fn empty_stack(cfg: &ModelConfig, seq_len: usize) -> Vec<Self> {
        (0..cfg.n_layers)
            .map(|_| Self::new(seq_len, cfg.kv_dim()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }

    pub fn key(&self, row: usize) -> &[f64] {
        self.keys.row(row)
    }

    pub fn value(&self, row: usize) -> &[f64] {
        self.values.row(row)
    }

    pub fn store(&mut self, row: usize, key: &[f64], value: &[f64]) {
        self.keys.row_mut(row).copy_from_slice(key);
        self.values.row_mut(row).copy_from_slice(value);
        self.valid[row] = true;
    }

    pub fn invalidate(&mut self, row: usize) {
        self.valid[row] = false;
    }
}

/// Block-input rows `x̂` captured when a position is locked.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenInputs {
    rows: Matrix,
    valid: Vec<bool>,
}

impl FrozenInputs {
    pub fn new(seq_len: usize, d_model: usize) -> Self {
        Self {
            rows: Matrix::zeros(seq_len, d_model),
            valid: vec![false; seq_len],
        }
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    pub fn row(&self, row: usize) -> Option<&[f64]> {
        self.valid[row].then(|| self.rows.row(row))
    }

    pub fn capture(&mut self, row: usize, x: &[f64]) {
        self.rows.row_mut(row).copy_from_slice(x);
        self.valid[row] = true;
    }

    pub fn invalidate(&mut self, row: usize) {
        self.valid[row] = false;
    }
}

/// Fresh keys and values of one layer for the computed rows, in `rows` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FreshKv {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub kv_dim: usize,
}

impl FreshKv {
    pub fn key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.kv_dim..(slot + 1) * self.kv_dim]
    }

    pub fn value(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.kv_dim..(slot + 1) * self.kv_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Computed rows, in the order they were requested.
    pub rows: Vec<usize>,
    /// Logits per computed row.
    pub logits: Vec<Vec<f64>>,
    /// Per layer, the fresh K/V of the computed rows.
    pub fresh_kv: Vec<FreshKv>,
    /// Block input `x⁽¹⁾` of each computed row.
    pub block_inputs: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn slot_of(&self, row: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == row)
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_seq {
        return Err(Error::InvalidInput(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(t) = tokens.iter().find(|t| **t >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!("token id {t} outside vocabulary")));
    }
    Ok(())
}

/// `E[token] + P[position]`.
pub fn embed_row(w: &Weights, tokens: &[usize], row: usize) -> Vec<f64> {
    w.embedding
        .row(tokens[row])
        .iter()
        .zip(w.positional.row(row))
        .map(|(e, p)| e + p)
        .collect()
}

/// Forward pass over the rows in `rows`; all other rows are served from `caches`.
///
/// Each computed query attends to all `N` keys. The GEMMs are reported to
/// `counter`: Q, K, V, Out, QKᵀ and AV per head, and the three FFN matrices;
/// the output head goes to the counter's separate head tally.
pub fn forward_partial(
    w: &Weights,
    tokens: &[usize],
    rows: &[usize],
    caches: &[LayerKVCache],
    counter: &mut GemmCounter,
) -> Result<ForwardOutput> {
    let cfg = &w.config;
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    if rows.is_empty() {
        return Err(Error::NoWork("no rows to compute".into()));
    }
    if caches.len() != cfg.n_layers {
        return Err(Error::InvalidInput(format!(
            "{} caches for {} layers",
            caches.len(),
            cfg.n_layers
        )));
    }
    let mut computed = vec![false; n];
    for &r in rows {
        if r >= n {
            return Err(Error::InvalidInput(format!("row {r} outside sequence of length {n}")));
        }
        if std::mem::replace(&mut computed[r], true) {
            return Err(Error::InvalidInput(format!("row {r} requested twice")));
        }
    }
    for (layer, cache) in caches.iter().enumerate() {
        if cache.len() != n {
            return Err(Error::InvalidInput(format!(
                "layer {layer} cache covers {} rows, sequence has {n}",
                cache.len()
            )));
        }
        if let Some(r) = (0..n).find(|&r| !computed[r] && !cache.is_valid(r)) {
            return Err(Error::StateCorruption(format!(
                "resident row {r} has no cached K/V at layer {layer}"
            )));
        }
    }

    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let kv_dim = cfg.kv_dim();
    let group = cfg.n_heads / cfg.n_kv_heads;
    let c = rows.len();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let block_inputs: Vec<Vec<f64>> = rows.iter().map(|&r| embed_row(w, tokens, r)).collect();
    let mut x: Vec<f64> = block_inputs.iter().flatten().copied().collect();
    let mut fresh_kv = Vec::with_capacity(cfg.n_layers);

    for (layer, cache) in w.layers.iter().zip(caches) {
        let normed: Vec<f64> = x
            .chunks(d)
            .flat_map(|row| layer_norm(row, &layer.ln1_gain, &layer.ln1_bias))
            .collect();
        let q = matmul_rows(&normed, &layer.w_q);
        counter.gemm(c, d, d);
        let k = matmul_rows(&normed, &layer.w_k);
        counter.gemm(c, kv_dim, d);
        let v = matmul_rows(&normed, &layer.w_v);
        counter.gemm(c, kv_dim, d);

        // Full-length key/value tables: fresh rows where computed, cache elsewhere.
        let mut k_all = vec![0.0; n * kv_dim];
        let mut v_all = vec![0.0; n * kv_dim];
        for r in 0..n {
            if !computed[r] {
                k_all[r * kv_dim..(r + 1) * kv_dim].copy_from_slice(cache.key(r));
                v_all[r * kv_dim..(r + 1) * kv_dim].copy_from_slice(cache.value(r));
            }
        }
        for (slot, &r) in rows.iter().enumerate() {
            k_all[r * kv_dim..(r + 1) * kv_dim].copy_from_slice(&k[slot * kv_dim..(slot + 1) * kv_dim]);
            v_all[r * kv_dim..(r + 1) * kv_dim].copy_from_slice(&v[slot * kv_dim..(slot + 1) * kv_dim]);
        }

        let mut heads_out = vec![0.0; c * d];
        let mut scores = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let g = h / group;
            for slot in 0..c {
                let qh = &q[slot * d + h * dh..slot * d + (h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k_all[j * kv_dim + g * dh..j * kv_dim + (g + 1) * dh];
                    *s = numkit::dot(qh, kj) * inv_sqrt_dh;
                }
                softmax_in_place(&mut scores);
                let out = &mut heads_out[slot * d + h * dh..slot * d + (h + 1) * dh];
                for (j, a) in scores.iter().enumerate() {
                    let vj = &v_all[j * kv_dim + g * dh..j * kv_dim + (g + 1) * dh];
                    numkit::axpy(*a, vj, out);
                }
            }
            counter.gemm(c, n, dh);
            counter.gemm(c, dh, n);
        }
        let attn = matmul_rows(&heads_out, &layer.w_o);
        counter.gemm(c, d, d);
        x.iter_mut().zip(&attn).for_each(|(xi, a)| *xi += a);

        let normed: Vec<f64> = x
            .chunks(d)
            .flat_map(|row| layer_norm(row, &layer.ln2_gain, &layer.ln2_bias))
            .collect();
        let up = matmul_rows(&normed, &layer.w_up);
        counter.gemm(c, cfg.d_ff, d);
        let gate = matmul_rows(&normed, &layer.w_gate);
        counter.gemm(c, cfg.d_ff, d);
        let act: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| silu(*g) * u).collect();
        let down = matmul_rows(&act, &layer.w_down);
        counter.gemm(c, d, cfg.d_ff);
        x.iter_mut().zip(&down).for_each(|(xi, f)| *xi += f);

        fresh_kv.push(FreshKv {
            keys: k,
            values: v,
            kv_dim,
        });
    }

    let logits_flat = matmul_rows(&x, &w.head);
    counter.head_gemm(c, cfg.vocab_size, d);
    let logits = logits_flat
        .chunks(cfg.vocab_size)
        .map(<[f64]>::to_vec)
        .collect();

    Ok(ForwardOutput {
        rows: rows.to_vec(),
        logits,
        fresh_kv,
        block_inputs,
    })
}

/// Everything a plain full forward produces for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct FullForward {
    pub logits: Vec<Vec<f64>>,
    /// Per layer: keys and values as `N × kv_dim` matrices.
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub block_inputs: Vec<Vec<f64>>,
    /// Largest row norm seen at the output of any layer normalization.
    pub max_normed_row_norm: f64,
}

/// Straightforward all-rows forward pass with no caches, written independently of
/// [`forward_partial`] so it can serve as its oracle.
pub fn full_forward(w: &Weights, tokens: &[usize]) -> Result<FullForward> {
    let cfg = &w.config;
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let group = cfg.n_heads / cfg.n_kv_heads;

    let mut x: Vec<Vec<f64>> = (0..n).map(|i| embed_row(w, tokens, i)).collect();
    let block_inputs = x.clone();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut max_norm: f64 = 0.0;

    for layer in &w.layers {
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &layer.ln1_gain, &layer.ln1_bias))
            .collect();
        max_norm = a.iter().map(|r| numkit::l2_norm(r)).fold(max_norm, f64::max);
        let q: Vec<Vec<f64>> = a.iter().map(|r| layer.w_q.mul_vec_transposed(r)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| layer.w_k.mul_vec_transposed(r)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| layer.w_v.mul_vec_transposed(r)).collect();

        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            let g = h / group;
            let (qs, ks) = (h * dh..(h + 1) * dh, g * dh..(g + 1) * dh);
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| numkit::dot(&q[i][qs.clone()], &k[j][ks.clone()]) / (dh as f64).sqrt())
                    .collect();
                let alpha = numkit::softmax(&scores);
                for t in 0..dh {
                    concat[i][h * dh + t] = (0..n).map(|j| alpha[j] * v[j][g * dh + t]).sum();
                }
            }
        }
        for i in 0..n {
            let o = layer.w_o.mul_vec_transposed(&concat[i]);
            for (xi, oi) in x[i].iter_mut().zip(&o) {
                *xi += oi;
            }
            let b = layer_norm(&x[i], &layer.ln2_gain, &layer.ln2_bias);
            max_norm = max_norm.max(numkit::l2_norm(&b));
            let up = layer.w_up.mul_vec_transposed(&b);
            let gate = layer.w_gate.mul_vec_transposed(&b);
            let act: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * silu(*g)).collect();
            let f = layer.w_down.mul_vec_transposed(&act);
            for (xi, fi) in x[i].iter_mut().zip(&f) {
                *xi += fi;
            }
        }
        keys.push(Matrix::from_rows(&k)?);
        values.push(Matrix::from_rows(&v)?);
    }
    let logits = x.iter().map(|r| w.head.mul_vec_transposed(r)).collect();
    Ok(FullForward {
        logits,
        keys,
        values,
        block_inputs,
        max_normed_row_norm: max_norm,
    })
}

/// The gated feed-forward of one layer applied to a single normalized row.
pub fn feed_forward(layer: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let up = layer.w_up.mul_vec_transposed(x);
    let gate = layer.w_gate.mul_vec_transposed(x);
    let act: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * silu(*g)).collect();
    layer.w_down.mul_vec_transposed(&act)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 12,
            max_seq: 10,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        let mut c = small_cfg();
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small_cfg();
        c.vocab_size = 2;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        let a = init_weights(&cfg, 1).unwrap();
        let b = init_weights(&cfg, 1).unwrap();
        let c = init_weights(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn embedding_matches_prng_reimplementation() {
        // Independent splitmix64 + Box–Muller, cosine branch then sine branch.
        fn splitmix(state: &mut u64) -> u64 {
            *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = *state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            ..small_cfg()
        };
        let w = init_weights(&cfg, 77).unwrap();
        let mut state = 77u64;
        let mut expected = Vec::new();
        while expected.len() < 16 * 8 {
            let u1 = 1.0 - (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            let u2 = (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            expected.push(0.02 * r * th.cos());
            expected.push(0.02 * r * th.sin());
        }
        assert_eq!(w.embedding.data().len(), 128);
        for (a, b) in w.embedding.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let small = w.embedding.data().iter().filter(|v| v.abs() < 0.2).count();
        assert_eq!(small, 128);
    }

    #[test]
    fn weight_file_round_trip_and_shape_check() {
        let w = init_weights(&small_cfg(), 3).unwrap();
        let json = serde_json::to_string(&w.to_file_format()).unwrap();
        let back: WeightFile = serde_json::from_str(&json).unwrap();
        assert_eq!(Weights::from_file_format(back).unwrap(), w);

        let mut bad = w.to_file_format();
        bad.tensors.insert("head".into(), Tensor::Matrix(vec![vec![0.0; 3]; 8]));
        assert!(matches!(Weights::from_file_format(bad), Err(Error::WeightFile(_))));
        let mut missing = w.to_file_format();
        missing.tensors.remove("layers.1.ln2_bias");
        assert!(matches!(Weights::from_file_format(missing), Err(Error::WeightFile(_))));
    }

    fn tokens(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| (rng.next_u64() % cfg.vocab_size as u64) as usize).collect()
    }

    #[test]
    fn all_rows_partial_matches_reference() {
        let cfg = small_cfg();
        let w = init_weights_with_std(&cfg, 9, 0.5).unwrap();
        let toks = tokens(&cfg, 7, 1);
        let rows: Vec<usize> = (0..7).collect();
        let caches = LayerKVCache::empty_stack(&cfg, 7);
        let out = forward_partial(&w, &toks, &rows, &caches, &mut GemmCounter::new()).unwrap();
        let full = full_forward(&w, &toks).unwrap();
        for (a, b) in out.logits.iter().zip(&full.logits) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resident_rows_need_valid_cache() {
        let cfg = small_cfg();
        let w = init_weights(&cfg, 9).unwrap();
        let toks = tokens(&cfg, 5, 2);
        let caches = LayerKVCache::empty_stack(&cfg, 5);
        let err = forward_partial(&w, &toks, &[0, 1, 2], &caches, &mut GemmCounter::new());
        assert!(matches!(err, Err(Error::StateCorruption(_))));
        let err = forward_partial(&w, &toks, &[], &caches, &mut GemmCounter::new());
        assert!(matches!(err, Err(Error::NoWork(_))));
    }

    #[test]
    fn zero_scale_gives_uniform_logits() {
        let cfg = small_cfg();
        let w = init_weights(&cfg, 4).unwrap().scaled(0.0);
        let toks = tokens(&cfg, 6, 3);
        let caches = LayerKVCache::empty_stack(&cfg, 6);
        let rows: Vec<usize> = (0..6).collect();
        let out = forward_partial(&w, &toks, &rows, &caches, &mut GemmCounter::new()).unwrap();
        assert!(out.logits.iter().flatten().all(|v| *v == 0.0));
    }
}
