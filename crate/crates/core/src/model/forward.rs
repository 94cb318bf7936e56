use std::ops::Range;
use std::sync::Arc;

use super::layer::{attention_forward, ffn_forward, kv_from_normed, layer_norm};
use super::tensor::{dot, FlopCounter, Matrix};
use super::{HiddenStates, KvCache, ModelConfig, ModelError, TokenSeq, WeightSet};

/// Result of running the whole layer stack over a block of tokens.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Input of every layer, for the tokens just processed.
    pub hidden: Vec<HiddenStates>,
    /// Output of the last layer (before the final norm).
    pub output: Matrix,
    /// Greedy pick after the last processed token.
    pub next_token: u32,
}

/// Immutable weights plus a FLOP counter charged by the layer kernels.
///
/// The output head is not charged; the counter tracks layer work only.
#[derive(Debug)]
pub struct Model {
    weights: Arc<WeightSet>,
    flops: FlopCounter,
}

impl Model {
    pub fn new(weights: WeightSet) -> Self {
        Self::from_shared(Arc::new(weights))
    }

    pub fn from_shared(weights: Arc<WeightSet>) -> Self {
        Self { weights, flops: FlopCounter::default() }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(Self::new(WeightSet::init(config, seed)?))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Arc<WeightSet> {
        &self.weights
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        let cfg = self.config();
        let mut x = Matrix::zeros(tokens.len(), cfg.d_hidden);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
            }
            x.row_mut(i).copy_from_slice(self.weights.embedding.row(t as usize));
        }
        Ok(x)
    }

    /// Run `layers` over `x`, the input of the first layer in the range, for
    /// tokens at positions `start..start + x.rows()`. Each layer's K and V are
    /// appended to `kv`, whose length at those layers must equal `start`.
    /// Returns the output of the last layer in the range and each layer's input.
    pub fn forward_layers(
        &self,
        mut x: Matrix,
        start: usize,
        layers: Range<usize>,
        kv: &mut KvCache,
    ) -> Result<(Matrix, Vec<HiddenStates>), ModelError> {
        let cfg = self.config();
        if layers.end > cfg.n_layers || kv.n_layers() != cfg.n_layers || kv.d_hidden() != cfg.d_hidden {
            return Err(ModelError::ShapeMismatch("layer range or cache does not fit the model".into()));
        }
        if x.cols() != cfg.d_hidden {
            return Err(ModelError::ShapeMismatch(format!("input width {} != {}", x.cols(), cfg.d_hidden)));
        }
        let positions: Vec<usize> = (start..start + x.rows()).collect();
        let mut hidden = Vec::with_capacity(layers.len());
        for l in layers {
            let w = &self.weights.layers[l];
            hidden.push(HiddenStates { layer: l, start, data: x.clone() });
            let a = layer_norm(&x, &w.ln1_scale, &w.ln1_bias, cfg.layer_norm);
            let (k, v) = kv_from_normed(&a, &positions, w, cfg, &self.flops)?;
            kv.append(l, start, &k, &v)?;
            let attn = attention_forward(&a, &positions, kv.layer(l), w, cfg, &self.flops)?;
            add_in_place(&mut x, &attn);
            let b = layer_norm(&x, &w.ln2_scale, &w.ln2_bias, cfg.layer_norm);
            let f = ffn_forward(&b, w, cfg, &self.flops)?;
            add_in_place(&mut x, &f);
        }
        Ok((x, hidden))
    }

    /// Forward pass over a prompt from an empty cache.
    pub fn prefill(&self, tokens: &TokenSeq) -> Result<(KvCache, Forward), ModelError> {
        let cfg = self.config();
        let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
        let out = self.extend(&mut kv, &tokens.0)?;
        Ok((kv, out))
    }

    /// Process `tokens` at the positions following what `kv` already holds.
    pub fn extend(&self, kv: &mut KvCache, tokens: &[u32]) -> Result<Forward, ModelError> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let start = kv
            .len()
            .ok_or_else(|| ModelError::ShapeMismatch("cache layers have different lengths".into()))?;
        if start + tokens.len() > cfg.max_seq {
            return Err(ModelError::Overlength { len: start + tokens.len(), max: cfg.max_seq });
        }
        let x = self.embed(tokens)?;
        let (output, hidden) = self.forward_layers(x, start, 0..cfg.n_layers, kv)?;
        let next_token = self.next_token(&output);
        Ok(Forward { hidden, output, next_token })
    }

    /// Feed one token after a non-empty cache and pick the next one greedily.
    pub fn decode_step(&self, kv: &mut KvCache, token: u32) -> Result<Forward, ModelError> {
        match kv.len() {
            Some(0) => return Err(ModelError::EmptyInput),
            Some(n) if n >= self.config().max_seq => return Err(ModelError::KvFull(n)),
            _ => {}
        }
        self.extend(kv, &[token])
    }

    /// Rebuild one layer's K and V from that layer's input hidden states at
    /// their original absolute positions.
    pub fn project_hidden_to_kv(
        &self,
        layer: usize,
        hidden: &Matrix,
        positions: &[usize],
    ) -> Result<(Matrix, Matrix), ModelError> {
        let w = self
            .weights
            .layers
            .get(layer)
            .ok_or_else(|| ModelError::ShapeMismatch(format!("no layer {layer}")))?;
        super::layer::project_hidden_to_kv(hidden, positions, w, self.config(), &self.flops)
    }

    /// Logits of the last row of a final-layer output.
    pub fn logits(&self, output: &Matrix) -> Vec<f32> {
        let cfg = self.config();
        let last = output.slice_rows(output.rows() - 1, output.rows());
        let normed = layer_norm(&last, &self.weights.final_scale, &self.weights.final_bias, cfg.layer_norm);
        (0..cfg.vocab_size).map(|t| dot(normed.row(0), self.weights.embedding.row(t))).collect()
    }

    /// Argmax of the logits; ties go to the lowest token id.
    pub fn next_token(&self, output: &Matrix) -> u32 {
        let logits = self.logits(output);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best as u32
    }
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}
