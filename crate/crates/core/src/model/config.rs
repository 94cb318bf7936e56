use super::ModelError;

/// Shape of the toy decoder-only transformer.
///
/// `elem_bytes` is the width of *persisted* state elements (hidden states and
/// offloaded KV). Computation always runs in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub elem_bytes: usize,
    pub max_seq: usize,
    /// Pre-norm layer norms (scale 1, bias 0). Off turns them into identities.
    pub layer_norm: bool,
    /// Rotary embedding on Q and K.
    pub rope: bool,
    pub rope_base: f32,
}

impl ModelConfig {
    /// Desk-scale default: small enough to run real GEMMs in tests.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_hidden: 256,
            n_heads: 8,
            d_ffn: 1024,
            vocab_size: 1024,
            elem_bytes: 4,
            max_seq: 8192,
            layer_norm: true,
            rope: true,
            rope_base: 10_000.0,
        }
    }

    fn timing_preset(n_layers: usize, d_hidden: usize, n_heads: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            d_hidden,
            n_heads,
            d_ffn: 4 * d_hidden,
            vocab_size,
            elem_bytes: 2,
            max_seq: 16_384,
            layer_norm: true,
            rope: true,
            rope_base: 10_000.0,
        }
    }

    /// Llama2-7B shape, fp16 state. Used by the cost model and simulated clocks only.
    pub fn llama_7b() -> Self {
        Self::timing_preset(32, 4096, 32, 32_000)
    }

    /// Llama2-13B shape, fp16 state.
    pub fn llama_13b() -> Self {
        Self::timing_preset(40, 5120, 40, 32_000)
    }

    /// OPT-30B shape, fp16 state.
    pub fn opt_30b() -> Self {
        Self::timing_preset(48, 7168, 56, 50_272)
    }

    /// Look a preset up by its CLI name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "7b" | "llama-7b" => Some(Self::llama_7b()),
            "13b" | "llama-13b" => Some(Self::llama_13b()),
            "30b" | "opt-30b" => Some(Self::opt_30b()),
            _ => None,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    /// Width of one token's persisted KV row (K then V).
    pub fn kv_width(&self) -> usize {
        2 * self.d_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_hidden % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_hidden {} is not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.elem_bytes != 2 && self.elem_bytes != 4 {
            return Err(ModelError::InvalidConfig(format!(
                "elem_bytes must be 2 or 4, got {}",
                self.elem_bytes
            )));
        }
        if self.rope && self.d_head() % 2 != 0 {
            return Err(ModelError::OddHeadDim(self.d_head()));
        }
        if !(self.rope_base > 0.0) {
            return Err(ModelError::InvalidConfig("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// Bytes of one layer's hidden states for `n_tokens`.
    pub fn hidden_bytes(&self, n_tokens: usize) -> usize {
        n_tokens * self.d_hidden * self.elem_bytes
    }

    /// Bytes of one layer's K and V for `n_tokens`.
    pub fn kv_bytes(&self, n_tokens: usize) -> usize {
        n_tokens * self.kv_width() * self.elem_bytes
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
