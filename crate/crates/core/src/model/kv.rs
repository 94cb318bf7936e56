use super::{Matrix, ModelError};

/// One layer's cached keys and values, `len × d_hidden` each, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub len: usize,
}

/// Per-layer KV cache. Only appended to by a single writer.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    d_hidden: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize, d_hidden: usize) -> Self {
        Self { d_hidden, layers: vec![LayerKv::default(); n_layers] }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    /// Cached length, or `None` if layers disagree (a restore in progress).
    pub fn len(&self) -> Option<usize> {
        let first = self.layers.first().map_or(0, |l| l.len);
        self.layers.iter().all(|l| l.len == first).then_some(first)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer]
    }

    /// Append `k`/`v` rows for positions starting at `start`, which must equal the
    /// layer's current length.
    pub fn append(&mut self, layer: usize, start: usize, k: &Matrix, v: &Matrix) -> Result<(), ModelError> {
        let d = self.d_hidden;
        let slot = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| ModelError::ShapeMismatch(format!("no layer {layer}")))?;
        if start != slot.len {
            return Err(ModelError::ShapeMismatch(format!(
                "layer {layer}: append at position {start} but cache holds {}",
                slot.len
            )));
        }
        if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
            return Err(ModelError::ShapeMismatch(format!(
                "layer {layer}: K {}x{} / V {}x{} for width {d}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        slot.k.extend_from_slice(k.data());
        slot.v.extend_from_slice(v.data());
        slot.len += k.rows();
        Ok(())
    }

    /// Replace a layer wholesale (restoration installs layers out of order).
    pub fn set_layer(&mut self, layer: usize, k: Matrix, v: Matrix) -> Result<(), ModelError> {
        if layer >= self.layers.len() {
            return Err(ModelError::ShapeMismatch(format!("no layer {layer}")));
        }
        if k.cols() != self.d_hidden || v.cols() != self.d_hidden || k.rows() != v.rows() {
            return Err(ModelError::ShapeMismatch(format!("layer {layer}: bad K/V shape")));
        }
        let len = k.rows();
        self.layers[layer] = LayerKv { k: k.into_vec(), v: v.into_vec(), len };
        Ok(())
    }

    /// Largest elementwise difference over all layers; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &KvCache) -> Option<f32> {
        if self.layers.len() != other.layers.len() || self.d_hidden != other.d_hidden {
            return None;
        }
        let mut worst = 0.0f32;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.len != b.len {
                return None;
            }
            worst = worst
                .max(super::tensor::max_abs_diff(&a.k, &b.k))
                .max(super::tensor::max_abs_diff(&a.v, &b.v));
        }
        Some(worst)
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            *l = LayerKv::default();
        }
    }
}

/// The input activation of one layer for a contiguous token range.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layer: usize,
    pub start: usize,
    pub data: Matrix,
}

impl HiddenStates {
    pub fn n_tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn end(&self) -> usize {
        self.start + self.n_tokens()
    }

    pub fn byte_size(&self, elem_bytes: usize) -> usize {
        self.data.rows() * self.data.cols() * elem_bytes
    }
}

/// Prompt tokens; positions are implicitly `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, vocab_size: usize) -> Result<Self, ModelError> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: vocab_size });
        }
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_checks_position_and_width() {
        let mut kv = KvCache::new(2, 4);
        let m = Matrix::zeros(3, 4);
        kv.append(0, 0, &m, &m).unwrap();
        assert!(kv.append(0, 0, &m, &m).is_err());
        assert_eq!(kv.len(), None);
        kv.append(1, 0, &m, &m).unwrap();
        assert_eq!(kv.len(), Some(3));
        assert!(kv.append(1, 3, &Matrix::zeros(1, 5), &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn token_range_is_checked() {
        assert!(TokenSeq::new(vec![1, 2, 9], 10).is_ok());
        assert!(matches!(
            TokenSeq::new(vec![1, 10], 10),
            Err(ModelError::TokenOutOfRange { token: 10, vocab: 10 })
        ));
    }
}
