use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"HSW1";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `d_ffn × d_hidden`
    pub fc1: Matrix,
    pub fc1_bias: Vec<f32>,
    /// `d_hidden × d_ffn`
    pub fc2: Matrix,
    pub fc2_bias: Vec<f32>,
    pub ln1_scale: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub ln2_scale: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// Deterministic parameters for a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub config: ModelConfig,
    pub seed: u64,
    /// `vocab_size × d_hidden`, also used (tied) as the output head.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_scale: Vec<f32>,
    pub final_bias: Vec<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape by construction")
}

impl WeightSet {
    /// Every matrix element is drawn uniformly from `[-1/√d_hidden, 1/√d_hidden]`
    /// with a ChaCha8 stream seeded by `seed`, in a fixed order: embedding, then
    /// per layer Wq, Wk, Wv, Wo, FC1, FC2. Biases start at zero, norm scales at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_hidden;
        let bound = 1.0 / (d as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = uniform(&mut rng, config.vocab_size, d, bound);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: uniform(&mut rng, d, d, bound),
                wk: uniform(&mut rng, d, d, bound),
                wv: uniform(&mut rng, d, d, bound),
                wo: uniform(&mut rng, d, d, bound),
                fc1: uniform(&mut rng, config.d_ffn, d, bound),
                fc1_bias: vec![0.0; config.d_ffn],
                fc2: uniform(&mut rng, d, config.d_ffn, bound),
                fc2_bias: vec![0.0; d],
                ln1_scale: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_scale: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            embedding,
            layers,
            final_scale: vec![1.0; d],
            final_bias: vec![0.0; d],
        })
    }

    fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                l.fc1.data(),
                &l.fc1_bias[..],
                l.fc2.data(),
                &l.fc2_bias[..],
                &l.ln1_scale[..],
                &l.ln1_bias[..],
                &l.ln2_scale[..],
                &l.ln2_bias[..],
            ]);
        }
        out.push(&self.final_scale);
        out.push(&self.final_bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.embedding.data_mut()];
        for l in &mut self.layers {
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(l.fc1.data_mut());
            out.push(&mut l.fc1_bias);
            out.push(l.fc2.data_mut());
            out.push(&mut l.fc2_bias);
            out.push(&mut l.ln1_scale);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ln2_scale);
            out.push(&mut l.ln2_bias);
        }
        out.push(&mut self.final_scale);
        out.push(&mut self.final_bias);
        out
    }

    /// Binary export: `HSW1`, the config fields as little-endian `u32` in
    /// declaration order (n_layers, d_hidden, n_heads, d_ffn, vocab_size,
    /// elem_bytes, max_seq), flag bytes for layer norm and rope, `f32`
    /// rope_base, `u64` seed, then every tensor row-major in layer order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        for v in [c.n_layers, c.d_hidden, c.n_heads, c.d_ffn, c.vocab_size, c.elem_bytes, c.max_seq] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[c.layer_norm as u8, c.rope as u8])?;
        w.write_all(&c.rope_base.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            buf.extend(t.iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::BadFormat("missing HSW1 magic".into()));
        }
        let mut fields = [0usize; 7];
        for f in &mut fields {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *f = u32::from_le_bytes(b) as usize;
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let config = ModelConfig {
            n_layers: fields[0],
            d_hidden: fields[1],
            n_heads: fields[2],
            d_ffn: fields[3],
            vocab_size: fields[4],
            elem_bytes: fields[5],
            max_seq: fields[6],
            layer_norm: flags[0] != 0,
            rope: flags[1] != 0,
            rope_base: f32::from_le_bytes(b4),
        };
        config.validate()?;
        // Zero-filled skeleton of the right shape, then overwrite every tensor.
        let mut ws = Self::skeleton(&config, u64::from_le_bytes(b8));
        let mut buf = Vec::new();
        for t in ws.tensors_mut() {
            buf.resize(t.len() * 4, 0);
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::BadFormat("truncated tensor data".into()))?;
            for (x, chunk) in t.iter_mut().zip(buf.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ModelError::BadFormat("trailing bytes after tensors".into()));
        }
        Ok(ws)
    }

    fn skeleton(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_hidden;
        let f = config.d_ffn;
        Self {
            config: config.clone(),
            seed,
            embedding: Matrix::zeros(config.vocab_size, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    fc1: Matrix::zeros(f, d),
                    fc1_bias: vec![0.0; f],
                    fc2: Matrix::zeros(d, f),
                    fc2_bias: vec![0.0; d],
                    ln1_scale: vec![0.0; d],
                    ln1_bias: vec![0.0; d],
                    ln2_scale: vec![0.0; d],
                    ln2_bias: vec![0.0; d],
                })
                .collect(),
            final_scale: vec![0.0; d],
            final_bias: vec![0.0; d],
        }
    }
}
