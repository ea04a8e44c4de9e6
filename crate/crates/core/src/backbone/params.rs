use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AdaLnMode, BackboneConfig, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub(crate) init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum BlockNorm {
    Affine { ln1: Affine, ln2: Affine },
    /// `ada` emits `[shift1, scale1, shift2, scale2]`; `gate` emits `[gate1, gate2]`.
    Ada { ada: Linear, gate: Option<Linear> },
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum FinalNorm {
    Affine(Affine),
    /// Emits `[shift, scale]`.
    Ada(Linear),
}

#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    pub norm: BlockNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok: usize,
    pub pos: usize,
    pub modality: Option<usize>,
    pub time: Option<(Linear, Linear)>,
    pub blocks: Vec<BlockOffsets>,
    pub final_norm: FinalNorm,
    pub head: Linear,
}

#[derive(Debug)]
pub(crate) struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub offsets: Offsets,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape,
            offset,
            init,
        };
        self.total += spec.numel();
        self.tensors.push(spec);
        offset
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, init: Init) -> Linear {
        let w = self.push(format!("{name}.w"), vec![d_in, d_out], init);
        let b = self.push(format!("{name}.b"), vec![d_out], Init::Zeros);
        Linear { w, b, d_in, d_out }
    }

    fn affine(&mut self, name: &str, d: usize) -> Affine {
        let gamma = self.push(format!("{name}.gamma"), vec![d], Init::Ones);
        let beta = self.push(format!("{name}.beta"), vec![d], Init::Zeros);
        Affine { gamma, beta }
    }
}

impl ParamLayout {
    pub(crate) fn new(config: &BackboneConfig) -> Self {
        let d = config.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok = b.push("tok_embed".into(), vec![config.vocab_out, d], Init::Normal);
        let pos = b.push("pos_embed".into(), vec![config.max_len, d], Init::Normal);
        let modality = config
            .use_modality_embed
            .then(|| b.push("modality_embed".into(), vec![2, d], Init::Normal));
        let time = config.use_timestep.then(|| {
            (
                b.linear("time.fc1", config.t_embed_dim, d, Init::Normal),
                b.linear("time.fc2", d, d, Init::Normal),
            )
        });
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                let norm = match config.adaln_mode {
                    AdaLnMode::None => BlockNorm::Affine {
                        ln1: b.affine(&format!("{p}.ln1"), d),
                        ln2: b.affine(&format!("{p}.ln2"), d),
                    },
                    AdaLnMode::AdaLn => BlockNorm::Ada {
                        ada: b.linear(&format!("{p}.ada"), d, 4 * d, Init::Normal),
                        gate: None,
                    },
                    AdaLnMode::AdaLnZero => BlockNorm::Ada {
                        ada: b.linear(&format!("{p}.ada"), d, 4 * d, Init::Normal),
                        gate: Some(b.linear(&format!("{p}.gate"), d, 2 * d, Init::Zeros)),
                    },
                };
                BlockOffsets {
                    norm,
                    qkv: b.linear(&format!("{p}.attn.qkv"), d, 3 * d, Init::Normal),
                    out: b.linear(&format!("{p}.attn.out"), d, d, Init::Normal),
                    fc1: b.linear(&format!("{p}.mlp.fc1"), d, config.hidden_dim(), Init::Normal),
                    fc2: b.linear(&format!("{p}.mlp.fc2"), config.hidden_dim(), d, Init::Normal),
                }
            })
            .collect();
        let final_norm = match config.adaln_mode {
            AdaLnMode::None => FinalNorm::Affine(b.affine("final.ln", d)),
            _ => FinalNorm::Ada(b.linear("final.ada", d, 2 * d, Init::Normal)),
        };
        let head = b.linear("head", d, config.vocab_out, Init::Normal);
        Self {
            tensors: b.tensors,
            offsets: Offsets {
                tok,
                pos,
                modality,
                time,
                blocks,
                final_norm,
                head,
            },
            total: b.total,
        }
    }
}

/// Flat parameter vector with a named tensor layout derived from the config.
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    config: BackboneConfig,
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Real> ParameterSet<T> {
    /// All-zero parameters for `config`.
    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(config));
        let data = vec![T::zero(); layout.total];
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(config: &BackboneConfig, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::LengthMismatch {
                expected: p.data.len(),
                got: data.len(),
            });
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self
            .layout
            .tensors
            .iter()
            .find(|s| s.name == name)?
            .range();
        Some(&mut self.data[range])
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.layout.offsets
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.data[offset..offset + len]
    }

    /// A zero vector shaped like the parameters (for gradients).
    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    /// Converts element type, e.g. `f32` training weights to `f64` for checks.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Truncated-normal (±2 std) weights and embeddings, zero biases, unit norm
/// scales, and exactly zero AdaLN-Zero gate projections.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    config: &BackboneConfig,
    rng: &mut R,
) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::<T>::zeros(config)?;
    let layout = Arc::clone(&params.layout);
    for spec in &layout.tensors {
        let dst = &mut params.data[spec.range()];
        match spec.init {
            Init::Zeros => dst.fill(T::zero()),
            Init::Ones => dst.fill(T::one()),
            Init::Normal => {
                for v in dst.iter_mut() {
                    *v = T::lit(config.init_std * truncated_normal(rng));
                }
            }
        }
    }
    Ok(params)
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
