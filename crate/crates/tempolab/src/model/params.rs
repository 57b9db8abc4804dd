//! Named, deterministically ordered parameter tensors with flat arithmetic.

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vocabulary};
use crate::rng::stream;

/// Scalar type of the network: f32 in training, f64 for gradient checking.
pub trait Real: Float + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major 2-D tensor; vectors use rows = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// How a tensor is (re-)initialized; shrink-and-perturb draws its noise from
/// the same distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Normal(0, std^2) truncated at +-2 std.
    TruncNormal,
    Ones,
    Zeros,
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: InitKind,
    /// Whether decoupled weight decay applies (matrices yes, norms/biases no).
    pub decay: bool,
}

/// All model weights, in a fixed documented order:
/// tok_embed, pos_embed, then per layer attn_norm.{gain,bias}, attn
/// {wq,bq,wk,bk,wv,bv,wo,bo}, ffn_norm.{gain,bias}, ffn {w1,b1,w2,b2},
/// then final_norm.{gain,bias} and out_bias. The output projection is tied
/// to tok_embed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor<T>>,
}

fn layout(config: &ModelConfig) -> Vec<(String, usize, usize, InitKind, bool)> {
    let d = config.d_model;
    let v = Vocabulary::SIZE;
    let mut spec: Vec<(String, usize, usize, InitKind, bool)> = vec![
        ("tok_embed".into(), v, d, InitKind::TruncNormal, true),
        ("pos_embed".into(), config.max_len, d, InitKind::TruncNormal, true),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        spec.push((p("attn_norm.gain"), 1, d, InitKind::Ones, false));
        spec.push((p("attn_norm.bias"), 1, d, InitKind::Zeros, false));
        for w in ["wq", "wk", "wv", "wo"] {
            spec.push((p(&format!("attn.{w}")), d, d, InitKind::TruncNormal, true));
            spec.push((
                p(&format!("attn.{}", w.replace('w', "b"))),
                1,
                d,
                InitKind::Zeros,
                false,
            ));
        }
        spec.push((p("ffn_norm.gain"), 1, d, InitKind::Ones, false));
        spec.push((p("ffn_norm.bias"), 1, d, InitKind::Zeros, false));
        spec.push((p("ffn.w1"), d, config.d_ff, InitKind::TruncNormal, true));
        spec.push((p("ffn.b1"), 1, config.d_ff, InitKind::Zeros, false));
        spec.push((p("ffn.w2"), config.d_ff, d, InitKind::TruncNormal, true));
        spec.push((p("ffn.b2"), 1, d, InitKind::Zeros, false));
    }
    spec.push(("final_norm.gain".into(), 1, d, InitKind::Ones, false));
    spec.push(("final_norm.bias".into(), 1, d, InitKind::Zeros, false));
    spec.push(("out_bias".into(), 1, v, InitKind::Zeros, false));
    spec
}

/// One truncated-normal draw.
fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, std: f64) -> T {
    loop {
        // Box-Muller; rejection keeps draws within +-2 std.
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return T::from_f64(z * std);
        }
    }
}

pub fn fill_init<T: Real>(tensor: &mut Tensor<T>, kind: InitKind, rng: &mut ChaCha8Rng) {
    match kind {
        InitKind::TruncNormal => {
            for x in &mut tensor.data {
                *x = trunc_normal(rng, INIT_STD);
            }
        }
        InitKind::Ones => tensor.data.fill(T::one()),
        InitKind::Zeros => tensor.data.fill(T::zero()),
    }
}

impl<T: Real> ParameterSet<T> {
    /// Deterministic initialization; each tensor has its own derived stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, rows, cols, init, decay))| {
                let mut tensor = Tensor::zeros(rows, cols);
                fill_init(&mut tensor, init, &mut stream(seed, "init", &[i as u64]));
                NamedTensor {
                    name,
                    tensor,
                    init,
                    decay,
                }
            })
            .collect();
        Ok(ParameterSet {
            config: config.clone(),
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: Tensor::zeros(t.tensor.rows, t.tensor.cols),
                    init: t.init,
                    decay: t.decay,
                })
                .collect(),
        }
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.tensor)
    }

    pub fn flat_iter(&self) -> impl Iterator<Item = T> + '_ {
        self.tensors.iter().flat_map(|t| t.tensor.data.iter().copied())
    }

    pub fn flat_get(&self, mut idx: usize) -> T {
        for t in &self.tensors {
            if idx < t.tensor.len() {
                return t.tensor.data[idx];
            }
            idx -= t.tensor.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut idx: usize, value: T) {
        for t in &mut self.tensors {
            if idx < t.tensor.len() {
                t.tensor.data[idx] = value;
                return;
            }
            idx -= t.tensor.len();
        }
        panic!("flat index out of range");
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.tensor.rows == b.tensor.rows && a.tensor.cols == b.tensor.cols)
    }

    /// Elementwise a*X + b*Y.
    pub fn axpy(a: T, x: &Self, b: T, y: &Self) -> Result<Self> {
        if !x.same_shape(y) {
            return Err(Error::Argument("parameter shape mismatch in axpy".into()));
        }
        let tensors = x
            .tensors
            .iter()
            .zip(&y.tensors)
            .map(|(tx, ty)| NamedTensor {
                name: tx.name.clone(),
                tensor: Tensor {
                    rows: tx.tensor.rows,
                    cols: tx.tensor.cols,
                    data: tx
                        .tensor
                        .data
                        .iter()
                        .zip(&ty.tensor.data)
                        .map(|(&xv, &yv)| a * xv + b * yv)
                        .collect(),
                },
                init: tx.init,
                decay: tx.decay,
            })
            .collect();
        Ok(ParameterSet {
            config: x.config.clone(),
            tensors,
        })
    }

    /// In-place self += a * other.
    pub fn add_scaled(&mut self, a: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Argument("parameter shape mismatch".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in t.tensor.data.iter_mut().zip(&o.tensor.data) {
                *x = *x + a * y;
            }
        }
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: Tensor {
                        rows: t.tensor.rows,
                        cols: t.tensor.cols,
                        data: t.tensor.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                    },
                    init: t.init,
                    decay: t.decay,
                })
                .collect(),
        }
    }
}

impl ParameterSet<f32> {
    /// Raw tensor bytes in documented order, little-endian f32.
    pub fn write_tensors(&self, out: &mut Vec<u8>) {
        for t in &self.tensors {
            for &x in &t.tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    pub fn read_tensors(config: &ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut params = ParameterSet::<f32>::init(config, 0)?;
        let expected = params.total_count() * 4;
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "tensor blob is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut off = 0;
        for t in &mut params.tensors {
            for x in &mut t.tensor.data {
                *x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                off += 4;
            }
        }
        Ok(params)
    }
}
