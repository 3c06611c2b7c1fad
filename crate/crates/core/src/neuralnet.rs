//! Small dense-tensor toolkit for the localizer network: forward ops with
//! hand-derived backward passes, a named parameter store, clipped SGD and a
//! checksummed checkpoint container.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Element type of tensors: `f64` for gradient checks, `f32` for training.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
}
impl<T: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static> Scalar
    for T
{
}

#[inline]
fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::from(x).unwrap_or_else(G::nan))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        expect_shape(other, &self.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum()
    }
}

fn expect_shape<F>(t: &Tensor<F>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape != shape {
        return Err(Error::Shape(format!(
            "{what}: expected {shape:?}, got {:?}",
            t.shape
        )));
    }
    Ok(())
}

fn expect_rank<F>(t: &Tensor<F>, rank: usize, what: &str) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    fn out_len(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || len + 2 * self.padding < k {
            return Err(Error::Shape(format!(
                "conv window {k} does not fit length {len} with padding {}",
                self.padding
            )));
        }
        Ok((len + 2 * self.padding - k) / self.stride + 1)
    }

    /// Output positions `y` whose tap `ki` lands inside an input of length `len`.
    #[inline]
    fn valid(&self, ki: usize, len: usize, out: usize) -> std::ops::Range<usize> {
        // y*s + ki - p in [0, len)
        let s = self.stride;
        let lo = if ki >= self.padding {
            0
        } else {
            (self.padding - ki).div_ceil(s)
        };
        let hi = if len + self.padding > ki {
            (len + self.padding - ki).div_ceil(s).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn dims<F>(&self, input: &Tensor<F>, kernels: &Tensor<F>) -> Result<ConvDims> {
        expect_rank(input, 3, "conv2d input")?;
        expect_rank(kernels, 4, "conv2d kernels")?;
        let [c, h, w] = [input.shape[0], input.shape[1], input.shape[2]];
        let [o, kc, kh, kw] = [
            kernels.shape[0],
            kernels.shape[1],
            kernels.shape[2],
            kernels.shape[3],
        ];
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernels expect {kc}"
            )));
        }
        Ok(ConvDims {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: self.out_len(h, kh)?,
            ow: self.out_len(w, kw)?,
        })
    }

    /// Cross-correlation of a `C×H×W` input with `O×C×k×k` kernels plus a
    /// per-channel bias.
    pub fn forward<F: Scalar>(
        &self,
        input: &Tensor<F>,
        kernels: &Tensor<F>,
        bias: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let ConvDims {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
        } = self.dims(input, kernels)?;
        expect_shape(bias, &[o], "conv2d bias")?;
        let mut out = vec![F::zero(); o * oh * ow];
        let (s, p) = (self.stride, self.padding);
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias.data[oc]);
            for ic in 0..c {
                let src = &input.data[ic * h * w..(ic + 1) * h * w];
                for ki in 0..kh {
                    let ys = self.valid(ki, h, oh);
                    for kj in 0..kw {
                        let wgt = kernels.data[((oc * c + ic) * kh + ki) * kw + kj];
                        let xs = self.valid(kj, w, ow);
                        for y in ys.clone() {
                            let row = &src[(y * s + ki - p) * w..];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for x in xs.clone() {
                                dst[x] = dst[x] + wgt * row[x * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[o, oh, ow], out)
    }

    /// Gradients with respect to input, kernels and bias given the output
    /// gradient.
    pub fn backward<F: Scalar>(
        &self,
        input: &Tensor<F>,
        kernels: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Result<ConvGrads<F>> {
        let ConvDims {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
        } = self.dims(input, kernels)?;
        expect_shape(grad_out, &[o, oh, ow], "conv2d grad_out")?;
        let mut gi = vec![F::zero(); c * h * w];
        let mut gk = vec![F::zero(); kernels.len()];
        let gb: Vec<F> = grad_out
            .data
            .chunks(oh * ow)
            .map(|go| go.iter().fold(F::zero(), |a, &b| a + b))
            .collect();
        let (s, p) = (self.stride, self.padding);
        for oc in 0..o {
            let go = &grad_out.data[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..c {
                let src = &input.data[ic * h * w..(ic + 1) * h * w];
                let gsrc = &mut gi[ic * h * w..(ic + 1) * h * w];
                for ki in 0..kh {
                    let ys = self.valid(ki, h, oh);
                    for kj in 0..kw {
                        let kidx = ((oc * c + ic) * kh + ki) * kw + kj;
                        let wgt = kernels.data[kidx];
                        let xs = self.valid(kj, w, ow);
                        let mut acc = F::zero();
                        for y in ys.clone() {
                            let base = (y * s + ki - p) * w;
                            let grow = &go[y * ow..(y + 1) * ow];
                            for x in xs.clone() {
                                let i = base + x * s + kj - p;
                                acc = acc + grow[x] * src[i];
                                gsrc[i] = gsrc[i] + wgt * grow[x];
                            }
                        }
                        gk[kidx] = acc;
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(&[c, h, w], gi)?,
            kernels: Tensor::new(kernels.shape(), gk)?,
            bias: Tensor::new(&[o], gb)?,
        })
    }
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
}

/// `weight · input + bias` for an `m×n` weight.
pub fn linear_forward<F: Scalar>(
    input: &[F],
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Vec<F>> {
    expect_rank(weight, 2, "linear weight")?;
    let (m, n) = (weight.shape[0], weight.shape[1]);
    if input.len() != n {
        return Err(Error::Shape(format!(
            "linear: input length {} but weight is {m}×{n}",
            input.len()
        )));
    }
    expect_shape(bias, &[m], "linear bias")?;
    Ok(weight
        .data
        .chunks_exact(n)
        .zip(&bias.data)
        .map(|(row, &b)| row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<F> {
    pub input: Vec<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn linear_backward<F: Scalar>(
    input: &[F],
    weight: &Tensor<F>,
    grad_out: &[F],
) -> Result<LinearGrads<F>> {
    expect_rank(weight, 2, "linear weight")?;
    let (m, n) = (weight.shape[0], weight.shape[1]);
    if input.len() != n || grad_out.len() != m {
        return Err(Error::Shape(format!(
            "linear backward: input {} / grad {} vs weight {m}×{n}",
            input.len(),
            grad_out.len()
        )));
    }
    let mut gi = vec![F::zero(); n];
    let mut gw = vec![F::zero(); m * n];
    for ((row, grow), &g) in weight
        .data
        .chunks_exact(n)
        .zip(gw.chunks_exact_mut(n))
        .zip(grad_out)
    {
        if g == F::zero() {
            continue;
        }
        for j in 0..n {
            gi[j] = gi[j] + row[j] * g;
            grow[j] = g * input[j];
        }
    }
    Ok(LinearGrads {
        input: gi,
        weight: Tensor::new(&[m, n], gw)?,
        bias: Tensor::new(&[m], grad_out.to_vec())?,
    })
}

/// Row `index` of a `V×d` table.
pub fn embedding_lookup<F: Scalar>(table: &Tensor<F>, index: usize) -> Result<Vec<F>> {
    expect_rank(table, 2, "embedding table")?;
    let (v, d) = (table.shape[0], table.shape[1]);
    if index >= v {
        return Err(Error::IndexOutOfRange { index, size: v });
    }
    Ok(table.data[index * d..(index + 1) * d].to_vec())
}

/// Adds `grad` into row `index` of the table gradient.
pub fn embedding_backward<F: Scalar>(
    grad_table: &mut Tensor<F>,
    index: usize,
    grad: &[F],
) -> Result<()> {
    expect_rank(grad_table, 2, "embedding gradient")?;
    let (v, d) = (grad_table.shape[0], grad_table.shape[1]);
    if index >= v {
        return Err(Error::IndexOutOfRange { index, size: v });
    }
    if grad.len() != d {
        return Err(Error::Shape(format!(
            "embedding gradient of length {} for width {d}",
            grad.len()
        )));
    }
    for (t, &g) in grad_table.data[index * d..(index + 1) * d]
        .iter_mut()
        .zip(grad)
    {
        *t = *t + g;
    }
    Ok(())
}

pub fn relu<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter()
        .map(|&v| if v > F::zero() { v } else { F::zero() })
        .collect()
}

/// Gradient through ReLU; `x` is the pre-activation (or the output, which
/// has the same sign pattern).
pub fn relu_backward<F: Scalar>(x: &[F], grad: &[F]) -> Vec<F> {
    x.iter()
        .zip(grad)
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect()
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {logits:?}")));
    }
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z = exps.iter().fold(F::zero(), |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn log_softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Shape("log_softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("log_softmax input {logits:?}")));
    }
    let max = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = max
        + logits
            .iter()
            .fold(F::zero(), |a, &x| a + (x - max).exp())
            .ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// Vector-Jacobian product of softmax: `∂L/∂z` from `∂L/∂p`.
pub fn softmax_backward<F: Scalar>(probs: &[F], grad: &[F]) -> Vec<F> {
    let dot = probs
        .iter()
        .zip(grad)
        .fold(F::zero(), |a, (&p, &g)| a + p * g);
    probs
        .iter()
        .zip(grad)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

pub fn log_prob<F: Scalar>(probs: &[F], index: usize) -> Result<F> {
    probs
        .get(index)
        .map(|p| p.ln())
        .ok_or(Error::IndexOutOfRange {
            index,
            size: probs.len(),
        })
}

/// Inverse-CDF draw from a normalized distribution.
pub fn categorical_sample<F: Scalar, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> Result<usize> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < F::zero()) {
        return Err(Error::NonFinite(format!("sampling distribution {probs:?}")));
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.to_f64().unwrap_or(0.0);
        if p > 0.0 {
            last = i;
        }
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // Rounding left the total just below 1.
    Ok(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
}

/// Named parameters with gradient accumulators of matching shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
    version: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            version: 0,
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Incremented by every applied update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill_zero());
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn accumulate_grads(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient set of {} tensors for {} parameters",
                other.params.len(),
                self.params.len()
            )));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.grad.add_assign(&q.grad)?;
        }
        Ok(())
    }

    /// Copies parameter values (not gradients) from a store of the same
    /// layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} tensors for {} parameters",
                other.params.len(),
                self.params.len()
            )));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            expect_shape(&q.value, p.value.shape(), &p.name)?;
            p.value.data.copy_from_slice(&q.value.data);
        }
        Ok(())
    }

    /// Clips gradients to global norm `clip_norm`, takes an SGD step and
    /// zeroes the gradients. Returns the pre-clipping norm.
    pub fn sgd_apply(&mut self, lr: f64, clip_norm: f64) -> Result<f64> {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        let step: F = lit(lr * scale);
        for p in &mut self.params {
            for (v, g) in p.value.data.iter_mut().zip(p.grad.data.iter_mut()) {
                *v = *v - step * *g;
                *g = F::zero();
            }
        }
        self.version += 1;
        Ok(norm)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            version: self.version,
        }
    }
}

const MAGIC: &[u8; 8] = b"ANLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized parameters: training step, a free-form metadata string and
/// named `f32` tensors. Layout is documented in `docs/formats.md`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<F: Scalar>(store: &ParamStore<F>, step: u64, meta: &str) -> Self {
        Self {
            step,
            meta: meta.to_string(),
            entries: store
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// Overwrites the values of `store`; names and shapes must match exactly.
    pub fn load_into<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if self.entries.len() != store.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, network has {}",
                self.entries.len(),
                store.params.len()
            )));
        }
        for ((name, t), p) in self.entries.iter().zip(&store.params) {
            if *name != p.name || t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} {:?} does not match parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for ((_, t), p) in self.entries.iter().zip(&mut store.params) {
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut r = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 4 {
            return Err(corrupt("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        r.bytes = body;
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| corrupt("metadata is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt("tensor rank too large"));
            }
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| corrupt("tensor size overflows"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            step,
            meta,
            entries,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingArtifact(path.to_path_buf())
                } else {
                    e.into()
                }
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
