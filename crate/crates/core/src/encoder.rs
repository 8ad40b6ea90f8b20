//! Small MLP encoder with an identity-classification head, its momentum
//! (EMA) twin, and hand-written reverse-mode gradients.
//!
//! The encoder maps `input_dim → hidden… → embed_dim` with ReLU between
//! layers and no activation on the embedding. The head is a single linear
//! layer `embed_dim → num_ids` producing logits.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::log_sum_exp;
use crate::error::{check_dim, invalid, Error, Result};
use crate::types::{EmbeddingMatrix, IdentityLabel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRCK";

/// Fully connected layer, weight stored `out_dim × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform(−a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                out.push(self.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input.
    fn backward(&self, x: &[f64], dz: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.in_dim];
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let dxr = &mut dx[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = dz[r * self.out_dim + o];
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let gw = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gw[i] += g * xr[i];
                    dxr[i] += g * w[i];
                }
            }
        }
        dx
    }

    fn same_shape(&self, other: &Linear) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

/// Layer widths of an encoder plus the number of identities for its head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub num_ids: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
    pub id_head: Linear,
}

/// Activations kept from a forward pass for [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    rows: usize,
    /// Input to each layer (post-ReLU for hidden layers).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Vec<f64>>,
    pub embeddings: EmbeddingMatrix,
    pub logits: EmbeddingMatrix,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(arch: &EncoderArch, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embed_dim == 0 || arch.num_ids < 2 || arch.hidden.contains(&0) {
            return Err(invalid(format!("invalid encoder architecture {arch:?}")));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embed_dim);
        let layers = dims.windows(2).map(|w| Linear::xavier(w[0], w[1], rng)).collect();
        let id_head = Linear::xavier(arch.embed_dim, arch.num_ids, rng);
        Ok(Self { layers, id_head })
    }

    pub fn from_layers(layers: Vec<Linear>, id_head: Linear) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(invalid("consecutive encoder layers disagree on width"));
            }
        }
        if layers.last().map(|l| l.out_dim) != Some(id_head.in_dim) {
            return Err(invalid("id head input must match the embedding width"));
        }
        let p = Self { layers, id_head };
        if p.tensors().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(invalid("encoder parameters must be finite"));
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.id_head.in_dim
    }

    pub fn num_ids(&self) -> usize {
        self.id_head.out_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect(),
            id_head: Linear::zeros(self.id_head.in_dim, self.id_head.out_dim),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
            && self.id_head.same_shape(&other.id_head)
    }

    fn all_layers(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().chain(std::iter::once(&self.id_head))
    }

    fn all_layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.id_head))
    }

    /// Every parameter tensor, tagged `true` for weights and `false` for biases.
    pub fn tensors(&self) -> impl Iterator<Item = (bool, &[f64])> {
        self.all_layers().flat_map(|l| [(true, &l.weight[..]), (false, &l.bias[..])])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (bool, &mut Vec<f64>)> {
        self.all_layers_mut().flat_map(|l| [(true, &mut l.weight), (false, &mut l.bias)])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean norm of `self − other` over all parameters.
    pub fn distance_to(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(invalid("encoder shapes differ"));
        }
        Ok(self
            .tensors()
            .zip(other.tensors())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Embeddings only.
    pub fn encode(&self, inputs: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        check_dim(self.input_dim(), inputs.dim())?;
        let rows = inputs.rows();
        let mut x = inputs.as_slice().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, rows);
            if i + 1 < self.layers.len() {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        finite_matrix(rows, self.embed_dim(), x)
    }

    pub fn id_logits(&self, embeddings: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        check_dim(self.embed_dim(), embeddings.dim())?;
        let rows = embeddings.rows();
        finite_matrix(rows, self.num_ids(), self.id_head.forward(embeddings.as_slice(), rows))
    }

    /// Embeddings and logits, keeping activations for the backward pass.
    pub fn forward(&self, inputs: &EmbeddingMatrix) -> Result<ForwardPass> {
        check_dim(self.input_dim(), inputs.dim())?;
        let rows = inputs.rows();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = inputs.as_slice().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x, rows);
            layer_inputs.push(x);
            x = if i + 1 < self.layers.len() { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre_activations.push(z);
        }
        let embeddings = finite_matrix(rows, self.embed_dim(), x)?;
        let logits = self.id_logits(&embeddings)?;
        Ok(ForwardPass { rows, layer_inputs, pre_activations, embeddings, logits })
    }

    /// Parameter gradients of a scalar loss given its gradients with respect
    /// to the embeddings and (optionally) the head logits.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_embeddings: &EmbeddingMatrix,
        grad_logits: Option<&EmbeddingMatrix>,
    ) -> Result<EncoderParams> {
        let rows = pass.rows;
        if grad_embeddings.rows() != rows {
            return Err(invalid("embedding gradient has the wrong number of rows"));
        }
        check_dim(self.embed_dim(), grad_embeddings.dim())?;
        let mut grads = self.zeros_like();
        let mut d = grad_embeddings.as_slice().to_vec();
        if let Some(gl) = grad_logits {
            if gl.rows() != rows {
                return Err(invalid("logit gradient has the wrong number of rows"));
            }
            check_dim(self.num_ids(), gl.dim())?;
            let dx = self.id_head.backward(pass.embeddings.as_slice(), gl.as_slice(), rows, &mut grads.id_head);
            d.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
        }
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d.iter_mut()
                    .zip(&pass.pre_activations[i])
                    .for_each(|(g, z)| if *z <= 0.0 { *g = 0.0 });
            }
            d = self.layers[i].backward(&pass.layer_inputs[i], &d, rows, &mut grads.layers[i]);
        }
        Ok(grads)
    }

    /// Writes the `MRCK` checkpoint: magic, `u32` layer count, `(u32 out,
    /// u32 in)` per layer, then each layer's weights and biases as `f64`. The
    /// identity head is stored as the last layer. Little-endian throughout.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let layers: Vec<&Linear> = self.all_layers().collect();
        w.write_all(&(layers.len() as u32).to_le_bytes())?;
        for l in &layers {
            w.write_all(&(l.out_dim as u32).to_le_bytes())?;
            w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        }
        for l in &layers {
            for v in l.weight.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut buf4 = [0u8; 4];
        let mut read4 = |r: &mut dyn Read| -> Result<[u8; 4]> {
            r.read_exact(&mut buf4).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            Ok(buf4)
        };
        if &read4(&mut r)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = u32::from_le_bytes(read4(&mut r)?) as usize;
        if count < 2 {
            return Err(Error::Format("checkpoint needs an encoder layer and an id head".into()));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let out = u32::from_le_bytes(read4(&mut r)?) as usize;
            let inp = u32::from_le_bytes(read4(&mut r)?) as usize;
            shapes.push((out, inp));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated checkpoint payload".into()))?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut layers = Vec::with_capacity(count);
        for (out, inp) in shapes {
            let weight = read_f64s(out * inp)?;
            let bias = read_f64s(out)?;
            layers.push(Linear { in_dim: inp, out_dim: out, weight, bias });
        }
        let id_head = layers.pop().expect("count >= 2");
        Self::from_layers(layers, id_head).map_err(|e| Error::Format(e.to_string()))
    }
}

fn finite_matrix(rows: usize, dim: usize, data: Vec<f64>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(rows, dim, data).map_err(|_| invalid("encoder produced a non-finite value"))
}

/// Momentum of the EMA twin, `0 ≤ m < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumConfig {
    m: f64,
}

impl MomentumConfig {
    pub fn new(m: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(invalid(format!("EMA momentum must lie in [0, 1), got {m}")));
        }
        Ok(Self { m })
    }

    pub fn m(self) -> f64 {
        self.m
    }
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self { m: 0.997 }
    }
}

/// `ema ← m·ema + (1 − m)·main`, elementwise over every parameter. Entries
/// already equal to `main` are left as they are, so a zero gap stays exactly
/// zero instead of picking up rounding error.
pub fn ema_update(ema: &mut EncoderParams, main: &EncoderParams, cfg: MomentumConfig) -> Result<()> {
    if !ema.same_shape(main) {
        return Err(invalid("EMA and main encoder shapes differ"));
    }
    let m = cfg.m;
    for ((_, e), (_, p)) in ema.tensors_mut().zip(main.tensors()) {
        e.iter_mut().zip(p).filter(|(e, p)| **e != **p).for_each(|(e, p)| *e = m * *e + (1.0 - m) * p);
    }
    Ok(())
}

/// Softmax cross-entropy of one row of logits and its gradient
/// `softmax(logits) − onehot(label)`.
pub fn id_cross_entropy(logits: &[f64], label: IdentityLabel) -> Result<(f64, Vec<f64>)> {
    if label.index() >= logits.len() {
        return Err(invalid(format!("{label} out of range for {} identities", logits.len())));
    }
    let lse = log_sum_exp(logits.iter().copied());
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label.index()] -= 1.0;
    Ok((lse - logits[label.index()], grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_inputs_through() {
        let mut l = Linear::zeros(3, 3);
        for i in 0..3 {
            l.weight[i * 3 + i] = 1.0;
        }
        let p = EncoderParams::from_layers(vec![l], Linear::zeros(3, 2)).unwrap();
        let x = EmbeddingMatrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
        assert_eq!(p.encode(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut l1 = Linear::zeros(3, 4);
        l1.bias = vec![1.0, -1.0, 2.0, 0.0];
        let mut l2 = Linear::zeros(4, 2);
        l2.bias = vec![0.5, -0.5];
        let p = EncoderParams::from_layers(vec![l1, l2], Linear::zeros(2, 2)).unwrap();
        let x = EmbeddingMatrix::new(3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        let e = p.encode(&x).unwrap();
        for r in e.iter_rows() {
            assert_eq!(r, &[0.5, -0.5]);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn encode_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = EncoderArch { input_dim: 5, hidden: vec![7, 6], embed_dim: 4, num_ids: 3 };
        let p = EncoderParams::init(&arch, &mut rng).unwrap();
        let x = EmbeddingMatrix::new(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let e = p.encode(&x).unwrap();
        for r in 0..4 {
            let mut a = x.row(r).to_vec();
            for (li, l) in p.layers.iter().enumerate() {
                let mut out = vec![0.0; l.out_dim];
                for o in 0..l.out_dim {
                    let mut s = l.bias[o];
                    for i in 0..l.in_dim {
                        s += l.weight[o * l.in_dim + i] * a[i];
                    }
                    out[o] = if li + 1 < p.layers.len() && s < 0.0 { 0.0 } else { s };
                }
                a = out;
            }
            for (x, y) in a.iter().zip(e.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = EncoderArch { input_dim: 5, hidden: vec![], embed_dim: 4, num_ids: 3 };
        let p = EncoderParams::init(&arch, &mut rng).unwrap();
        assert!(p.encode(&EmbeddingMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = EncoderArch { input_dim: 3, hidden: vec![4], embed_dim: 2, num_ids: 2 };
        let main = EncoderParams::init(&arch, &mut rng).unwrap();
        let mut ema = EncoderParams::init(&arch, &mut rng).unwrap();
        ema_update(&mut ema, &main, MomentumConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(ema, main);

        let mut ema = EncoderParams::init(&arch, &mut rng).unwrap();
        let before = ema.clone();
        ema_update(&mut ema, &main, MomentumConfig::new(0.999).unwrap()).unwrap();
        for (((_, a), (_, b)), (_, m)) in ema.tensors().zip(before.tensors()).zip(main.tensors()) {
            for i in 0..a.len() {
                assert_eq!(a[i], 0.999 * b[i] + (1.0 - 0.999) * m[i]);
            }
        }
        assert!(MomentumConfig::new(1.0).is_err());
        assert!(MomentumConfig::new(-0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = id_cross_entropy(&[0.3; 5], IdentityLabel(2)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
        let (l, _) = id_cross_entropy(&[0.0, 80.0, 0.0], IdentityLabel(1)).unwrap();
        assert!(l < 1e-30);
        let logits = [0.2, -1.3, 2.2, 0.7];
        let (l, _) = id_cross_entropy(&logits, IdentityLabel(3)).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        assert!((l - -(logits[3].exp() / z).ln()).abs() < 1e-12);
        assert!(id_cross_entropy(&logits, IdentityLabel(4)).is_err());
    }

    #[test]
    fn single_linear_sum_loss_gradient_is_outer_product_with_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = EncoderArch { input_dim: 3, hidden: vec![], embed_dim: 2, num_ids: 2 };
        let p = EncoderParams::init(&arch, &mut rng).unwrap();
        let x = EmbeddingMatrix::new(4, 3, (0..12).map(|i| i as f64 - 5.0).collect()).unwrap();
        let pass = p.forward(&x).unwrap();
        let ones = EmbeddingMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        let g = p.backward(&pass, &ones, None).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let expected: f64 = (0..4).map(|r| x.row(r)[i]).sum();
                assert_eq!(g.layers[0].weight[o * 3 + i], expected);
            }
            assert_eq!(g.layers[0].bias[o], 4.0);
        }
        let zero = p.backward(&pass, &EmbeddingMatrix::zeros(4, 2), Some(&EmbeddingMatrix::zeros(4, 2))).unwrap();
        assert_eq!(zero, p.zeros_like());
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = EncoderArch { input_dim: 3, hidden: vec![5], embed_dim: 2, num_ids: 4 };
        let p = EncoderParams::init(&arch, &mut rng).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MRCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 8 + 3 * 8 + 8 * p.parameter_count());
        assert_eq!(EncoderParams::read_checkpoint(&buf[..]).unwrap(), p);
        assert!(EncoderParams::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
