//! Encoder, decoder, latent generator, conditional discriminator and
//! identity recognizer.
//!
//! Every network exists as a plain parameter struct plus a `*Vars` mirror
//! that holds the tape handles of those parameters for one evaluation. The
//! two encoder/decoder branches of training bind one parameter set once
//! and reuse the handles, so their gradients accumulate into the same
//! leaves.

mod checkpoint;
mod inference;

pub use checkpoint::{Checkpoint, Normalization, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use inference::{neutralize, InferenceModel};

use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{cheb_conv, fully_connected, init_cheb, init_fc, ChebConvParams, ChebConvVars, FcParams, FcVars};
use crate::mesh::GraphOperator;
use crate::sparse::CsrMatrix;

pub const LATENT_DIM: usize = 25;
pub const CHEB_ORDER: usize = 6;
pub const ENCODER_WIDTHS: [usize; 4] = [16, 16, 16, 32];
pub const DECODER_WIDTHS: [usize; 4] = [32, 16, 16, 3];
pub const GENERATOR_WIDTHS: [usize; 4] = [100, 200, 50, LATENT_DIM];
pub const DISCRIMINATOR_WIDTHS: [usize; 4] = [100, 200, 50, 1];
pub const RECOGNIZER_HIDDEN: usize = 100;
pub const LEAKY_SLOPE: f64 = 0.2;

/// A 25-dimensional latent face code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCode(pub [f64; LATENT_DIM]);

impl LatentCode {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; LATENT_DIM] = v
            .try_into()
            .map_err(|_| Error::shape("latent_code", format!("{} values, expected {LATENT_DIM}", v.len())))?;
        if arr.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Self(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn to_tensor(self) -> Tensor {
        Tensor::new([1, LATENT_DIM], self.0.to_vec()).expect("fixed shape")
    }
}

/// Pre-softmax recognizer output, one entry per training subject.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(pub Vec<f64>);

/// Architecture switches that depart from, or restore, the literal layer
/// description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelFlags {
    /// Apply relu after the last decoder convolution too.
    pub paper_literal_decoder_relu: bool,
    /// Drop the relu after the generator's last layer.
    pub generator_linear_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: Vec<ChebConvParams>,
    pub fc: FcParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub fc: FcParams,
    pub convs: Vec<ChebConvParams>,
}

/// Stack of fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<FcParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Linear,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut inputs = 3;
        let convs = ENCODER_WIDTHS
            .iter()
            .map(|&w| {
                let c = init_cheb(CHEB_ORDER, inputs, w, rng);
                inputs = w;
                c
            })
            .collect();
        let fc = init_fc(n * ENCODER_WIDTHS[3], LATENT_DIM, rng);
        Self { convs, fc }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            convs: self.convs.iter().map(|c| c.bind(tape, trainable)).collect(),
            fc: self.fc.bind(tape, trainable),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.theta"), &c.theta));
            out.push((format!("enc.conv{i}.bias"), &c.bias));
        }
        out.push(("enc.fc.weight".into(), &self.fc.weight));
        out.push(("enc.fc.bias".into(), &self.fc.bias));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.theta);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub convs: Vec<ChebConvVars>,
    pub fc: FcVars,
}

impl EncoderVars {
    /// `x: [batch, n, 3]` normalized coordinates to `[batch, 25]` codes.
    pub fn forward(&self, tape: &mut Tape, scaled: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("encode", format!("input {shape:?}, expected [batch, n, 3]")));
        }
        let mut h = x;
        for conv in &self.convs {
            let c = cheb_conv(tape, h, scaled, conv)?;
            h = tape.relu(c);
        }
        // vertex-major flatten: index v * 32 + feature
        let width = tape.value(h).last_dim();
        let flat = tape.reshape(h, [shape[0], shape[1] * width])?;
        fully_connected(tape, flat, &self.fc)
    }

    fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.convs.iter().flat_map(|c| [c.theta, c.bias]).collect();
        out.extend([self.fc.weight, self.fc.bias]);
        out
    }

    fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out: Vec<&mut Var> = self.convs.iter_mut().flat_map(|c| [&mut c.theta, &mut c.bias]).collect();
        out.extend([&mut self.fc.weight, &mut self.fc.bias]);
        out
    }
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let fc = init_fc(LATENT_DIM, n * DECODER_WIDTHS[0], rng);
        let mut inputs = DECODER_WIDTHS[0];
        let convs = DECODER_WIDTHS
            .iter()
            .map(|&w| {
                let c = init_cheb(CHEB_ORDER, inputs, w, rng);
                inputs = w;
                c
            })
            .collect();
        Self { fc, convs }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DecoderVars {
        DecoderVars {
            fc: self.fc.bind(tape, trainable),
            convs: self.convs.iter().map(|c| c.bind(tape, trainable)).collect(),
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("dec.fc.weight".to_string(), &self.fc.weight), ("dec.fc.bias".to_string(), &self.fc.bias)];
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("dec.conv{i}.theta"), &c.theta));
            out.push((format!("dec.conv{i}.bias"), &c.bias));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.fc.weight, &mut self.fc.bias];
        for c in &mut self.convs {
            out.push(&mut c.theta);
            out.push(&mut c.bias);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub fc: FcVars,
    pub convs: Vec<ChebConvVars>,
}

impl DecoderVars {
    /// `z: [batch, 25]` to `[batch, n, 3]`.
    pub fn forward(&self, tape: &mut Tape, scaled: &Arc<CsrMatrix>, z: Var, final_relu: bool) -> Result<Var> {
        let batch = tape.value(z).shape()[0];
        let n = scaled.rows();
        let h = fully_connected(tape, z, &self.fc)?;
        let mut h = tape.reshape(h, [batch, n, DECODER_WIDTHS[0]])?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = cheb_conv(tape, h, scaled, conv)?;
            if i < last || final_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.fc.weight, self.fc.bias];
        out.extend(self.convs.iter().flat_map(|c| [c.theta, c.bias]));
        out
    }

    fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = vec![&mut self.fc.weight, &mut self.fc.bias];
        out.extend(self.convs.iter_mut().flat_map(|c| [&mut c.theta, &mut c.bias]));
        out
    }
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(inputs: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut fan_in = inputs;
        let layers = widths
            .iter()
            .map(|&w| {
                let l = init_fc(fan_in, w, rng);
                fan_in = w;
                l
            })
            .collect();
        Self { layers }
    }

    /// Zeroes the weights and bias of the final layer.
    pub fn zero_head(&mut self) {
        let last = self.layers.last_mut().expect("non-empty mlp");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{prefix}.fc{i}.weight"), &l.weight), (format!("{prefix}.fc{i}.bias"), &l.bias)])
            .collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<FcVars>,
}

impl MlpVars {
    /// Hidden layers use `hidden`, the final layer uses `head`.
    pub fn forward(&self, tape: &mut Tape, x: Var, hidden: Activation, head: Activation) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = fully_connected(tape, h, layer)?;
            h = match if i < last { hidden } else { head } {
                Activation::Relu => tape.relu(h),
                Activation::LeakyRelu => tape.leaky_relu(h, LEAKY_SLOPE),
                Activation::Linear => h,
            };
        }
        Ok(h)
    }

    fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    fn vars_mut(&mut self) -> Vec<&mut Var> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Generator,
    Discriminator,
    Recognizer,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::Encoder, Part::Decoder, Part::Generator, Part::Discriminator, Part::Recognizer];
}

/// The complete network: one shared autoencoder, generator `G`,
/// conditional discriminator `D`, and recognizer `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceNet {
    pub n: usize,
    pub subjects: usize,
    pub flags: ModelFlags,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub recognizer: Mlp,
}

impl FaceNet {
    pub fn init<R: Rng + ?Sized>(n: usize, subjects: usize, flags: ModelFlags, rng: &mut R) -> Result<Self> {
        if subjects < 2 {
            return Err(Error::Invalid(format!("recognizer needs at least 2 subjects, got {subjects}")));
        }
        if n < 3 {
            return Err(Error::Invalid(format!("need at least 3 vertices, got {n}")));
        }
        Ok(Self {
            n,
            subjects,
            flags,
            encoder: Encoder::init(n, rng),
            decoder: Decoder::init(n, rng),
            generator: Mlp::init(LATENT_DIM, &GENERATOR_WIDTHS, rng),
            discriminator: Mlp::init(2 * LATENT_DIM, &DISCRIMINATOR_WIDTHS, rng),
            recognizer: Mlp::init(LATENT_DIM, &[RECOGNIZER_HIDDEN, subjects], rng),
        })
    }

    /// Correctly shaped network with every parameter zero.
    pub fn zeros(n: usize, subjects: usize, flags: ModelFlags) -> Result<Self> {
        let mut net = Self::init(n, subjects, flags, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for part in Part::ALL {
            for t in net.tensors_mut(part) {
                t.data_mut().fill(0.0);
            }
        }
        Ok(net)
    }

    /// Every parameter tensor with its stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        out.extend(self.decoder.tensors());
        out.extend(self.generator.tensors("gen"));
        out.extend(self.discriminator.tensors("disc"));
        out.extend(self.recognizer.tensors("rec"));
        out
    }

    pub fn tensors_mut(&mut self, part: Part) -> Vec<&mut Tensor> {
        match part {
            Part::Encoder => self.encoder.tensors_mut(),
            Part::Decoder => self.decoder.tensors_mut(),
            Part::Generator => self.generator.tensors_mut(),
            Part::Discriminator => self.discriminator.tensors_mut(),
            Part::Recognizer => self.recognizer.tensors_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_op(&self, op: &GraphOperator) -> Result<()> {
        if op.n() != self.n {
            return Err(Error::shape("facenet", format!("graph has {} vertices, model expects {}", op.n(), self.n)));
        }
        Ok(())
    }

    /// Binds every network; `trainable` selects which parts become leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Part) -> bool) -> FaceNetVars {
        FaceNetVars {
            encoder: self.encoder.bind(tape, trainable(Part::Encoder)),
            decoder: self.decoder.bind(tape, trainable(Part::Decoder)),
            generator: self.generator.bind(tape, trainable(Part::Generator)),
            discriminator: self.discriminator.bind(tape, trainable(Part::Discriminator)),
            recognizer: self.recognizer.bind(tape, trainable(Part::Recognizer)),
            flags: self.flags,
        }
    }

    fn eval<T>(&self, f: impl FnOnce(&mut Tape, &FaceNetVars) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        f(&mut tape, &vars)
    }

    /// Encodes a batch `[batch, n, 3]` of normalized meshes to `[batch, 25]`.
    pub fn encode_batch(&self, op: &GraphOperator, x: &Tensor) -> Result<Tensor> {
        self.check_op(op)?;
        self.eval(|tape, v| {
            let xv = tape.constant(x.clone());
            let z = v.encoder.forward(tape, op.scaled(), xv)?;
            Ok(tape.value(z).clone())
        })
    }

    /// Encodes one normalized `[n, 3]` vertex block.
    pub fn encode(&self, op: &GraphOperator, x: &Tensor) -> Result<LatentCode> {
        let batch = x.clone().reshaped([1, x.shape()[0], x.len() / x.shape()[0]])?;
        LatentCode::from_slice(self.encode_batch(op, &batch)?.data())
    }

    /// Decodes one code to normalized `[n, 3]` coordinates.
    pub fn decode(&self, op: &GraphOperator, z: &LatentCode) -> Result<Tensor> {
        self.check_op(op)?;
        self.eval(|tape, v| {
            let zv = tape.constant(z.to_tensor());
            let y = v.decode(tape, op.scaled(), zv)?;
            tape.value(y).clone().reshaped([self.n, 3])
        })
    }

    pub fn translate(&self, z: &LatentCode) -> Result<LatentCode> {
        self.eval(|tape, v| {
            let zv = tape.constant(z.to_tensor());
            let g = v.translate(tape, zv)?;
            LatentCode::from_slice(tape.value(g).data())
        })
    }

    /// Probability that `z` is a real neutral code given condition `cond`.
    pub fn discriminate(&self, z: &LatentCode, cond: &LatentCode) -> Result<f64> {
        self.eval(|tape, v| {
            let zv = tape.constant(z.to_tensor());
            let cv = tape.constant(cond.to_tensor());
            let d = v.discriminate(tape, zv, cv)?;
            Ok(tape.value(d).item())
        })
    }

    pub fn identity_embedding(&self, z: &LatentCode) -> Result<IdentityEmbedding> {
        self.eval(|tape, v| {
            let zv = tape.constant(z.to_tensor());
            let l = v.identity_logits(tape, zv)?;
            Ok(IdentityEmbedding(tape.value(l).data().to_vec()))
        })
    }

    /// Class probabilities over the training subjects.
    pub fn recognize(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.eval(|tape, v| {
            let zv = tape.constant(z.to_tensor());
            let p = v.recognize(tape, zv)?;
            Ok(tape.value(p).data().to_vec())
        })
    }
}

#[derive(Debug, Clone)]
pub struct FaceNetVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub generator: MlpVars,
    pub discriminator: MlpVars,
    pub recognizer: MlpVars,
    pub flags: ModelFlags,
}

impl FaceNetVars {
    pub fn encode(&self, tape: &mut Tape, scaled: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        self.encoder.forward(tape, scaled, x)
    }

    pub fn decode(&self, tape: &mut Tape, scaled: &Arc<CsrMatrix>, z: Var) -> Result<Var> {
        self.decoder
            .forward(tape, scaled, z, self.flags.paper_literal_decoder_relu)
    }

    pub fn translate(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let head = if self.flags.generator_linear_head {
            Activation::Linear
        } else {
            Activation::Relu
        };
        self.generator.forward(tape, z, Activation::Relu, head)
    }

    /// `[batch, 25]` candidate and condition codes to `[batch, 1]`
    /// probabilities. The condition is appended after the candidate.
    pub fn discriminate(&self, tape: &mut Tape, z: Var, cond: Var) -> Result<Var> {
        let joint = tape.concat_last_axis(&[z, cond])?;
        let logit = self
            .discriminator
            .forward(tape, joint, Activation::LeakyRelu, Activation::Linear)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn identity_logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.recognizer
            .forward(tape, z, Activation::Relu, Activation::Linear)
    }

    pub fn recognize(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = self.identity_logits(tape, z)?;
        Ok(tape.softmax_last_axis(logits))
    }

    /// Tape handles of one part, aligned with [`FaceNet::tensors_mut`].
    pub fn vars(&self, part: Part) -> Vec<Var> {
        match part {
            Part::Encoder => self.encoder.vars(),
            Part::Decoder => self.decoder.vars(),
            Part::Generator => self.generator.vars(),
            Part::Discriminator => self.discriminator.vars(),
            Part::Recognizer => self.recognizer.vars(),
        }
    }

    /// Points parameter `index` of `part` (in [`FaceNetVars::vars`] order)
    /// at another tape node.
    pub fn replace(&mut self, part: Part, index: usize, var: Var) -> Result<()> {
        let mut slots = match part {
            Part::Encoder => self.encoder.vars_mut(),
            Part::Decoder => self.decoder.vars_mut(),
            Part::Generator => self.generator.vars_mut(),
            Part::Discriminator => self.discriminator.vars_mut(),
            Part::Recognizer => self.recognizer.vars_mut(),
        };
        let count = slots.len();
        let slot = slots
            .get_mut(index)
            .ok_or_else(|| Error::Invalid(format!("{part:?} has {count} parameter tensors, asked for {index}")))?;
        **slot = var;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{adjacency, build_laplacian, TriMesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_op() -> GraphOperator {
        // 3x3 grid, 8 triangles
        let mut faces = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let i = r * 3 + c;
                faces.push([i, i + 3, i + 1]);
                faces.push([i + 3, i + 4, i + 1]);
            }
        }
        let verts = (0..9).map(|i| [(i % 3) as f64, (i / 3) as f64, 0.0]).collect();
        let mesh = TriMesh::new(verts, faces).unwrap();
        build_laplacian(&adjacency(&mesh)).unwrap()
    }

    fn net(seed: u64) -> FaceNet {
        FaceNet::init(9, 4, ModelFlags::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_code(rng: &mut ChaCha8Rng) -> LatentCode {
        let v: Vec<f64> = (0..LATENT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        LatentCode::from_slice(&v).unwrap()
    }

    #[test]
    fn encoder_conv_parameter_count() {
        let net = net(1);
        let conv: usize = net
            .encoder
            .convs
            .iter()
            .map(|c| c.theta.len() + c.bias.len())
            .sum();
        assert_eq!(conv, 6 * (3 * 16 + 16 * 16 + 16 * 16 + 16 * 32) + (16 + 16 + 16 + 32));
        assert_eq!(net.encoder.fc.weight.shape(), &[9 * 32, 25]);
    }

    #[test]
    fn encode_is_25_dim_and_deterministic() {
        let op = small_op();
        let net = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform([9, 3], 1.0, &mut rng);
        let a = net.encode(&op, &x).unwrap();
        let b = net.encode(&op, &x).unwrap();
        assert_eq!(a.0.len(), 25);
        assert_eq!(a, b);
    }

    #[test]
    fn decode_shape() {
        let op = small_op();
        let net = net(3);
        let z = random_code(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(net.decode(&op, &z).unwrap().shape(), &[9, 3]);
    }

    #[test]
    fn decode_is_continuous_along_its_jacobian() {
        let op = small_op();
        let net = net(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_code(&mut rng);
        let u = random_code(&mut rng);
        let eps = 1e-6;
        let shifted = |t: f64| LatentCode(std::array::from_fn(|i| z.0[i] + t * u.0[i]));
        let base = net.decode(&op, &z).unwrap();
        let plus = net.decode(&op, &shifted(eps)).unwrap();
        let minus = net.decode(&op, &shifted(-eps)).unwrap();
        // central difference versus the two one-sided ones: a kink would separate them
        for i in 0..base.len() {
            let fwd = (plus.data()[i] - base.data()[i]) / eps;
            let bwd = (base.data()[i] - minus.data()[i]) / eps;
            assert!((fwd - bwd).abs() < 1e-4 * (1.0 + fwd.abs()), "{fwd} vs {bwd}");
        }
        assert!(plus.max_abs_diff(&base) < 1e-4);
    }

    #[test]
    fn autoencoder_composite_passes_gradient_check() {
        let op = small_op();
        let net = net(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([2, 9, 3], 1.0, &mut rng);
        let w = Tensor::uniform([2, 9, 3], 1.0, &mut rng);
        let report = crate::diff::gradient_check(
            |t, xv| {
                let v = net.bind(t, |_| false);
                let z = v.encode(t, op.scaled(), xv)?;
                let y = v.decode(t, op.scaled(), z)?;
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn translate_nonnegative_and_zero_fixed_point() {
        let mut net = net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = net.translate(&random_code(&mut rng)).unwrap();
            assert!(g.0.iter().all(|&v| v >= 0.0));
        }
        // biases are zero at init, so a zero code stays zero
        assert_eq!(net.translate(&LatentCode([0.0; 25])).unwrap(), LatentCode([0.0; 25]));
        net.flags.generator_linear_head = true;
        let any_negative = (0..20).any(|_| net.translate(&random_code(&mut rng)).unwrap().0.iter().any(|&v| v < 0.0));
        assert!(any_negative);
    }

    #[test]
    fn discriminator_range_and_order() {
        let mut net = net(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = net.discriminate(&random_code(&mut rng), &random_code(&mut rng)).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
        // counterexample search: swapping candidate and condition changes the output
        let swapped = (0..50).any(|_| {
            let (a, b) = (random_code(&mut rng), random_code(&mut rng));
            net.discriminate(&a, &b).unwrap() != net.discriminate(&b, &a).unwrap()
        });
        assert!(swapped);

        for l in &mut net.discriminator.layers {
            l.weight.data_mut().fill(0.0);
        }
        assert_eq!(net.discriminate(&random_code(&mut rng), &random_code(&mut rng)).unwrap(), 0.5);
    }

    #[test]
    fn recognizer_probabilities() {
        let mut net = net(8);
        let z = random_code(&mut ChaCha8Rng::seed_from_u64(9));
        let p = net.recognize(&z).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let emb = net.identity_embedding(&z).unwrap();
        assert_eq!(emb.0.len(), 4);
        let max = emb.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = emb.0.iter().map(|l| (l - max).exp()).sum();
        for (pi, li) in p.iter().zip(&emb.0) {
            assert!((pi - (li - max).exp() / total).abs() < 1e-12);
        }

        // shifting all logits leaves the argmax alone
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let before = argmax(&p);
        let head = net.recognizer.layers.last_mut().unwrap();
        head.bias.data_mut().iter_mut().for_each(|b| *b += 3.0);
        assert_eq!(argmax(&net.recognize(&z).unwrap()), before);

        for l in &mut net.recognizer.layers {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        assert!(net.recognize(&z).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn branches_share_one_parameter_set() {
        let op = small_op();
        let net = net(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, |_| true);
        let leaves_before = tape.len();
        let xe = tape.constant(Tensor::uniform([1, 9, 3], 1.0, &mut rng));
        let xn = tape.constant(Tensor::uniform([1, 9, 3], 1.0, &mut rng));
        let ze = vars.encode(&mut tape, op.scaled(), xe).unwrap();
        let zn = vars.encode(&mut tape, op.scaled(), xn).unwrap();
        let a = tape.sum(ze);
        let b = tape.sum(zn);
        let root = tape.add(a, b).unwrap();
        // no extra leaves were created by the second branch
        assert_eq!(leaves_before, net.named_tensors().len());
        let joint = tape.backward(root).unwrap();

        // the shared leaf receives the sum of both branch gradients
        let branch_grad = |x: &Tensor| {
            let mut t = Tape::new();
            let v = net.bind(&mut t, |_| true);
            let xv = t.constant(x.clone());
            let z = v.encode(&mut t, op.scaled(), xv).unwrap();
            let s = t.sum(z);
            t.backward(s).unwrap().get(v.encoder.convs[0].theta).unwrap().clone()
        };
        let ge = branch_grad(tape.value(xe));
        let gn = branch_grad(tape.value(xn));
        let shared = joint.get(vars.encoder.convs[0].theta).unwrap();
        for ((s, a), b) in shared.data().iter().zip(ge.data()).zip(gn.data()) {
            assert!((s - (a + b)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn part_vars_align_with_tensors() {
        let mut net = net(12);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, |_| true);
        for part in [Part::Encoder, Part::Decoder, Part::Generator, Part::Discriminator, Part::Recognizer] {
            let vs = vars.vars(part);
            let ts = net.tensors_mut(part);
            assert_eq!(vs.len(), ts.len());
            for (v, t) in vs.iter().zip(ts) {
                assert_eq!(tape.value(*v), &*t);
            }
        }
    }
}
