//! Linear and MLP encoder/decoder pairs with hand-derived reverse mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{gaussian, Mat, RngStream};
use crate::synth::GroundTruth;

/// Negative slope of the leaky activation.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Norm floor used by row normalization.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// `u ↦ max(0.1·u, u)`.
    Leaky,
}

impl Activation {
    fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Identity => u,
            Activation::Leaky => u.max(LEAKY_SLOPE * u),
        }
    }

    fn slope(self, u: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Leaky if u > 0.0 => 1.0,
            Activation::Leaky => LEAKY_SLOPE,
        }
    }
}

/// How the latent vector is grouped into rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LatentLayout {
    Flat,
    Tensor { rows: usize, cols: usize },
}

impl LatentLayout {
    /// Length of one latent row (the whole vector when flat).
    pub fn row_dim(self, latent_dim: usize) -> usize {
        match self {
            LatentLayout::Flat => latent_dim,
            LatentLayout::Tensor { cols, .. } => cols,
        }
    }
}

/// Affine layer `y = act(W x + b)` with `W` of shape out × in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn he(rng: &mut RngStream, fan_in: usize, fan_out: usize, activation: Activation) -> Layer {
        Layer {
            w: gaussian(rng, fan_out, fan_in).scale((2.0 / fan_in as f64).sqrt()),
            b: vec![0.0; fan_out],
            activation,
        }
    }

    fn zeroed(&self) -> LayerGrad {
        LayerGrad {
            w: Mat::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }
}

/// Architecture and latent options for a fresh model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub layout: LatentLayout,
    pub row_normalize: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            hidden_width: 64,
            hidden_layers: 2,
            layout: LatentLayout::Flat,
            row_normalize: false,
        }
    }
}

/// Encoder `h_θ : ℝᵐ → ℝⁿ` with a mirrored decoder `g_θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub layout: LatentLayout,
    pub row_normalize: bool,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
}

/// Gradient of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Parameter gradients, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub encoder: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl GradBuffer {
    pub fn zeros_like(model: &EncoderModel) -> GradBuffer {
        GradBuffer {
            encoder: model.encoder.iter().map(Layer::zeroed).collect(),
            decoder: model.decoder.iter().map(Layer::zeroed).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradBuffer) -> Result<()> {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.w.add_assign(&b.w)?;
            if a.b.len() != b.b.len() {
                return Err(dim_err("GradBuffer::add_assign", a.b.len(), b.b.len()));
            }
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.w.data_mut().iter_mut().for_each(|v| *v *= s);
            l.b.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.encoder.iter_mut().chain(&mut self.decoder)
    }

    /// Flat views in the same order as [`EncoderModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers().flat_map(|l| [l.w.data(), l.b.as_slice()]).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values of one stack of layers.
#[derive(Clone, Debug)]
pub struct StackTrace {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    pub output: Mat,
}

impl StackTrace {
    /// Smallest |pre-activation| over leaky layers, infinite when there are none.
    fn kink_margin(&self, layers: &[Layer]) -> f64 {
        layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Leaky)
            .flat_map(|(_, p)| p.data().iter())
            .fold(f64::INFINITY, |a, v| a.min(v.abs()))
    }

    fn pattern(&self, layers: &[Layer], hash: &mut u64) {
        for (l, p) in layers.iter().zip(&self.pre) {
            if l.activation == Activation::Leaky {
                p.data().iter().for_each(|v| mix_bit(hash, *v > 0.0));
            }
        }
    }
}

/// Encoder pass including the normalization step.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    stack: StackTrace,
    norms: Vec<f64>,
    pub z: Mat,
}

/// Encoder pass with an optional decoder pass on its latent.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub enc: EncodeTrace,
    pub dec: Option<StackTrace>,
}

impl ForwardPass {
    pub fn z(&self) -> &Mat {
        &self.enc.z
    }

    pub fn x_hat(&self) -> Option<&Mat> {
        self.dec.as_ref().map(|d| &d.output)
    }
}

pub(crate) fn mix_bit(hash: &mut u64, bit: bool) {
    *hash = (*hash ^ u64::from(bit)).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
}

fn stack_forward(layers: &[Layer], x: &Mat) -> Result<StackTrace> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        let mut u = cur.matmul_t(&l.w)?;
        for i in 0..u.rows() {
            u.row_mut(i).iter_mut().zip(&l.b).for_each(|(v, b)| *v += b);
        }
        let out = u.map(|v| l.activation.apply(v));
        inputs.push(cur);
        pre.push(u);
        cur = out;
    }
    Ok(StackTrace { inputs, pre, output: cur })
}

fn stack_backward(layers: &[Layer], trace: &StackTrace, d_out: &Mat) -> Result<(Vec<LayerGrad>, Mat)> {
    let mut grads = Vec::with_capacity(layers.len());
    let mut d = d_out.clone();
    for (k, l) in layers.iter().enumerate().rev() {
        if l.activation != Activation::Identity {
            let pre = &trace.pre[k];
            d.data_mut()
                .iter_mut()
                .zip(pre.data())
                .for_each(|(g, &u)| *g *= l.activation.slope(u));
        }
        let gw = d.t_matmul(&trace.inputs[k])?;
        let mut gb = vec![0.0; l.b.len()];
        for i in 0..d.rows() {
            gb.iter_mut().zip(d.row(i)).for_each(|(a, v)| *a += v);
        }
        d = crate::numerics::matmul(&d, &l.w)?;
        grads.push(LayerGrad { w: gw, b: gb });
    }
    grads.reverse();
    Ok((grads, d))
}

impl EncoderModel {
    /// Fresh model with He-style Gaussian initialization.
    pub fn init(spec: &ModelSpec, input_dim: usize, latent_dim: usize, rng: &mut RngStream) -> Result<EncoderModel> {
        if let LatentLayout::Tensor { rows, cols } = spec.layout {
            if rows * cols != latent_dim {
                return Err(dim_err("EncoderModel::init", latent_dim, format!("{rows}x{cols} tensor layout")));
            }
        }
        let widths: Vec<usize> = match spec.kind {
            ModelKind::Linear => vec![input_dim, latent_dim],
            ModelKind::Mlp => {
                let mut w = vec![input_dim];
                w.extend(std::iter::repeat_n(spec.hidden_width, spec.hidden_layers));
                w.push(latent_dim);
                w
            }
        };
        let build = |rng: &mut RngStream, widths: &[usize]| -> Vec<Layer> {
            let last = widths.len() - 2;
            (0..widths.len() - 1)
                .map(|k| {
                    let act = if k == last { Activation::Identity } else { Activation::Leaky };
                    Layer::he(rng, widths[k], widths[k + 1], act)
                })
                .collect()
        };
        let encoder = build(rng, &widths);
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = build(rng, &rev);
        Ok(EncoderModel {
            kind: spec.kind,
            input_dim,
            latent_dim,
            layout: spec.layout,
            row_normalize: spec.row_normalize,
            encoder,
            decoder,
        })
    }

    /// Linear model with encoder `h*` and decoder `h*⁻¹`, zero biases.
    pub fn from_ground_truth(gt: &GroundTruth) -> EncoderModel {
        EncoderModel {
            kind: ModelKind::Linear,
            input_dim: gt.m,
            latent_dim: gt.n,
            layout: LatentLayout::Flat,
            row_normalize: false,
            encoder: vec![Layer {
                w: gt.h.clone(),
                b: vec![0.0; gt.n],
                activation: Activation::Identity,
            }],
            decoder: vec![Layer {
                w: gt.h_inv.clone(),
                b: vec![0.0; gt.m],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn row_dim(&self) -> usize {
        self.layout.row_dim(self.latent_dim)
    }

    pub fn param_count(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    /// Mutable flat views: for each encoder then decoder layer, weights then bias.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .flat_map(|l| [l.w.data_mut(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.w.data(), l.b.as_slice()])
            .collect()
    }

    fn check_input(&self, x: &Mat, want: usize, op: &'static str) -> Result<()> {
        if x.cols() != want {
            return Err(dim_err(op, format!("{want} columns"), x.cols()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        Ok(self.encode_traced(x)?.z)
    }

    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        self.check_input(z, self.latent_dim, "decode")?;
        Ok(stack_forward(&self.decoder, z)?.output)
    }

    pub fn encode_traced(&self, x: &Mat) -> Result<EncodeTrace> {
        self.check_input(x, self.input_dim, "encode")?;
        let stack = stack_forward(&self.encoder, x)?;
        let mut z = stack.output.clone();
        let mut norms = Vec::new();
        if self.row_normalize {
            let rd = self.row_dim();
            for i in 0..z.rows() {
                for g in z.row_mut(i).chunks_mut(rd) {
                    let nrm = crate::numerics::norm2(g).max(NORM_FLOOR);
                    g.iter_mut().for_each(|v| *v /= nrm);
                    norms.push(nrm);
                }
            }
        }
        Ok(EncodeTrace { stack, norms, z })
    }

    /// Encoder pass, plus the decoder on the resulting latent when `with_decoder` is set.
    pub fn forward(&self, x: &Mat, with_decoder: bool) -> Result<ForwardPass> {
        let enc = self.encode_traced(x)?;
        let dec = if with_decoder {
            Some(stack_forward(&self.decoder, &enc.z)?)
        } else {
            None
        };
        Ok(ForwardPass { enc, dec })
    }

    /// Reverse-mode parameter gradients given upstream gradients on `z` and `x̂`.
    pub fn backward(&self, pass: &ForwardPass, dz: &Mat, dxhat: Option<&Mat>) -> Result<GradBuffer> {
        let z = &pass.enc.z;
        if dz.shape() != z.shape() {
            return Err(dim_err("backward", format!("{:?}", z.shape()), format!("{:?}", dz.shape())));
        }
        let mut grads = GradBuffer::zeros_like(self);
        let mut dz_total = dz.clone();
        if let Some(dxh) = dxhat {
            let dec = pass
                .dec
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("decoder gradient given without a decoder pass".into()))?;
            if dxh.shape() != dec.output.shape() {
                return Err(dim_err("backward", format!("{:?}", dec.output.shape()), format!("{:?}", dxh.shape())));
            }
            let (dgrads, dz_dec) = stack_backward(&self.decoder, dec, dxh)?;
            grads.decoder = dgrads;
            dz_total.add_assign(&dz_dec)?;
        }
        let d_raw = if self.row_normalize {
            let rd = self.row_dim();
            let mut d = dz_total;
            let mut k = 0;
            for i in 0..d.rows() {
                let zr = z.row(i);
                for (gi, g) in d.row_mut(i).chunks_mut(rd).enumerate() {
                    let zg = &zr[gi * rd..(gi + 1) * rd];
                    let proj = crate::numerics::dot(zg, g);
                    let nrm = pass.enc.norms[k];
                    g.iter_mut().zip(zg).for_each(|(gv, zv)| *gv = (*gv - zv * proj) / nrm);
                    k += 1;
                }
            }
            d
        } else {
            dz_total
        };
        let (egrads, _) = stack_backward(&self.encoder, &pass.enc.stack, &d_raw)?;
        grads.encoder = egrads;
        Ok(grads)
    }

    /// Smallest distance of a leaky pre-activation from its kink in this pass.
    pub fn kink_margin(&self, pass: &ForwardPass) -> f64 {
        let mut m = pass.enc.stack.kink_margin(&self.encoder);
        if let Some(d) = &pass.dec {
            m = m.min(d.kink_margin(&self.decoder));
        }
        m
    }

    /// Folds the activation pattern of `pass` into `hash`.
    pub fn activation_pattern(&self, pass: &ForwardPass, hash: &mut u64) {
        pass.enc.stack.pattern(&self.encoder, hash);
        if let Some(d) = &pass.dec {
            d.pattern(&self.decoder, hash);
        }
    }

    /// Writes `model.json` plus one CSV per weight matrix and bias.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        for (tag, stack) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (k, l) in stack.iter().enumerate() {
                let wf = format!("{tag}_{k}_w.csv");
                let bf = format!("{tag}_{k}_b.csv");
                l.w.write_csv(dir.join(&wf))?;
                Mat::from_vec(1, l.b.len(), l.b.clone())?.write_csv(dir.join(&bf))?;
                layers.push(LayerRecord {
                    stack: tag.to_string(),
                    index: k,
                    activation: l.activation,
                    weights: wf,
                    bias: bf,
                });
            }
        }
        let manifest = CheckpointManifest {
            kind: self.kind,
            input_dim: self.input_dim,
            latent_dim: self.latent_dim,
            layout: self.layout,
            row_normalize: self.row_normalize,
            layers,
        };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<EncoderModel> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for rec in &manifest.layers {
            let w = Mat::read_csv(dir.join(&rec.weights))?;
            let b = Mat::read_csv(dir.join(&rec.bias))?.into_data();
            let layer = Layer {
                w,
                b,
                activation: rec.activation,
            };
            match rec.stack.as_str() {
                "enc" => encoder.push(layer),
                "dec" => decoder.push(layer),
                other => return Err(Error::Parse(format!("unknown layer stack {other:?}"))),
            }
        }
        Ok(EncoderModel {
            kind: manifest.kind,
            input_dim: manifest.input_dim,
            latent_dim: manifest.latent_dim,
            layout: manifest.layout,
            row_normalize: manifest.row_normalize,
            encoder,
            decoder,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    stack: String,
    index: usize,
    activation: Activation,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    kind: ModelKind,
    input_dim: usize,
    latent_dim: usize,
    layout: LatentLayout,
    row_normalize: bool,
    layers: Vec<LayerRecord>,
}

/// Loss value, gradient, and kink diagnostics at one parameter point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grads: GradBuffer,
    /// Smallest distance of any nonsmooth argument from its kink.
    pub kink_margin: f64,
    /// Hash of the active smooth piece; equal hashes mean no kink was crossed.
    pub pattern: u64,
}

/// Attempts allowed before [`grad_check_resampling`] gives up.
pub const GRAD_CHECK_TRIES: usize = 20;

/// Maximum elementwise relative error between analytic and central-difference gradients.
///
/// Relative error uses `|a − f| / max(|a|, |f|, 1e-6·g_max, r, 1e-12)` where `g_max` is the
/// largest analytic gradient entry and `r = 10⁶·ε_mach·max(|L|, 1)/eps` is the magnitude below
/// which a central difference at loss value `L` cannot reach 1e-5 relative accuracy. Fails with [`Error::KinkProximity`] when the base point is
/// within `10·eps` of a kink or a perturbation changes the active piece.
pub fn grad_check<B>(
    model: &EncoderModel,
    loss_fn: impl Fn(&EncoderModel, &B) -> Result<Evaluation>,
    batch: &B,
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps must lie in [1e-6, 1e-3], got {eps}")));
    }
    let base = loss_fn(model, batch)?;
    if base.kink_margin <= 10.0 * eps {
        return Err(Error::KinkProximity { tries: 1 });
    }
    let analytic = base.grads.flatten();
    let g_max = analytic.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let resolution = 1e6 * f64::EPSILON * base.value.abs().max(1.0) / eps;
    let floor = (1e-6 * g_max).max(resolution).max(1e-12);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat_index = 0;
    let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    for (s, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.param_slices_mut()[s][j];
            probe.param_slices_mut()[s][j] = orig + eps;
            let plus = loss_fn(&probe, batch)?;
            probe.param_slices_mut()[s][j] = orig - eps;
            let minus = loss_fn(&probe, batch)?;
            probe.param_slices_mut()[s][j] = orig;
            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                return Err(Error::KinkProximity { tries: 1 });
            }
            let numeric = (plus.value - minus.value) / (2.0 * eps);
            let a = analytic[flat_index];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            flat_index += 1;
        }
    }
    Ok(worst)
}

/// [`grad_check`] with a fresh batch from `sampler` whenever a kink is too close.
pub fn grad_check_resampling<B>(
    model: &EncoderModel,
    loss_fn: impl Fn(&EncoderModel, &B) -> Result<Evaluation>,
    mut sampler: impl FnMut() -> Result<B>,
    eps: f64,
) -> Result<f64> {
    for _ in 0..GRAD_CHECK_TRIES {
        let batch = sampler()?;
        match grad_check(model, &loss_fn, &batch, eps) {
            Err(Error::KinkProximity { .. }) => continue,
            other => return other,
        }
    }
    Err(Error::KinkProximity { tries: GRAD_CHECK_TRIES })
}
