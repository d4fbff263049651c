//! The coarse decoder (latent code to primitive attributes) and the fine
//! decoder (latent code and point to signed distance), both 8-layer MLPs of
//! weight-normalised linear layers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PrimitiveKind, PrimitiveSet, UnionMode};
use crate::render::SdfField;

pub const N_LAYERS: usize = 8;
/// Index of the fine-decoder layer whose input is re-joined with the
/// network input.
pub const SKIP_LAYER: usize = 4;
/// Primitive positions are squashed into `(-CENTER_LIMIT, CENTER_LIMIT)`.
pub const CENTER_LIMIT: f64 = 1.2;
pub const INIT_SHELL_RADIUS: f64 = 0.5;
pub const INIT_PRIMITIVE_SIZE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub n_primitives: usize,
    pub primitive_kind: PrimitiveKind,
    pub dropout_p: f64,
    pub union_mode: UnionMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latent_dim: 128,
            hidden_dim: 512,
            n_primitives: 256,
            primitive_kind: PrimitiveKind::Sphere,
            dropout_p: 0.2,
            union_mode: UnionMode::Hard,
        }
    }
}

impl NetConfig {
    /// Small configuration that trains on a laptop CPU.
    pub fn desk() -> Self {
        NetConfig {
            latent_dim: 16,
            hidden_dim: 128,
            n_primitives: 16,
            dropout_p: 0.0,
            ..Self::default()
        }
    }

    /// Width of the coarse decoder output.
    pub fn attribute_dim(&self) -> usize {
        self.n_primitives * self.primitive_kind.arity()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.n_primitives == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        if let UnionMode::LogSumExp { t } = self.union_mode {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("union temperature {t} must be positive")));
            }
        }
        Ok(())
    }

    fn coarse_dims(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_dim;
        (0..N_LAYERS)
            .map(|i| match i {
                0 => (self.latent_dim, h),
                i if i == N_LAYERS - 1 => (h, self.attribute_dim()),
                _ => (h, h),
            })
            .collect()
    }

    fn fine_dims(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_dim;
        let input = self.latent_dim + 3;
        (0..N_LAYERS)
            .map(|i| match i {
                0 => (input, h),
                SKIP_LAYER => (h + input, h),
                i if i == N_LAYERS - 1 => (h, 1),
                _ => (h, h),
            })
            .collect()
    }
}

/// Weight-normalised linear layer: row `i` of the weight is
/// `gain[i] * direction[i] / |direction[i]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub direction: Tensor,
    /// `out x 1`
    pub gain: Tensor,
    /// `1 x out`
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.direction.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.direction.rows()
    }

    /// The effective dense weight.
    pub fn weight(&self) -> Result<Tensor> {
        let mut w = self.direction.clone();
        for r in 0..w.rows() {
            let row = w.row_slice_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!("direction row {r} has zero norm")));
            }
            let s = self.gain.get(r, 0) / norm;
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub coarse: Vec<Layer>,
    pub fine: Vec<Layer>,
}

impl DecoderParams {
    /// Every tensor in declaration order: coarse layers then fine layers,
    /// each as direction, gain, bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.coarse
            .iter()
            .chain(&self.fine)
            .flat_map(|l| [&l.direction, &l.gain, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.coarse
            .iter_mut()
            .chain(self.fine.iter_mut())
            .flat_map(|l| [&mut l.direction, &mut l.gain, &mut l.bias])
            .collect()
    }

    /// Rebuilds parameters from tensors in [`DecoderParams::tensors`] order,
    /// checking every shape against `config`.
    pub fn from_tensors(config: &NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let dims: Vec<(usize, usize)> = config.coarse_dims().into_iter().chain(config.fine_dims()).collect();
        if tensors.len() != 3 * dims.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", 3 * dims.len(), tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(dims.len());
        for (i, (fan_in, out)) in dims.into_iter().enumerate() {
            let (direction, gain, bias) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            if direction.shape() != (out, fan_in) || gain.shape() != (out, 1) || bias.shape() != (1, out) {
                return Err(Error::Format(format!("layer {i} shapes do not match the network config")));
            }
            layers.push(Layer { direction, gain, bias });
        }
        let fine = layers.split_off(N_LAYERS);
        Ok(DecoderParams { coarse: layers, fine })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn init_layer(rng: &mut ChaCha8Rng, fan_in: usize, out: usize) -> Layer {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let direction = Tensor::from_fn(out, fan_in, |_, _| normal.sample(rng));
    let gain = Tensor::column(
        (0..out)
            .map(|r| direction.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    );
    Layer {
        direction,
        gain,
        bias: Tensor::zeros(1, out),
    }
}

/// Near-uniform points on a sphere (golden-angle spiral).
fn shell_points(n: usize, radius: f64) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = if n == 1 { 0.0 } else { 1.0 - 2.0 * (i as f64 + 0.5) / n as f64 };
            let ring = (1.0 - y * y).max(0.0).sqrt();
            let theta = golden * i as f64;
            Point3::new(ring * theta.cos(), y, ring * theta.sin()) * radius
        })
        .collect()
}

/// Raw (pre-clamp) attributes that place primitive `i` at `center` with all
/// sizes `size`.
fn seed_attributes(kind: PrimitiveKind, center: Point3, size: f64) -> Vec<f64> {
    // Inverse of the position clamp so decoded centres land on the shell.
    let raw = |x: f64| CENTER_LIMIT * (x / CENTER_LIMIT).atanh();
    let log = size.ln();
    match kind {
        PrimitiveKind::Sphere => vec![raw(center.x), raw(center.y), raw(center.z), log],
        PrimitiveKind::Capsule => {
            // Distinct endpoints so the two ends can separate during training.
            let h = size;
            vec![
                raw(center.x - h),
                raw(center.y),
                raw(center.z),
                raw(center.x + h),
                raw(center.y),
                raw(center.z),
                log,
            ]
        }
        PrimitiveKind::Box => vec![raw(center.x), raw(center.y), raw(center.z), log, log, log],
    }
}

/// Random initialisation. The coarse output bias places the primitives on a
/// shell of radius 0.5 with size 0.05 so they do not start coincident.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<DecoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coarse: Vec<Layer> = config
        .coarse_dims()
        .into_iter()
        .map(|(i, o)| init_layer(&mut rng, i, o))
        .collect();
    let fine = config
        .fine_dims()
        .into_iter()
        .map(|(i, o)| init_layer(&mut rng, i, o))
        .collect();
    let bias: Vec<f64> = shell_points(config.n_primitives, INIT_SHELL_RADIUS)
        .into_iter()
        .flat_map(|c| seed_attributes(config.primitive_kind, c, INIT_PRIMITIVE_SIZE))
        .collect();
    coarse[N_LAYERS - 1].bias = Tensor::row(bias);
    Ok(DecoderParams { coarse, fine })
}

/// Tape handles for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub direction: Var,
    pub gain: Var,
    pub bias: Var,
}

/// Puts `layers` on the tape, as trainable leaves or constants.
pub fn register_layers(tape: &mut Tape, layers: &[Layer], trainable: bool) -> Result<Vec<LayerVars>> {
    layers
        .iter()
        .map(|l| {
            let put = |tape: &mut Tape, t: &Tensor| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            Ok(LayerVars {
                direction: put(tape, &l.direction)?,
                gain: put(tape, &l.gain)?,
                bias: put(tape, &l.bias)?,
            })
        })
        .collect()
}

/// `input * W^T + b` with the weight-normalised `W`.
pub fn linear_weightnorm_forward(tape: &mut Tape, input: Var, layer: &LayerVars) -> Result<Var> {
    let norm = tape.row_norm(layer.direction)?;
    if tape.value(norm).data().iter().any(|&n| n == 0.0) {
        return Err(Error::Numerical("weight-norm direction row has zero norm".into()));
    }
    let unit = tape.div_col(layer.direction, norm)?;
    let w = tape.mul_col(unit, layer.gain)?;
    let y = tape.matmul_t(input, w)?;
    tape.add_row(y, layer.bias)
}

fn check_layers(layers: &[LayerVars], expected: usize) -> Result<()> {
    if layers.len() != expected {
        return Err(Error::DimensionMismatch(format!("{} layers, expected {expected}", layers.len())));
    }
    Ok(())
}

/// Latent codes (`B x latent_dim`) to raw primitive attributes
/// (`B x N*k`, one row per code, primitive-major). Positions pass through
/// `CENTER_LIMIT * tanh(x / CENTER_LIMIT)`; log sizes are left as is.
pub fn decode_coarse(tape: &mut Tape, z: Var, layers: &[LayerVars], config: &NetConfig) -> Result<Var> {
    check_layers(layers, N_LAYERS)?;
    if tape.value(z).cols() != config.latent_dim {
        return Err(Error::DimensionMismatch(format!(
            "latent width {} but the network expects {}",
            tape.value(z).cols(),
            config.latent_dim
        )));
    }
    let mut h = z;
    for (i, l) in layers.iter().enumerate() {
        h = linear_weightnorm_forward(tape, h, l)?;
        if i + 1 < N_LAYERS {
            h = tape.relu(h)?;
        }
    }
    if tape.value(h).cols() != config.attribute_dim() {
        return Err(Error::DimensionMismatch("coarse output width does not match the config".into()));
    }
    tape.soft_clamp(h, config.primitive_kind.position_mask(), CENTER_LIMIT)
}

/// Signed distance for each row of `z` (`B x latent_dim`) paired with the
/// same row of `points` (`B x 3`). With `dropout` set, hidden activations
/// are dropped with probability `config.dropout_p` and survivors rescaled.
pub fn decode_fine(
    tape: &mut Tape,
    z: Var,
    points: Var,
    layers: &[LayerVars],
    config: &NetConfig,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    check_layers(layers, N_LAYERS)?;
    let (zr, zc) = tape.value(z).shape();
    let (pr, pc) = tape.value(points).shape();
    if zc != config.latent_dim || pc != 3 || zr != pr {
        return Err(Error::DimensionMismatch(format!(
            "fine decoder inputs {:?} and {:?}",
            (zr, zc),
            (pr, pc)
        )));
    }
    let input = tape.concat_cols(&[z, points])?;
    let mut h = input;
    for (i, l) in layers.iter().enumerate() {
        if i == SKIP_LAYER {
            h = tape.concat_cols(&[h, input])?;
        }
        h = linear_weightnorm_forward(tape, h, l)?;
        if i + 1 < N_LAYERS {
            h = tape.relu(h)?;
            if let Some(rng) = dropout.as_deref_mut() {
                if config.dropout_p > 0.0 {
                    let keep = 1.0 - config.dropout_p;
                    let (r, c) = tape.value(h).shape();
                    let mask = Tensor::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    let m = tape.constant(mask)?;
                    h = tape.mul(h, m)?;
                }
            }
        }
    }
    Ok(h)
}

/// Plain forward evaluation of trained decoders with precomputed weights.
/// Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Decoders {
    config: NetConfig,
    params: DecoderParams,
    coarse: Vec<(Tensor, Tensor)>,
    fine: Vec<(Tensor, Tensor)>,
}

/// Points per fine-decoder forward pass.
const FINE_CHUNK: usize = 4096;

impl Decoders {
    pub fn new(config: &NetConfig, params: &DecoderParams) -> Result<Self> {
        config.validate()?;
        let prep = |layers: &[Layer]| -> Result<Vec<(Tensor, Tensor)>> {
            layers.iter().map(|l| Ok((l.weight()?, l.bias.clone()))).collect()
        };
        Ok(Decoders {
            config: config.clone(),
            params: params.clone(),
            coarse: prep(&params.coarse)?,
            fine: prep(&params.fine)?,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &DecoderParams {
        &self.params
    }

    fn dense(input: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Tensor {
        let (m, k, n) = (input.rows(), input.cols(), w.rows());
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            out.row_slice_mut(r).copy_from_slice(b.data());
        }
        gemm(m, k, n, 1.0, input.data(), k, false, w.data(), k, true, 1.0, out.data_mut());
        if relu {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        out
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent of length {} for a {}-dimensional model",
                z.len(),
                self.config.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code"));
        }
        Ok(())
    }

    /// Raw attributes (positions clamped, sizes as logs) for one code.
    pub fn coarse_attributes(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let mut h = Tensor::row(z.to_vec());
        for (i, (w, b)) in self.coarse.iter().enumerate() {
            h = Self::dense(&h, w, b, i + 1 < N_LAYERS);
        }
        let mask = self.config.primitive_kind.position_mask();
        let mut out = h.into_data();
        for (c, v) in out.iter_mut().enumerate() {
            if mask[c % mask.len()] {
                *v = CENTER_LIMIT * (*v / CENTER_LIMIT).tanh();
            }
        }
        Ok(out)
    }

    /// Pulls a gradient over the raw attributes of `z`'s primitives back to
    /// the code: returns `upstream^T * d(attributes)/dz`.
    pub fn coarse_pullback(&self, z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let layers = register_layers(&mut tape, &self.params.coarse, false)?;
        let zv = tape.leaf(Tensor::row(z.to_vec()))?;
        let attrs = decode_coarse(&mut tape, zv, &layers, &self.config)?;
        tape.backward_from(attrs, Tensor::new(1, upstream.len(), upstream.to_vec())?)?;
        Ok(tape
            .grad(zv)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; z.len()]))
    }

    pub fn primitive_set(&self, z: &[f64]) -> Result<PrimitiveSet> {
        PrimitiveSet::from_flat(self.config.primitive_kind, self.coarse_attributes(z)?)
    }

    /// Fine-decoder SDF for one code at many points.
    pub fn fine_sdf(&self, z: &[f64], points: &[Point3], out: &mut [f64]) -> Result<()> {
        self.check_latent(z)?;
        if points.len() != out.len() {
            return Err(Error::DimensionMismatch("output buffer length".into()));
        }
        let l = self.config.latent_dim;
        let width = l + 3;
        for (chunk, dst) in points.chunks(FINE_CHUNK).zip(out.chunks_mut(FINE_CHUNK)) {
            let input = Tensor::from_fn(chunk.len(), width, |r, c| if c < l { z[c] } else { chunk[r][c - l] });
            let mut h = input.clone();
            for (i, (w, b)) in self.fine.iter().enumerate() {
                if i == SKIP_LAYER {
                    let joined = Tensor::from_fn(h.rows(), h.cols() + width, |r, c| {
                        if c < h.cols() {
                            h.get(r, c)
                        } else {
                            input.get(r, c - h.cols())
                        }
                    });
                    h = joined;
                }
                h = Self::dense(&h, w, b, i + 1 < N_LAYERS);
            }
            dst.copy_from_slice(h.data());
        }
        Ok(())
    }

    /// The fine decoder for a fixed code as a renderable field.
    pub fn fine_field<'a>(&'a self, z: &'a [f64]) -> Result<FineField<'a>> {
        self.check_latent(z)?;
        Ok(FineField { decoders: self, z })
    }

    /// The coarse primitive union for a fixed code as a renderable field.
    pub fn coarse_field(&self, z: &[f64]) -> Result<CoarseField> {
        Ok(CoarseField {
            set: self.primitive_set(z)?,
            mode: self.config.union_mode,
        })
    }
}

pub struct FineField<'a> {
    decoders: &'a Decoders,
    z: &'a [f64],
}

impl SdfField for FineField<'_> {
    fn eval_batch(&self, points: &[Point3], out: &mut [f64]) {
        // The code was validated when the field was created.
        self.decoders
            .fine_sdf(self.z, points, out)
            .expect("validated fine decoder input");
    }
}

pub struct CoarseField {
    pub set: PrimitiveSet,
    pub mode: UnionMode,
}

impl SdfField for CoarseField {
    fn eval_batch(&self, points: &[Point3], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(points) {
            *o = self.set.sdf(p, self.mode);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> NetConfig {
        NetConfig {
            latent_dim: 5,
            hidden_dim: 7,
            n_primitives: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let n = 4;
        let layer = Layer {
            direction: Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }),
            gain: Tensor::filled(n, 1, 1.0),
            bias: Tensor::zeros(1, n),
        };
        let x = Tensor::from_fn(3, n, |r, c| (r as f64 - c as f64) * 0.25);
        let mut tape = Tape::new();
        let vars = register_layers(&mut tape, std::slice::from_ref(&layer), false).unwrap();
        let xi = tape.constant(x.clone()).unwrap();
        let y = linear_weightnorm_forward(&mut tape, xi, &vars[0]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn weight_norm_is_invariant_to_direction_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = init_layer(&mut rng, 6, 4);
        let mut scaled = layer.clone();
        for v in scaled.direction.row_slice_mut(2) {
            *v *= 10.0;
        }
        let x = Tensor::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
        let run = |l: &Layer| {
            let mut tape = Tape::new();
            let vars = register_layers(&mut tape, std::slice::from_ref(l), false).unwrap();
            let xi = tape.constant(x.clone()).unwrap();
            let y = linear_weightnorm_forward(&mut tape, xi, &vars[0]).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(&layer), run(&scaled));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_direction_row_is_an_error() {
        let layer = Layer {
            direction: Tensor::zeros(2, 3),
            gain: Tensor::filled(2, 1, 1.0),
            bias: Tensor::zeros(1, 2),
        };
        let mut tape = Tape::new();
        let vars = register_layers(&mut tape, std::slice::from_ref(&layer), false).unwrap();
        let x = tape.constant(Tensor::zeros(1, 3)).unwrap();
        assert!(linear_weightnorm_forward(&mut tape, x, &vars[0]).is_err());
        assert!(layer.weight().is_err());
    }

    #[test]
    fn zero_weights_give_the_final_bias() {
        let config = small_config();
        let mut params = init_params(&config, 3).unwrap();
        for l in params.fine.iter_mut() {
            l.gain = Tensor::zeros(l.gain.rows(), 1);
        }
        params.fine[N_LAYERS - 1].bias = Tensor::scalar(0.37);
        let dec = Decoders::new(&config, &params).unwrap();
        let mut out = vec![0.0; 3];
        let pts = [Point3::new(0.1, 0.2, 0.3), Point3::new(-0.5, 0.0, 0.9), Point3::ZERO];
        dec.fine_sdf(&[0.3; 5], &pts, &mut out).unwrap();
        assert!(out.iter().all(|&v| v == 0.37));

        // Coarse: only the final bias survives, here one unit sphere per slot.
        for l in params.coarse.iter_mut() {
            l.gain = Tensor::zeros(l.gain.rows(), 1);
        }
        params.coarse[N_LAYERS - 1].bias = Tensor::row([0.0, 0.0, 0.0, 0.0].repeat(3));
        let dec = Decoders::new(&config, &params).unwrap();
        let set = dec.primitive_set(&[0.9; 5]).unwrap();
        assert_eq!(set.len(), 3);
        for prim in set.iter() {
            assert_eq!(prim, &[0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn initial_primitives_sit_on_the_shell() {
        let config = NetConfig::desk();
        let params = init_params(&config, 11).unwrap();
        let dec = Decoders::new(&config, &params).unwrap();
        let set = dec.primitive_set(&vec![0.0; config.latent_dim]).unwrap();
        assert_eq!(set.len(), config.n_primitives);
        for prim in set.iter() {
            let c = Point3::new(prim[0], prim[1], prim[2]);
            assert!((c.norm() - INIT_SHELL_RADIUS).abs() < 1e-12);
            assert!((prim[3] - INIT_PRIMITIVE_SIZE.ln()).abs() < 1e-12);
        }
        assert_eq!(params, init_params(&config, 11).unwrap());
        assert_ne!(params.checksum(), init_params(&config, 12).unwrap().checksum());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let config = small_config();
        let params = init_params(&config, 4).unwrap();
        let dec = Decoders::new(&config, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts: Vec<Point3> = (0..6)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();

        let mut tape = Tape::new();
        let cl = register_layers(&mut tape, &params.coarse, false).unwrap();
        let fl = register_layers(&mut tape, &params.fine, false).unwrap();
        let zv = tape.constant(Tensor::row(z.clone())).unwrap();
        let attrs = decode_coarse(&mut tape, zv, &cl, &config).unwrap();
        let plain = dec.coarse_attributes(&z).unwrap();
        for (a, b) in tape.value(attrs).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        let zr = tape.constant(Tensor::from_fn(6, 5, |_, c| z[c])).unwrap();
        let pv = tape.constant(Tensor::from_fn(6, 3, |r, c| pts[r][c])).unwrap();
        let sdf = decode_fine(&mut tape, zr, pv, &fl, &config, None).unwrap();
        let mut out = vec![0.0; 6];
        dec.fine_sdf(&z, &pts, &mut out).unwrap();
        for (a, b) in tape.value(sdf).data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_reproducible_and_eval_is_deterministic() {
        let config = small_config();
        let params = init_params(&config, 4).unwrap();
        let run = |seed: Option<u64>| {
            let mut tape = Tape::new();
            let fl = register_layers(&mut tape, &params.fine, false).unwrap();
            let z = tape.constant(Tensor::filled(4, 5, 0.2)).unwrap();
            let p = tape.constant(Tensor::from_fn(4, 3, |r, c| (r + c) as f64 * 0.1)).unwrap();
            let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
            let drop = rng.as_mut().map(|r| r as &mut dyn RngCore);
            let out = decode_fine(&mut tape, z, p, &fl, &config, drop).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(9)), run(Some(9)));
        assert_ne!(run(Some(9)), run(None));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let config = small_config();
        let params = init_params(&config, 4).unwrap();
        let mut tape = Tape::new();
        let cl = register_layers(&mut tape, &params.coarse, false).unwrap();
        let z = tape.constant(Tensor::zeros(1, 4)).unwrap();
        assert!(matches!(decode_coarse(&mut tape, z, &cl, &config), Err(Error::DimensionMismatch(_))));
        let dec = Decoders::new(&config, &params).unwrap();
        assert!(dec.coarse_attributes(&[0.0; 3]).is_err());
    }

    #[test]
    fn from_tensors_round_trips() {
        let config = small_config();
        let params = init_params(&config, 8).unwrap();
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        assert_eq!(DecoderParams::from_tensors(&config, tensors.clone()).unwrap(), params);
        let other = NetConfig {
            hidden_dim: 8,
            ..config
        };
        assert!(DecoderParams::from_tensors(&other, tensors).is_err());
    }
}
