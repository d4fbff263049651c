//! Variational auto-decoder: per-shape Gaussian posteriors over latent
//! codes, trained jointly with both decoders on truncated SDF losses plus a
//! KL term.

mod adam;
mod checkpoint;
mod dataset;
mod train;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use dataset::{derive_seed, Dataset, Manifest, ManifestEntry, ShapeData, MANIFEST_FILE};
pub use train::{encode_shape, train, EpochLog, TrainConfig, TrainState};

use crate::error::{Error, Result};
use crate::geometry::{Point3, UnionMode};
use crate::nn::{decode_coarse, decode_fine, register_layers, DecoderParams, NetConfig, Tape, Tensor};
use crate::sampling::SdfSample;

/// Truncated loss for the neural SDF: exact inside the band `|s| <= delta`,
/// one-sided beyond it.
pub fn loss_sdf_fine(d: f64, s: f64, delta: f64) -> f64 {
    crate::nn::fine_loss_value(d, s, delta)
}

/// Loss for the primitive union: exact outside, one-sided inside.
pub fn loss_sdf_coarse(d: f64, s: f64) -> f64 {
    crate::nn::coarse_loss_value(d, s)
}

/// Diagonal Gaussian posterior over one shape's latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl LatentState {
    pub fn new(dim: usize, log_sigma: f64) -> Self {
        LatentState {
            mu: vec![0.0; dim],
            log_sigma: vec![log_sigma; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_sigma).all(|v| v.is_finite())
    }
}

/// Closed-form KL divergence from the posterior to `N(0, I)`.
pub fn kl_to_standard_normal(state: &LatentState) -> f64 {
    0.5 * state
        .mu
        .iter()
        .zip(&state.log_sigma)
        .map(|(&m, &ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        .sum::<f64>()
}

/// Reparameterised draw `mu + sigma * eps`.
pub fn sample_latent(state: &LatentState, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != state.dim() {
        return Err(Error::DimensionMismatch(format!(
            "noise of length {} for a {}-dimensional latent",
            eps.len(),
            state.dim()
        )));
    }
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("latent noise"));
    }
    Ok(state
        .mu
        .iter()
        .zip(&state.log_sigma)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Weight of the coarse (primitive) SDF loss.
    pub lambda_coarse: f64,
    /// Weight of the fine (neural) SDF loss.
    pub lambda_fine: f64,
    /// Weight of the KL term; 0 turns the model into a plain auto-decoder.
    pub kl_weight: f64,
    /// Truncation band of the fine loss.
    pub delta: f64,
    pub lr_params: f64,
    pub lr_latent: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub lr_halve_every: usize,
    pub batch_shapes: usize,
    pub fine_samples_per_shape: usize,
    pub coarse_samples_per_shape: usize,
    pub init_log_sigma: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda_coarse: 1e5,
            lambda_fine: 1e5,
            kl_weight: 1.0,
            delta: 0.1,
            lr_params: 5e-4,
            lr_latent: 1e-3,
            adam: AdamConfig::default(),
            epochs: 2800,
            lr_halve_every: 700,
            batch_shapes: 64,
            fine_samples_per_shape: 2048,
            coarse_samples_per_shape: 1024,
            init_log_sigma: 0.01f64.ln(),
        }
    }
}

impl Hyperparams {
    /// Settings for the procedural desk-scale dataset.
    pub fn desk() -> Self {
        Hyperparams {
            lambda_coarse: 1e3,
            lambda_fine: 1e3,
            lr_params: 1e-3,
            lr_latent: 3.5e-2,
            epochs: 300,
            lr_halve_every: 100,
            batch_shapes: 2,
            fine_samples_per_shape: 1024,
            coarse_samples_per_shape: 512,
            init_log_sigma: 0.1f64.ln(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_coarse", self.lambda_coarse),
            ("lambda_fine", self.lambda_fine),
            ("delta", self.delta),
            ("lr_params", self.lr_params),
            ("lr_latent", self.lr_latent),
            ("adam.eps", self.adam.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::invalid("kl_weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.epochs == 0
            || self.lr_halve_every == 0
            || self.batch_shapes == 0
            || self.fine_samples_per_shape == 0
            || self.coarse_samples_per_shape == 0
        {
            return Err(Error::invalid("epoch, batch and sample counts must be positive"));
        }
        if !self.init_log_sigma.is_finite() {
            return Err(Error::NonFinite("init_log_sigma"));
        }
        Ok(())
    }

    /// Learning-rate multiplier after `epoch` completed epochs.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        0.5f64.powi((epoch / self.lr_halve_every) as i32)
    }
}

/// One shape's share of a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBatch {
    pub shape: usize,
    pub fine: Vec<SdfSample>,
    pub coarse: Vec<SdfSample>,
    /// Standard normal noise for the reparameterised code.
    pub eps: Vec<f64>,
}

/// Draws sample subsets (without replacement) and latent noise for the
/// given shapes.
pub fn draw_minibatch(
    dataset: &Dataset,
    shapes: &[usize],
    hp: &Hyperparams,
    latent_dim: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ShapeBatch>> {
    shapes
        .iter()
        .map(|&j| {
            let data = dataset
                .shapes
                .get(j)
                .ok_or_else(|| Error::invalid(format!("shape index {j} out of range")))?;
            if data.fine.is_empty() || data.coarse.is_empty() {
                return Err(Error::invalid(format!("shape `{}` has no samples", data.id)));
            }
            let pick = |set: &[SdfSample], n: usize, rng: &mut dyn RngCore| -> Vec<SdfSample> {
                let n = n.min(set.len());
                sample_indices(rng, set.len(), n).into_iter().map(|i| set[i]).collect()
            };
            let fine = pick(&data.fine.samples, hp.fine_samples_per_shape, rng);
            let coarse = pick(&data.coarse.samples, hp.coarse_samples_per_shape, rng);
            let eps = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            Ok(ShapeBatch {
                shape: j,
                fine,
                coarse,
                eps,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// Mean coarse truncated loss per sample.
    pub coarse: f64,
    /// Mean fine truncated loss per sample.
    pub fine: f64,
    /// Mean KL per shape.
    pub kl: f64,
    /// `lambda_coarse * coarse + lambda_fine * fine + kl_weight * kl`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGrads {
    /// Decoder gradients in `DecoderParams::tensors` order; empty when the
    /// decoders were frozen.
    pub params: Vec<Tensor>,
    /// Per batch entry, gradients for `mu` and `log_sigma`.
    pub mu: Vec<Vec<f64>>,
    pub log_sigma: Vec<Vec<f64>>,
}

/// Negative evidence lower bound of a minibatch and its gradients.
///
/// `states[b]` is the posterior of `batch[b].shape`. One code per shape is
/// drawn and shared by both decoders. With `dropout` set the fine decoder
/// runs in training mode.
pub fn elbo_minibatch_loss(
    batch: &[ShapeBatch],
    states: &[&LatentState],
    params: &DecoderParams,
    config: &NetConfig,
    hp: &Hyperparams,
    train_params: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(ElboTerms, ElboGrads)> {
    if batch.is_empty() || batch.len() != states.len() {
        return Err(Error::invalid("minibatch and posterior counts differ or are empty"));
    }
    let l = config.latent_dim;
    let b = batch.len();
    for (entry, st) in batch.iter().zip(states) {
        if st.dim() != l || entry.eps.len() != l {
            return Err(Error::DimensionMismatch("latent width does not match the network".into()));
        }
        if entry.fine.is_empty() || entry.coarse.is_empty() {
            return Err(Error::invalid(format!("shape {} has no samples in the batch", entry.shape)));
        }
    }

    let mut tape = Tape::new();
    let coarse_layers = register_layers(&mut tape, &params.coarse, train_params)?;
    let fine_layers = register_layers(&mut tape, &params.fine, train_params)?;
    let mu = tape.leaf(Tensor::from_fn(b, l, |r, c| states[r].mu[c]))?;
    let log_sigma = tape.leaf(Tensor::from_fn(b, l, |r, c| states[r].log_sigma[c]))?;
    let eps = tape.constant(Tensor::from_fn(b, l, |r, c| batch[r].eps[c]))?;
    let sigma = tape.exp(log_sigma)?;
    let noise = tape.mul(sigma, eps)?;
    let z = tape.add(mu, noise)?;

    // Coarse branch: primitive union at uniformly drawn points.
    let attrs = decode_coarse(&mut tape, z, &coarse_layers, config)?;
    let (mut cpts, mut cown, mut ctgt) = (Vec::new(), Vec::new(), Vec::new());
    for (r, entry) in batch.iter().enumerate() {
        for s in &entry.coarse {
            cpts.push(s.point);
            cown.push(r);
            ctgt.push(s.sdf);
        }
    }
    let dists = tape.primitive_distances(attrs, config.primitive_kind, cpts, cown)?;
    let union = match config.union_mode {
        UnionMode::Hard => tape.min_cols(dists)?,
        UnionMode::LogSumExp { t } => tape.soft_min_cols(dists, t)?,
    };
    let coarse_per_sample = tape.coarse_loss(union, ctgt)?;
    let coarse_mean = tape.mean(coarse_per_sample)?;

    // Fine branch: neural SDF at surface-biased points.
    let (mut fpts, mut fown, mut ftgt) = (Vec::<Point3>::new(), Vec::new(), Vec::new());
    for (r, entry) in batch.iter().enumerate() {
        for s in &entry.fine {
            fpts.push(s.point);
            fown.push(r);
            ftgt.push(s.sdf);
        }
    }
    let zrows = tape.gather_rows(z, fown)?;
    let pts = tape.constant(Tensor::from_fn(fpts.len(), 3, |r, c| fpts[r][c]))?;
    let pred = decode_fine(&mut tape, zrows, pts, &fine_layers, config, dropout)?;
    let fine_per_sample = tape.fine_loss(pred, ftgt, hp.delta)?;
    let fine_mean = tape.mean(fine_per_sample)?;

    // KL per shape, averaged over the batch.
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let kl = tape.add(mu2, s2)?;
    let kl = tape.sub(kl, two_ls)?;
    let kl = tape.add_scalar(kl, -1.0)?;
    let kl = tape.sum(kl)?;
    let kl_mean = tape.scale(kl, 0.5 / b as f64)?;

    let wc = tape.scale(coarse_mean, hp.lambda_coarse)?;
    let wf = tape.scale(fine_mean, hp.lambda_fine)?;
    let wk = tape.scale(kl_mean, hp.kl_weight)?;
    let total = tape.add(wc, wf)?;
    let total = tape.add(total, wk)?;

    let terms = ElboTerms {
        coarse: tape.value(coarse_mean).item(),
        fine: tape.value(fine_mean).item(),
        kl: tape.value(kl_mean).item(),
        total: tape.value(total).item(),
    };
    check_terms(&terms)?;
    tape.backward(total)?;

    let grad_or_zero = |tape: &Tape, v, (r, c): (usize, usize)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(r, c));
    let params_grads = if train_params {
        coarse_layers
            .iter()
            .chain(&fine_layers)
            .flat_map(|lv| [lv.direction, lv.gain, lv.bias])
            .zip(params.tensors())
            .map(|(v, t)| grad_or_zero(&tape, v, t.shape()))
            .collect()
    } else {
        Vec::new()
    };
    let gmu = grad_or_zero(&tape, mu, (b, l));
    let gls = grad_or_zero(&tape, log_sigma, (b, l));
    let grads = ElboGrads {
        params: params_grads,
        mu: (0..b).map(|r| gmu.row_slice(r).to_vec()).collect(),
        log_sigma: (0..b).map(|r| gls.row_slice(r).to_vec()).collect(),
    };
    Ok((terms, grads))
}

/// Names the first non-finite loss component.
pub(crate) fn check_terms(t: &ElboTerms) -> Result<()> {
    for (name, v) in [("coarse loss", t.coarse), ("fine loss", t.fine), ("KL term", t.kl), ("total loss", t.total)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} became {v}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_to_standard_normal(&LatentState::new(4, 0.0)), 0.0);
        let one = LatentState {
            mu: vec![1.0],
            log_sigma: vec![0.0],
        };
        assert_abs_diff_eq!(kl_to_standard_normal(&one), 0.5, epsilon = 1e-15);
        let half = LatentState {
            mu: vec![0.0],
            log_sigma: vec![0.5f64.ln()],
        };
        assert_abs_diff_eq!(kl_to_standard_normal(&half), 0.318_147_180_559_945_3, epsilon = 1e-12);
    }

    #[test]
    fn reparameterisation_examples() {
        let st = LatentState {
            mu: vec![0.3, -1.0],
            log_sigma: vec![0.1f64.ln(); 2],
        };
        assert_eq!(sample_latent(&st, &[0.0, 0.0]).unwrap(), st.mu);
        let z = sample_latent(&st, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], -0.9, epsilon = 1e-12);
        assert!(sample_latent(&st, &[1.0]).is_err());
    }

    #[test]
    fn lr_halves_on_schedule() {
        let hp = Hyperparams {
            lr_halve_every: 700,
            ..Hyperparams::default()
        };
        assert_eq!(hp.lr_factor(0), 1.0);
        assert_eq!(hp.lr_factor(699), 1.0);
        assert_eq!(hp.lr_factor(700), 0.5);
        assert_eq!(hp.lr_factor(2100), 0.125);
    }

    #[test]
    fn hyperparams_reject_bad_values() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            delta: 0.0,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"lambda_coarse": 10.0, "epochs": 5}"#;
        let hp: Hyperparams = serde_json::from_str(json).unwrap();
        assert_eq!(hp.epochs, 5);
        assert_eq!(hp.delta, 0.1);
        assert!(serde_json::from_str::<Hyperparams>(r#"{"lamda": 1}"#).is_err());
    }
}
