use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamMoments};
use super::{draw_minibatch, elbo_minibatch_loss, Dataset, ElboTerms, Hyperparams, LatentState, ShapeData};
use crate::error::{Error, Result};
use crate::nn::{init_params, DecoderParams, NetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub hp: Hyperparams,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            hp: Hyperparams::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            net: NetConfig::desk(),
            hp: Hyperparams::desk(),
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub coarse_loss: f64,
    pub fine_loss: f64,
    pub kl: f64,
    /// Decoder learning rate used during the epoch.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,coarse_loss,fine_loss,kl,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.coarse_loss, self.fine_loss, self.kl, self.lr)
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub shape_ids: Vec<String>,
    pub params: DecoderParams,
    pub param_moments: Vec<AdamMoments>,
    pub latents: Vec<LatentState>,
    /// Per shape: moments for `mu` then `log_sigma`.
    pub latent_moments: Vec<(AdamMoments, AdamMoments)>,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let params = init_params(&config.net, config.seed)?;
        let param_moments = params.tensors().iter().map(|t| AdamMoments::new(t.len())).collect();
        let l = config.net.latent_dim;
        let m = dataset.len();
        Ok(TrainState {
            shape_ids: dataset.ids(),
            params,
            param_moments,
            latents: vec![LatentState::new(l, config.hp.init_log_sigma); m],
            latent_moments: vec![(AdamMoments::new(l), AdamMoments::new(l)); m],
            epoch: 0,
            config,
        })
    }

    pub fn latent_for(&self, shape_id: &str) -> Option<&LatentState> {
        self.shape_ids
            .iter()
            .position(|s| s == shape_id)
            .map(|i| &self.latents[i])
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.ids() != self.shape_ids {
            return Err(Error::invalid("dataset shapes differ from the ones this run was started with"));
        }
        Ok(())
    }

    /// RNG for one epoch, independent of how earlier epochs were run.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// One pass over all shapes in shuffled minibatches.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochLog> {
        self.check_dataset(dataset)?;
        let hp = self.config.hp.clone();
        let net = self.config.net.clone();
        let factor = hp.lr_factor(self.epoch);
        let (lr_p, lr_z) = (hp.lr_params * factor, hp.lr_latent * factor);
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0; 3];
        for chunk in order.chunks(hp.batch_shapes) {
            let batch = draw_minibatch(dataset, chunk, &hp, net.latent_dim, &mut rng)?;
            let states: Vec<&LatentState> = chunk.iter().map(|&j| &self.latents[j]).collect();
            let (terms, grads) = elbo_minibatch_loss(
                &batch,
                &states,
                &self.params,
                &net,
                &hp,
                true,
                Some(&mut rng as &mut dyn RngCore),
            )
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {}: {msg}", self.epoch + 1)),
                other => other,
            })?;
            for ((t, g), m) in self
                .params
                .tensors_mut()
                .into_iter()
                .zip(&grads.params)
                .zip(&mut self.param_moments)
            {
                adam_step(t.data_mut(), g.data(), m, lr_p, &hp.adam);
            }
            for (k, &j) in chunk.iter().enumerate() {
                let (mm, ms) = &mut self.latent_moments[j];
                adam_step(&mut self.latents[j].mu, &grads.mu[k], mm, lr_z, &hp.adam);
                adam_step(&mut self.latents[j].log_sigma, &grads.log_sigma[k], ms, lr_z, &hp.adam);
            }
            let w = chunk.len() as f64;
            sums[0] += terms.coarse * w;
            sums[1] += terms.fine * w;
            sums[2] += terms.kl * w;
        }
        if !self.params.is_finite() {
            return Err(Error::Numerical(format!("decoder parameters diverged in epoch {}", self.epoch + 1)));
        }
        self.epoch += 1;
        let n = dataset.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            coarse_loss: sums[0] / n,
            fine_loss: sums[1] / n,
            kl: sums[2] / n,
            lr: lr_p,
        })
    }
}

/// Trains until `state.config.hp.epochs` epochs are complete. With `out`
/// set, writes `log.csv` (appending when resuming), periodic checkpoints
/// `checkpoint_{epoch}.dsdc` and a final `final.dsdc`. `on_epoch` sees each
/// epoch's log line.
pub fn train(
    dataset: &Dataset,
    mut state: TrainState,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    let mut log = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("log.csv");
        let fresh = state.epoch == 0 || !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(f, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        }
        log = Some((f, path));
    }
    while state.epoch < state.config.hp.epochs {
        let entry = state.run_epoch(dataset)?;
        on_epoch(&entry);
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", entry.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch % every == 0 {
                super::save_checkpoint(&state, &dir.join(format!("checkpoint_{:05}.dsdc", state.epoch)))?;
            }
        }
    }
    if let Some(dir) = out {
        super::save_checkpoint(&state, &dir.join("final.dsdc"))?;
    }
    Ok(state)
}

/// Fits a posterior for a new shape with the decoders frozen, starting from
/// `mu = 0`. Returns the posterior and the final loss terms.
pub fn encode_shape(
    shape: &ShapeData,
    params: &DecoderParams,
    config: &NetConfig,
    hp: &Hyperparams,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(LatentState, ElboTerms)> {
    if steps == 0 {
        return Err(Error::invalid("encoding needs at least one step"));
    }
    let dataset = Dataset {
        shapes: vec![shape.clone()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LatentState::new(config.latent_dim, hp.init_log_sigma);
    let (mut mm, mut ms) = (AdamMoments::new(config.latent_dim), AdamMoments::new(config.latent_dim));
    let mut last = None;
    for _ in 0..steps {
        let batch = draw_minibatch(&dataset, &[0], hp, config.latent_dim, &mut rng)?;
        let (terms, grads) = elbo_minibatch_loss(&batch, &[&state], params, config, hp, false, None)?;
        adam_step(&mut state.mu, &grads.mu[0], &mut mm, lr, &hp.adam);
        adam_step(&mut state.log_sigma, &grads.log_sigma[0], &mut ms, lr, &hp.adam);
        if !state.is_finite() {
            return Err(Error::Numerical("latent diverged while encoding".into()));
        }
        last = Some(terms);
    }
    Ok((state, last.expect("at least one step")))
}
