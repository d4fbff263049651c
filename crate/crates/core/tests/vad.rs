use dualsdf_core::geometry::{procedural_dataset, Point3, PrimitiveKind, UnionMode};
use dualsdf_core::nn::{init_params, Decoders, NetConfig};
use dualsdf_core::vad::{
    decode_checkpoint, draw_minibatch, elbo_minibatch_loss, encode_checkpoint, kl_to_standard_normal,
    loss_sdf_coarse, loss_sdf_fine, sample_latent, train, Dataset, Hyperparams, LatentState, ShapeBatch,
    TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> NetConfig {
    NetConfig {
        latent_dim: 4,
        hidden_dim: 16,
        n_primitives: 4,
        primitive_kind: PrimitiveKind::Sphere,
        dropout_p: 0.2,
        union_mode: UnionMode::Hard,
    }
}

fn tiny_hp() -> Hyperparams {
    Hyperparams {
        lambda_coarse: 10.0,
        lambda_fine: 10.0,
        epochs: 4,
        lr_halve_every: 2,
        batch_shapes: 2,
        fine_samples_per_shape: 32,
        coarse_samples_per_shape: 16,
        ..Hyperparams::default()
    }
}

fn tiny_data(m: usize) -> Dataset {
    Dataset::from_oracles(&procedural_dataset(m, 3), 64, 32, 9).unwrap()
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<LatentState> {
    (0..n)
        .map(|_| LatentState {
            mu: (0..l).map(|_| rng.random_range(-0.5..0.5)).collect(),
            log_sigma: (0..l).map(|_| rng.random_range(-3.0..-1.0)).collect(),
        })
        .collect()
}

/// Same quantity computed point by point with the inference decoders.
fn reference_elbo(batch: &[ShapeBatch], states: &[LatentState], dec: &Decoders, hp: &Hyperparams) -> [f64; 4] {
    let (mut c, mut nc, mut f, mut nf, mut kl) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for (entry, st) in batch.iter().zip(states) {
        let z = sample_latent(st, &entry.eps).unwrap();
        let set = dec.primitive_set(&z).unwrap();
        for s in &entry.coarse {
            c += loss_sdf_coarse(set.sdf(s.point, UnionMode::Hard), s.sdf);
            nc += 1;
        }
        let pts: Vec<Point3> = entry.fine.iter().map(|s| s.point).collect();
        let mut out = vec![0.0; pts.len()];
        dec.fine_sdf(&z, &pts, &mut out).unwrap();
        for (s, d) in entry.fine.iter().zip(out) {
            f += loss_sdf_fine(d, s.sdf, hp.delta);
            nf += 1;
        }
        kl += kl_to_standard_normal(st);
    }
    let (c, f, kl) = (c / nc as f64, f / nf as f64, kl / batch.len() as f64);
    [c, f, kl, hp.lambda_coarse * c + hp.lambda_fine * f + hp.kl_weight * kl]
}

#[test]
fn minibatch_loss_matches_pointwise_reference() {
    let net = tiny_net();
    let hp = tiny_hp();
    let data = tiny_data(3);
    let params = init_params(&net, 1).unwrap();
    let dec = Decoders::new(&net, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let states = random_states(&mut rng, 3, net.latent_dim);
    let batch = draw_minibatch(&data, &[0, 1, 2], &hp, net.latent_dim, &mut rng).unwrap();
    let refs: Vec<&LatentState> = states.iter().collect();
    let (terms, _) = elbo_minibatch_loss(&batch, &refs, &params, &net, &hp, true, None).unwrap();
    let want = reference_elbo(&batch, &states, &dec, &hp);
    for (got, want) in [terms.coarse, terms.fine, terms.kl, terms.total].into_iter().zip(want) {
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn perfect_predictions_give_zero_reconstruction_loss() {
    let net = tiny_net();
    let hp = tiny_hp();
    let data = tiny_data(1);
    let params = init_params(&net, 2).unwrap();
    let dec = Decoders::new(&net, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut batch = draw_minibatch(&data, &[0], &hp, net.latent_dim, &mut rng).unwrap();
    let st = LatentState::new(net.latent_dim, 0.0);
    let z = sample_latent(&st, &batch[0].eps).unwrap();
    let set = dec.primitive_set(&z).unwrap();
    for s in &mut batch[0].coarse {
        s.sdf = set.sdf(s.point, UnionMode::Hard);
    }
    let pts: Vec<Point3> = batch[0].fine.iter().map(|s| s.point).collect();
    let mut out = vec![0.0; pts.len()];
    dec.fine_sdf(&z, &pts, &mut out).unwrap();
    for (s, d) in batch[0].fine.iter_mut().zip(out) {
        s.sdf = d;
    }
    let (terms, _) = elbo_minibatch_loss(&batch, &[&st], &params, &net, &hp, true, None).unwrap();
    assert!(terms.coarse.abs() < 1e-12 && terms.fine.abs() < 1e-12, "{terms:?}");
}

#[test]
fn loss_weights_scale_linearly_and_order_does_not_matter() {
    let net = tiny_net();
    let hp = tiny_hp();
    let data = tiny_data(3);
    let params = init_params(&net, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let states = random_states(&mut rng, 3, net.latent_dim);
    let batch = draw_minibatch(&data, &[0, 1, 2], &hp, net.latent_dim, &mut rng).unwrap();
    let refs: Vec<&LatentState> = states.iter().collect();
    let (base, _) = elbo_minibatch_loss(&batch, &refs, &params, &net, &hp, false, None).unwrap();

    let doubled = Hyperparams {
        lambda_coarse: 2.0 * hp.lambda_coarse,
        ..hp.clone()
    };
    let (t2, _) = elbo_minibatch_loss(&batch, &refs, &params, &net, &doubled, false, None).unwrap();
    let diff = t2.total - base.total;
    assert!((diff - hp.lambda_coarse * base.coarse).abs() < 1e-9 * base.total.abs().max(1.0));

    let rev_batch: Vec<ShapeBatch> = batch.iter().rev().cloned().collect();
    let rev_refs: Vec<&LatentState> = refs.iter().rev().copied().collect();
    let (tr, _) = elbo_minibatch_loss(&rev_batch, &rev_refs, &params, &net, &hp, false, None).unwrap();
    assert!((tr.total - base.total).abs() < 1e-10 * base.total.abs().max(1.0));
}

#[test]
fn latent_gradients_match_finite_differences() {
    let net = tiny_net();
    let hp = tiny_hp();
    let data = tiny_data(2);
    let params = init_params(&net, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states = random_states(&mut rng, 2, net.latent_dim);
    let batch = draw_minibatch(&data, &[0, 1], &hp, net.latent_dim, &mut rng).unwrap();
    let eval = |st: &[LatentState]| {
        let refs: Vec<&LatentState> = st.iter().collect();
        elbo_minibatch_loss(&batch, &refs, &params, &net, &hp, false, None).unwrap()
    };
    let (_, grads) = eval(&states);
    let h = 1e-6;
    for b in 0..2 {
        for k in 0..net.latent_dim {
            for which in 0..2 {
                let mut plus = states.clone();
                let mut minus = states.clone();
                let (p, m) = if which == 0 {
                    (&mut plus[b].mu[k], &mut minus[b].mu[k])
                } else {
                    (&mut plus[b].log_sigma[k], &mut minus[b].log_sigma[k])
                };
                *p += h;
                *m -= h;
                let fd = (eval(&plus).0.total - eval(&minus).0.total) / (2.0 * h);
                let an = if which == 0 { grads.mu[b][k] } else { grads.log_sigma[b][k] };
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "b{b} k{k} {which}: {fd} vs {an}");
            }
        }
    }
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let st = LatentState {
        mu: vec![0.4, -0.2, 1.0],
        log_sigma: vec![-0.5, 0.3, -1.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let eps: Vec<f64> = (0..3).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let z = sample_latent(&st, &eps).unwrap();
        // log q(z) - log p(z)
        let mut lr = 0.0;
        for k in 0..3 {
            lr += -st.log_sigma[k] - 0.5 * eps[k] * eps[k] + 0.5 * z[k] * z[k];
        }
        acc += lr;
    }
    let mc = acc / n as f64;
    assert!((mc - kl_to_standard_normal(&st)).abs() < 0.02, "{mc}");
}

#[test]
fn reparameterised_samples_have_the_posterior_moments() {
    let st = LatentState {
        mu: vec![0.7],
        log_sigma: vec![0.2f64.ln()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let zs: Vec<f64> = (0..n)
        .map(|_| sample_latent(&st, &[rng.sample(rand_distr::StandardNormal)]).unwrap()[0])
        .collect();
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((mean - 0.7).abs() < 0.005);
    assert!((var.sqrt() - 0.2).abs() < 0.005);
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        net: tiny_net(),
        hp: tiny_hp(),
        seed: 11,
        checkpoint_every: 2,
    }
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let data = tiny_data(4);
    let cfg = tiny_config();
    let full = train(&data, TrainState::new(cfg.clone(), &data).unwrap(), None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut half_cfg = cfg.clone();
    half_cfg.hp.epochs = 2;
    let half = train(&data, TrainState::new(half_cfg, &data).unwrap(), Some(dir.path()), |_| {}).unwrap();
    let bytes = std::fs::read(dir.path().join("checkpoint_00002.dsdc")).unwrap();
    let mut resumed = decode_checkpoint(&bytes).unwrap();
    assert_eq!(resumed, half);
    resumed.config.hp.epochs = cfg.hp.epochs;
    let resumed = train(&data, resumed, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.latents, full.latents);

    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,coarse_loss,fine_loss,kl,lr");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,"));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let data = tiny_data(2);
    let mut cfg = tiny_config();
    cfg.hp.epochs = 1;
    let st = train(&data, TrainState::new(cfg, &data).unwrap(), None, |_| {}).unwrap();
    let bytes = encode_checkpoint(&st).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap(), st);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn training_reduces_the_loss() {
    let data = tiny_data(4);
    let mut cfg = tiny_config();
    cfg.hp.epochs = 40;
    cfg.hp.lr_halve_every = 1000;
    cfg.hp.lr_params = 3e-3;
    cfg.hp.lr_latent = 3e-3;
    let mut logs = Vec::new();
    train(&data, TrainState::new(cfg, &data).unwrap(), None, |l| logs.push(*l)).unwrap();
    let first = logs[0].coarse_loss + logs[0].fine_loss;
    let last = logs.last().map(|l| l.coarse_loss + l.fine_loss).unwrap();
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(3);
    let cfg = tiny_config();
    let a = train(&data, TrainState::new(cfg.clone(), &data).unwrap(), None, |_| {}).unwrap();
    let b = train(&data, TrainState::new(cfg, &data).unwrap(), None, |_| {}).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a.latents, b.latents);
}
