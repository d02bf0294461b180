//! Siamese training: the pair loss ‖g(T¹, θ¹) − g(T², θ²)‖², its gradient
//! through the table-interpolated descriptor and the regularized arctan2,
//! and the epoch/batch/schedule loop.

use rayon::prelude::*;

use crate::descriptor::{lookup, lookup_with_grad, DescriptorTable, DESCRIPTOR_DIM};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::net::{prediction_from_heads, arctan2_grad, OrientationNet};
use crate::tensor::{adam_step, AdamState, ParamSet, Tensor};
use crate::util::{derive_rng, derive_rng_indexed, pool, rad_to_deg, wrap_to_pi, Stream};

/// Two views of the same physical point: CNN input patches plus precomputed
/// descriptor tables. `gt_rotation` (radians) is the synthetic ground-truth
/// relative rotation — the value an ideal predictor would give for
/// f(p¹) − f(p²). It is used only for evaluation, never in the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub patch1: Tensor,
    pub patch2: Tensor,
    pub table1: DescriptorTable,
    pub table2: DescriptorTable,
    pub gt_rotation: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Halve the learning rate every this many epochs.
    pub halve_every: usize,
    pub seed: u64,
    /// ε of the regularized arctan2 gradient.
    pub atan2_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 10,
            lr: 1e-3,
            halve_every: 10,
            seed: 0,
            atan2_eps: crate::net::ATAN2_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Mean wrapped |(θ¹−θ²) − gt| over the held-out pairs, degrees.
    /// NaN when there is no held-out set.
    pub holdout_err_deg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub epochs: Vec<EpochRow>,
}

/// Squared Euclidean distance between the two oriented descriptors, with
/// dropout disabled (the deterministic value of the objective).
pub fn pair_loss(net: &OrientationNet, pair: &TrainingPair) -> Result<f64> {
    let theta1 = net.predict_orientation(&pair.patch1)?.theta;
    let theta2 = net.predict_orientation(&pair.patch2)?.theta;
    let g1 = lookup(&pair.table1, theta1);
    let g2 = lookup(&pair.table2, theta2);
    Ok(g1.distance_sq(&g2))
}

/// Loss and gradient of one pair in the net's current mode. In train mode
/// `dropout_rng` drives both branches (branch 1 first).
pub fn pair_gradient(
    net: &OrientationNet,
    pair: &TrainingPair,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    atan2_eps: f64,
) -> Result<(f64, ParamSet)> {
    let cache1 = net
        .forward(&pair.patch1, dropout_rng.as_deref_mut())
        .map_err(|e| tag_branch(e, "branch 1"))?;
    let cache2 = net
        .forward(&pair.patch2, dropout_rng)
        .map_err(|e| tag_branch(e, "branch 2"))?;
    let theta1 = prediction_from_heads(cache1.heads()).theta;
    let theta2 = prediction_from_heads(cache2.heads()).theta;

    let (g1, dg1) = lookup_with_grad(&pair.table1, theta1);
    let (g2, dg2) = lookup_with_grad(&pair.table2, theta2);

    let mut loss = 0.0;
    let mut d_theta1 = 0.0;
    let mut d_theta2 = 0.0;
    for i in 0..DESCRIPTOR_DIM {
        let diff = g1.as_slice()[i] - g2.as_slice()[i];
        loss += diff * diff;
        // dL/dg¹ = 2(g¹−g²), dL/dg² = −2(g¹−g²); contract with dg/dθ
        d_theta1 += 2.0 * diff * dg1[i];
        d_theta2 -= 2.0 * diff * dg2[i];
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite pair loss".into()));
    }

    let grads1 = backward_branch(net, &cache1, d_theta1, atan2_eps, "branch 1")?;
    let grads2 = backward_branch(net, &cache2, d_theta2, atan2_eps, "branch 2")?;
    let mut grads = grads1;
    grads.add_scaled(&grads2, 1.0);
    Ok((loss, grads))
}

fn tag_branch(e: Error, branch: &str) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("{msg} in {branch}")),
        other => other,
    }
}

fn backward_branch(
    net: &OrientationNet,
    cache: &crate::net::ForwardCache,
    d_theta: f64,
    eps: f64,
    branch: &str,
) -> Result<ParamSet> {
    let (v1, v2) = cache.heads();
    let g = arctan2_grad(v1, v2, eps);
    let (dv1, dv2) = (d_theta * g.wrt_y, d_theta * g.wrt_x);
    if !dv1.is_finite() || !dv2.is_finite() {
        return Err(Error::Training(format!(
            "non-finite head gradient in {branch}"
        )));
    }
    let grads = net.backward_heads(cache, dv1, dv2)?;
    for (name, t) in grads.iter() {
        if !t.all_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient for {name} in {branch}"
            )));
        }
    }
    Ok(grads)
}

/// Mean angular consistency error over pairs with ground truth, degrees.
pub fn holdout_error_deg(net: &OrientationNet, pairs: &[TrainingPair]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let Some(gt) = pair.gt_rotation else { continue };
        let t1 = net.predict_orientation(&pair.patch1)?.theta;
        let t2 = net.predict_orientation(&pair.patch2)?.theta;
        sum += rad_to_deg(wrap_to_pi(t1 - t2 - gt).abs());
        count += 1;
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok(sum / count as f64)
}

/// Per-pair absolute angular errors (degrees); callers take medians etc.
pub fn angular_errors_deg(net: &OrientationNet, pairs: &[TrainingPair]) -> Result<Vec<f64>> {
    let mut errs = Vec::new();
    for pair in pairs {
        let Some(gt) = pair.gt_rotation else { continue };
        let t1 = net.predict_orientation(&pair.patch1)?.theta;
        let t2 = net.predict_orientation(&pair.patch2)?.theta;
        errs.push(rad_to_deg(wrap_to_pi(t1 - t2 - gt).abs()));
    }
    Ok(errs)
}

/// Shuffled mini-batch ADAM with the halving schedule. Per-pair gradients of
/// a batch are computed in parallel and reduced in fixed index order, and
/// every dropout draw comes from an RNG derived from (seed, epoch, slot), so
/// results are bit-identical for any worker count. `on_epoch` fires after
/// each epoch (checkpointing hook); on divergence the error carries the last
/// completed epoch in the report.
pub fn train(
    net: &mut OrientationNet,
    pairs: &[TrainingPair],
    holdout: &[TrainingPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&OrientationNet, &EpochRow) -> Result<()>,
) -> Result<LossReport> {
    if config.epochs > 0 && pairs.is_empty() {
        return Err(Error::invalid("train", "no training pairs"));
    }
    if config.batch == 0 {
        return Err(Error::invalid("train", "batch size must be ≥ 1"));
    }
    let mut report = LossReport::default();
    let mut state = AdamState::new(net.params(), config.lr)?;
    let mut shuffle_rng = derive_rng(config.seed, Stream::Shuffle);
    net.set_mode(Mode::Train);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        let lr = config.lr * 0.5f64.powi(((epoch - 1) / config.halve_every.max(1)) as i32);
        state.lr = lr;

        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch).enumerate() {
            let net_ref: &OrientationNet = net;
            let results: Vec<Result<(f64, ParamSet)>> = pool().install(|| {
                chunk
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &pair_idx)| {
                        let global_slot = (batch_idx * config.batch + slot) as u64;
                        let mut rng = derive_rng_indexed(
                            config.seed,
                            Stream::Dropout,
                            epoch as u64,
                            global_slot,
                        );
                        pair_gradient(
                            net_ref,
                            &pairs[pair_idx],
                            Some(&mut rng),
                            config.atan2_eps,
                        )
                    })
                    .collect()
            });

            // fixed-order reduction keeps results independent of scheduling
            let mut batch_grads = net.params().zeros_like();
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                batch_grads.add_scaled(&grads, 1.0);
            }
            batch_grads.scale(1.0 / chunk.len() as f64);
            adam_step(net.params_mut(), &batch_grads, &mut state)?;
        }

        net.set_mode(Mode::Eval);
        let holdout_err = holdout_error_deg(net, holdout)?;
        net.set_mode(Mode::Train);

        let row = EpochRow {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            lr,
            holdout_err_deg: holdout_err,
        };
        if !row.mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged at epoch {epoch}"
            )));
        }
        report.epochs.push(row);
        on_epoch(net, &row)?;
    }
    net.set_mode(Mode::Eval);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GrayImage;
    use crate::descriptor::{build_table, PatchContext, DEFAULT_LAMBDA};
    use crate::net::{Activation, ArchitectureSpec};
    use std::sync::Arc;

    fn texture(seed: u64) -> Arc<GrayImage> {
        Arc::new(crate::data::synthetic_texture(128, 128, seed))
    }

    fn make_pair(seed: u64, identical: bool) -> TrainingPair {
        let img = texture(seed);
        let c1 = PatchContext::new(img.clone(), 64.0, 64.0, 2.0, DEFAULT_LAMBDA).unwrap();
        let c2 = if identical {
            c1.clone()
        } else {
            PatchContext::new(img, 60.0, 58.0, 2.2, DEFAULT_LAMBDA).unwrap()
        };
        let kp1 = crate::data::Keypoint {
            x: c1.x, y: c1.y, sigma: c1.sigma, response: 1.0, orientation: 0.0,
        };
        let kp2 = crate::data::Keypoint {
            x: c2.x, y: c2.y, sigma: c2.sigma, response: 1.0, orientation: 0.0,
        };
        TrainingPair {
            patch1: crate::data::extract_patch(&c1.image, &kp1, 0.0, DEFAULT_LAMBDA).unwrap(),
            patch2: crate::data::extract_patch(&c2.image, &kp2, 0.0, DEFAULT_LAMBDA).unwrap(),
            table1: build_table(&c1, 1).unwrap(),
            table2: build_table(&c2, 2).unwrap(),
            gt_rotation: Some(0.0),
        }
    }

    fn small_net(seed: u64) -> OrientationNet {
        let mut spec = ArchitectureSpec::standard(Activation::Ghh { s: 4, m: 4 });
        spec.fc1_units = 20;
        spec.dropout_rate = 0.0;
        OrientationNet::new(spec, seed).unwrap()
    }

    #[test]
    fn identical_pair_has_zero_loss_and_gradient() {
        let net = small_net(1);
        let pair = make_pair(2, true);
        assert_eq!(pair_loss(&net, &pair).unwrap(), 0.0);
        let (loss, grads) = pair_gradient(&net, &pair, None, 1e-8).unwrap();
        assert_eq!(loss, 0.0);
        for (_, t) in grads.iter() {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn loss_is_symmetric_under_pair_swap() {
        let net = small_net(3);
        let pair = make_pair(4, false);
        let swapped = TrainingPair {
            patch1: pair.patch2.clone(),
            patch2: pair.patch1.clone(),
            table1: pair.table2.clone(),
            table2: pair.table1.clone(),
            gt_rotation: pair.gt_rotation.map(|g| -g),
        };
        let a = pair_loss(&net, &pair).unwrap();
        let b = pair_loss(&net, &swapped).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);

        // gradients also agree: the two branch contributions are symmetric
        let (_, ga) = pair_gradient(&net, &pair, None, 1e-8).unwrap();
        let (_, gb) = pair_gradient(&net, &swapped, None, 1e-8).unwrap();
        for ((_, ta), (_, tb)) in ga.iter().zip(gb.iter()) {
            for (x, y) in ta.data().iter().zip(tb.data().iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_matches_raw_lookup_recomputation() {
        let net = small_net(5);
        let pair = make_pair(6, false);
        let loss = pair_loss(&net, &pair).unwrap();
        let t1 = net.predict_orientation(&pair.patch1).unwrap().theta;
        let t2 = net.predict_orientation(&pair.patch2).unwrap().theta;
        let g1 = lookup(&pair.table1, t1);
        let g2 = lookup(&pair.table2, t2);
        let expect: f64 = g1
            .as_slice()
            .iter()
            .zip(g2.as_slice().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_eq!(loss, expect);
    }

    #[test]
    fn gradient_matches_finite_differences_of_composite_loss() {
        use crate::tensor::finite_difference_check_coords;
        let mut net = small_net(7);
        net.set_mode(Mode::Eval);
        let pair = make_pair(8, false);
        let (_, analytic) = pair_gradient(&net, &pair, None, 1e-8).unwrap();

        let spec = net.spec().clone();
        let pair2 = pair.clone();
        let mut f = move |p: &ParamSet| {
            let probe = OrientationNet::from_params(spec.clone(), p.clone())?;
            pair_loss(&probe, &pair2)
        };
        // sample a few coordinates from every tensor
        let mut coords = Vec::new();
        for pi in 0..net.params().len() {
            let len = net.params().tensor(pi).len();
            for j in 0..4.min(len) {
                coords.push((pi, (j * 97) % len));
            }
        }
        let mut params = net.params().clone();
        let err =
            finite_difference_check_coords(&mut f, &mut params, &analytic, 1e-6, &coords)
                .unwrap();
        assert!(err < 1e-3, "composite rel err {err}");
    }

    #[test]
    fn table_scaling_is_neutralized_by_renormalizing_lookup() {
        // lookup renormalizes after interpolation, so uniform scaling of the
        // table entries must leave the loss and its gradient untouched.
        let net = small_net(9);
        let pair = make_pair(10, false);

        let scale_table = |t: &DescriptorTable, s: f64| {
            let entries = t
                .entries()
                .iter()
                .map(|d| {
                    let v: Vec<f64> = d.as_slice().iter().map(|x| s * x).collect();
                    crate::descriptor::Descriptor::from_slice(&v).unwrap()
                })
                .collect();
            DescriptorTable::from_entries(t.source, entries).unwrap()
        };
        let doubled = TrainingPair {
            patch1: pair.patch1.clone(),
            patch2: pair.patch2.clone(),
            table1: scale_table(&pair.table1, 2.0),
            table2: scale_table(&pair.table2, 2.0),
            gt_rotation: pair.gt_rotation,
        };
        let (l1, g1) = pair_gradient(&net, &pair, None, 1e-8).unwrap();
        let (l2, g2) = pair_gradient(&net, &doubled, None, 1e-8).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_adam_step_decreases_pair_loss_at_small_lr() {
        let mut net = small_net(11);
        net.set_mode(Mode::Eval);
        let pair = make_pair(12, false);
        let before = pair_loss(&net, &pair).unwrap();
        assert!(before > 0.0);
        let (_, grads) = pair_gradient(&net, &pair, None, 1e-8).unwrap();
        let mut state = AdamState::new(net.params(), 1e-5).unwrap();
        adam_step(net.params_mut(), &grads, &mut state).unwrap();
        let after = pair_loss(&net, &pair).unwrap();
        assert!(
            after <= before + 1e-12,
            "loss rose from {before} to {after} at lr 1e-5"
        );
    }

    #[test]
    fn zero_epochs_leave_net_unchanged() {
        let mut net = small_net(13);
        let before = net.params().clone();
        let pairs = vec![make_pair(14, false)];
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let report = train(&mut net, &pairs, &[], &cfg, |_, _| Ok(())).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn divergence_aborts_with_training_error() {
        // an absurd learning rate blows the weights up to non-finite values
        // within a couple of steps; the loop must abort with a training
        // error rather than emit NaN checkpoints
        let mut spec = ArchitectureSpec::standard(Activation::Ghh { s: 2, m: 2 });
        spec.fc1_units = 10;
        spec.dropout_rate = 0.0;
        let mut net = OrientationNet::new(spec, 3).unwrap();
        let pairs = vec![make_pair(50, false), make_pair(51, false)];
        let cfg = TrainConfig { epochs: 50, batch: 1, lr: 1e305, ..Default::default() };
        match train(&mut net, &pairs, &[], &cfg, |_, _| Ok(())) {
            Err(crate::Error::Training(_)) => {}
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_across_runs_and_thread_counts() {
        let pairs: Vec<TrainingPair> =
            (0..6).map(|i| make_pair(20 + i, false)).collect();
        let cfg = TrainConfig { epochs: 2, batch: 3, seed: 42, ..Default::default() };

        let run = || {
            let mut spec = ArchitectureSpec::standard(Activation::Ghh { s: 2, m: 2 });
            spec.fc1_units = 10;
            spec.dropout_rate = 0.3;
            let mut net = OrientationNet::new(spec, 42).unwrap();
            train(&mut net, &pairs, &[], &cfg, |_, _| Ok(())).unwrap();
            let mut bytes = Vec::new();
            net.write_to(&mut bytes).unwrap();
            bytes
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
