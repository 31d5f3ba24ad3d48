//! Mini-batch training loop with per-epoch geometry and gradient telemetry.
//!
//! Fully deterministic per (setup, rng seed): shuffling and mixing draw
//! from the caller's generator in a fixed order, batches reduce
//! sequentially, and no parallelism is used.

use crate::analysis::{epoch_gradient_norms, EpochLog};
use crate::collapse::balance_metrics;
use crate::data::{iterate_batches, mixup, Dataset};
use crate::error::{Error, Result};
use crate::loss::{classifier_gradient, ClassCounts, CountsMode, LossKind};
use crate::model::{Mlp, Schedule, SgdState};
use crate::numkit::matrix::Matrix;
use crate::numkit::rng::Rng;

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub loss_kind: LossKind,
    pub counts_mode: CountsMode,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `Some(alpha)` turns on input mixing with `Beta(alpha, alpha)`.
    pub mixup_alpha: Option<f64>,
    /// Class whose gradient components are tracked per epoch.
    pub tracked_class: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub mlp: Mlp,
    pub logs: Vec<EpochLog>,
}

/// Argmax-rule accuracy: overall and per class. Classes absent from the
/// evaluation set get NaN and are excluded from the balanced mean.
pub fn evaluate(mlp: &Mlp, ds: &Dataset) -> Result<(f64, Vec<f64>)> {
    let (_, z) = mlp.forward(&ds.features)?;
    let mut correct = vec![0usize; ds.num_classes];
    let mut total_correct = 0usize;
    for (j, &y) in ds.labels.iter().enumerate() {
        let row = z.row(j);
        let pred = argmax(row);
        if pred == y {
            correct[y] += 1;
            total_correct += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&ds.class_counts)
        .map(|(&cor, &cnt)| {
            if cnt > 0 {
                cor as f64 / cnt as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok((total_correct as f64 / ds.len() as f64, per_class))
}

/// Nearest-class-mean accuracy: class means of penultimate features are
/// estimated on `means_from` and applied to `eval` by Euclidean distance.
pub fn evaluate_ncm(mlp: &Mlp, means_from: &Dataset, eval: &Dataset) -> Result<(f64, Vec<f64>)> {
    let (h_train, _) = mlp.forward(&means_from.features)?;
    let c = means_from.num_classes;
    let d = h_train.cols();
    let mut means = Matrix::zeros(c, d);
    for (j, &y) in means_from.labels.iter().enumerate() {
        for (l, &v) in h_train.row(j).iter().enumerate() {
            means[(y, l)] += v;
        }
    }
    for i in 0..c {
        let cnt = means_from.class_counts[i];
        if cnt == 0 {
            return Err(Error::DegenerateWeights(format!(
                "class {i} empty in the mean-source set"
            )));
        }
        for v in means.row_mut(i) {
            *v /= cnt as f64;
        }
    }

    let (h_eval, _) = mlp.forward(&eval.features)?;
    let mut correct = vec![0usize; eval.num_classes];
    let mut total_correct = 0usize;
    for (j, &y) in eval.labels.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..c {
            let d2: f64 = h_eval
                .row(j)
                .iter()
                .zip(means.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        if best.1 == y {
            correct[y] += 1;
            total_correct += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&eval.class_counts)
        .map(|(&cor, &cnt)| {
            if cnt > 0 {
                cor as f64 / cnt as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok((total_correct as f64 / eval.len() as f64, per_class))
}

pub fn balanced_accuracy(per_class: &[f64]) -> f64 {
    let present: Vec<f64> = per_class.iter().copied().filter(|v| v.is_finite()).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Runs the full schedule, evaluating on `test` (or on the training set
/// when no test set is given) after every epoch.
pub fn train(
    mut mlp: Mlp,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    setup: &TrainSetup,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let c = mlp.num_classes();
    if train_ds.num_classes != c {
        return Err(Error::InvalidSpec(format!(
            "dataset has {} classes, model has {c}",
            train_ds.num_classes
        )));
    }
    if setup.tracked_class >= c {
        return Err(Error::InvalidSpec(format!(
            "tracked class {} out of range (c={c})",
            setup.tracked_class
        )));
    }
    let global_counts = ClassCounts::global(&train_ds.class_counts)?;
    let mut sgd = SgdState::new(&mlp, setup.momentum, setup.weight_decay);
    let mut logs = Vec::with_capacity(setup.schedule.total_epochs);

    for epoch in 0..setup.schedule.total_epochs {
        let lr = setup.schedule.lr_at(epoch)?;
        let mut loss_sum = 0.0;
        let mut reports = Vec::new();

        for batch in iterate_batches(train_ds, setup.batch_size, true, rng) {
            let counts = match setup.counts_mode {
                CountsMode::BatchLocal => ClassCounts::from_labels(&batch.labels, c),
                CountsMode::Global => global_counts.clone(),
            };
            let b = batch.labels.len() as f64;

            let out = match setup.mixup_alpha {
                Some(alpha) => {
                    let mixed = mixup(&batch, alpha, rng);
                    let out = mlp.backward_mixed(
                        &mixed.features,
                        &mixed.labels_a,
                        &mixed.labels_b,
                        mixed.lambda,
                        setup.loss_kind,
                        &counts,
                    )?;
                    // The attraction/repulsion decomposition needs one-hot
                    // class membership, so telemetry uses the unmixed batch
                    // at the current weights.
                    let (h_clean, _) = mlp.forward(&batch.features)?;
                    let report = classifier_gradient(
                        setup.loss_kind,
                        &h_clean,
                        &batch.labels,
                        mlp.classifier(),
                        &counts,
                    )?;
                    let mut out = out;
                    out.report = report;
                    out
                }
                None => mlp.backward(&batch.features, &batch.labels, setup.loss_kind, &counts)?,
            };

            if !out.mean_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("batch loss = {}", out.mean_loss),
                });
            }
            loss_sum += out.mean_loss * b;
            sgd.step(&mut mlp, &out, lr);
            reports.push(out.report);
        }

        if mlp.weights.iter().any(|w| !w.all_finite())
            || mlp.biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                epoch,
                msg: "non-finite parameter".into(),
            });
        }

        let eval_ds = test_ds.unwrap_or(train_ds);
        let (overall_acc, per_class_acc) = evaluate(&mlp, eval_ds)?;
        let metrics = balance_metrics(mlp.classifier())?;
        let g = epoch_gradient_norms(&reports, setup.tracked_class);

        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            overall_acc,
            balanced_acc: balanced_accuracy(&per_class_acc),
            per_class_acc,
            metrics,
            g,
        });
    }

    Ok(TrainOutcome { mlp, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_mixture;
    use crate::model::{Activation, ClassifierInit, ScheduleKind};

    fn blob_setup(epochs: usize) -> TrainSetup {
        TrainSetup {
            loss_kind: LossKind::Ce,
            counts_mode: CountsMode::BatchLocal,
            schedule: Schedule::constant(0.1, epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            mixup_alpha: None,
            tracked_class: 1,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = synth_gaussian_mixture(&mut Rng::new(1), 2, 4, &[10, 10], 2.0).unwrap();
        let mlp = Mlp::init(&[4, 2], Activation::Relu, ClassifierInit::Gaussian, &mut Rng::new(2))
            .unwrap();
        let w0 = mlp.weights[0].clone();
        let out = train(mlp, &ds, None, &blob_setup(0), &mut Rng::new(3)).unwrap();
        assert!(out.logs.is_empty());
        assert_eq!(out.mlp.weights[0].data(), w0.data());
    }

    #[test]
    fn separable_blobs_reach_high_train_accuracy() {
        let ds = synth_gaussian_mixture(&mut Rng::new(4), 2, 4, &[60, 60], 4.0).unwrap();
        let mlp = Mlp::init(
            &[4, 8, 2],
            Activation::Relu,
            ClassifierInit::Gaussian,
            &mut Rng::new(5),
        )
        .unwrap();
        let out = train(mlp, &ds, None, &blob_setup(30), &mut Rng::new(6)).unwrap();
        let last = out.logs.last().unwrap();
        assert!(last.overall_acc >= 0.99, "acc {}", last.overall_acc);
        // Per-epoch invariant: balanced accuracy is the per-class mean.
        for log in &out.logs {
            let mean = log.per_class_acc.iter().sum::<f64>() / log.per_class_acc.len() as f64;
            assert!((log.balanced_acc - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let run = || {
            let ds = synth_gaussian_mixture(&mut Rng::new(7), 3, 5, &[20, 12, 6], 2.0).unwrap();
            let mlp = Mlp::init(
                &[5, 6, 3],
                Activation::Relu,
                ClassifierInit::Gaussian,
                &mut Rng::new(8),
            )
            .unwrap();
            let mut setup = blob_setup(8);
            setup.loss_kind = LossKind::Arb;
            setup.tracked_class = 2;
            train(mlp, &ds, None, &setup, &mut Rng::new(9)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.logs.len(), b.logs.len());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.overall_acc, lb.overall_acc);
            assert_eq!(la.g, lb.g);
            assert_eq!(la.metrics.b_a2, lb.metrics.b_a2);
        }
        for (wa, wb) in a.mlp.weights.iter().zip(&b.mlp.weights) {
            assert_eq!(wa.data(), wb.data());
        }
    }

    #[test]
    fn mixup_training_runs_and_is_deterministic() {
        let run = || {
            let ds = synth_gaussian_mixture(&mut Rng::new(10), 2, 4, &[20, 20], 2.0).unwrap();
            let mlp = Mlp::init(
                &[4, 6, 2],
                Activation::Relu,
                ClassifierInit::Gaussian,
                &mut Rng::new(11),
            )
            .unwrap();
            let mut setup = blob_setup(5);
            setup.mixup_alpha = Some(1.0);
            train(mlp, &ds, None, &setup, &mut Rng::new(12)).unwrap()
        };
        let a = run();
        let b = run();
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.train_loss, lb.train_loss);
        }
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let ds = synth_gaussian_mixture(&mut Rng::new(13), 2, 4, &[20, 20], 2.0).unwrap();
        let mlp = Mlp::init(
            &[4, 8, 2],
            Activation::Relu,
            ClassifierInit::Gaussian,
            &mut Rng::new(14),
        )
        .unwrap();
        let mut setup = blob_setup(20);
        setup.schedule = Schedule::constant(1e160, 20);
        match train(mlp, &ds, None, &setup, &mut Rng::new(15)) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ncm_and_argmax_rules_both_work_on_separable_data() {
        let train_ds = synth_gaussian_mixture(&mut Rng::new(16), 3, 6, &[40, 40, 40], 5.0).unwrap();
        let test_ds = synth_gaussian_mixture(&mut Rng::new(16), 3, 6, &[15, 15, 15], 5.0).unwrap();
        let mlp = Mlp::init(
            &[6, 8, 3],
            Activation::Relu,
            ClassifierInit::Gaussian,
            &mut Rng::new(17),
        )
        .unwrap();
        let mut setup = blob_setup(25);
        setup.tracked_class = 2;
        let out = train(mlp, &train_ds, Some(&test_ds), &setup, &mut Rng::new(18)).unwrap();
        let (acc, _) = evaluate(&out.mlp, &test_ds).unwrap();
        let (ncm_acc, _) = evaluate_ncm(&out.mlp, &train_ds, &test_ds).unwrap();
        assert!(acc >= 0.95, "argmax {acc}");
        assert!(ncm_acc >= 0.95, "ncm {ncm_acc}");
    }

    #[test]
    fn step_schedule_is_reflected_in_logs() {
        let ds = synth_gaussian_mixture(&mut Rng::new(19), 2, 3, &[10, 10], 2.0).unwrap();
        let mlp = Mlp::init(&[3, 2], Activation::Relu, ClassifierInit::Gaussian, &mut Rng::new(20))
            .unwrap();
        let mut setup = blob_setup(10);
        setup.schedule = Schedule {
            base_lr: 0.1,
            kind: ScheduleKind::Step {
                milestones: vec![5],
                factor: 0.1,
            },
            total_epochs: 10,
        };
        let out = train(mlp, &ds, None, &setup, &mut Rng::new(21)).unwrap();
        assert!((out.logs[4].lr - 0.1).abs() < 1e-15);
        assert!((out.logs[5].lr - 0.01).abs() < 1e-15);
    }
}
