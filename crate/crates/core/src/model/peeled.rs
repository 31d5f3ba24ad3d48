//! Unconstrained-features training: the last-layer feature matrix is a
//! free parameter optimized jointly with the classifier, isolating the
//! classifier-geometry dynamics from representation learning.
//!
//! Each full-batch step runs the same momentum SGD as standard training on
//!
//! ```text
//! F = (1/n) sum_j L_j + (wd/2) (||W||_F^2 + ||H||_F^2)
//! ```
//!
//! with `H` treated as an ordinary parameter tensor.

use crate::analysis::epoch_gradient_norms;
use crate::collapse::{balance_metrics, minority_collapse_score, CollapseMetrics};
use crate::error::{Error, Result};
use crate::loss::{
    batch_logit_gradients, classifier_gradient, mean_loss, ClassCounts, LossKind,
};
use crate::model::{sgd_update, Schedule};
use crate::numkit::matrix::{norm2, Matrix};
use crate::numkit::rng::Rng;

#[derive(Debug, Clone)]
pub struct PeeledSetup {
    pub num_classes: usize,
    pub dim: usize,
    /// Per-class sample counts; the designated minority classes are those
    /// holding the minimum count unless `minority` is set.
    pub counts: Vec<usize>,
    pub loss_kind: LossKind,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Explicit minority set; empty means "classes with the minimum count".
    pub minority: Vec<usize>,
    /// Optional bound E_H: after each step every feature row is projected
    /// onto the ball of squared norm E_H.
    pub feature_norm_bound: Option<f64>,
    /// Record a log entry every this many steps (the final step is always
    /// recorded). 1 logs every step.
    pub log_every: usize,
    /// Scale of the Gaussian feature init.
    pub init_scale: f64,
}

/// Free features and classifier after one logged step.
#[derive(Debug, Clone)]
pub struct PeeledLog {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Max pairwise cosine among the minority-class weights.
    pub minority_score: f64,
    pub metrics: CollapseMetrics,
    pub overall_acc: f64,
    pub balanced_acc: f64,
    pub per_class_acc: Vec<f64>,
    /// Tracked-class gradient-component norms of this step's batch; the
    /// tracked class is the last (rarest) one.
    pub g: Vec<f64>,
}

#[derive(Debug)]
pub struct PeeledOutcome {
    pub w: Matrix,
    pub h: Matrix,
    pub labels: Vec<usize>,
    pub minority: Vec<usize>,
    pub logs: Vec<PeeledLog>,
}

pub fn train_peeled(setup: &PeeledSetup, rng: &mut Rng) -> Result<PeeledOutcome> {
    let c = setup.num_classes;
    if setup.counts.len() != c {
        return Err(Error::InvalidSpec(format!(
            "{} counts for {c} classes",
            setup.counts.len()
        )));
    }
    if setup.counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidSpec("every class needs samples".into()));
    }
    let minority = if setup.minority.is_empty() {
        let min = *setup.counts.iter().min().unwrap();
        (0..c).filter(|&i| setup.counts[i] == min).collect()
    } else {
        setup.minority.clone()
    };
    if minority.len() < 2 {
        return Err(Error::InvalidSpec(
            "minority set needs at least two classes".into(),
        ));
    }

    let n: usize = setup.counts.iter().sum();
    let labels: Vec<usize> = (0..c)
        .flat_map(|i| std::iter::repeat(i).take(setup.counts[i]))
        .collect();
    let counts = ClassCounts::global(&setup.counts)?;
    let tracked = c - 1;

    let mut h = rng.gaussian_matrix(n, setup.dim);
    h.scale_in_place(setup.init_scale);
    let mut w = rng.gaussian_matrix(c, setup.dim);
    w.scale_in_place((1.0 / setup.dim as f64).sqrt());

    let mut vel_w = Matrix::zeros(c, setup.dim);
    let mut vel_h = Matrix::zeros(n, setup.dim);
    let mut logs = Vec::new();

    let steps = setup.schedule.total_epochs;
    for step in 0..steps {
        let lr = setup.schedule.lr_at(step)?;
        let logits = h.matmul_nt(&w)?;
        let loss = mean_loss(setup.loss_kind, &logits, &labels, &counts);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: step,
                msg: format!("loss = {loss}"),
            });
        }
        let g = batch_logit_gradients(setup.loss_kind, &logits, &labels, &counts);

        let log_now = step % setup.log_every.max(1) == 0 || step == steps - 1;
        let report = if log_now {
            Some(classifier_gradient(
                setup.loss_kind,
                &h,
                &labels,
                &w,
                &counts,
            )?)
        } else {
            None
        };

        // Classifier block: mean data gradient plus decay.
        let mut grad_w = g.matmul_tn(&h)?;
        grad_w.scale_in_place(1.0 / n as f64);
        sgd_update(
            w.data_mut(),
            vel_w.data_mut(),
            grad_w.data(),
            lr,
            setup.momentum,
            setup.weight_decay,
        );

        // Feature block: same mean-loss convention as every other tensor.
        let mut grad_h = g.matmul(&w)?;
        grad_h.scale_in_place(1.0 / n as f64);
        sgd_update(
            h.data_mut(),
            vel_h.data_mut(),
            grad_h.data(),
            lr,
            setup.momentum,
            setup.weight_decay,
        );

        if let Some(e_h) = setup.feature_norm_bound {
            let bound = e_h.sqrt();
            for j in 0..n {
                let r = norm2(h.row(j));
                if r > bound {
                    let s = bound / r;
                    for v in h.row_mut(j) {
                        *v *= s;
                    }
                }
            }
        }

        if !w.all_finite() || !h.all_finite() {
            return Err(Error::Diverged {
                epoch: step,
                msg: "non-finite parameter".into(),
            });
        }

        if let Some(report) = report {
            let metrics = balance_metrics(&w)?;
            let minority_score = minority_collapse_score(&w, &minority)?;
            let (overall_acc, per_class_acc) = peeled_accuracy(&h, &w, &labels, &setup.counts)?;
            let balanced_acc = per_class_acc.iter().sum::<f64>() / c as f64;
            logs.push(PeeledLog {
                step,
                lr,
                train_loss: loss,
                minority_score,
                metrics,
                overall_acc,
                balanced_acc,
                per_class_acc,
                g: epoch_gradient_norms(&[report], tracked),
            });
        }
    }

    Ok(PeeledOutcome {
        w,
        h,
        labels,
        minority,
        logs,
    })
}

/// Argmax accuracy of the free features under the current classifier.
fn peeled_accuracy(
    h: &Matrix,
    w: &Matrix,
    labels: &[usize],
    counts: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let z = h.matmul_nt(w)?;
    let mut correct = vec![0usize; counts.len()];
    let mut total = 0usize;
    for (j, &y) in labels.iter().enumerate() {
        let row = z.row(j);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        if best.1 == y {
            correct[y] += 1;
            total += 1;
        }
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(counts)
        .map(|(&cor, &cnt)| cor as f64 / cnt as f64)
        .collect();
    Ok((total as f64 / labels.len() as f64, per_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_setup(c: usize, d: usize, counts: Vec<usize>, steps: usize) -> PeeledSetup {
        PeeledSetup {
            num_classes: c,
            dim: d,
            counts,
            loss_kind: LossKind::Ce,
            schedule: Schedule::constant(0.5, steps),
            momentum: 0.9,
            weight_decay: 5e-4,
            minority: vec![],
            feature_norm_bound: None,
            log_every: 10,
            init_scale: 1.0,
        }
    }

    #[test]
    fn balanced_training_approaches_the_frame() {
        let setup = base_setup(4, 8, vec![50; 4], 400);
        let out = train_peeled(&setup, &mut Rng::new(30)).unwrap();
        let first = &out.logs[0];
        let last = out.logs.last().unwrap();
        assert!(
            last.metrics.b_a2 < first.metrics.b_a2 / 10.0,
            "b_a2 {} -> {}",
            first.metrics.b_a2,
            last.metrics.b_a2
        );
        assert!(last.overall_acc >= 0.99);
    }

    #[test]
    fn imbalanced_ce_collapses_minorities_more_than_arb() {
        let counts = vec![300, 300, 300, 5, 5, 5];
        let mut setup = base_setup(6, 8, counts, 1000);
        setup.schedule = Schedule::constant(5.0, 1000);
        let ce = train_peeled(&setup, &mut Rng::new(31)).unwrap();
        setup.loss_kind = LossKind::Arb;
        let arb = train_peeled(&setup, &mut Rng::new(31)).unwrap();
        assert_eq!(ce.minority, vec![3, 4, 5]);
        let ce_score = ce.logs.last().unwrap().minority_score;
        let arb_score = arb.logs.last().unwrap().minority_score;
        assert!(
            ce_score > arb_score + 0.2,
            "ce {ce_score} should clearly exceed arb {arb_score}"
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let setup = base_setup(3, 6, vec![20, 20, 20], 50);
        let a = train_peeled(&setup, &mut Rng::new(32)).unwrap();
        let b = train_peeled(&setup, &mut Rng::new(32)).unwrap();
        assert_eq!(a.w.data(), b.w.data());
        assert_eq!(a.h.data(), b.h.data());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.train_loss, lb.train_loss);
            assert_eq!(la.minority_score, lb.minority_score);
        }
    }

    #[test]
    fn feature_norm_projection_is_enforced() {
        let mut setup = base_setup(3, 6, vec![15, 15, 15], 40);
        setup.feature_norm_bound = Some(4.0);
        let out = train_peeled(&setup, &mut Rng::new(33)).unwrap();
        for j in 0..out.h.rows() {
            assert!(norm2(out.h.row(j)) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn zero_count_class_is_invalid() {
        let setup = base_setup(3, 6, vec![10, 0, 10], 10);
        assert!(matches!(
            train_peeled(&setup, &mut Rng::new(34)),
            Err(Error::InvalidSpec(_))
        ));
    }
}
