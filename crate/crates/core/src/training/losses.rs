//! Box, class and association losses with their gradients.

use cooptrack_numerics::{focal_loss_logit, Matrix};
use serde::{Deserialize, Serialize};

use super::labels::{AssociationLabels, Label};
use crate::config::Config;
use crate::geometry::Box3D;
use crate::tracker::{regression_target, REG_DIM};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_bbx: f64,
    pub l_cls: f64,
    pub l_asso: f64,
    pub total: f64,
    pub n_matched: usize,
    pub n_rows: usize,
    pub n_positive: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bbx: f64,
    pub cls: f64,
    pub asso: f64,
    pub cls_alpha: f64,
    pub cls_gamma: f64,
    pub asso_alpha: f64,
    pub asso_gamma: f64,
}

impl LossWeights {
    pub fn from_config(c: &Config) -> Self {
        Self {
            bbx: c.lambda_bbx,
            cls: c.lambda_cls,
            asso: c.lambda_asso,
            cls_alpha: c.cls_alpha,
            cls_gamma: c.cls_gamma,
            asso_alpha: c.asso_alpha,
            asso_gamma: c.asso_gamma,
        }
    }
}

impl LossReport {
    /// Recomputes the weighted total from the terms.
    pub fn weighted(mut self, w: &LossWeights) -> Self {
        self.total = w.bbx * self.l_bbx + w.cls * self.l_cls + w.asso * self.l_asso;
        self
    }

    /// Adds another report's terms and counts.
    pub fn merge(&mut self, o: &LossReport) {
        self.l_bbx += o.l_bbx;
        self.l_cls += o.l_cls;
        self.l_asso += o.l_asso;
        self.total += o.total;
        self.n_matched += o.n_matched;
        self.n_rows += o.n_rows;
        self.n_positive += o.n_positive;
    }
}

/// Gradients of the weighted loss w.r.t. the head outputs.
pub struct DetectionGrads {
    pub dreg: Matrix,
    pub dlogits: Matrix,
}

/// L1 on the regression outputs of matched rows and focal loss on every
/// class logit, both normalized by the matched count. `targets[r]` is the
/// ground-truth box of row `r`, if any.
pub fn detection_loss(reg: &Matrix, logits: &Matrix, refs: &Matrix, targets: &[Option<Box3D>], w: &LossWeights) -> (LossReport, DetectionGrads) {
    let n = reg.rows();
    let n_matched = targets.iter().filter(|t| t.is_some()).count();
    let norm = n_matched.max(1) as f64;
    let mut dreg = Matrix::zeros(n, REG_DIM);
    let mut dlogits = Matrix::zeros(n, logits.cols());
    let mut l_bbx = 0.0;
    let mut l_cls = 0.0;
    for r in 0..n {
        if let Some(gt) = &targets[r] {
            let t = regression_target(gt, refs.row(r));
            for k in 0..REG_DIM {
                let diff = reg[(r, k)] - t[k];
                l_bbx += diff.abs() / (REG_DIM as f64 * norm);
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dreg[(r, k)] = w.bbx * s / (REG_DIM as f64 * norm);
            }
        }
        for c in 0..logits.cols() {
            let positive = targets[r].is_some_and(|g| g.class_label == c);
            let (l, dz) = focal_loss_logit(logits[(r, c)], positive, w.cls_alpha, w.cls_gamma);
            l_cls += l / norm;
            dlogits[(r, c)] = w.cls * dz / norm;
        }
    }
    let report = LossReport {
        l_bbx,
        l_cls,
        n_matched,
        n_rows: n,
        ..LossReport::default()
    }
    .weighted(w);
    (report, DetectionGrads { dreg, dlogits })
}

/// Mean focal loss of the affinity logits against the labels (ignored
/// cells excluded), with its weighted gradient.
pub fn association_loss(logits: &Matrix, labels: &AssociationLabels, w: &LossWeights) -> (LossReport, Matrix) {
    let (nv, ni) = logits.shape();
    let mut dz = Matrix::zeros(nv, ni);
    let cells = labels.labels.iter().flatten().filter(|l| **l != Label::Ignore).count();
    if cells == 0 {
        return (LossReport::default(), dz);
    }
    let mut loss = 0.0;
    for i in 0..nv {
        for j in 0..ni {
            let label = labels.labels[i][j];
            if label == Label::Ignore {
                continue;
            }
            let (l, g) = focal_loss_logit(logits[(i, j)], label == Label::Positive, w.asso_alpha, w.asso_gamma);
            loss += l / cells as f64;
            dz[(i, j)] = w.asso * g / cells as f64;
        }
    }
    let report = LossReport {
        l_asso: loss,
        n_positive: labels.positives().len(),
        ..LossReport::default()
    }
    .weighted(w);
    (report, dz)
}
