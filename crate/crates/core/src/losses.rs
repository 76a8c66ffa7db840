//! The four loss terms and their weighted combination, all differentiable
//! through the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, VarId};
use crate::geometry::PointCloud;
use crate::network::ForwardOutputs;

/// Which branch feeds the task loss during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskBranch {
    Original,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// Scalar values of each loss component for one forward pass or batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub cd: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.task + w.alpha * self.cd + w.beta * self.local + w.gamma * self.global
    }
}

/// Chamfer loss between differentiable anchors and a fixed cloud.
pub fn loss_cd(tape: &mut Tape, anchors: VarId, x: &PointCloud) -> Result<VarId, AutodiffError> {
    tape.chamfer_to_fixed(anchors, x.points())
}

/// Sum over layers of the squared Frobenius distance between aligned local
/// features. Left unnormalized; `normalize` divides by the total element
/// count when requested.
pub fn loss_local(
    tape: &mut Tape,
    pairs: &[(VarId, VarId)],
    normalize: bool,
) -> Result<VarId, AutodiffError> {
    let mut total: Option<VarId> = None;
    let mut elems = 0usize;
    for &(f, ft) in pairs {
        elems += tape.value(f).numel();
        let d = tape.sq_diff_sum(f, ft)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let total = total.expect("loss_local needs at least one layer");
    if normalize && elems > 0 {
        tape.scale(total, 1.0 / elems as f64)
    } else {
        Ok(total)
    }
}

/// Squared Euclidean distance between global descriptors.
pub fn loss_global(tape: &mut Tape, g: VarId, g_tilde: VarId) -> Result<VarId, AutodiffError> {
    tape.sq_diff_sum(g, g_tilde)
}

/// Mean cross-entropy of logits against class labels.
pub fn loss_task(tape: &mut Tape, logits: VarId, labels: &[usize]) -> Result<VarId, AutodiffError> {
    tape.cross_entropy(logits, labels)
}

/// Assemble the total training loss for one sample's two-branch forward.
/// Chamfer is applied per layer to the original-pose anchors against the
/// original cloud and summed.
pub struct SampleLoss {
    pub total: VarId,
    pub breakdown: LossBreakdown,
}

pub fn assemble_total(
    tape: &mut Tape,
    out: &ForwardOutputs,
    cloud: &PointCloud,
    label: usize,
    weights: &LossWeights,
    task_branch: TaskBranch,
    normalize_local: bool,
) -> Result<SampleLoss, AutodiffError> {
    let task = match task_branch {
        TaskBranch::Original => tape.cross_entropy(out.logits_orig, &[label])?,
        TaskBranch::Both => {
            let t_o = tape.cross_entropy(out.logits_orig, &[label])?;
            let t_a = tape.cross_entropy(out.logits_aug, &[label])?;
            let sum = tape.add(t_o, t_a)?;
            tape.scale(sum, 0.5)?
        }
    };
    // Terms with a weight of exactly zero are not built at all: an ablated
    // term contributes nothing to the value, the gradient, or the reported
    // breakdown.
    let mut total = task;
    let mut breakdown = LossBreakdown {
        task: tape.value(task).item(),
        cd: 0.0,
        local: 0.0,
        global: 0.0,
        total: 0.0,
    };
    if weights.alpha != 0.0 {
        let mut cd: Option<VarId> = None;
        for &a in &out.anchors_orig {
            let c = tape.chamfer_to_fixed(a, cloud.points())?;
            cd = Some(match cd {
                Some(t) => tape.add(t, c)?,
                None => c,
            });
        }
        let cd = cd.expect("at least one layer of anchors");
        breakdown.cd = tape.value(cd).item();
        let cd_w = tape.scale(cd, weights.alpha)?;
        total = tape.add(total, cd_w)?;
    }
    if weights.beta != 0.0 {
        let local = loss_local(tape, &out.local_pairs, normalize_local)?;
        breakdown.local = tape.value(local).item();
        let local_w = tape.scale(local, weights.beta)?;
        total = tape.add(total, local_w)?;
    }
    if weights.gamma != 0.0 {
        let global = loss_global(tape, out.global_orig, out.global_aug)?;
        breakdown.global = tape.value(global).item();
        let global_w = tape.scale(global, weights.gamma)?;
        total = tape.add(total, global_w)?;
    }
    breakdown.total = tape.value(total).item();
    Ok(SampleLoss { total, breakdown })
}
