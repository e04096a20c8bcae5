//! Hierarchy-aware adversarial attacks.
//!
//! Four attack losses share one projected-gradient driver:
//!
//! * `PGD`  - plain cross entropy over the leaves.
//! * `LHA`  - cross entropy restricted to leaves within tree distance `h` of
//!   the label, steering the attack toward nearby mistakes.
//! * `GHA`  - cross entropy restricted to the label plus leaves at distance
//!   `>= h`, steering the attack toward distant mistakes.
//! * `NHA`  - cross entropy over node logits at height `h`; node logits are
//!   either the max over each node's leaves or the exact log-sum-exp.
//!
//! At the degenerate heights (`GHA@1`, `LHA@(H-1)`, `NHA@0`) each loss
//! collapses to plain cross entropy, and the driver reproduces `PGD`
//! bit-for-bit, including the random start.

use log::warn;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, TreeError};
use crate::net::{argmax, Classifier, NetError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("empty logit mask")]
    EmptyMask,
    #[error("target class {y} not in mask")]
    TargetNotInMask { y: usize },
    #[error("degenerate mask for label {y} at height {h}: the loss has no signal")]
    DegenerateMask { y: usize, h: usize },
    #[error("attack height {height} invalid for this kind on a {num_levels}-level tree")]
    HeightOutOfRange { height: usize, num_levels: usize },
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("classifier emits {classes} classes but the tree has {leaves} leaves")]
    HeadMismatch { classes: usize, leaves: usize },
    #[error("input coordinate {0} outside [0, 1]")]
    InputOutOfBox(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttackKind {
    Pgd,
    Lha,
    Gha,
    Nha,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackKind::Pgd => "PGD",
            AttackKind::Lha => "LHA",
            AttackKind::Gha => "GHA",
            AttackKind::Nha => "NHA",
        };
        f.write_str(s)
    }
}

/// Node-logit construction for NHA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NhaVariant {
    /// Node logit = max over the node's leaves.
    Max,
    /// Node logit = log-sum-exp over the node's leaves.
    Exact,
}

fn default_variant() -> NhaVariant {
    NhaVariant::Max
}

/// A fully specified attack. `height` is ignored for `PGD`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(rename = "h", default)]
    pub height: usize,
    #[serde(rename = "eps")]
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_variant")]
    pub nha_variant: NhaVariant,
}

impl AttackSpec {
    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            height: 0,
            epsilon,
            alpha,
            steps,
            nha_variant: NhaVariant::Max,
        }
    }

    pub fn at_height(kind: AttackKind, height: usize, epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackSpec {
            kind,
            height,
            epsilon,
            alpha,
            steps,
            nha_variant: NhaVariant::Max,
        }
    }

    /// Display label, e.g. `PGD50`, `GHA50@2`, `NHA50@1`, `NHA50@1-exact`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Pgd => format!("PGD{}", self.steps),
            AttackKind::Nha => {
                let suffix = match self.nha_variant {
                    NhaVariant::Max => "",
                    NhaVariant::Exact => "-exact",
                };
                format!("NHA{}@{}{}", self.steps, self.height, suffix)
            }
            kind => format!("{}{}@{}", kind, self.steps, self.height),
        }
    }

    /// Checks numeric ranges and, given a tree, the height range for the kind.
    pub fn validate(&self, tree: &Hierarchy) -> Result<(), AttackError> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AttackError::InvalidSpec(format!(
                "eps must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(AttackError::InvalidSpec(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(AttackError::InvalidSpec("steps must be >= 1".into()));
        }
        let top = tree.num_levels() - 1;
        let ok = match self.kind {
            AttackKind::Pgd => true,
            AttackKind::Lha | AttackKind::Gha => (1..=top).contains(&self.height),
            AttackKind::Nha => self.height + 1 <= top,
        };
        if !ok {
            return Err(AttackError::HeightOutOfRange {
                height: self.height,
                num_levels: tree.num_levels(),
            });
        }
        Ok(())
    }

    /// Canonical form for seed derivation: attacks whose loss collapses to
    /// plain cross entropy share PGD's identity, so equivalent attacks draw
    /// identical random starts and reproduce each other exactly.
    fn canonical_key(&self, tree: &Hierarchy) -> (u64, u64, u64) {
        let top = tree.num_levels() - 1;
        let collapses = match self.kind {
            AttackKind::Pgd => true,
            AttackKind::Gha => self.height == 1,
            AttackKind::Lha => self.height == top,
            AttackKind::Nha => self.height == 0,
        };
        if collapses {
            return (0, 0, 0);
        }
        let kind = match self.kind {
            AttackKind::Pgd => 0u64,
            AttackKind::Lha => 1,
            AttackKind::Gha => 2,
            AttackKind::Nha => 3,
        };
        let variant = match (self.kind, self.nha_variant) {
            (AttackKind::Nha, NhaVariant::Exact) => 1u64,
            _ => 0,
        };
        (kind, self.height as u64, variant)
    }

    /// The `AttackSpec` this one is equivalent to, with collapsed severities
    /// rewritten to plain PGD. Evaluation reports embed this form so
    /// equivalent attacks produce identical records.
    pub fn canonical(&self, tree: &Hierarchy) -> AttackSpec {
        if self.canonical_key(tree) == (0, 0, 0) {
            AttackSpec::pgd(self.epsilon, self.alpha, self.steps)
        } else {
            self.clone()
        }
    }

    /// Stable 64-bit identity used as a seed-stream label.
    pub fn attack_id(&self, tree: &Hierarchy) -> u64 {
        let (kind, height, variant) = self.canonical_key(tree);
        derive_seed(
            0x6174_7461_636b, // "attack" stream tag
            &[
                kind,
                height,
                self.epsilon.to_bits(),
                self.alpha.to_bits(),
                self.steps as u64,
                variant,
            ],
        )
    }
}

/// Cross entropy restricted to the index set `mask` (sorted, must contain
/// `y`). Returns the loss and its gradient w.r.t. the full logit vector;
/// coordinates outside the mask get zero gradient.
pub fn masked_ce(z: &[f64], y: usize, mask: &[usize]) -> Result<(f64, Vec<f64>), AttackError> {
    if mask.is_empty() {
        return Err(AttackError::EmptyMask);
    }
    if mask.binary_search(&y).is_err() {
        return Err(AttackError::TargetNotInMask { y });
    }
    let mut m = f64::NEG_INFINITY;
    for &j in mask {
        if z[j] > m {
            m = z[j];
        }
    }
    let mut s = 0.0;
    for &j in mask {
        s += (z[j] - m).exp();
    }
    let lse = m + s.ln();
    let loss = -(z[y] - lse);
    let mut grad = vec![0.0; z.len()];
    for &j in mask {
        grad[j] = (z[j] - m).exp() / s;
    }
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Plain cross entropy over all logits; same arithmetic as a full-mask
/// `masked_ce`.
pub fn cross_entropy(z: &[f64], y: usize) -> Result<(f64, Vec<f64>), AttackError> {
    if z.is_empty() {
        return Err(AttackError::EmptyMask);
    }
    if y >= z.len() {
        return Err(AttackError::TargetNotInMask { y });
    }
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for &v in z {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    let loss = -(z[y] - lse);
    let mut grad = Vec::with_capacity(z.len());
    for &v in z {
        grad.push((v - m).exp() / s);
    }
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Loss steering toward nearby mistakes: cross entropy over leaves within
/// distance `h` of `y`. Requires `1 <= h <= H-1`.
pub fn loss_lha(
    z: &[f64],
    y: usize,
    h: usize,
    tree: &Hierarchy,
) -> Result<(f64, Vec<f64>), AttackError> {
    let mask = tree.lower_mask(y, h)?;
    if mask.len() == 1 {
        return Err(AttackError::DegenerateMask { y, h });
    }
    masked_ce(z, y, mask)
}

/// Loss steering toward distant mistakes: cross entropy over `y` plus leaves
/// at distance `>= h`. Requires `1 <= h <= H-1`. At `h = 1` the mask covers
/// every leaf and the loss is plain cross entropy.
pub fn loss_gha(
    z: &[f64],
    y: usize,
    h: usize,
    tree: &Hierarchy,
) -> Result<(f64, Vec<f64>), AttackError> {
    let mask = tree.greater_mask(y, h)?;
    if mask.len() == 1 {
        return Err(AttackError::DegenerateMask { y, h });
    }
    masked_ce(z, y, mask)
}

/// Exact node logits: log-sum-exp of the leaf logits below each node at
/// height `h`, in node index order. At `h = 0` this returns the leaf logits.
pub fn node_logits_exact(z: &[f64], h: usize, tree: &Hierarchy) -> Result<Vec<f64>, AttackError> {
    check_leaf_logits(z, h, tree)?;
    let n = tree.level_sizes()[h];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let leaves = tree
            .leaves_under(crate::hierarchy::NodeRef::new(h, i))
            .expect("validated");
        let mut m = f64::NEG_INFINITY;
        for &leaf in leaves {
            if z[leaf] > m {
                m = z[leaf];
            }
        }
        let mut s = 0.0;
        for &leaf in leaves {
            s += (z[leaf] - m).exp();
        }
        out.push(m + s.ln());
    }
    Ok(out)
}

/// Max-based node logits: the largest leaf logit below each node, plus the
/// arg-max leaf (ties resolve to the lowest leaf index).
pub fn node_logits_max(
    z: &[f64],
    h: usize,
    tree: &Hierarchy,
) -> Result<(Vec<f64>, Vec<usize>), AttackError> {
    check_leaf_logits(z, h, tree)?;
    let n = tree.level_sizes()[h];
    let mut values = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for i in 0..n {
        let leaves = tree
            .leaves_under(crate::hierarchy::NodeRef::new(h, i))
            .expect("validated");
        let mut best = leaves[0];
        for &leaf in &leaves[1..] {
            if z[leaf] > z[best] {
                best = leaf;
            }
        }
        values.push(z[best]);
        arg.push(best);
    }
    Ok((values, arg))
}

fn check_leaf_logits(z: &[f64], h: usize, tree: &Hierarchy) -> Result<(), AttackError> {
    if z.len() != tree.num_leaves() {
        return Err(AttackError::HeadMismatch {
            classes: z.len(),
            leaves: tree.num_leaves(),
        });
    }
    if h >= tree.num_levels() {
        return Err(AttackError::HeightOutOfRange {
            height: h,
            num_levels: tree.num_levels(),
        });
    }
    Ok(())
}

/// Node-level cross entropy at height `h`, differentiated back to the leaf
/// logits. Requires `0 <= h <= H-2`; at `h = 0` both variants reduce to plain
/// cross entropy. The max variant routes each node's gradient to its arg-max
/// leaf; the exact variant distributes it by the within-node softmax.
pub fn loss_nha(
    z: &[f64],
    y: usize,
    h: usize,
    tree: &Hierarchy,
    variant: NhaVariant,
) -> Result<(f64, Vec<f64>), AttackError> {
    check_leaf_logits(z, h, tree)?;
    if h + 1 >= tree.num_levels() {
        return Err(AttackError::HeightOutOfRange {
            height: h,
            num_levels: tree.num_levels(),
        });
    }
    let n = tree.level_sizes()[h];
    if n == 1 {
        return Err(AttackError::DegenerateMask { y, h });
    }
    if y >= tree.num_leaves() {
        return Err(AttackError::TargetNotInMask { y });
    }
    let target = tree.leaf_ancestor(y, h);

    let (node_logits, arg) = match variant {
        NhaVariant::Max => {
            let (v, a) = node_logits_max(z, h, tree)?;
            (v, Some(a))
        }
        NhaVariant::Exact => (node_logits_exact(z, h, tree)?, None),
    };

    let mut m = f64::NEG_INFINITY;
    for &v in &node_logits {
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0;
    for &v in &node_logits {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    let loss = -(node_logits[target] - lse);
    let mut node_grad: Vec<f64> = node_logits.iter().map(|&v| (v - m).exp() / s).collect();
    node_grad[target] -= 1.0;

    let mut grad = vec![0.0; z.len()];
    match arg {
        Some(arg_leaves) => {
            for (j, &leaf) in arg_leaves.iter().enumerate() {
                grad[leaf] = node_grad[j];
            }
        }
        None => {
            for j in 0..n {
                let leaves = tree
                    .leaves_under(crate::hierarchy::NodeRef::new(h, j))
                    .expect("validated");
                for &leaf in leaves {
                    grad[leaf] = node_grad[j] * (z[leaf] - node_logits[j]).exp();
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Loss+gradient dispatch for one attack spec. The mask is resolved once per
/// `(label, spec)` and reused across PGD iterates.
enum PreparedLoss<'a> {
    Masked(std::borrow::Cow<'a, [usize]>),
    Node { h: usize, variant: NhaVariant },
}

impl PreparedLoss<'_> {
    fn evaluate(
        &self,
        z: &[f64],
        y: usize,
        tree: &Hierarchy,
    ) -> Result<(f64, Vec<f64>), AttackError> {
        match self {
            PreparedLoss::Masked(mask) => masked_ce(z, y, mask),
            PreparedLoss::Node { h, variant } => loss_nha(z, y, *h, tree, *variant),
        }
    }
}

fn prepare_loss<'a>(
    spec: &AttackSpec,
    y: usize,
    tree: &'a Hierarchy,
) -> Result<PreparedLoss<'a>, AttackError> {
    match spec.kind {
        AttackKind::Pgd => Ok(PreparedLoss::Masked(std::borrow::Cow::Owned(
            (0..tree.num_leaves()).collect(),
        ))),
        AttackKind::Lha => {
            let mask = tree.lower_mask(y, spec.height)?;
            if mask.len() == 1 {
                return Err(AttackError::DegenerateMask {
                    y,
                    h: spec.height,
                });
            }
            Ok(PreparedLoss::Masked(std::borrow::Cow::Borrowed(mask)))
        }
        AttackKind::Gha => {
            let mask = tree.greater_mask(y, spec.height)?;
            if mask.len() == 1 {
                return Err(AttackError::DegenerateMask {
                    y,
                    h: spec.height,
                });
            }
            Ok(PreparedLoss::Masked(std::borrow::Cow::Borrowed(mask)))
        }
        AttackKind::Nha => {
            if tree.level_sizes()[spec.height] == 1 {
                return Err(AttackError::DegenerateMask {
                    y,
                    h: spec.height,
                });
            }
            Ok(PreparedLoss::Node {
                h: spec.height,
                variant: spec.nha_variant,
            })
        }
    }
}

/// Result of one attack run.
///
/// Two reading conventions are reported side by side. The worst-iterate
/// convention scans every iterate (including the randomly started one):
/// the instance is non-robust if any iterate misclassifies, and
/// `adv_prediction` is the misclassifying prediction with the largest tree
/// distance to the label, earliest iterate winning ties. The final-iterate
/// fields describe only the last point visited.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutcome {
    pub x_adv: Vec<f64>,
    /// Worst-iterate convention: some iterate misclassified.
    pub success: bool,
    /// Misclassifying prediction with maximal tree distance; equal to
    /// `final_prediction` when the attack never succeeded.
    pub adv_prediction: usize,
    /// Tree distance of `adv_prediction` to the label; 0 when `!success`.
    pub mistake: usize,
    pub final_prediction: usize,
    /// Tree distance of the final prediction; 0 if the final iterate is
    /// correctly classified.
    pub final_mistake: usize,
    /// Number of gradient steps taken.
    pub iterates_checked: usize,
    /// The loss had no signal (degenerate mask); the run was a no-op and the
    /// instance counts as robust.
    pub degenerate: bool,
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected gradient ascent on the attack's loss inside the intersection of
/// the epsilon ball around `x` and the unit box. The start point is `x` plus
/// per-coordinate uniform noise from `[-eps, eps]`; every iterate (start
/// included) is evaluated under the worst-iterate convention.
pub fn pgd(
    classifier: &Classifier,
    tree: &Hierarchy,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdversarialOutcome, AttackError> {
    run_pgd(classifier, tree, x, y, spec, seed, None)
}

/// Same as [`pgd`] but records every iterate (start point first).
pub fn pgd_with_trace(
    classifier: &Classifier,
    tree: &Hierarchy,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    seed: u64,
    trace: &mut Vec<Vec<f64>>,
) -> Result<AdversarialOutcome, AttackError> {
    run_pgd(classifier, tree, x, y, spec, seed, Some(trace))
}

fn run_pgd(
    classifier: &Classifier,
    tree: &Hierarchy,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    seed: u64,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<AdversarialOutcome, AttackError> {
    spec.validate(tree)?;
    if classifier.n_classes() != tree.num_leaves() {
        return Err(AttackError::HeadMismatch {
            classes: classifier.n_classes(),
            leaves: tree.num_leaves(),
        });
    }
    if y >= tree.num_leaves() {
        return Err(AttackError::TargetNotInMask { y });
    }
    if let Some(i) = x.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(AttackError::InputOutOfBox(i));
    }

    let prepared = match prepare_loss(spec, y, tree) {
        Ok(p) => p,
        Err(AttackError::DegenerateMask { y, h }) => {
            warn!(
                "degenerate {} mask for label {} at height {}; counting instance as robust",
                spec.kind, y, h
            );
            let final_prediction = classifier.predict(x)?;
            return Ok(AdversarialOutcome {
                x_adv: x.to_vec(),
                success: false,
                adv_prediction: final_prediction,
                mistake: 0,
                final_prediction,
                final_mistake: 0,
                iterates_checked: 0,
                degenerate: true,
            });
        }
        Err(e) => return Err(e),
    };

    let eps = spec.epsilon;
    let lower: Vec<f64> = x.iter().map(|&v| (v - eps).max(0.0)).collect();
    let upper: Vec<f64> = x.iter().map(|&v| (v + eps).min(1.0)).collect();
    let project = |xt: &mut [f64]| {
        for ((v, lo), hi) in xt.iter_mut().zip(&lower).zip(&upper) {
            *v = v.clamp(*lo, *hi);
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xt = x.to_vec();
    if eps > 0.0 {
        for v in xt.iter_mut() {
            *v += rng.random_range(-eps..=eps);
        }
    }
    project(&mut xt);

    let mut success = false;
    let mut worst_pred = 0usize;
    let mut worst_mistake = 0usize;
    let mut logits = classifier.forward(&xt)?;
    let mut pred = argmax(&logits);

    let observe = |pred: usize, success: &mut bool, wp: &mut usize, wm: &mut usize| {
        if pred != y {
            let d = tree.leaf_distance(pred, y);
            if !*success || d > *wm {
                *success = true;
                *wp = pred;
                *wm = d;
            }
        }
    };
    if let Some(t) = trace.as_deref_mut() {
        t.push(xt.clone());
    }
    observe(pred, &mut success, &mut worst_pred, &mut worst_mistake);

    for _ in 0..spec.steps {
        let (_, logit_grad) = prepared.evaluate(&logits, y, tree)?;
        let input_grad = classifier.input_gradient(&xt, &logit_grad)?;
        for (v, g) in xt.iter_mut().zip(&input_grad) {
            *v += spec.alpha * sign(*g);
        }
        project(&mut xt);
        debug_assert!(xt
            .iter()
            .zip(x)
            .all(|(a, b)| (a - b).abs() <= eps + 1e-12 && (0.0..=1.0).contains(a)));
        logits = classifier.forward(&xt)?;
        pred = argmax(&logits);
        if let Some(t) = trace.as_deref_mut() {
            t.push(xt.clone());
        }
        observe(pred, &mut success, &mut worst_pred, &mut worst_mistake);
    }

    let final_mistake = if pred == y {
        0
    } else {
        tree.leaf_distance(pred, y)
    };
    Ok(AdversarialOutcome {
        x_adv: xt,
        success,
        adv_prediction: if success { worst_pred } else { pred },
        mistake: worst_mistake,
        final_prediction: pred,
        final_mistake,
        iterates_checked: spec.steps,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{relative_error, Mlp};
    use crate::synth::gen_tree;

    const FD: f64 = 1e-6;

    /// Central-difference gradient of a scalar loss in logit space.
    fn fd_grad(loss: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut zp = z.to_vec();
                zp[i] = z[i] + FD;
                let up = loss(&zp);
                zp[i] = z[i] - FD;
                let down = loss(&zp);
                (up - down) / (2.0 * FD)
            })
            .collect()
    }

    #[test]
    fn masked_ce_matches_direct_formula() {
        let z = [1.0, 2.0, 3.0];
        let (loss, grad) = masked_ce(&z, 0, &[0, 2]).unwrap();
        // Independent route: loss = ln(e^1 + e^3) - z_0.
        let expected = (1f64.exp() + 3f64.exp()).ln() - 1.0;
        assert!((loss - expected).abs() < 1e-12);
        let p0 = 1f64.exp() / (1f64.exp() + 3f64.exp());
        let p2 = 3f64.exp() / (1f64.exp() + 3f64.exp());
        assert!((grad[0] - (p0 - 1.0)).abs() < 1e-12);
        assert_eq!(grad[1], 0.0);
        assert!((grad[2] - p2).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_gradient_matches_central_differences() {
        let z = [0.4, -1.2, 2.0, 0.0, 0.7];
        let mask = [0usize, 2, 3];
        let (_, grad) = masked_ce(&z, 3, &mask).unwrap();
        let numeric = fd_grad(|z| masked_ce(z, 3, &mask).unwrap().0, &z);
        for (n, a) in numeric.iter().zip(&grad) {
            assert!(relative_error(*n, *a) < 1e-8, "numeric {n} analytic {a}");
        }
    }

    #[test]
    fn masked_ce_error_cases() {
        assert!(matches!(
            masked_ce(&[1.0, 2.0], 1, &[0]),
            Err(AttackError::TargetNotInMask { y: 1 })
        ));
        assert!(matches!(
            masked_ce(&[1.0, 2.0], 0, &[]),
            Err(AttackError::EmptyMask)
        ));
    }

    #[test]
    fn masked_losses_are_shift_invariant() {
        let tree = gen_tree(&[2, 2, 2]).unwrap();
        let z: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + 55.5).collect();
        for h in 1..=3 {
            let (a, _) = loss_lha(&z, 3, h, &tree).unwrap();
            let (b, _) = loss_lha(&shifted, 3, h, &tree).unwrap();
            assert!((a - b).abs() < 1e-9);
            let (a, _) = loss_gha(&z, 3, h, &tree).unwrap();
            let (b, _) = loss_gha(&shifted, 3, h, &tree).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
        for h in 0..=2 {
            for variant in [NhaVariant::Max, NhaVariant::Exact] {
                let (a, _) = loss_nha(&z, 3, h, &tree, variant).unwrap();
                let (b, _) = loss_nha(&shifted, 3, h, &tree, variant).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_masks_are_reported() {
        // Leaf 0 has no siblings below height 1.
        let lonely = gen_tree(&[2, 1]).unwrap();
        assert!(matches!(
            loss_lha(&[0.0, 0.0], 0, 1, &lonely),
            Err(AttackError::DegenerateMask { y: 0, h: 1 })
        ));
        // Single subtree under the root: nothing at distance 2.
        let chain = gen_tree(&[1, 2]).unwrap();
        assert!(matches!(
            loss_gha(&[0.0, 0.0], 0, 2, &chain),
            Err(AttackError::DegenerateMask { y: 0, h: 2 })
        ));
        // Single node at the target stratum.
        assert!(matches!(
            loss_nha(&[0.0, 0.0], 0, 1, &chain, NhaVariant::Max),
            Err(AttackError::DegenerateMask { y: 0, h: 1 })
        ));
    }

    #[test]
    fn node_logits_match_direct_formulas() {
        let tree = gen_tree(&[2, 2]).unwrap();
        let z = [1.0, 2.0, 3.0, 4.0];
        let exact = node_logits_exact(&z, 1, &tree).unwrap();
        assert!((exact[0] - (1f64.exp() + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((exact[1] - (3f64.exp() + 4f64.exp()).ln()).abs() < 1e-12);
        let (maxed, arg) = node_logits_max(&z, 1, &tree).unwrap();
        assert_eq!(maxed, vec![2.0, 4.0]);
        assert_eq!(arg, vec![1, 3]);
        // Ties resolve to the lowest leaf index.
        let (_, arg) = node_logits_max(&[5.0, 5.0, 0.0, 0.0], 1, &tree).unwrap();
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn node_logit_sandwich_holds() {
        let tree = gen_tree(&[3, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let z: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..=3.0)).collect();
            for h in 1..=2 {
                let exact = node_logits_exact(&z, h, &tree).unwrap();
                let (maxed, _) = node_logits_max(&z, h, &tree).unwrap();
                for (i, (lo, ex)) in maxed.iter().zip(&exact).enumerate() {
                    let fan = tree
                        .leaves_under(crate::hierarchy::NodeRef::new(h, i))
                        .unwrap()
                        .len() as f64;
                    assert!(*lo <= *ex + 1e-12);
                    assert!(*ex <= *lo + fan.ln() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn nha_gradients_match_central_differences() {
        let tree = gen_tree(&[2, 3]).unwrap();
        let z = [0.3, -0.8, 1.4, 0.2, -0.5, 0.9];
        for variant in [NhaVariant::Max, NhaVariant::Exact] {
            let (_, grad) = loss_nha(&z, 4, 1, &tree, variant).unwrap();
            let numeric = fd_grad(|z| loss_nha(z, 4, 1, &tree, variant).unwrap().0, &z);
            for (n, a) in numeric.iter().zip(&grad) {
                assert!(relative_error(*n, *a) < 1e-8, "{variant:?}: numeric {n} analytic {a}");
            }
        }
    }

    #[test]
    fn collapsed_heights_reduce_to_cross_entropy() {
        let tree = gen_tree(&[2, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..=4.0)).collect();
            let y = rng.random_range(0..8usize);
            let (ce_loss, ce_grad) = cross_entropy(&z, y).unwrap();
            for (loss, grad) in [
                loss_gha(&z, y, 1, &tree).unwrap(),
                loss_lha(&z, y, 3, &tree).unwrap(),
                loss_nha(&z, y, 0, &tree, NhaVariant::Max).unwrap(),
                loss_nha(&z, y, 0, &tree, NhaVariant::Exact).unwrap(),
            ] {
                assert!((loss - ce_loss).abs() < 1e-12);
                for (a, b) in grad.iter().zip(&ce_grad) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn toy_setup() -> (Classifier, Hierarchy) {
        let tree = gen_tree(&[2, 2]).unwrap();
        let classifier = Classifier::new(Mlp::new(&[3, 6], 9), 4, 10);
        (classifier, tree)
    }

    #[test]
    fn zero_epsilon_returns_the_input() {
        let (c, tree) = toy_setup();
        let x = vec![0.2, 0.8, 0.5];
        let y = c.predict(&x).unwrap();
        let spec = AttackSpec::pgd(0.0, 1.0 / 255.0, 10);
        let out = pgd(&c, &tree, &x, y, &spec, 3).unwrap();
        assert_eq!(out.x_adv, x);
        assert!(!out.success);
        assert_eq!(out.mistake, 0);
        assert_eq!(out.iterates_checked, 10);
    }

    #[test]
    fn iterates_stay_in_ball_and_box() {
        let (c, tree) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for run in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..=1.0)).collect();
            let y = rng.random_range(0..4usize);
            let eps = rng.random_range(0.01..=0.3);
            let spec = AttackSpec::at_height(AttackKind::Gha, 2, eps, eps / 4.0, 8);
            let mut trace = Vec::new();
            pgd_with_trace(&c, &tree, &x, y, &spec, run, &mut trace).unwrap();
            assert_eq!(trace.len(), 9);
            for point in &trace {
                for ((a, b), i) in point.iter().zip(&x).zip(0..) {
                    assert!((a - b).abs() <= eps + 1e-12, "run {run} coord {i}");
                    assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }

    #[test]
    fn gha_at_height_one_reproduces_pgd_bitwise() {
        let (c, tree) = toy_setup();
        let x = vec![0.3, 0.6, 0.9];
        let pgd_spec = AttackSpec::pgd(0.06, 0.01, 12);
        let gha_spec = AttackSpec::at_height(AttackKind::Gha, 1, 0.06, 0.01, 12);
        assert_eq!(pgd_spec.attack_id(&tree), gha_spec.attack_id(&tree));
        for y in 0..4 {
            let a = pgd(&c, &tree, &x, y, &pgd_spec, 1234).unwrap();
            let b = pgd(&c, &tree, &x, y, &gha_spec, 1234).unwrap();
            assert_eq!(a, b);
            for (u, v) in a.x_adv.iter().zip(&b.x_adv) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let (c, tree) = toy_setup();
        let x = vec![0.1, 0.5, 0.7];
        let spec = AttackSpec::at_height(AttackKind::Lha, 1, 0.1, 0.02, 6);
        let a = pgd(&c, &tree, &x, 2, &spec, 42).unwrap();
        let b = pgd(&c, &tree, &x, 2, &spec, 42).unwrap();
        assert_eq!(a, b);
        let other = pgd(&c, &tree, &x, 2, &spec, 43).unwrap();
        // Different random starts almost surely diverge somewhere.
        assert_ne!(a.x_adv, other.x_adv);
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        let tree = gen_tree(&[2, 2]).unwrap();
        let mut spec = AttackSpec::pgd(0.1, 0.01, 5);
        spec.epsilon = -0.5;
        assert!(matches!(
            spec.validate(&tree),
            Err(AttackError::InvalidSpec(_))
        ));
        let spec = AttackSpec::at_height(AttackKind::Gha, 0, 0.1, 0.01, 5);
        assert!(matches!(
            spec.validate(&tree),
            Err(AttackError::HeightOutOfRange { .. })
        ));
        let spec = AttackSpec::at_height(AttackKind::Nha, 2, 0.1, 0.01, 5);
        assert!(matches!(
            spec.validate(&tree),
            Err(AttackError::HeightOutOfRange { .. })
        ));
        // Zero epsilon is a legal no-noise evaluation configuration.
        let spec = AttackSpec::pgd(0.0, 0.01, 5);
        assert!(spec.validate(&tree).is_ok());
    }

    #[test]
    fn attack_spec_json_round_trip() {
        let text = r#"{"kind":"GHA","h":2,"eps":0.03137,"alpha":0.00392,"steps":50,"nha_variant":"max"}"#;
        let spec: AttackSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.kind, AttackKind::Gha);
        assert_eq!(spec.height, 2);
        assert_eq!(spec.steps, 50);
        let again: AttackSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(spec, again);
        // h and nha_variant carry defaults.
        let short: AttackSpec =
            serde_json::from_str(r#"{"kind":"PGD","eps":0.1,"alpha":0.01,"steps":5}"#).unwrap();
        assert_eq!(short.height, 0);
        assert_eq!(short.nha_variant, NhaVariant::Max);
        assert_eq!(short.label(), "PGD5");
        assert_eq!(spec.label(), "GHA50@2");
    }
}
