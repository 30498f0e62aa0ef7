//! Prior attention biases and classifier-guided edit directions.

use serde::{Deserialize, Serialize};

use crate::classifier::GroundednessClassifier;
use crate::error::{contract, Result};
use crate::model::{AttentionEdit, SequenceLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasKind {
    /// `b_i = 1 / i` over the whole sequence.
    Decay,
    /// `b_i = 1` on context positions, `0` on generated ones.
    Uniform,
}

impl std::str::FromStr for BiasKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "decay" => Ok(BiasKind::Decay),
            "uniform" => Ok(BiasKind::Uniform),
            other => Err(format!("unknown bias kind {other:?} (expected decay or uniform)")),
        }
    }
}

impl std::fmt::Display for BiasKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasKind::Decay => "decay",
            BiasKind::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub intensity: f64,
}

impl BiasSpec {
    pub fn new(kind: BiasKind, intensity: f64) -> Result<Self> {
        if !(intensity >= 0.0) || !intensity.is_finite() {
            return Err(contract(format!("intensity {intensity} must be a nonnegative finite number")));
        }
        Ok(BiasSpec { kind, intensity })
    }
}

/// Bias vector over positions `1..=N` of `layout`.
pub fn build_bias(kind: BiasKind, layout: &SequenceLayout) -> Vec<f64> {
    let n = layout.total_len();
    match kind {
        BiasKind::Decay => (1..=n).map(|i| 1.0 / i as f64).collect(),
        BiasKind::Uniform => (1..=n).map(|i| if i <= layout.context_len { 1.0 } else { 0.0 }).collect(),
    }
}

/// Whether the bias puts more total mass on context positions than on generated ones.
pub fn check_bias_mass(bias: &[f64], layout: &SequenceLayout) -> Result<bool> {
    if bias.len() != layout.total_len() {
        return Err(contract(format!("bias length {} != layout length {}", bias.len(), layout.total_len())));
    }
    let ctx: f64 = bias[..layout.context_len].iter().sum();
    let gen: f64 = bias[layout.context_len..].iter().sum();
    Ok(ctx > gen)
}

/// `+1` when `x >= eps`, `-1` when `x <= -eps`, else `0`.
pub fn sgn_threshold(x: f64, eps: f64) -> i8 {
    if x >= eps {
        1
    } else if x <= -eps {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub delta: Vec<i8>,
    pub source_score: f64,
    pub epsilon: f64,
}

impl EditDirection {
    /// Every head pushed toward context, ignoring the classifier.
    pub fn all_positive(heads: usize) -> Self {
        EditDirection { delta: vec![1; heads], source_score: f64::NAN, epsilon: f64::NAN }
    }
}

/// Thresholded sign of the score gradient at `v`.
pub fn edit_direction(clf: &GroundednessClassifier, v: &[f64]) -> Result<EditDirection> {
    let c = clf.score(v)?;
    let grad = clf.score_gradient(v)?;
    Ok(EditDirection {
        delta: grad.iter().map(|&g| sgn_threshold(g, clf.epsilon)).collect(),
        source_score: c,
        epsilon: clf.epsilon,
    })
}

/// `eta * delta[l, h] * b`, the additive score term of one head.
pub fn compose_head_bias(
    dir: &EditDirection,
    bias: &[f64],
    eta: f64,
    layer: usize,
    head: usize,
    num_heads: usize,
) -> Result<Vec<f64>> {
    let k = layer * num_heads + head;
    let d = *dir.delta.get(k).ok_or_else(|| contract(format!("no direction for head ({layer}, {head})")))?;
    Ok(bias.iter().map(|b| eta * d as f64 * b).collect())
}

/// The per-head injection the model applies: head `k` receives `eta * delta[k] * bias`.
pub fn attention_edit(dir: &EditDirection, eta: f64, bias: &[f64]) -> AttentionEdit {
    AttentionEdit {
        head_scale: dir.delta.iter().map(|&d| (eta * d as f64) as f32).collect(),
        bias: bias.iter().map(|&b| b as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lay(c: usize, n: usize) -> SequenceLayout {
        SequenceLayout::for_row(c, n).unwrap()
    }

    #[test]
    fn bias_shapes() {
        let d = build_bias(BiasKind::Decay, &lay(1, 3));
        assert_eq!(d.len(), 3);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.5);
        assert_abs_diff_eq!(d[2], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(build_bias(BiasKind::Uniform, &lay(2, 4)), vec![1.0, 1.0, 0.0, 0.0]);
        for c in 1..6 {
            assert_eq!(build_bias(BiasKind::Decay, &lay(c, 7))[0], 1.0);
        }
    }

    #[test]
    fn bias_mass_examples() {
        let l = lay(1, 4);
        assert!(!check_bias_mass(&build_bias(BiasKind::Decay, &l), &l).unwrap());
        let l = lay(8, 10);
        assert!(check_bias_mass(&build_bias(BiasKind::Decay, &l), &l).unwrap());
        for (c, n) in [(1, 2), (1, 50), (3, 4), (20, 21)] {
            let l = lay(c, n);
            assert!(check_bias_mass(&build_bias(BiasKind::Uniform, &l), &l).unwrap());
        }
        assert!(check_bias_mass(&[1.0], &lay(1, 2)).is_err());
    }

    #[test]
    fn sgn_examples() {
        assert_eq!(sgn_threshold(0.5, 1e-4), 1);
        assert_eq!(sgn_threshold(5e-5, 1e-4), 0);
        assert_eq!(sgn_threshold(-0.3, 1e-4), -1);
        assert_eq!(sgn_threshold(1e-4, 1e-4), 1);
        assert_eq!(sgn_threshold(-1e-4, 1e-4), -1);
    }

    #[test]
    fn direction_examples() {
        let zero = GroundednessClassifier::new(1, 2, vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(edit_direction(&zero, &[0.4, 0.1]).unwrap().delta, vec![0, 0]);
        let c = GroundednessClassifier::new(1, 2, vec![1.0, -1.0], 0.0).unwrap();
        let d = edit_direction(&c, &[0.0, 0.0]).unwrap();
        assert_eq!(d.delta, vec![1, -1]);
        assert_eq!(d.source_score, 0.5);
        assert_eq!(d.epsilon, 1e-4);
        let c = GroundednessClassifier::new(1, 2, vec![3e-4, 1.0], 0.0).unwrap();
        assert_eq!(edit_direction(&c, &[0.0, 0.0]).unwrap().delta, vec![0, 1]);
    }

    #[test]
    fn composition_examples() {
        let dir = EditDirection { delta: vec![0, -1], source_score: 0.5, epsilon: 1e-4 };
        assert_eq!(compose_head_bias(&dir, &[1.0, 0.5], 1.0, 0, 0, 2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(compose_head_bias(&dir, &[1.0, 0.5], 1.0, 0, 1, 2).unwrap(), vec![-1.0, -0.5]);
        let one = compose_head_bias(&dir, &[1.0, 0.5, 0.25], 1.0, 0, 1, 2).unwrap();
        let two = compose_head_bias(&dir, &[1.0, 0.5, 0.25], 2.0, 0, 1, 2).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(compose_head_bias(&dir, &[1.0], 1.0, 1, 0, 2).is_err());
    }

    #[test]
    fn model_edit_matches_composition() {
        let dir = EditDirection { delta: vec![1, 0, -1, 1], source_score: 0.3, epsilon: 1e-4 };
        let b = build_bias(BiasKind::Decay, &lay(3, 5));
        let e = attention_edit(&dir, 1.5, &b);
        for k in 0..4 {
            let comp = compose_head_bias(&dir, &b, 1.5, k / 2, k % 2, 2).unwrap();
            for (i, c) in comp.iter().enumerate() {
                assert_abs_diff_eq!((e.head_scale[k] * e.bias[i]) as f64, *c, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("decay".parse::<BiasKind>().unwrap(), BiasKind::Decay);
        assert_eq!("uniform".parse::<BiasKind>().unwrap(), BiasKind::Uniform);
        assert!("linear".parse::<BiasKind>().is_err());
        assert!(BiasSpec::new(BiasKind::Decay, -0.1).is_err());
        assert_eq!(BiasKind::Uniform.to_string(), "uniform");
    }
}
