//! Lookback-ratio features.
//!
//! A head's lookback ratio at one step compares its mean attention weight over
//! context positions with its mean weight over generated positions. Feature
//! vectors list heads layer-major: entry `l * H + h`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{AttentionTrace, SequenceLayout};

const ROW_SUM_TOL: f64 = 1e-5;

/// Tag naming the entry order of a feature vector for an `L x H` model.
pub fn feature_order_tag(num_layers: usize, num_heads: usize) -> String {
    format!("layer-major/L{num_layers}/H{num_heads}")
}

/// Index of head `(layer, head)` in a feature vector.
pub fn feature_index(num_heads: usize, layer: usize, head: usize) -> usize {
    layer * num_heads + head
}

fn check_row(row: &[f32], layout: &SequenceLayout) -> Result<()> {
    if row.len() != layout.total_len() {
        return Err(contract(format!("row length {} != layout length {}", row.len(), layout.total_len())));
    }
    let sum: f64 = row.iter().map(|&x| x as f64).sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&x| !(x >= 0.0)) {
        return Err(contract(format!("attention row is not a probability vector (sum {sum})")));
    }
    Ok(())
}

fn ratio(row: &[f32], context: usize) -> f64 {
    let n = row.len();
    let ac = row[..context].iter().map(|&x| x as f64).sum::<f64>() / context as f64;
    let ag = row[context..].iter().map(|&x| x as f64).sum::<f64>() / (n - context) as f64;
    if ac + ag == 0.0 {
        0.5
    } else {
        ac / (ac + ag)
    }
}

/// `A_c / (A_c + A_g)` for a row with at least one generated position.
pub fn lookback_ratio(row: &[f32], layout: &SequenceLayout) -> Result<f64> {
    check_row(row, layout)?;
    if layout.generated_len == 0 {
        return Err(contract("lookback ratio is undefined without generated positions"));
    }
    Ok(ratio(row, layout.context_len))
}

/// Lookback ratio of the row computed at any decode step.
///
/// When nothing has been generated yet, the row's final entry (the querying
/// token itself) stands in for the generated part and the rest for the
/// context. A single-entry row carries no contrast and maps to 0.5.
pub fn step_lookback_ratio(row: &[f32], layout: &SequenceLayout) -> Result<f64> {
    if layout.generated_len > 0 {
        return lookback_ratio(row, layout);
    }
    check_row(row, layout)?;
    if row.len() == 1 {
        return Ok(0.5);
    }
    Ok(ratio(row, row.len() - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookbackVector {
    pub step: usize,
    pub values: Vec<f64>,
}

/// One lookback ratio per head of `trace`, layer-major.
pub fn lookback_vector(trace: &AttentionTrace, layout: &SequenceLayout) -> Result<LookbackVector> {
    let heads = trace.num_layers * trace.num_heads;
    if trace.weights.len() != heads * trace.len || trace.len == 0 {
        return Err(contract("trace does not cover every head"));
    }
    let mut values = Vec::with_capacity(heads);
    for l in 0..trace.num_layers {
        for h in 0..trace.num_heads {
            values.push(step_lookback_ratio(trace.weight_row(l, h), layout)?);
        }
    }
    Ok(LookbackVector { step: trace.step, values })
}

/// Mean lookback vector over a span of generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFeature {
    pub chunk_index: usize,
    /// Half-open span `[start, end)` over generated-token indices.
    pub span: (usize, usize),
    pub mean: Vec<f64>,
}

pub fn chunk_feature(chunk_index: usize, span: (usize, usize), vectors: &[LookbackVector]) -> Result<ChunkFeature> {
    let first = vectors.first().ok_or_else(|| contract("empty chunk"))?;
    let width = first.values.len();
    if vectors.iter().any(|v| v.values.len() != width) {
        return Err(contract("lookback vectors differ in length"));
    }
    let mut mean = vec![0.0; width];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(ChunkFeature { chunk_index, span, mean })
}

/// Header of the feature dump: `run_id,chunk,start,end,l0h0,l0h1,...`.
pub fn csv_header(num_layers: usize, num_heads: usize) -> String {
    let mut cols = vec!["run_id".to_string(), "chunk".into(), "start".into(), "end".into()];
    for l in 0..num_layers {
        for h in 0..num_heads {
            cols.push(format!("l{l}h{h}"));
        }
    }
    cols.join(",")
}

pub fn write_csv_row(mut w: impl Write, run_id: &str, f: &ChunkFeature) -> std::io::Result<()> {
    write!(w, "{run_id},{},{},{}", f.chunk_index, f.span.0, f.span.1)?;
    for x in &f.mean {
        write!(w, ",{x}")?;
    }
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lay(c: usize, g: usize) -> SequenceLayout {
        SequenceLayout::new(c, g).unwrap()
    }

    #[test]
    fn hand_example() {
        let r = lookback_ratio(&[0.4, 0.2, 0.3, 0.1], &lay(2, 2)).unwrap();
        assert_abs_diff_eq!(r, 0.6, epsilon = 1e-7);
    }

    #[test]
    fn uniform_and_context_only_rows() {
        for (c, g) in [(1, 1), (3, 2), (2, 5)] {
            let n = c + g;
            let row = vec![1.0 / n as f32; n];
            assert_abs_diff_eq!(lookback_ratio(&row, &lay(c, g)).unwrap(), 0.5, epsilon = 1e-6);
            let mut ctx = vec![0.0f32; n];
            ctx[..c].fill(1.0 / c as f32);
            assert_abs_diff_eq!(lookback_ratio(&ctx, &lay(c, g)).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn undefined_and_malformed_rows() {
        assert!(lookback_ratio(&[0.5, 0.5], &lay(2, 0)).is_err());
        assert!(lookback_ratio(&[0.5, 0.6], &lay(1, 1)).is_err());
        assert!(lookback_ratio(&[0.5, 0.5, 0.0], &lay(1, 1)).is_err());
    }

    #[test]
    fn first_step_uses_own_position() {
        let r = step_lookback_ratio(&[0.3, 0.3, 0.4], &lay(3, 0)).unwrap();
        assert_abs_diff_eq!(r, 0.3 / 0.7, epsilon = 1e-6);
        assert_eq!(step_lookback_ratio(&[1.0], &lay(1, 0)).unwrap(), 0.5);
        let r = step_lookback_ratio(&[0.4, 0.2, 0.3, 0.1], &lay(2, 2)).unwrap();
        assert_abs_diff_eq!(r, 0.6, epsilon = 1e-7);
    }

    #[test]
    fn vector_order_is_layer_major() {
        assert_eq!(feature_index(2, 1, 1), 3);
        let trace = AttentionTrace {
            step: 3,
            num_layers: 2,
            num_heads: 2,
            len: 2,
            scores: vec![0.0; 8],
            weights: vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75],
        };
        let v = lookback_vector(&trace, &lay(1, 1)).unwrap();
        assert_eq!(v.values, vec![1.0, 0.5, 0.0, 0.25]);
        assert_eq!(v.step, 3);
    }

    #[test]
    fn chunk_means() {
        let a = LookbackVector { step: 0, values: vec![0.2, 0.8] };
        let b = LookbackVector { step: 1, values: vec![0.4, 0.6] };
        let f = chunk_feature(0, (0, 2), &[a.clone(), b]).unwrap();
        assert_abs_diff_eq!(f.mean[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(f.mean[1], 0.7, epsilon = 1e-12);
        assert_eq!(chunk_feature(0, (0, 1), &[a.clone()]).unwrap().mean, a.values);
        assert!(chunk_feature(0, (0, 0), &[]).is_err());
        let c = LookbackVector { step: 2, values: vec![0.1] };
        assert!(chunk_feature(0, (0, 2), &[a, c]).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(csv_header(1, 2), "run_id,chunk,start,end,l0h0,l0h1");
        let mut buf = Vec::new();
        write_csv_row(&mut buf, "r1", &ChunkFeature { chunk_index: 2, span: (16, 24), mean: vec![0.5, 0.25] }).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "r1,2,16,24,0.5,0.25\n");
        assert_eq!(feature_order_tag(4, 4), "layer-major/L4/H4");
    }
}
