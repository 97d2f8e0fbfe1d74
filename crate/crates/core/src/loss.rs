//! Heatmap losses.
//!
//! The weighted loss gives the landmark disk and the background equal say:
//!
//! ```text
//! L = 1/n * sum_i [ 1/2 * |I_i . (H_i - G_i)|_1 / |I_i|_1
//!                 + 1/2 * |(1 - I_i) . (H_i - G_i)|_1 / |1 - I_i|_1 ]
//! ```
//!
//! Both terms are mean absolute errors over their region, so for heatmaps in
//! `[0, 1]` the loss is in `[0, 1]` and reads as an average per-pixel error.
//! The plain baseline `1/n * sum_i |H_i - G_i|_1 / G^2` is dominated by the
//! background and barely penalises an all-black prediction.

use crate::autodiff::{Graph, Var};
use crate::codec::{HeatmapStack, IndicatorMask};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Bracketed per-landmark terms; `value` is their mean.
    pub per_landmark: Vec<f64>,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Per-map `(|I|, |1 - I|)`, rejecting masks that are all ones or all zeros.
fn normalizers<T: Scalar>(masks: &[T], plane: usize) -> Result<Vec<(f64, f64)>> {
    masks
        .chunks_exact(plane)
        .enumerate()
        .map(|(index, m)| {
            let inside: f64 = m.iter().map(|v| v.to_f64().unwrap()).sum();
            let outside = plane as f64 - inside;
            if inside <= 0.0 {
                Err(Error::DegenerateIndicator {
                    index,
                    reason: "mask is empty",
                })
            } else if outside <= 0.0 {
                Err(Error::DegenerateIndicator {
                    index,
                    reason: "mask covers the whole map",
                })
            } else {
                Ok((inside, outside))
            }
        })
        .collect()
}

pub fn weighted_loss(pred: &HeatmapStack, gt: &HeatmapStack, ind: &IndicatorMask) -> Result<LossValue> {
    check_same("weighted_loss", gt.maps().shape(), pred.maps().shape())?;
    check_same("weighted_loss", gt.maps().shape(), ind.masks().shape())?;
    let plane = gt.grid_size() * gt.grid_size();
    let norms = normalizers(ind.masks().data(), plane)?;
    let per_landmark: Vec<f64> = (0..gt.len())
        .map(|i| {
            let (mut inside, mut outside) = (0.0f64, 0.0f64);
            for ((&h, &g), &m) in pred.map(i).iter().zip(gt.map(i)).zip(ind.mask(i)) {
                let e = (h as f64 - g as f64).abs();
                inside += m as f64 * e;
                outside += (1.0 - m as f64) * e;
            }
            let (ni, no) = norms[i];
            0.5 * inside / ni + 0.5 * outside / no
        })
        .collect();
    Ok(LossValue {
        value: per_landmark.iter().sum::<f64>() / per_landmark.len() as f64,
        per_landmark,
    })
}

pub fn plain_l1_loss(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64> {
    check_same("plain_l1_loss", gt.maps().shape(), pred.maps().shape())?;
    let g = gt.grid_size() as f64;
    let total: f64 = pred
        .maps()
        .data()
        .iter()
        .zip(gt.maps().data())
        .map(|(&h, &t)| (h as f64 - t as f64).abs())
        .sum();
    Ok(total / (g * g) / gt.len() as f64)
}

/// Differentiable loss nodes.
pub struct GraphLoss {
    /// Scalar: mean over batch and landmarks.
    pub total: Var,
    /// Per-landmark terms, shaped like the leading axes of the prediction.
    pub per_landmark: Var,
}

fn spatial_axes(shape: &[usize]) -> Result<[usize; 2]> {
    match shape.len() {
        3 | 4 if shape[shape.len() - 1] == shape[shape.len() - 2] => Ok([shape.len() - 2, shape.len() - 1]),
        _ => Err(Error::Dimension {
            op: "loss",
            reason: format!("expected (B x) n x G x G heatmaps, got {shape:?}"),
        }),
    }
}

/// Weighted loss recorded on `graph`. `pred` is `n x G x G` or
/// `B x n x G x G`; `gt` and `ind` must match it. Batches are averaged
/// uniformly over samples.
pub fn weighted_loss_graph<T: Scalar>(
    graph: &mut Graph<T>,
    pred: Var,
    gt: &Tensor<T>,
    ind: &Tensor<T>,
) -> Result<GraphLoss> {
    let shape = graph.value(pred).shape().to_vec();
    check_same("weighted_loss", &shape, gt.shape())?;
    check_same("weighted_loss", &shape, ind.shape())?;
    let axes = spatial_axes(&shape)?;
    let plane = shape[axes[0]] * shape[axes[1]];
    let norms = normalizers(ind.data(), plane)?;
    let lead: Vec<usize> = shape[..axes[0]].to_vec();
    let half = |d: f64| T::from_f64_lossy(0.5 / d);
    let inv_in = Tensor::new(&lead, norms.iter().map(|n| half(n.0)).collect())?;
    let inv_out = Tensor::new(&lead, norms.iter().map(|n| half(n.1)).collect())?;

    let gt = graph.constant(gt.clone());
    let inside_mask = graph.constant(ind.clone());
    let outside_mask = graph.constant(ind.map(|v| T::one() - v));
    let inv_in = graph.constant(inv_in);
    let inv_out = graph.constant(inv_out);

    let diff = graph.sub(pred, gt)?;
    let err = graph.abs(diff);
    let err_in = graph.mul(err, inside_mask)?;
    let err_out = graph.mul(err, outside_mask)?;
    let sum_in = graph.sum_axes(err_in, &axes)?;
    let sum_out = graph.sum_axes(err_out, &axes)?;
    let term_in = graph.mul(sum_in, inv_in)?;
    let term_out = graph.mul(sum_out, inv_out)?;
    let per_landmark = graph.add(term_in, term_out)?;
    let total = graph.mean_all(per_landmark)?;
    Ok(GraphLoss { total, per_landmark })
}

pub fn plain_l1_loss_graph<T: Scalar>(graph: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    let shape = graph.value(pred).shape().to_vec();
    check_same("plain_l1_loss", &shape, gt.shape())?;
    spatial_axes(&shape)?;
    let gt = graph.constant(gt.clone());
    let diff = graph.sub(pred, gt)?;
    let err = graph.abs(diff);
    graph.mean_all(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, indicator, CodecConfig, LandmarkSet, Point};

    fn cone(x: i64, y: i64, grid: usize) -> HeatmapStack {
        let l = LandmarkSet::new(vec![Point::new(x, y)], grid).unwrap();
        encode(&l, &CodecConfig::new(10.0, grid).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let gt = cone(40, 50, 128);
        let ind = indicator(&gt);
        assert_eq!(weighted_loss(&gt, &gt, &ind).unwrap().value, 0.0);
        assert_eq!(plain_l1_loss(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn maximal_gap_plain() {
        let ones = HeatmapStack::new(Tensor::ones(&[2, 8, 8])).unwrap();
        let zeros = HeatmapStack::new(Tensor::zeros(&[2, 8, 8])).unwrap();
        assert_eq!(plain_l1_loss(&ones, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_indicators_are_errors() {
        let gt = cone(5, 5, 16);
        let zeros = HeatmapStack::new(Tensor::zeros(&[1, 16, 16])).unwrap();
        let err = weighted_loss(&zeros, &gt, &indicator(&zeros)).unwrap_err();
        assert!(matches!(err, Error::DegenerateIndicator { index: 0, .. }));
        let full = HeatmapStack::new(Tensor::ones(&[1, 16, 16])).unwrap();
        assert!(weighted_loss(&zeros, &full, &indicator(&full)).is_err());
    }

    #[test]
    fn graph_matches_direct_route() {
        let gt = cone(7, 9, 32);
        let ind = indicator(&gt);
        let pred = HeatmapStack::new(Tensor::from_fn(&[1, 32, 32], |i| ((i * 37) % 101) as f32 / 100.0)).unwrap();
        let direct = weighted_loss(&pred, &gt, &ind).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.param(pred.maps().cast());
        let l = weighted_loss_graph(&mut g, p, &gt.maps().cast(), &ind.masks().cast()).unwrap();
        let v = g.value(l.total).item().unwrap();
        assert!((v - direct.value).abs() < 1e-6);
        assert!((g.value(l.per_landmark).data()[0] - direct.per_landmark[0]).abs() < 1e-6);
        let plain = plain_l1_loss_graph(&mut g, p, &gt.maps().cast()).unwrap();
        let pv = g.value(plain).item().unwrap();
        assert!((pv - plain_l1_loss(&pred, &gt).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let gt = cone(7, 9, 32);
        let other = HeatmapStack::new(Tensor::zeros(&[2, 32, 32])).unwrap();
        assert!(weighted_loss(&other, &gt, &indicator(&gt)).is_err());
        assert!(plain_l1_loss(&other, &gt).is_err());
    }
}
