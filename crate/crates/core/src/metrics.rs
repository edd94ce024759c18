//! Depth-completion metrics and dataset evaluation.
//!
//! Dataset reports pool pixels across frames: every valid pixel of every frame
//! contributes equally, regardless of how many valid pixels its frame has.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{sample_inputs, Frame, SamplerConfig};
use crate::error::{Error, Result};
use crate::layers::ObservationMask;
use crate::rng::{derive_seed, hash_str};
use crate::tensor::Tensor;

pub const DELTA_BASE: f64 = 1.25;

fn check(op: &'static str, pred: &Tensor, gt: &Tensor, valid: &ObservationMask) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op,
            dim: "pixels",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    valid.check_aligned(op, gt)?;
    if valid.count() == 0 {
        return Err(Error::EmptyValidSet { op });
    }
    Ok(())
}

fn valid_pairs<'a>(
    pred: &'a Tensor,
    gt: &'a Tensor,
    valid: &'a ObservationMask,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, _)| valid.is_set(*i))
        .map(|(_, (p, g))| (*p, *g))
}

fn check_positive(gt: &Tensor, valid: &ObservationMask) -> Result<()> {
    for (i, &g) in gt.data().iter().enumerate() {
        if valid.is_set(i) && g <= 0.0 {
            return Err(Error::NonPositiveGroundTruth { index: i, value: g });
        }
    }
    Ok(())
}

pub fn rmse(pred: &Tensor, gt: &Tensor, valid: &ObservationMask) -> Result<f64> {
    check("rmse", pred, gt, valid)?;
    let mut acc = Accumulator::default();
    valid_pairs(pred, gt, valid).for_each(|(p, g)| acc.push(p, g));
    Ok(acc.rmse())
}

/// Mean absolute relative error.
pub fn rel(pred: &Tensor, gt: &Tensor, valid: &ObservationMask) -> Result<f64> {
    check("rel", pred, gt, valid)?;
    check_positive(gt, valid)?;
    let mut acc = Accumulator::default();
    valid_pairs(pred, gt, valid).for_each(|(p, g)| acc.push(p, g));
    Ok(acc.rel())
}

/// Percentage of valid pixels with max(pred/gt, gt/pred) <= 1.25^j.
/// Non-positive predictions count as failures.
pub fn delta(pred: &Tensor, gt: &Tensor, valid: &ObservationMask, j: u32) -> Result<f64> {
    if !(1..=3).contains(&j) {
        return Err(Error::InvalidArgument {
            op: "delta",
            msg: format!("j = {j} outside 1..=3"),
        });
    }
    check("delta", pred, gt, valid)?;
    check_positive(gt, valid)?;
    let mut acc = Accumulator::default();
    valid_pairs(pred, gt, valid).for_each(|(p, g)| acc.push(p, g));
    Ok(acc.delta(j))
}

fn delta_hit(p: f64, g: f64, j: u32) -> bool {
    p > 0.0 && (p / g).max(g / p) <= DELTA_BASE.powi(j as i32)
}

/// Running sums over pixels, in push order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Accumulator {
    sq: f64,
    rel: f64,
    hits: [usize; 3],
    n: usize,
}

impl Accumulator {
    pub fn push(&mut self, pred: f64, gt: f64) {
        let d = pred - gt;
        self.sq += d * d;
        self.rel += d.abs() / gt;
        for j in 1..=3 {
            if delta_hit(pred, gt, j) {
                self.hits[j as usize - 1] += 1;
            }
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.sq += other.sq;
        self.rel += other.rel;
        for j in 0..3 {
            self.hits[j] += other.hits[j];
        }
        self.n += other.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn rmse(&self) -> f64 {
        (self.sq / self.n as f64).sqrt()
    }

    pub fn rel(&self) -> f64 {
        self.rel / self.n as f64
    }

    pub fn delta(&self, j: u32) -> f64 {
        100.0 * self.hits[j as usize - 1] as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
    pub frame_count: usize,
}

impl MetricsReport {
    fn from_acc(acc: &Accumulator, frames: usize) -> Self {
        Self {
            rmse: acc.rmse(),
            rel: acc.rel(),
            delta1: acc.delta(1),
            delta2: acc.delta(2),
            delta3: acc.delta(3),
            pixel_count: acc.count(),
            frame_count: frames,
        }
    }
}

/// One line of the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame_id: String,
    pub rmse: f64,
    pub rel: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<FrameRow>,
}

pub const POOLED_ID: &str = "pooled";

impl Evaluation {
    /// Frame rows followed by one pooled row, one JSON object per line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let pooled = FrameRow {
            frame_id: POOLED_ID.into(),
            rmse: self.report.rmse,
            rel: self.report.rel,
            d1: self.report.delta1,
            d2: self.report.delta2,
            d3: self.report.delta3,
            n_pixels: self.report.pixel_count,
        };
        for row in self.rows.iter().chain(std::iter::once(&pooled)) {
            out.push_str(&serde_json::to_string(row).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_records(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut rows: Vec<FrameRow> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let pooled = rows
            .pop()
            .filter(|r| r.frame_id == POOLED_ID)
            .ok_or_else(|| <serde_json::Error as serde::de::Error>::custom("missing final pooled row"))?;
        Ok(Self {
            report: MetricsReport {
                rmse: pooled.rmse,
                rel: pooled.rel,
                delta1: pooled.d1,
                delta2: pooled.d2,
                delta3: pooled.d3,
                pixel_count: pooled.n_pixels,
                frame_count: rows.len(),
            },
            rows,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("# metrics pooled over all valid pixels of all frames\n");
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>8} {:>8} {:>8} {:>9}",
            "frame", "rmse", "rel", "d1%", "d2%", "d3%", "pixels"
        );
        let pooled = FrameRow {
            frame_id: POOLED_ID.into(),
            rmse: self.report.rmse,
            rel: self.report.rel,
            d1: self.report.delta1,
            d2: self.report.delta2,
            d3: self.report.delta3,
            n_pixels: self.report.pixel_count,
        };
        for r in self.rows.iter().chain(std::iter::once(&pooled)) {
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>10.4} {:>8.2} {:>8.2} {:>8.2} {:>9}",
                r.frame_id, r.rmse, r.rel, r.d1, r.d2, r.d3, r.n_pixels
            );
        }
        out
    }
}

/// Per-frame sampling seed, fixed by the evaluation seed and the frame id.
pub fn frame_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, hash_str(id))
}

/// Samples each frame with its own fixed seed, runs `forward` and pools the
/// metrics over the ground-truth pixels the sampler leaves valid.
pub fn evaluate<F>(frames: &[Frame], sampler: &SamplerConfig, mut forward: F) -> Result<Evaluation>
where
    F: FnMut(&Frame, &Tensor, &ObservationMask) -> Result<Tensor>,
{
    if frames.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            msg: "no frames".into(),
        });
    }
    let mut total = Accumulator::default();
    let mut rows = Vec::with_capacity(frames.len());
    for frame in frames {
        let cfg = SamplerConfig {
            seed: frame_seed(sampler.seed, &frame.id),
            ..*sampler
        };
        let (frame, sparse, mask) = sample_inputs(frame, &cfg)?;
        let pred = forward(&frame, &sparse, &mask)?;
        check("evaluate", &pred, &frame.depth_gt, &frame.valid_gt)?;
        check_positive(&frame.depth_gt, &frame.valid_gt)?;
        let mut acc = Accumulator::default();
        valid_pairs(&pred, &frame.depth_gt, &frame.valid_gt).for_each(|(p, g)| acc.push(p, g));
        rows.push(FrameRow {
            frame_id: frame.id.clone(),
            rmse: acc.rmse(),
            rel: acc.rel(),
            d1: acc.delta(1),
            d2: acc.delta(2),
            d3: acc.delta(3),
            n_pixels: acc.count(),
        });
        total.merge(&acc);
    }
    Ok(Evaluation {
        report: MetricsReport::from_acc(&total, frames.len()),
        rows,
    })
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn all(n: usize) -> ObservationMask {
        ObservationMask::ones(1, 1, n)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(rmse(&t(&[2., 2.]), &t(&[1., 3.]), &all(2)).unwrap(), 1.0);
        let r = rel(&t(&[1.1, 1.8, 5.0]), &t(&[1., 2., 4.]), &all(3)).unwrap();
        assert!((r - 0.15).abs() < 1e-15, "{r}");
        let (p, g) = (t(&[1.1, 1.8, 5.1]), t(&[1., 2., 4.]));
        assert_eq!(delta(&p, &g, &all(3), 1).unwrap(), 200.0 / 3.0);
        assert_eq!(delta(&p, &g, &all(3), 2).unwrap(), 100.0);
    }

    #[test]
    fn delta_boundary_and_failures() {
        assert_eq!(delta(&t(&[1.25]), &t(&[1.0]), &all(1), 1).unwrap(), 100.0);
        assert_eq!(delta(&t(&[0.0, 1.0]), &t(&[1.0, 1.0]), &all(2), 3).unwrap(), 50.0);
        assert_eq!(delta(&t(&[-2.0]), &t(&[2.0]), &all(1), 3).unwrap(), 0.0);
        assert!(delta(&t(&[1.0]), &t(&[1.0]), &all(1), 4).is_err());
    }

    #[test]
    fn errors() {
        let none = ObservationMask::zeros(1, 1, 2);
        assert_eq!(
            rmse(&t(&[1., 1.]), &t(&[1., 1.]), &none),
            Err(Error::EmptyValidSet { op: "rmse" })
        );
        assert!(matches!(
            rel(&t(&[1., 1.]), &t(&[1., 0.]), &all(2)),
            Err(Error::NonPositiveGroundTruth { index: 1, .. })
        ));
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let valid = ObservationMask::from_bools(1, 1, 3, &[true, false, true]).unwrap();
        let a = rmse(&t(&[1., 100., 3.]), &t(&[1., 0., 2.]), &valid).unwrap();
        let b = rmse(&t(&[1., -7., 3.]), &t(&[1., 5., 2.]), &valid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rel_is_scale_invariant() {
        let (p, g) = (t(&[1.1, 1.8, 5.0]), t(&[1., 2., 4.]));
        let r1 = rel(&p, &g, &all(3)).unwrap();
        let r2 = rel(&p.map(|v| v * 3.5), &g.map(|v| v * 3.5), &all(3)).unwrap();
        assert!((r1 - r2).abs() < 1e-15);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1., 2., 3., 4.], &[10., 8., 5., 1.]), -1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[1., 5., 9.]), 1.0);
        assert!((spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip() {
        let ev = Evaluation {
            report: MetricsReport {
                rmse: 0.5,
                rel: 0.1,
                delta1: 90.0,
                delta2: 95.0,
                delta3: 99.0,
                pixel_count: 10,
                frame_count: 1,
            },
            rows: vec![FrameRow {
                frame_id: "a".into(),
                rmse: 0.5,
                rel: 0.1,
                d1: 90.0,
                d2: 95.0,
                d3: 99.0,
                n_pixels: 10,
            }],
        };
        let text = ev.to_records();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(Evaluation::from_records(&text).unwrap(), ev);
        assert!(ev.to_table().contains("pooled"));
    }
}
