//! Two-sample and sequence statistics used for evaluation.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{normal, stream_rng};
use crate::tensor::Tensor2;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_within(x: &Tensor2) -> f64 {
    let n = x.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += dist(x.row(i), x.row(j));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Unbiased (U-statistic) energy distance between the row distributions of
/// `x` and `y`: `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖`.
pub fn energy_distance(x: &Tensor2, y: &Tensor2) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::Dim {
            expected: x.cols(),
            got: y.cols(),
        });
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Data(
            "energy distance needs at least two samples per side".into(),
        ));
    }
    let mut cross = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            cross += dist(x.row(i), y.row(j));
        }
    }
    cross /= (x.rows() * y.rows()) as f64;
    Ok(2.0 * cross - mean_within(x) - mean_within(y))
}

/// Quantile of sorted data by linear interpolation.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sliced 2-Wasserstein distance over `projections` seeded random directions.
pub fn sliced_wasserstein(x: &Tensor2, y: &Tensor2, projections: usize, seed: u64) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::Dim {
            expected: x.cols(),
            got: y.cols(),
        });
    }
    if x.rows() == 0 || y.rows() == 0 || projections == 0 {
        return Err(Error::Data(
            "sliced wasserstein needs samples and projections".into(),
        ));
    }
    let mut rng = stream_rng(seed, 0x5115);
    let grid = x.rows().max(y.rows());
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..x.cols()).map(|_| normal(&mut rng)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        let proj = |t: &Tensor2| {
            let mut p: Vec<f64> = t.row_iter().map(|r| crate::tensor::dot(r, &dir)).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (px, py) = (proj(x), proj(y));
        let mut w = 0.0;
        for k in 0..grid {
            let q = if grid == 1 {
                0.5
            } else {
                k as f64 / (grid - 1) as f64
            };
            w += (quantile(&px, q) - quantile(&py, q)).powi(2);
        }
        total += w / grid as f64;
    }
    Ok((total / projections as f64).sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Data("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Pearson correlation of every column pair, averaged over columns.
pub fn mean_column_correlation(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    a.ensure_same_shape(b, "column correlation")?;
    let mut total = 0.0;
    for c in 0..a.cols() {
        let ca: Vec<f64> = (0..a.rows()).map(|r| a.get(r, c)).collect();
        let cb: Vec<f64> = (0..b.rows()).map(|r| b.get(r, c)).collect();
        total += pearson(&ca, &cb)?;
    }
    Ok(total / a.cols() as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Frame deltas of a windowed sequence, split into those crossing a window
/// boundary (`l % window == 0`, `l > 0`) and those inside a window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDeltas {
    pub boundary: Vec<f64>,
    pub intra: Vec<f64>,
}

impl FrameDeltas {
    pub fn of(seq: &Tensor2, window: usize) -> FrameDeltas {
        let mut out = FrameDeltas::default();
        for l in 1..seq.rows() {
            let d = dist(seq.row(l), seq.row(l - 1));
            if l % window == 0 {
                out.boundary.push(d);
            } else {
                out.intra.push(d);
            }
        }
        out
    }

    pub fn extend(&mut self, other: FrameDeltas) {
        self.boundary.extend(other.boundary);
        self.intra.extend(other.intra);
    }

    /// Mean boundary jump over median intra-window delta.
    pub fn jump_ratio(&self) -> f64 {
        if self.boundary.is_empty() {
            return f64::NAN;
        }
        let mean = self.boundary.iter().sum::<f64>() / self.boundary.len() as f64;
        mean / median(&self.intra)
    }
}

/// Random subset of at most `n` rows, for bounding quadratic statistics.
pub fn subsample_rows(x: &Tensor2, n: usize, seed: u64) -> Tensor2 {
    if x.rows() <= n {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.shuffle(&mut stream_rng(seed, 0x5b));
    let rows: Vec<Vec<f64>> = idx[..n].iter().map(|&i| x.row(i).to_vec()).collect();
    Tensor2::from_rows(&rows).expect("uniform rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_matrix;

    #[test]
    fn energy_distance_loop_oracle() {
        let mut r = stream_rng(1, 0);
        let x = normal_matrix(&mut r, 6, 2);
        let y = normal_matrix(&mut r, 5, 2).map(|v| v + 1.0);
        let d = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let mut xy = 0.0;
        for i in 0..6 {
            for j in 0..5 {
                xy += d(x.row(i), y.row(j));
            }
        }
        let mut xx = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    xx += d(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    yy += d(y.row(i), y.row(j));
                }
            }
        }
        let want = 2.0 * xy / 30.0 - xx / 30.0 - yy / 20.0;
        assert!((energy_distance(&x, &y).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn energy_distance_is_near_zero_for_same_law_and_positive_for_shift() {
        let mut r = stream_rng(2, 0);
        let a = normal_matrix(&mut r, 300, 3);
        let b = normal_matrix(&mut r, 300, 3);
        let c = normal_matrix(&mut r, 300, 3).map(|v| v + 0.5);
        let same = energy_distance(&a, &b).unwrap();
        let diff = energy_distance(&a, &c).unwrap();
        assert!(same.abs() < 0.05, "{same}");
        assert!(diff > 5.0 * same.abs().max(0.01), "{diff}");
        assert!(energy_distance(&a, &Tensor2::zeros(3, 2)).is_err());
    }

    #[test]
    fn sliced_wasserstein_shift() {
        let mut r = stream_rng(3, 0);
        let a = normal_matrix(&mut r, 400, 1);
        let shifted = a.map(|v| v + 2.0);
        // in one dimension every projection is ±identity, so W2 is the shift
        assert!((sliced_wasserstein(&a, &shifted, 4, 0).unwrap() - 2.0).abs() <= 1e-9);
        assert_eq!(sliced_wasserstein(&a, &a, 8, 1).unwrap(), 0.0);
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() <= 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn frame_deltas_split() {
        let seq = Tensor2::from_vec(5, 1, vec![0.0, 1.0, 2.0, 10.0, 11.0]).unwrap();
        let d = FrameDeltas::of(&seq, 3);
        assert_eq!(d.boundary, vec![8.0]);
        assert_eq!(d.intra, vec![1.0, 1.0, 1.0]);
        assert_eq!(d.jump_ratio(), 8.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn subsample_bounds_rows() {
        let x = Tensor2::from_vec(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let s = subsample_rows(&x, 4, 1);
        assert_eq!(s.rows(), 4);
        assert_eq!(subsample_rows(&x, 20, 1), x);
    }
}
