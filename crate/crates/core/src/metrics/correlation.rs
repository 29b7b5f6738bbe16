//! Pearson, Spearman and Kendall (tau-b) correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pcc: f64,
    pub srcc: f64,
    pub kcc: f64,
    pub n_samples: usize,
}

impl CorrelationReport {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(CorrelationReport {
            pcc: pearson(x, y)?,
            srcc: spearman(x, y)?,
            kcc: kendall(x, y)?,
            n_samples: x.len(),
        })
    }
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("correlation of {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Input(format!("correlation needs at least 3 samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation input contains non-finite values".into()));
    }
    Ok(())
}

/// Sample (Pearson) correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("pearson of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One-based ranks with ties replaced by their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // Positions i..j (zero-based) share the mean of ranks i+1..=j.
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y)).map_err(|e| match e {
        Error::UndefinedCorrelation(_) => Error::UndefinedCorrelation("spearman of a constant sequence".into()),
        e => e,
    })
}

/// Kendall tau-b in `O(n log n)` (Knight's merge-sort method).
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * (t.saturating_sub(1)) / 2;
    let total = pairs(n as u64);
    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            ties_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_y = 0u64;
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties_y += pairs(run);
            run = 1;
        }
    }
    ties_y += pairs(run);

    let denom = ((total - ties_x) as f64) * ((total - ties_y) as f64);
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("kendall of a constant sequence".into()));
    }
    let numer = total as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok((numer / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Four-parameter logistic `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`, the usual
/// monotone mapping applied before PCC in some IQA protocols. Not used by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic4 {
    pub b: [f64; 4],
}

impl Logistic4 {
    pub fn apply(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4.abs().max(1e-12)).exp())
    }

    /// Least-squares fit by Nelder-Mead from a data-driven starting point.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check(x, y)?;
        let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let xm = x.iter().sum::<f64>() / x.len() as f64;
        let xs = (x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / x.len() as f64).sqrt().max(1e-6);
        let rising = pearson(x, y).unwrap_or(1.0) >= 0.0;
        let (hi, lo) = if rising { (ymax, ymin) } else { (ymin, ymax) };
        let sse = |b: &[f64; 4]| -> f64 {
            let f = Logistic4 { b: *b };
            x.iter().zip(y).map(|(&a, &t)| (f.apply(a) - t).powi(2)).sum()
        };
        let best = nelder_mead(sse, [hi, lo, xm, xs], 4000);
        Ok(Logistic4 { b: best })
    }
}

fn nelder_mead(f: impl Fn(&[f64; 4]) -> f64, start: [f64; 4], iters: usize) -> [f64; 4] {
    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(5);
    simplex.push((start, f(&start)));
    for i in 0..4 {
        let mut p = start;
        p[i] += if p[i].abs() > 1e-9 { 0.1 * p[i].abs() } else { 0.1 };
        simplex.push((p, f(&p)));
    }
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[4];
        let mut centroid = [0.0; 4];
        for (p, _) in &simplex[..4] {
            for k in 0..4 {
                centroid[k] += p[k] / 4.0;
            }
        }
        let along = |t: f64| -> [f64; 4] {
            let mut q = [0.0; 4];
            for k in 0..4 {
                q[k] = centroid[k] + t * (worst.0[k] - centroid[k]);
            }
            q
        };
        let r = along(-1.0);
        let fr = f(&r);
        if fr < simplex[0].1 {
            let e = along(-2.0);
            let fe = f(&e);
            simplex[4] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[3].1 {
            simplex[4] = (r, fr);
        } else {
            let c = along(0.5);
            let fc = f(&c);
            if fc < worst.1 {
                simplex[4] = (c, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    for k in 0..4 {
                        s.0[k] = best[k] + 0.5 * (s.0[k] - best[k]);
                    }
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_increasing_is_perfect() {
        let x = [0.3, -1.0, 2.5, 7.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &y).unwrap(), 1.0);
        assert_eq!(kendall(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn cubic_is_rank_perfect_but_not_linear() {
        let x = [-2.0, -1.0, 0.0, 0.5, 1.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3)).collect();
        assert_eq!(spearman(&x, &y).unwrap(), 1.0);
        assert!(pearson(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn kendall_small_case() {
        let k = kendall(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((k - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_and_invalid_inputs() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(kendall(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Input(_))));
        assert!(matches!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn logistic_fit_recovers_sigmoid() {
        let truth = Logistic4 { b: [5.0, 1.0, 0.5, 0.1] };
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| truth.apply(v)).collect();
        let fit = Logistic4::fit(&x, &y).unwrap();
        let err: f64 = x.iter().zip(&y).map(|(&a, &b)| (fit.apply(a) - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "max residual {err}");
    }
}
