//! Two-group comparison: Shapiro-Wilk (Royston's approximation) on each group and a
//! median-centred Levene test gate a pooled-variance t-test; anything else goes to a
//! Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("at most 5000 samples supported, got {0}")]
    TooMany(usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("all samples are equal")]
    Constant,
    #[error("alpha must lie in (0, 1)")]
    BadAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestUsed {
    TTest,
    MannWhitney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub test_used: TestUsed,
    /// t for the t-test, U of the first group for Mann-Whitney.
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub shapiro_a: Option<TestResult>,
    pub shapiro_b: Option<TestResult>,
    pub levene: Option<TestResult>,
    /// Why the gate routed where it did, when not obvious from the results above.
    pub note: Option<String>,
}

fn check(x: &[f64], need: usize) -> Result<(), StatsError> {
    if x.len() < need {
        return Err(StatsError::TooFew { need, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median(x: &[f64]) -> f64 {
    let v = sorted(x);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Shapiro-Wilk W and its p-value, 3 <= n <= 5000.
pub fn shapiro_wilk(x: &[f64]) -> Result<TestResult, StatsError> {
    check(x, 3)?;
    let n = x.len();
    if n > 5000 {
        return Err(StatsError::TooMany(n));
    }
    let x = sorted(x);
    let range = x[n - 1] - x[0];
    if !(range > 0.0) {
        return Err(StatsError::Constant);
    }
    let nn2 = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let norm = std_normal();
        let m: Vec<f64> = (1..=nn2).map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25))).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }
    // W as the squared correlation of the data with the antisymmetric coefficients
    let xm = mean(&x);
    let ss: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ss).min(1.0);
    let w1 = 1.0 - w;

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else if w1 <= 0.0 {
        1.0
    } else {
        let y = w1.ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                return Ok(TestResult { statistic: w, p_value: 1e-99 });
            }
            let m = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an);
            let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp();
            (-(gamma - y).ln(), m, s)
        } else {
            let xx = an.ln();
            let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx);
            let s = poly(&[-0.4803, -0.082676, 0.0030302], xx).exp();
            (y, m, s)
        };
        std_normal().sf((y - m) / s)
    };
    Ok(TestResult { statistic: w, p_value: p })
}

/// Levene's test for equal variances using deviations from each group's median
/// (the Brown-Forsythe form).
pub fn levene(groups: &[&[f64]]) -> Result<TestResult, StatsError> {
    let k = groups.len();
    if k < 2 {
        return Err(StatsError::TooFew { need: 2, got: k });
    }
    for g in groups {
        check(g, 2)?;
    }
    let z: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let med = median(g);
            g.iter().map(|v| (v - med).abs()).collect()
        })
        .collect();
    let n_total: usize = z.iter().map(Vec::len).sum();
    let zbar_i: Vec<f64> = z.iter().map(|g| mean(g)).collect();
    let zbar = z.iter().flatten().sum::<f64>() / n_total as f64;
    let between: f64 = z.iter().zip(&zbar_i).map(|(g, m)| g.len() as f64 * (m - zbar) * (m - zbar)).sum();
    let within: f64 = z.iter().zip(&zbar_i).map(|(g, m)| g.iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum();
    let (d1, d2) = ((k - 1) as f64, (n_total - k) as f64);
    if within == 0.0 {
        return Ok(if between == 0.0 {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult { statistic: f64::INFINITY, p_value: 0.0 }
        });
    }
    let f = (between / d1) / (within / d2);
    let p = FisherSnedecor::new(d1, d2).expect("positive degrees of freedom").sf(f);
    Ok(TestResult { statistic: f, p_value: p })
}

/// Two-sided pooled-variance two-sample t-test.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    check(a, 2)?;
    check(b, 2)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let ssa: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum();
    let ssb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum();
    let df = na + nb - 2.0;
    let sp2 = (ssa + ssb) / df;
    let se = (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        return Ok(if diff == 0.0 {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult { statistic: diff.signum() * f64::INFINITY, p_value: 0.0 }
        });
    }
    let t = diff / se;
    let p = 2.0 * StudentsT::new(0.0, 1.0, df).expect("positive df").sf(t.abs());
    Ok(TestResult { statistic: t, p_value: p.min(1.0) })
}

/// Midranks of the pooled sample (1-based), with the tie group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Largest group size for which the exact permutation distribution is used.
pub const MW_EXACT_MAX: usize = 20;

/// Two-sided Mann-Whitney U test. Reports U of the first group. Exact (over all rank
/// assignments, ties included) when both groups have at most `MW_EXACT_MAX` samples,
/// otherwise the tie-corrected normal approximation with continuity correction.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    check(a, 1)?;
    check(b, 1)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let p = if na <= MW_EXACT_MAX && nb <= MW_EXACT_MAX {
        exact_rank_sum_p(&ranks, na)
    } else {
        let n = (na + nb) as f64;
        let mu = (na * nb) as f64 / 2.0;
        let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
        let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie);
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
            (2.0 * std_normal().sf(z)).min(1.0)
        }
    };
    Ok(TestResult { statistic: u, p_value: p })
}

/// Two-sided p of the first `na` ranks' sum under all equally likely splits of `ranks`.
fn exact_rank_sum_p(ranks: &[f64], na: usize) -> f64 {
    // midranks are multiples of 1/2, so doubled ranks are integers
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = r2[..na].iter().sum();
    let total: usize = r2.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s (exact in f64 up to 2^53)
    let mut counts = vec![vec![0.0f64; total + 1]; na + 1];
    counts[0][0] = 1.0;
    for &r in &r2 {
        for k in (1..=na).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            for s in (r..=total).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    let dist = &counts[na];
    let all: f64 = dist.iter().sum();
    let le: f64 = dist[..=observed].iter().sum();
    let ge: f64 = dist[observed..].iter().sum();
    (2.0 * le.min(ge) / all).min(1.0)
}

/// Compare two groups: a pooled t-test when both pass Shapiro-Wilk and Levene at `alpha`,
/// otherwise Mann-Whitney U.
pub fn compare_groups(a: &[f64], b: &[f64], alpha: f64) -> Result<Comparison, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadAlpha);
    }
    check(a, 3)?;
    check(b, 3)?;
    let mut out = Comparison {
        test_used: TestUsed::MannWhitney,
        statistic: f64::NAN,
        p_value: f64::NAN,
        alpha,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: mean(a),
        mean_b: mean(b),
        shapiro_a: None,
        shapiro_b: None,
        levene: None,
        note: None,
    };
    let sa = shapiro_wilk(a);
    let sb = shapiro_wilk(b);
    let normal = match (&sa, &sb) {
        (Ok(ra), Ok(rb)) => ra.p_value >= alpha && rb.p_value >= alpha,
        _ => {
            out.note = Some("constant group: normality undefined, using Mann-Whitney".into());
            false
        }
    };
    out.shapiro_a = sa.ok();
    out.shapiro_b = sb.ok();
    let lev = levene(&[a, b])?;
    out.levene = Some(lev);
    let r = if normal && lev.p_value >= alpha {
        out.test_used = TestUsed::TTest;
        t_test(a, b)?
    } else {
        mann_whitney(a, b)?
    };
    out.statistic = r.statistic;
    out.p_value = r.p_value;
    Ok(out)
}
