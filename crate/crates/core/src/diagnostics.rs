//! Posterior summaries and convergence diagnostics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sampler::Chain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Point estimate (MAP in the model's reporting convention).
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub cci_low: f64,
    pub cci_high: f64,
}

impl fmt::Display for PosteriorSummary {
    /// `median (sd) [low, high]`, three decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.3} ({:.3}) [{:.3}, {:.3}]",
            self.median, self.sd, self.cci_low, self.cci_high
        )
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `n - 1` denominator; 0 for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Summary of a vector of draws.
pub fn summarize_draws(draws: &[f64]) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(invalid("cannot summarize an empty set of draws"));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PosteriorSummary {
        median: quantile_sorted(&sorted, 0.5),
        mean: mean(draws),
        sd: variance(draws).sqrt(),
        cci_low: quantile_sorted(&sorted, 0.025),
        cci_high: quantile_sorted(&sorted, 0.975),
    })
}

pub fn summarize(chain: &Chain, parameter: &str) -> Result<PosteriorSummary> {
    summarize_draws(&chain.column(parameter)?)
}

/// Potential scale reduction factor from between- and within-chain
/// variances. With `split`, every chain is halved first (the first half of an
/// odd-length chain keeps the extra draw out), which also allows a single
/// chain.
pub fn gelman_rubin(chains: &[Vec<f64>], split: bool) -> Result<f64> {
    let pieces: Vec<&[f64]> = if split {
        chains
            .iter()
            .flat_map(|c| {
                let half = c.len() / 2;
                let off = c.len() - 2 * half;
                [&c[off..off + half], &c[off + half..]]
            })
            .collect()
    } else {
        chains.iter().map(|c| c.as_slice()).collect()
    };
    if pieces.len() < 2 {
        return Err(invalid(
            "the Gelman-Rubin statistic needs at least two chains",
        ));
    }
    let n = pieces[0].len();
    if pieces.iter().any(|p| p.len() != n) {
        return Err(invalid("chains must have equal stored lengths"));
    }
    if n < 10 {
        return Err(invalid(format!("chains need at least 10 draws, got {n}")));
    }
    let means: Vec<f64> = pieces.iter().map(|p| mean(p)).collect();
    let w = mean(&pieces.iter().map(|p| variance(p)).collect::<Vec<_>>());
    let b = n as f64 * variance(&means);
    let nf = n as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let v = (nf - 1.0) / nf * w + b / nf;
    Ok((v / w).sqrt())
}

/// R̂ for one named parameter across chains.
pub fn gelman_rubin_param(chains: &[Chain], parameter: &str, split: bool) -> Result<f64> {
    let cols = chains
        .iter()
        .map(|c| c.column(parameter))
        .collect::<Result<Vec<_>>>()?;
    gelman_rubin(&cols, split)
}

/// Sample autocorrelations at lags `0..=max_lag`, normalized by the lag-0
/// autocovariance (both with denominator `n`).
pub fn autocorr(draws: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = draws.len();
    if max_lag >= n {
        return Err(invalid(format!(
            "max_lag {max_lag} must be below the draw count {n}"
        )));
    }
    let m = mean(draws);
    let centered: Vec<f64> = draws.iter().map(|x| x - m).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum();
    Ok((0..=max_lag)
        .map(|lag| {
            if lag == 0 {
                return 1.0;
            }
            if c0 == 0.0 {
                return 0.0;
            }
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / c0
        })
        .collect())
}

/// One row of the `diagnose` table.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub parameter: String,
    pub summary: PosteriorSummary,
    pub rhat: Option<f64>,
    pub acf: Vec<f64>,
}

/// Per-parameter summaries over pooled chains, with R̂ when there are at
/// least two chains and lag 1–5 autocorrelations of the first chain.
pub fn diagnose(chains: &[Chain]) -> Result<Vec<DiagnosticRow>> {
    let first = chains
        .first()
        .ok_or_else(|| invalid("no chains to diagnose"))?;
    let per_chain: Vec<Vec<(String, Vec<f64>)>> = chains.iter().map(|c| c.columns()).collect();
    let mut rows = Vec::new();
    for (p, (name, col)) in per_chain[0].iter().enumerate() {
        let pooled: Vec<f64> = per_chain
            .iter()
            .flat_map(|c| c[p].1.iter().copied())
            .collect();
        let rhat = if chains.len() >= 2 && col.len() >= 10 {
            let cols: Vec<Vec<f64>> = per_chain.iter().map(|c| c[p].1.clone()).collect();
            gelman_rubin(&cols, false).ok()
        } else {
            None
        };
        let max_lag = 5.min(col.len().saturating_sub(1));
        let acf = autocorr(col, max_lag)?.into_iter().skip(1).collect();
        rows.push(DiagnosticRow {
            parameter: name.clone(),
            summary: summarize_draws(&pooled)?,
            rhat,
            acf,
        });
    }
    debug_assert_eq!(rows.len(), first.param_names().len());
    Ok(rows)
}

/// Fixed-width text table: parameter, `MAP (SD)`, CCI, R̂ and acf(1..5).
pub fn format_table(rows: &[DiagnosticRow]) -> String {
    let mut out = format!(
        "{:<22} {:>18} {:>20} {:>7}  {}\n",
        "parameter", "MAP (SD)", "95% CCI", "R-hat", "acf(1..5)"
    );
    for r in rows {
        let s = &r.summary;
        let rhat = r.rhat.map_or("-".to_string(), |v| format!("{v:.3}"));
        let acf: Vec<String> = r.acf.iter().map(|a| format!("{a:.2}")).collect();
        out.push_str(&format!(
            "{:<22} {:>18} {:>20} {:>7}  {}\n",
            r.parameter,
            format!("{:.3} ({:.3})", s.median, s.sd),
            format!("[{:.3}, {:.3}]", s.cci_low, s.cci_high),
            rhat,
            acf.join(" ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Purpose};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize, mu: f64) -> Vec<f64> {
        let mut rng = seeded(seed, Purpose::Misc, 0);
        (0..n)
            .map(|_| mu + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn constant_draws() {
        let s = summarize_draws(&[2.5; 40]).unwrap();
        assert_eq!(
            (s.median, s.sd, s.cci_low, s.cci_high),
            (2.5, 0.0, 2.5, 2.5)
        );
    }

    #[test]
    fn one_to_hundred() {
        let draws: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize_draws(&draws).unwrap();
        // h = 99 p: 49.5 -> 50.5, 2.475 -> 3.475, 96.525 -> 97.525
        assert_abs_diff_eq!(s.median, 50.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cci_low, 3.475, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cci_high, 97.525, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean, 50.5, epsilon = 1e-12);
    }

    #[test]
    fn table_cell_format() {
        let s = PosteriorSummary {
            median: -5.0213,
            mean: -5.0,
            sd: 0.3204,
            cci_low: -5.671,
            cci_high: -4.44,
        };
        assert_eq!(s.to_string(), "-5.021 (0.320) [-5.671, -4.440]");
    }

    #[test]
    fn empty_draws_rejected() {
        assert!(summarize_draws(&[]).is_err());
    }

    #[test]
    fn gr_same_distribution() {
        let r = gelman_rubin(&[normals(1, 2000, 0.0), normals(2, 2000, 0.0)], false).unwrap();
        assert!(r < 1.05, "{r}");
    }

    #[test]
    fn gr_separated_means() {
        let r = gelman_rubin(&[normals(1, 2000, 0.0), normals(2, 2000, 5.0)], false).unwrap();
        assert!(r > 1.5, "{r}");
    }

    #[test]
    fn gr_needs_two_chains() {
        assert!(gelman_rubin(&[normals(1, 100, 0.0)], false).is_err());
        // splitting makes one chain usable
        assert!(gelman_rubin(&[normals(1, 100, 0.0)], true).is_ok());
    }

    #[test]
    fn gr_detects_drift_only_when_split() {
        let trend: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        assert!(gelman_rubin(&[trend.clone(), trend.clone()], true).unwrap() > 1.5);
        assert_abs_diff_eq!(
            gelman_rubin(&[trend.clone(), trend], false).unwrap(),
            (999.0f64 / 1000.0).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gr_unequal_lengths_rejected() {
        assert!(gelman_rubin(&[normals(1, 100, 0.0), normals(2, 99, 0.0)], false).is_err());
    }

    #[test]
    fn acf_white_noise() {
        let x = normals(3, 10_000, 0.0);
        let acf = autocorr(&x, 10).unwrap();
        assert_eq!(acf[0], 1.0);
        for a in &acf[1..] {
            assert!(a.abs() < 3.0 / 100.0, "{a}");
        }
    }

    #[test]
    fn acf_ar1() {
        let mut rng = seeded(4, Purpose::Misc, 0);
        let mut x = vec![0.0; 10_000];
        for t in 1..x.len() {
            x[t] = 0.9 * x[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let acf = autocorr(&x, 1).unwrap();
        assert!((acf[1] - 0.9).abs() < 0.05, "{}", acf[1]);
    }

    #[test]
    fn acf_lag_bound() {
        assert!(autocorr(&[1.0, 2.0, 3.0], 3).is_err());
    }

    proptest! {
        #[test]
        fn quantiles_monotone(xs in prop::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let mut s = xs.clone();
            s.sort_by(f64::total_cmp);
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(quantile_sorted(&s, lo) <= quantile_sorted(&s, hi));
            let summary = summarize_draws(&xs).unwrap();
            prop_assert!(summary.cci_low <= summary.median && summary.median <= summary.cci_high);
        }

        #[test]
        fn gr_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -100.0f64..100.0) {
            let c1 = normals(seed, 200, 0.0);
            let c2 = normals(seed + 1, 200, 0.3);
            let r = gelman_rubin(&[c1.clone(), c2.clone()], false).unwrap();
            let t = |c: &Vec<f64>| c.iter().map(|x| a * x + b).collect::<Vec<_>>();
            let r2 = gelman_rubin(&[t(&c1), t(&c2)], false).unwrap();
            prop_assert!((r - r2).abs() < 1e-10);
        }
    }
}
