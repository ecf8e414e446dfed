//! Likelihood evaluation and state decoding for fixed parameters.
//!
//! All recursions work on a precomputed `[N_T × m]` matrix of log emission
//! densities. The forward pass rescales at every step, so sequences of any
//! length are safe from underflow.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::model::{validate_delta, validate_tpm, SubjectSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionPointParams {
    /// `[n_dep × m]`
    pub mean: Matrix,
    /// `[n_dep × m]` variances used for density evaluation.
    pub var: Matrix,
}

impl EmissionPointParams {
    pub fn validate(&self) -> Result<()> {
        if self.mean.shape() != self.var.shape() {
            return Err(invalid("emission mean and variance shapes differ"));
        }
        if self.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid("emission variances must be positive and finite"));
        }
        Ok(())
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2π)

#[inline]
pub(crate) fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Log density of one observation row under each state.
pub fn emission_logdensity(obs_row: &[f64], params: &EmissionPointParams) -> Result<Vec<f64>> {
    params.validate()?;
    if obs_row.len() != params.mean.nrows() {
        return Err(invalid(format!(
            "observation has {} variables, parameters have {}",
            obs_row.len(),
            params.mean.nrows()
        )));
    }
    if obs_row.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite observation"));
    }
    let m = params.mean.ncols();
    Ok((0..m)
        .map(|i| {
            obs_row
                .iter()
                .enumerate()
                .map(|(k, &x)| normal_logpdf(x, params.mean[(k, i)], params.var[(k, i)]))
                .sum()
        })
        .collect())
}

/// `[N_T × m]` log emission densities for a whole series.
pub fn log_emissions(obs: &Matrix, params: &EmissionPointParams) -> Result<Matrix> {
    params.validate()?;
    if obs.ncols() != params.mean.nrows() {
        return Err(invalid(
            "observation width does not match emission parameters",
        ));
    }
    Ok(log_emissions_unchecked(obs, &params.mean, &params.var))
}

pub(crate) fn log_emissions_unchecked(obs: &Matrix, mean: &Matrix, var: &Matrix) -> Matrix {
    let (n_dep, m) = mean.shape();
    let mut out = Matrix::zeros(obs.nrows(), m);
    let mut log_var = Matrix::zeros(n_dep, m);
    for k in 0..n_dep {
        for i in 0..m {
            log_var[(k, i)] = var[(k, i)].ln();
        }
    }
    for t in 0..obs.nrows() {
        let row = obs.row(t);
        for i in 0..m {
            let mut acc = 0.0;
            for (k, &x) in row.iter().enumerate() {
                let d = x - mean[(k, i)];
                acc -= 0.5 * (LN_2PI + log_var[(k, i)] + d * d / var[(k, i)]);
            }
            out[(t, i)] = acc;
        }
    }
    out
}

/// Scaled forward pass. Row `t` of the returned matrix is
/// `P(C_t | x_1..x_t)`; the scalar is the log-likelihood.
pub(crate) fn forward_filter(log_emis: &Matrix, tpm: &Matrix, delta: &[f64]) -> (Matrix, f64) {
    let (n, m) = log_emis.shape();
    let mut alpha = Matrix::zeros(n, m);
    let mut loglik = 0.0;
    let mut prev = vec![0.0; m];
    for t in 0..n {
        let le = log_emis.row(t);
        let shift = le.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = alpha.row_mut(t);
        if t == 0 {
            for i in 0..m {
                row[i] = delta[i] * (le[i] - shift).exp();
            }
        } else {
            for (j, r) in row.iter_mut().enumerate() {
                let mut pred = 0.0;
                for (i, p) in prev.iter().enumerate() {
                    pred += p * tpm[(i, j)];
                }
                *r = pred * (le[j] - shift).exp();
            }
        }
        let c: f64 = row.iter().sum();
        for r in row.iter_mut() {
            *r /= c;
        }
        loglik += c.ln() + shift;
        prev.copy_from_slice(row);
    }
    (alpha, loglik)
}

fn check_chain(tpm: &Matrix, delta: &[f64], m: usize) -> Result<()> {
    if tpm.nrows() != m {
        return Err(invalid(format!(
            "tpm has {} states, emissions have {m}",
            tpm.nrows()
        )));
    }
    validate_tpm(tpm).into_result()?;
    validate_delta(delta, m)
}

pub fn forward_loglik(
    series: &SubjectSeries,
    tpm: &Matrix,
    delta: &[f64],
    params: &EmissionPointParams,
) -> Result<f64> {
    check_chain(tpm, delta, params.mean.ncols())?;
    let le = log_emissions(&series.obs, params)?;
    Ok(forward_filter(&le, tpm, delta).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Most probable joint state path (zero-based).
    pub path: Vec<usize>,
    /// `[N_T × m]` local state posteriors `P(C_t = i | x_1..x_T)`.
    pub posteriors: Matrix,
    pub loglik: f64,
}

/// Viterbi path in log space. Ties go to the lower state index.
pub(crate) fn viterbi(log_emis: &Matrix, tpm: &Matrix, delta: &[f64]) -> Vec<usize> {
    let (n, m) = log_emis.shape();
    if n == 0 {
        return Vec::new();
    }
    let log_tpm = tpm.map(f64::ln);
    let mut score: Vec<f64> = (0..m).map(|i| delta[i].ln() + log_emis[(0, i)]).collect();
    let mut back = vec![0usize; n * m];
    let mut next = vec![0.0; m];
    for t in 1..n {
        for j in 0..m {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..m {
                let v = score[i] + log_tpm[(i, j)];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + log_emis[(t, j)];
            back[t * m + j] = arg;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    for i in 1..m {
        if score[i] > score[last] {
            last = i;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * m + path[t]];
    }
    path
}

/// Local posteriors from a forward pass and a scaled backward pass.
pub(crate) fn smooth(log_emis: &Matrix, tpm: &Matrix, filtered: &Matrix) -> Matrix {
    let (n, m) = log_emis.shape();
    let mut post = Matrix::zeros(n, m);
    if n == 0 {
        return post;
    }
    let mut beta = vec![1.0; m];
    let mut w = vec![0.0; m];
    for t in (0..n).rev() {
        let row = post.row_mut(t);
        let mut total = 0.0;
        for i in 0..m {
            row[i] = filtered[(t, i)] * beta[i];
            total += row[i];
        }
        for r in row.iter_mut() {
            *r /= total;
        }
        if t > 0 {
            let le = log_emis.row(t);
            let shift = le.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for j in 0..m {
                w[j] = (le[j] - shift).exp() * beta[j];
            }
            let mut scale = 0.0;
            for (i, b) in beta.iter_mut().enumerate() {
                *b = (0..m).map(|j| tpm[(i, j)] * w[j]).sum();
                scale += *b;
            }
            for b in beta.iter_mut() {
                *b /= scale;
            }
        }
    }
    post
}

pub fn decode_states(
    series: &SubjectSeries,
    tpm: &Matrix,
    delta: &[f64],
    params: &EmissionPointParams,
) -> Result<Decoded> {
    check_chain(tpm, delta, params.mean.ncols())?;
    let le = log_emissions(&series.obs, params)?;
    let (filtered, loglik) = forward_filter(&le, tpm, delta);
    Ok(Decoded {
        path: viterbi(&le, tpm, delta),
        posteriors: smooth(&le, tpm, &filtered),
        loglik,
    })
}

/// Log density of the standard normal at its mode, `ln(1/√(2π))`.
pub fn std_normal_log_mode() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupParams, SubjectParams};
    use crate::rng::{seeded, Purpose};
    use crate::simulate::{simulate_observations, simulate_states, InitialDistribution};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// Joint log density of one path, computed directly.
    fn path_logdensity(le: &Matrix, tpm: &Matrix, delta: &[f64], path: &[usize]) -> f64 {
        let mut lp = delta[path[0]].ln() + le[(0, path[0])];
        for t in 1..path.len() {
            lp += tpm[(path[t - 1], path[t])].ln() + le[(t, path[t])];
        }
        lp
    }

    fn all_paths(m: usize, n: usize) -> Vec<Vec<usize>> {
        (0..m.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let s = code % m;
                        code /= m;
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn log_sum_exp(xs: &[f64]) -> f64 {
        let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    }

    fn random_instance<R: Rng>(
        m: usize,
        n: usize,
        n_dep: usize,
        rng: &mut R,
    ) -> (SubjectSeries, Matrix, Vec<f64>, EmissionPointParams) {
        let mut tpm = Matrix::zeros(m, m);
        for i in 0..m {
            let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..m {
                tpm[(i, j)] = raw[j] / s;
            }
        }
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        let delta: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let params = EmissionPointParams {
            mean: Matrix::from_fn(n_dep, m, |_, _| rng.random::<f64>() * 4.0 - 2.0),
            var: Matrix::from_fn(n_dep, m, |_, _| rng.random::<f64>() + 0.2),
        };
        let obs = Matrix::from_fn(n, n_dep, |_, _| rng.random::<f64>() * 6.0 - 3.0);
        (
            SubjectSeries {
                obs,
                true_states: None,
            },
            tpm,
            delta,
            params,
        )
    }

    #[test]
    fn standard_normal_mode() {
        let p = EmissionPointParams {
            mean: Matrix::filled(1, 2, 0.0),
            var: Matrix::filled(1, 2, 1.0),
        };
        let ld = emission_logdensity(&[0.0], &p).unwrap();
        assert_abs_diff_eq!(ld[0], -0.918_938_533_204_672_7, epsilon = 1e-12);
        assert_abs_diff_eq!(ld[0], std_normal_log_mode(), epsilon = 1e-15);
        let ld = emission_logdensity(&[3.0], &p).unwrap();
        assert_abs_diff_eq!(ld[1], std_normal_log_mode() - 4.5, epsilon = 1e-12);
    }

    #[test]
    fn density_factorizes_over_variables() {
        let both = EmissionPointParams {
            mean: Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap(),
            var: Matrix::from_rows(&[vec![1.0, 0.5], vec![2.0, 0.3]]).unwrap(),
        };
        let first = EmissionPointParams {
            mean: Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            var: Matrix::from_rows(&[vec![1.0, 0.5]]).unwrap(),
        };
        let second = EmissionPointParams {
            mean: Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap(),
            var: Matrix::from_rows(&[vec![2.0, 0.3]]).unwrap(),
        };
        let joint = emission_logdensity(&[0.4, 1.7], &both).unwrap();
        let a = emission_logdensity(&[0.4], &first).unwrap();
        let b = emission_logdensity(&[1.7], &second).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(joint[i], a[i] + b[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn non_positive_variance_rejected() {
        let p = EmissionPointParams {
            mean: Matrix::zeros(1, 2),
            var: Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        };
        assert!(emission_logdensity(&[0.0], &p).is_err());
    }

    #[test]
    fn single_state_is_sum_of_densities() {
        let mut rng = seeded(1, Purpose::Misc, 0);
        let p = EmissionPointParams {
            mean: Matrix::filled(2, 1, 0.3),
            var: Matrix::filled(2, 1, 0.7),
        };
        let obs = Matrix::from_fn(50, 2, |_, _| rng.random::<f64>());
        let series = SubjectSeries {
            obs: obs.clone(),
            true_states: None,
        };
        let ll = forward_loglik(&series, &Matrix::identity(1), &[1.0], &p).unwrap();
        let direct: f64 = obs
            .rows()
            .map(|r| emission_logdensity(r, &p).unwrap()[0])
            .sum();
        assert_abs_diff_eq!(ll, direct, epsilon = 1e-10);
    }

    #[test]
    fn forward_matches_enumeration() {
        let mut rng = seeded(2, Purpose::Misc, 0);
        for _ in 0..20 {
            let (series, tpm, delta, p) = random_instance(2, 8, 2, &mut rng);
            let le = log_emissions(&series.obs, &p).unwrap();
            let terms: Vec<f64> = all_paths(2, 8)
                .iter()
                .map(|path| path_logdensity(&le, &tpm, &delta, path))
                .collect();
            let ll = forward_loglik(&series, &tpm, &delta, &p).unwrap();
            assert_abs_diff_eq!(ll, log_sum_exp(&terms), epsilon = 1e-10);
        }
    }

    #[test]
    fn label_permutation_invariance() {
        let mut rng = seeded(3, Purpose::Misc, 0);
        let (series, tpm, delta, p) = random_instance(3, 40, 2, &mut rng);
        let perm = [2, 0, 1];
        let mut delta2 = vec![0.0; 3];
        for i in 0..3 {
            delta2[perm[i]] = delta[i];
        }
        let p2 = EmissionPointParams {
            mean: p.mean.permute_cols(&perm),
            var: p.var.permute_cols(&perm),
        };
        let a = forward_loglik(&series, &tpm, &delta, &p).unwrap();
        let b = forward_loglik(&series, &tpm.permute_square(&perm), &delta2, &p2).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn long_series_does_not_underflow() {
        let mut rng = seeded(4, Purpose::Misc, 0);
        let (_, tpm, delta, p) = random_instance(3, 1, 1, &mut rng);
        let obs = Matrix::from_fn(200_000, 1, |_, _| rng.random::<f64>() * 40.0 - 20.0);
        let ll = forward_loglik(
            &SubjectSeries {
                obs,
                true_states: None,
            },
            &tpm,
            &delta,
            &p,
        )
        .unwrap();
        assert!(ll.is_finite());
    }

    #[test]
    fn invalid_chain_rejected() {
        let mut rng = seeded(5, Purpose::Misc, 0);
        let (series, _, delta, p) = random_instance(2, 5, 1, &mut rng);
        let bad = Matrix::filled(2, 2, 0.6);
        assert!(forward_loglik(&series, &bad, &delta, &p).is_err());
        let tpm = Matrix::filled(2, 2, 0.5);
        assert!(forward_loglik(&series, &tpm, &[0.7, 0.7], &p).is_err());
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = seeded(6, Purpose::Misc, 0);
        for _ in 0..30 {
            let (series, tpm, delta, p) = random_instance(2, 6, 1, &mut rng);
            let le = log_emissions(&series.obs, &p).unwrap();
            let best = all_paths(2, 6)
                .into_iter()
                .map(|path| (path_logdensity(&le, &tpm, &delta, &path), path))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap()
                .1;
            let d = decode_states(&series, &tpm, &delta, &p).unwrap();
            assert_eq!(d.path, best);
        }
    }

    #[test]
    fn posteriors_match_enumeration() {
        let mut rng = seeded(7, Purpose::Misc, 0);
        let (series, tpm, delta, p) = random_instance(2, 6, 2, &mut rng);
        let le = log_emissions(&series.obs, &p).unwrap();
        let paths = all_paths(2, 6);
        let lps: Vec<f64> = paths
            .iter()
            .map(|q| path_logdensity(&le, &tpm, &delta, q))
            .collect();
        let norm = log_sum_exp(&lps);
        let d = decode_states(&series, &tpm, &delta, &p).unwrap();
        for t in 0..6 {
            let p1: f64 = paths
                .iter()
                .zip(&lps)
                .filter(|(q, _)| q[t] == 1)
                .map(|(_, lp)| (lp - norm).exp())
                .sum();
            assert_abs_diff_eq!(d.posteriors[(t, 1)], p1, epsilon = 1e-10);
            assert_abs_diff_eq!(
                d.posteriors.row(t).iter().sum::<f64>(),
                1.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn uniform_everything_gives_uniform_posteriors() {
        let p = EmissionPointParams {
            mean: Matrix::zeros(1, 3),
            var: Matrix::filled(1, 3, 1.0),
        };
        let series = SubjectSeries {
            obs: Matrix::from_fn(10, 1, |t, _| t as f64 * 0.1),
            true_states: None,
        };
        let d = decode_states(
            &series,
            &Matrix::filled(3, 3, 1.0 / 3.0),
            &[1.0 / 3.0; 3],
            &p,
        )
        .unwrap();
        for x in d.posteriors.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-12);
        }
        // every state ties; the lower index wins
        assert!(d.path.iter().all(|&s| s == 0));
    }

    #[test]
    fn separated_states_decode_correctly() {
        let mut rng = seeded(8, Purpose::Misc, 0);
        let tpm = Matrix::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let group = GroupParams {
            emiss_mean: Matrix::from_rows(&[vec![-6.0, 0.0, 6.0]]).unwrap(),
            emiss_rand_var: Matrix::filled(1, 3, 0.0),
            emiss_resid_var: Matrix::filled(1, 3, 1.0),
            tpm_intercepts: Matrix::zeros(3, 2),
            tpm_rand_var: Matrix::zeros(3, 2),
        };
        let subj = SubjectParams {
            subj_mean: group.emiss_mean.clone(),
            tpm: tpm.clone(),
        };
        let states =
            simulate_states(&tpm, 2000, &InitialDistribution::uniform(3), &mut rng).unwrap();
        let obs = simulate_observations(&states, &subj, &group, &mut rng);
        let p = EmissionPointParams {
            mean: group.emiss_mean.clone(),
            var: group.emiss_resid_var.clone(),
        };
        let d = decode_states(
            &SubjectSeries {
                obs,
                true_states: None,
            },
            &tpm,
            &[1.0 / 3.0; 3],
            &p,
        )
        .unwrap();
        let hits = d.path.iter().zip(&states).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / 2000.0 >= 0.99);
    }
}
