//! Exact Bayes posterior under a [`GenSpec`].
//!
//! The posterior over `(z, p, r)` given a guarded record factorizes; `r`
//! enters only through radiology tokens and the image, so it is summed out
//! per pathogen. The remaining integral over `z` uses the trapezoid rule on a
//! fixed 2,001-point grid over `[-8, 8]`.

use statrs::function::erf::erfc;

use super::{intended_class, logistic, vocab, GenSpec, N_FINDINGS, N_PATHOGENS};
use crate::cohort::{PatientRecord, Task};
use crate::error::{Error, Result};
use crate::ProbVector;

pub const GRID_POINTS: usize = 2001;
pub const GRID_MIN: f64 = -8.0;
pub const GRID_MAX: f64 = 8.0;

/// Upper normal tail `P(N(0,1) > x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn log_normal_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Token counts per generative group for one record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenCounts {
    pub pathogen: [u32; N_PATHOGENS],
    pub finding: [u32; N_FINDINGS],
    pub severity: u32,
    pub background: u32,
}

impl TokenCounts {
    /// Count tokens by group. Contaminant tokens that guards should have
    /// removed are rejected.
    pub fn from_record(record: &PatientRecord) -> Result<Self> {
        let mut c = TokenCounts::default();
        for tok in record.notes.iter().flat_map(|n| &n.tokens) {
            let t = tok.as_str();
            if t == vocab::MASK_TOKEN || vocab::NEUTRAL_CONTAMINANT_TOKENS.contains(&t) {
                continue;
            }
            if let Some(q) = vocab::PATHOGEN_TOKENS.iter().position(|g| g.contains(&t)) {
                c.pathogen[q] += 1;
            } else if let Some(q) = vocab::FINDING_TOKENS.iter().position(|g| g.contains(&t)) {
                c.finding[q] += 1;
            } else if vocab::SEVERITY_TOKENS.contains(&t) {
                c.severity += 1;
            } else if vocab::BACKGROUND_TOKENS.contains(&t) {
                c.background += 1;
            } else {
                return Err(Error::Schema {
                    id: record.id.clone(),
                    message: format!("token '{t}' is not produced by the generator; apply guards first"),
                });
            }
        }
        Ok(c)
    }
}

/// Precomputed grid and label calibration for one spec.
#[derive(Debug, Clone)]
pub struct Oracle {
    spec: GenSpec,
    grid: Vec<f64>,
    weights: Vec<f64>,
    log_prior_z: Vec<f64>,
    detection_threshold: f64,
    mortality_offset: f64,
}

impl Oracle {
    pub fn new(spec: &GenSpec) -> Result<Self> {
        spec.validate()?;
        let h = (GRID_MAX - GRID_MIN) / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| GRID_MIN + h * i as f64).collect();
        let weights: Vec<f64> = (0..GRID_POINTS)
            .map(|i| if i == 0 || i == GRID_POINTS - 1 { h / 2.0 } else { h })
            .collect();
        let log_prior_z = grid.iter().map(|&z| log_normal_pdf(z)).collect();
        let mut oracle = Oracle {
            spec: spec.clone(),
            grid,
            weights,
            log_prior_z,
            detection_threshold: 0.0,
            mortality_offset: 0.0,
        };
        let target = spec.detection.prevalence;
        oracle.detection_threshold = bisect(-60.0, 60.0, |theta| {
            oracle.detection_prevalence(theta) - target
        }, true);
        let target = spec.mortality.prevalence;
        oracle.mortality_offset = bisect(-60.0, 60.0, |b| oracle.mortality_prevalence(b) - target, false);
        Ok(oracle)
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Calibrated detection threshold theta.
    pub fn detection_threshold(&self) -> f64 {
        self.detection_threshold
    }

    /// Calibrated mortality intercept b_m.
    pub fn mortality_offset(&self) -> f64 {
        self.mortality_offset
    }

    /// `P(sepsis | z, p)` under the calibrated threshold.
    pub fn sepsis_probability(&self, z: f64, pathogen: usize) -> f64 {
        sepsis_probability(&self.spec, self.detection_threshold, z, pathogen)
    }

    pub fn mortality_probability(&self, z: f64) -> f64 {
        logistic(self.spec.mortality.loading * z + self.mortality_offset)
    }

    /// Class distribution of the antibiotic label given the pathogen.
    pub fn antibiotic_distribution(&self, pathogen: usize) -> [f64; 4] {
        let a = &self.spec.antibiotic;
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            *o = a.imitation_noise * a.deviation_prior[k];
        }
        out[intended_class(pathogen).index()] += 1.0 - a.imitation_noise;
        out
    }

    fn detection_prevalence(&self, theta: f64) -> f64 {
        let mut total = 0.0;
        for (p, &pi) in self.spec.pathogen_prior.iter().enumerate() {
            for i in 0..GRID_POINTS {
                let z = self.grid[i];
                total += pi
                    * self.weights[i]
                    * self.log_prior_z[i].exp()
                    * sepsis_probability(&self.spec, theta, z, p);
            }
        }
        total
    }

    fn mortality_prevalence(&self, offset: f64) -> f64 {
        let a = self.spec.mortality.loading;
        (0..GRID_POINTS)
            .map(|i| self.weights[i] * self.log_prior_z[i].exp() * logistic(a * self.grid[i] + offset))
            .sum()
    }

    /// Marginal class distribution for `task` under the spec.
    pub fn class_prior(&self, task: Task) -> ProbVector {
        match task {
            Task::Detection => {
                let p1 = self.detection_prevalence(self.detection_threshold);
                vec![1.0 - p1, p1]
            }
            Task::Mortality => {
                let p1 = self.mortality_prevalence(self.mortality_offset);
                vec![1.0 - p1, p1]
            }
            Task::Antibiotic => {
                let mut out = vec![0.0; 4];
                for (p, &pi) in self.spec.pathogen_prior.iter().enumerate() {
                    for (o, d) in out.iter_mut().zip(self.antibiotic_distribution(p)) {
                        *o += pi * d;
                    }
                }
                out
            }
        }
    }

    /// Unnormalized log posterior weight of `(z_i, p)` on the grid, one row
    /// per pathogen.
    pub fn log_weights(&self, record: &PatientRecord) -> Result<Vec<Vec<f64>>> {
        let spec = &self.spec;
        let fail = |m: String| Error::Schema {
            id: record.id.clone(),
            message: m,
        };
        let sv = &record.static_vector;
        if sv.numeric.len() != spec.n_static || sv.categorical.len() != 1 {
            return Err(fail("static vector does not match the generator schema".into()));
        }
        let n_units = spec.statics.unit_given_pathogen[0].len();
        let unit = sv.categorical[0] as usize;
        if unit >= n_units {
            return Err(fail(format!("admission unit {unit} outside generator cardinality")));
        }
        let vs = &record.vitals_series;
        if vs.values.iter().any(|row| row.len() != spec.n_vital_channels) {
            return Err(fail("vitals channel count does not match the generator".into()));
        }
        if let Some(img) = &record.image_feature_vector {
            if img.0.len() != spec.image_dim {
                return Err(fail("image length does not match the generator".into()));
            }
        }
        let counts = TokenCounts::from_record(record)?;

        // Gaussian terms are quadratic in z: c0 + c1 z + c2 z^2.
        let st = &spec.statics;
        let inv = 1.0 / (st.noise * st.noise);
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..spec.n_static {
            let y = (sv.numeric[j] - st.means[j]) / st.scales[j];
            let l = st.loadings[j];
            s1 += l * y * inv;
            s2 -= 0.5 * l * l * inv;
        }
        let v = &spec.vitals;
        let inv_v = 1.0 / (v.noise * v.noise);
        let mut vit = [(0.0f64, 0.0f64, 0.0f64); N_PATHOGENS];
        for (t, (row, mrow)) in vs.values.iter().zip(&vs.mask).enumerate() {
            let hour = vs.hour(t);
            for c in 0..spec.n_vital_channels {
                if !mrow[c] {
                    continue;
                }
                let k = spec.vitals_z_coefficient(c, hour);
                let y0 = (row[c] - v.baseline[c]) / v.scales[c];
                for (p, acc) in vit.iter_mut().enumerate() {
                    let y = y0 - v.pathogen_shift[p][c];
                    acc.0 -= 0.5 * y * y * inv_v;
                    acc.1 += k * y * inv_v;
                    acc.2 -= 0.5 * k * k * inv_v;
                }
            }
        }

        let ns = &spec.notes;
        let rest = 1.0 - ns.pathogen_rate - ns.finding_rate;
        let note_z: Vec<f64> = self
            .grid
            .iter()
            .map(|&z| {
                let sev = spec.severity_rate(z);
                let mut acc = 0.0;
                if counts.severity > 0 {
                    acc += counts.severity as f64 * sev.ln();
                }
                if counts.background > 0 {
                    acc += counts.background as f64 * (rest - sev).ln();
                }
                acc
            })
            .collect();
        let n_path: u32 = counts.pathogen.iter().sum();
        let n_find: u32 = counts.finding.iter().sum();
        let mut constant = 0.0;
        if n_path > 0 {
            constant += n_path as f64 * ns.pathogen_rate.ln();
        }
        if n_find > 0 {
            constant += n_find as f64 * ns.finding_rate.ln();
        }

        let mut out = Vec::with_capacity(N_PATHOGENS);
        for p in 0..N_PATHOGENS {
            let mut lp = spec.pathogen_prior[p].ln() + st.unit_given_pathogen[p][unit].ln() + constant;
            for (q, &n) in counts.pathogen.iter().enumerate() {
                if n > 0 {
                    lp += n as f64 * ns.pathogen_confusion[p][q].ln();
                }
            }
            let per_finding: Vec<f64> = (0..N_FINDINGS)
                .map(|r| {
                    let mut l = spec.finding_given_pathogen[p][r].ln();
                    for (q, &n) in counts.finding.iter().enumerate() {
                        if n > 0 {
                            l += n as f64 * ns.finding_confusion[r][q].ln();
                        }
                    }
                    if let Some(img) = &record.image_feature_vector {
                        l += image_log_likelihood(spec, &img.0, r, p);
                    }
                    l
                })
                .collect();
            lp += log_sum_exp(&per_finding);
            let (c0, c1, c2) = vit[p];
            let row = (0..GRID_POINTS)
                .map(|i| {
                    let z = self.grid[i];
                    lp + self.log_prior_z[i] + c0 + (s1 + c1) * z + (s2 + c2) * z * z + note_z[i]
                })
                .collect();
            out.push(row);
        }
        Ok(out)
    }

    /// Exact posterior over the task's classes.
    pub fn posterior(&self, record: &PatientRecord, task: Task) -> Result<ProbVector> {
        let lw = self.log_weights(record)?;
        let max = lw
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Schema {
                id: record.id.clone(),
                message: "record has zero likelihood under the generator".into(),
            });
        }
        let k = task.n_classes();
        let mut acc = vec![0.0; k];
        for (p, row) in lw.iter().enumerate() {
            let abx = self.antibiotic_distribution(p);
            for i in 0..GRID_POINTS {
                let w = self.weights[i] * (row[i] - max).exp();
                if w == 0.0 {
                    continue;
                }
                let z = self.grid[i];
                match task {
                    Task::Detection => {
                        let (q0, q1) = sepsis_split(&self.spec, self.detection_threshold, z, p);
                        acc[0] += w * q0;
                        acc[1] += w * q1;
                    }
                    Task::Mortality => {
                        let m = self.mortality_probability(z);
                        acc[0] += w * (1.0 - m);
                        acc[1] += w * m;
                    }
                    Task::Antibiotic => {
                        for (a, d) in acc.iter_mut().zip(abx) {
                            *a += w * d;
                        }
                    }
                }
            }
        }
        let total: f64 = acc.iter().sum();
        Ok(acc.into_iter().map(|a| a / total).collect())
    }
}

/// Log-likelihood of an image given `(finding, pathogen)`, up to a constant
/// shared by all latent values.
pub fn image_log_likelihood(spec: &GenSpec, image: &[f64], finding: usize, pathogen: usize) -> f64 {
    let (mean, sd) = spec.image_mean(finding, pathogen);
    if sd > 0.0 {
        let inv = 1.0 / (sd * sd);
        -0.5 * inv
            * image
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
    } else {
        let exact = image
            .iter()
            .zip(&mean)
            .all(|(x, m)| (x - m).abs() <= 1e-9 * (1.0 + m.abs()));
        if exact {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

fn sepsis_split(spec: &GenSpec, theta: f64, z: f64, pathogen: usize) -> (f64, f64) {
    let idx = spec.detection_index(z, pathogen);
    let sigma = spec.detection.noise;
    if sigma > 0.0 {
        let x = (theta - idx) / sigma;
        (normal_sf(-x), normal_sf(x))
    } else if idx > theta {
        (0.0, 1.0)
    } else {
        (1.0, 0.0)
    }
}

fn sepsis_probability(spec: &GenSpec, theta: f64, z: f64, pathogen: usize) -> f64 {
    sepsis_split(spec, theta, z, pathogen).1
}

/// Root of a monotone function on `[lo, hi]`; `decreasing` gives the
/// direction of `f`.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64, decreasing: bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        let go_right = if decreasing { v > 0.0 } else { v < 0.0 };
        if go_right {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Convenience wrapper building an [`Oracle`] for a single query.
pub fn oracle_posterior(record: &PatientRecord, spec: &GenSpec, task: Task) -> Result<ProbVector> {
    Oracle::new(spec)?.posterior(record, task)
}
