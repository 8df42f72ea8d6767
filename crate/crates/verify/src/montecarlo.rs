//! Self-normalized Monte Carlo posterior over the generator's latents.
//!
//! Severity is sampled from its prior; pathogen and finding are summed out
//! exactly. The likelihood is written from the generative story alone and
//! shares no code with the quadrature oracle.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use stackfusion::synth::{intended_class, vocab, GenSpec, N_FINDINGS, N_PATHOGENS};
use stackfusion::{PatientRecord, Task};
use statrs::function::erf::erfc;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Pathogen(usize),
    Finding(usize),
    Severity,
    Background,
    Ignored,
}

pub struct MonteCarloPosterior {
    spec: GenSpec,
    theta: f64,
    mortality_offset: f64,
    draws: Vec<f64>,
    tokens: HashMap<&'static str, Token>,
}

/// Posterior class probabilities and the effective sample size behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub probs: Vec<f64>,
    pub ess: f64,
}

fn vocabulary() -> HashMap<&'static str, Token> {
    let mut m = HashMap::new();
    for (q, group) in vocab::PATHOGEN_TOKENS.iter().enumerate() {
        for t in group {
            m.insert(*t, Token::Pathogen(q));
        }
    }
    for (q, group) in vocab::FINDING_TOKENS.iter().enumerate() {
        for t in group {
            m.insert(*t, Token::Finding(q));
        }
    }
    for t in vocab::SEVERITY_TOKENS {
        m.insert(t, Token::Severity);
    }
    for t in vocab::BACKGROUND_TOKENS {
        m.insert(t, Token::Background);
    }
    for t in vocab::NEUTRAL_CONTAMINANT_TOKENS {
        m.insert(t, Token::Ignored);
    }
    m.insert(vocab::MASK_TOKEN, Token::Ignored);
    m
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MonteCarloPosterior {
    /// `theta` and `mortality_offset` are the calibrated label constants of
    /// the generator run under test.
    pub fn new(spec: &GenSpec, theta: f64, mortality_offset: f64, samples: usize, seed: u64) -> Self {
        let mut rng = stackfusion::rng::stream(seed, 0);
        let draws = (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect();
        MonteCarloPosterior {
            spec: spec.clone(),
            theta,
            mortality_offset,
            draws,
            tokens: vocabulary(),
        }
    }

    fn p_septic(&self, z: f64, pathogen: usize) -> f64 {
        let d = &self.spec.detection;
        let s = d.note_signal[pathogen];
        let index = d.severity_weight * z + d.interaction * z * s + d.note_signal_weight * s;
        if d.noise > 0.0 {
            // P(index + noise * eps > theta)
            0.5 * erfc((self.theta - index) / d.noise / std::f64::consts::SQRT_2)
        } else if index > self.theta {
            1.0
        } else {
            0.0
        }
    }

    fn abx(&self, pathogen: usize) -> [f64; 4] {
        let a = &self.spec.antibiotic;
        let mut out = [0.0; 4];
        for k in 0..4 {
            let intended = (k == intended_class(pathogen).index()) as u8 as f64;
            out[k] = a.imitation_noise * a.deviation_prior[k] + (1.0 - a.imitation_noise) * intended;
        }
        out
    }

    pub fn posterior(&self, record: &PatientRecord, task: Task) -> Result<Estimate, String> {
        let spec = &self.spec;
        let ns = &spec.notes;

        // Token tallies.
        let mut path = [0u32; N_PATHOGENS];
        let mut find = [0u32; N_FINDINGS];
        let (mut sev, mut bg) = (0u32, 0u32);
        for tok in record.notes.iter().flat_map(|n| &n.tokens) {
            match self.tokens.get(tok.as_str()) {
                Some(Token::Pathogen(q)) => path[*q] += 1,
                Some(Token::Finding(q)) => find[*q] += 1,
                Some(Token::Severity) => sev += 1,
                Some(Token::Background) => bg += 1,
                Some(Token::Ignored) => {}
                None => return Err(format!("{}: unexpected token '{tok}'", record.id)),
            }
        }

        // Statics: sum over features of -(y - l z)^2 / (2 s^2), kept as
        // coefficients of 1, z, z^2.
        let st = &spec.statics;
        let (mut a_s, mut b_s, mut c_s) = (0.0, 0.0, 0.0);
        for j in 0..spec.n_static {
            let y = (record.static_vector.numeric[j] - st.means[j]) / st.scales[j];
            let l = st.loadings[j];
            a_s += y * y;
            b_s += l * y;
            c_s += l * l;
        }
        let static_var = st.noise * st.noise;

        // Vitals, per pathogen.
        let v = &spec.vitals;
        let vs = &record.vitals_series;
        let mut quad = [(0.0f64, 0.0f64, 0.0f64); N_PATHOGENS];
        for (t, row) in vs.values.iter().enumerate() {
            let hour = vs.t0 + t as f64;
            for c in 0..spec.n_vital_channels {
                if !vs.mask[t][c] {
                    continue;
                }
                let k = v.direction[c] * (v.level_loading + v.trend_loading * (hour + 1.0) / spec.series_length as f64);
                for (p, q) in quad.iter_mut().enumerate() {
                    let y = (row[c] - v.baseline[c]) / v.scales[c] - v.pathogen_shift[p][c];
                    q.0 += y * y;
                    q.1 += k * y;
                    q.2 += k * k;
                }
            }
        }
        let vital_var = v.noise * v.noise;

        // z-free part for each pathogen, with the finding summed out.
        let unit = record.static_vector.categorical[0] as usize;
        let mut log_const = [0.0f64; N_PATHOGENS];
        for (p, lc) in log_const.iter_mut().enumerate() {
            let mut l = spec.pathogen_prior[p].ln() + st.unit_given_pathogen[p][unit].ln();
            for q in 0..N_PATHOGENS {
                l += path[q] as f64 * (ns.pathogen_rate * ns.pathogen_confusion[p][q] / 4.0).ln();
            }
            let per_finding: Vec<f64> = (0..N_FINDINGS)
                .map(|r| {
                    let mut lr = spec.finding_given_pathogen[p][r].ln();
                    for q in 0..N_FINDINGS {
                        lr += find[q] as f64 * (ns.finding_rate * ns.finding_confusion[r][q] / 3.0).ln();
                    }
                    if let Some(img) = &record.image_feature_vector {
                        lr += self.image_term(&img.0, r, p);
                    }
                    lr
                })
                .collect();
            let m = per_finding.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            l += m + per_finding.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            *lc = l;
        }

        let k = task.n_classes();
        let mut logw = Vec::with_capacity(self.draws.len() * N_PATHOGENS);
        for &z in &self.draws {
            let rate = ns.severity_rate_max * logistic(ns.severity_loading * z + ns.severity_offset);
            let mut tok = 0.0;
            if sev > 0 {
                tok += sev as f64 * (rate / vocab::SEVERITY_TOKENS.len() as f64).ln();
            }
            if bg > 0 {
                let rest = 1.0 - ns.pathogen_rate - ns.finding_rate - rate;
                tok += bg as f64 * (rest / vocab::BACKGROUND_TOKENS.len() as f64).ln();
            }
            let stat = -(a_s - 2.0 * b_s * z + c_s * z * z) / (2.0 * static_var);
            for p in 0..N_PATHOGENS {
                let (a, b, c) = quad[p];
                let vit = -(a - 2.0 * b * z + c * z * z) / (2.0 * vital_var);
                logw.push(log_const[p] + stat + vit + tok);
            }
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(format!("{}: zero likelihood", record.id));
        }
        let mut acc = vec![0.0; k];
        let (mut sum_w, mut sum_w2) = (0.0, 0.0);
        let abx: Vec<[f64; 4]> = (0..N_PATHOGENS).map(|p| self.abx(p)).collect();
        for (i, &z) in self.draws.iter().enumerate() {
            let mut wz = 0.0;
            for p in 0..N_PATHOGENS {
                let w = (logw[i * N_PATHOGENS + p] - max).exp();
                wz += w;
                match task {
                    Task::Detection => acc[1] += w * self.p_septic(z, p),
                    Task::Mortality => {
                        acc[1] += w * logistic(spec.mortality.loading * z + self.mortality_offset)
                    }
                    Task::Antibiotic => {
                        for (a, d) in acc.iter_mut().zip(abx[p]) {
                            *a += w * d;
                        }
                    }
                }
            }
            sum_w += wz;
            sum_w2 += wz * wz;
        }
        if k == 2 {
            acc[0] = sum_w - acc[1];
        }
        Ok(Estimate {
            probs: acc.into_iter().map(|a| a / sum_w).collect(),
            ess: sum_w * sum_w / sum_w2,
        })
    }

    fn image_term(&self, image: &[f64], finding: usize, pathogen: usize) -> f64 {
        let spec = &self.spec;
        let rho = spec.redundancy;
        let a = spec.image.loading;
        let pf = spec.finding_prototype(finding);
        let pp = spec.pathogen_prototype(pathogen);
        let sd = spec.image.noise * (1.0 - rho).sqrt();
        image
            .iter()
            .enumerate()
            .map(|(j, x)| {
                let mu = a * (rho * pf[j] + (1.0 - rho) * pp[j]);
                -(x - mu) * (x - mu) / (2.0 * sd * sd)
            })
            .sum::<f64>()
    }
}
