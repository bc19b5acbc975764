//! Sequential treatment-assignment schemes and their allocation covariance
//! specifications.
//!
//! Three schemes are provided: simple randomization, stratified permuted
//! block randomization, and Pocock–Simon minimization with a biased coin.
//! Each scheme satisfies the marginal allocation `P(A_i = a) = pi_a` and a
//! root-n bound on per-stratum allocation fractions; the per-stratum
//! allocation covariance `Omega(z)` is `diag(pi) - pi pi'` under simple
//! randomization, `0` under permuted blocks, and unknown under minimization.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{validate_pi, TrialDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    Simple,
    StratifiedPermutedBlock {
        block_size: usize,
    },
    PocockSimon {
        /// Probability of assigning the imbalance-minimizing arm, in (1/k, 1].
        biased_coin_p: f64,
        /// One weight per randomization margin; empty means equal weights.
        #[serde(default)]
        margin_weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    #[serde(flatten)]
    pub kind: SchemeKind,
    pub pi: Vec<f64>,
}

impl SchemeSpec {
    pub fn simple(pi: Vec<f64>) -> Self {
        SchemeSpec { kind: SchemeKind::Simple, pi }
    }

    pub fn permuted_block(pi: Vec<f64>, block_size: usize) -> Self {
        SchemeSpec { kind: SchemeKind::StratifiedPermutedBlock { block_size }, pi }
    }

    pub fn pocock_simon(pi: Vec<f64>, biased_coin_p: f64) -> Self {
        SchemeSpec {
            kind: SchemeKind::PocockSimon { biased_coin_p, margin_weights: Vec::new() },
            pi,
        }
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_pi(&self.pi)?;
        match &self.kind {
            SchemeKind::Simple => {}
            SchemeKind::StratifiedPermutedBlock { block_size } => {
                if *block_size == 0 {
                    return Err(Error::InvalidScheme("block_size must be positive".into()));
                }
                for (a, &p) in self.pi.iter().enumerate() {
                    let slots = *block_size as f64 * p;
                    if (slots - slots.round()).abs() > 1e-9 || slots.round() < 1.0 {
                        return Err(Error::InvalidScheme(format!(
                            "block_size {} x pi_{} = {} is not a positive integer",
                            block_size,
                            a + 1,
                            slots
                        )));
                    }
                }
            }
            SchemeKind::PocockSimon { biased_coin_p, .. } => {
                let k = self.k() as f64;
                if !(*biased_coin_p > 1.0 / k && *biased_coin_p <= 1.0) {
                    return Err(Error::InvalidScheme(format!(
                        "biased_coin_p must be in (1/{}, 1], got {}",
                        self.k(),
                        biased_coin_p
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            SchemeKind::Simple => "simple".into(),
            SchemeKind::StratifiedPermutedBlock { block_size } => format!("permuted_block({block_size})"),
            SchemeKind::PocockSimon { biased_coin_p, .. } => format!("minimization(p={biased_coin_p})"),
        }
    }
}

/// The per-stratum allocation covariance specification for a scheme,
/// together with the simple-randomization constant `Omega_SR = diag(pi) - pi pi'`.
#[derive(Debug, Clone)]
pub struct OmegaSpec {
    pub omega_sr: DMatrix<f64>,
    /// `Some(m)` when every stratum shares the known matrix `m`; `None` when
    /// the scheme's Omega is unknown (Pocock–Simon).
    pub per_stratum: Option<DMatrix<f64>>,
}

impl OmegaSpec {
    pub fn is_known(&self) -> bool {
        self.per_stratum.is_some()
    }

    /// `Omega(z)` for a stratum, if known.
    pub fn omega_for_stratum(&self, _level: usize) -> Option<&DMatrix<f64>> {
        self.per_stratum.as_ref()
    }
}

pub fn omega_sr(pi: &[f64]) -> DMatrix<f64> {
    let k = pi.len();
    DMatrix::from_fn(k, k, |a, b| if a == b { pi[a] - pi[a] * pi[b] } else { -pi[a] * pi[b] })
}

/// Resolve the condition-(B) covariance for a scheme: `Omega_SR` under simple
/// randomization, zero under stratified permuted blocks, unknown under
/// Pocock–Simon minimization.
pub fn omega_for(spec: &SchemeSpec) -> OmegaSpec {
    let sr = omega_sr(&spec.pi);
    let k = spec.k();
    let per_stratum = match &spec.kind {
        SchemeKind::Simple => Some(sr.clone()),
        SchemeKind::StratifiedPermutedBlock { .. } => Some(DMatrix::zeros(k, k)),
        SchemeKind::PocockSimon { .. } => None,
    };
    OmegaSpec { omega_sr: sr, per_stratum }
}

/// Mutable state of a randomization scheme over one enrollment stream.
///
/// Assignment is inherently sequential; run one `SchemeState` per stream and
/// give parallel streams independent RNG streams.
pub struct SchemeState {
    spec: SchemeSpec,
    rng: ChaCha12Rng,
    /// Remaining block slots per arm, keyed by stratum level (permuted block).
    block_slots: HashMap<usize, Vec<usize>>,
    /// Arm counts per margin and margin level (Pocock–Simon).
    margin_counts: Vec<HashMap<usize, Vec<u64>>>,
}

impl SchemeState {
    pub fn new(spec: SchemeSpec, rng: ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        Ok(SchemeState { spec, rng, block_slots: HashMap::new(), margin_counts: Vec::new() })
    }

    pub fn spec(&self) -> &SchemeSpec {
        &self.spec
    }

    /// Assign the next patient. `z` is the joint stratum level (used by
    /// permuted blocks); `margins` are the patient's per-margin levels (used
    /// by minimization). Returns a 0-based arm index. Unseen stratum or
    /// margin levels initialize fresh state.
    pub fn assign_next(&mut self, z: usize, margins: &[usize]) -> Result<usize> {
        let k = self.spec.k();
        match self.spec.kind.clone() {
            SchemeKind::Simple => {
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                for (a, &p) in self.spec.pi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok(a);
                    }
                }
                Ok(k - 1)
            }
            SchemeKind::StratifiedPermutedBlock { block_size } => {
                let pi = self.spec.pi.clone();
                let slots = self.block_slots.entry(z).or_insert_with(Vec::new);
                if slots.iter().sum::<usize>() == 0 {
                    *slots = pi.iter().map(|&p| (block_size as f64 * p).round() as usize).collect();
                }
                // uniform draw among the remaining slots of the current block
                let total: usize = slots.iter().sum();
                let mut pick = self.rng.random_range(0..total);
                for (a, s) in slots.iter_mut().enumerate() {
                    if pick < *s {
                        *s -= 1;
                        return Ok(a);
                    }
                    pick -= *s;
                }
                unreachable!("slot draw out of range");
            }
            SchemeKind::PocockSimon { biased_coin_p, margin_weights } => {
                if margins.is_empty() {
                    return Err(Error::InvalidScheme(
                        "Pocock-Simon assignment requires at least one margin".into(),
                    ));
                }
                if self.margin_counts.len() < margins.len() {
                    self.margin_counts.resize_with(margins.len(), HashMap::new);
                }
                let pi = self.spec.pi.clone();
                // weighted sum over margins of the range of pi-normalized
                // hypothetical post-assignment counts
                let mut imbalance = vec![0.0f64; k];
                for (t, imb) in imbalance.iter_mut().enumerate() {
                    for (m, &level) in margins.iter().enumerate() {
                        let w = margin_weights.get(m).copied().unwrap_or(1.0);
                        let counts = self.margin_counts[m].get(&level).cloned().unwrap_or_else(|| vec![0; k]);
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for a in 0..k {
                            let c = counts[a] as f64 + if a == t { 1.0 } else { 0.0 };
                            let d = c / pi[a];
                            lo = lo.min(d);
                            hi = hi.max(d);
                        }
                        *imb += w * (hi - lo);
                    }
                }
                let min = imbalance.iter().cloned().fold(f64::INFINITY, f64::min);
                let tol = 1e-9 * (1.0 + min.abs());
                let ties: Vec<usize> = (0..k).filter(|&t| imbalance[t] <= min + tol).collect();
                let assigned = if ties.len() == k {
                    self.rng.random_range(0..k)
                } else {
                    let best = ties[self.rng.random_range(0..ties.len())];
                    if self.rng.random::<f64>() < biased_coin_p {
                        best
                    } else {
                        let mut others: Vec<usize> = (0..k).filter(|&t| t != best).collect();
                        others.swap_remove(self.rng.random_range(0..others.len()))
                    }
                };
                for (m, &level) in margins.iter().enumerate() {
                    let counts = self.margin_counts[m].entry(level).or_insert_with(|| vec![0; k]);
                    counts[assigned] += 1;
                }
                Ok(assigned)
            }
        }
    }
}

/// Per-stratum allocation-rate diagnostics.
#[derive(Debug, Clone)]
pub struct AllocationRateReport {
    pub labels: Vec<String>,
    /// `sqrt(n) * (n_a(z)/n(z) - pi_a)`, L x k.
    pub statistics: DMatrix<f64>,
}

/// Compute `sqrt(n) (n_a(z)/n(z) - pi_a)` for every stratum and arm; under
/// permuted blocks additionally enforce the hard bound
/// `|n_a(z) - n(z) pi_a| <= block_size`.
pub fn check_allocation_rate(d: &TrialDataset, spec: &SchemeSpec) -> Result<AllocationRateReport> {
    spec.validate()?;
    let counts = crate::data::summarize_strata(d);
    let n = d.n() as f64;
    let l = counts.len();
    let k = d.k;
    let mut stats = DMatrix::zeros(l, k);
    for (li, row) in counts.iter().enumerate() {
        for a in 0..k {
            let nz = row.n as f64;
            let naz = row.per_arm[a] as f64;
            stats[(li, a)] = n.sqrt() * (naz / nz - d.pi[a]);
            if let SchemeKind::StratifiedPermutedBlock { block_size } = spec.kind {
                let dev = (naz - nz * d.pi[a]).abs();
                if dev > block_size as f64 + 1e-9 {
                    return Err(Error::SchemeInvariantViolated(format!(
                        "stratum `{}`, arm {}: |n_a(z) - n(z) pi_a| = {dev:.3} exceeds block size {block_size}",
                        row.label,
                        a + 1
                    )));
                }
            }
        }
    }
    Ok(AllocationRateReport { labels: counts.iter().map(|r| r.label.clone()).collect(), statistics: stats })
}
