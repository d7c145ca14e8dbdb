//! Token-level differentially private perturbation.
//!
//! Each question token x is independently replaced by a token y drawn with
//! probability proportional to `exp(ε·u(x,y) / (2Δu))`, where the utility
//! u is cosine similarity between embedding rows and Δu is the utility
//! sensitivity. Sampling over the full vocabulary (no candidate truncation)
//! makes the ε-DP ratio bound exact. Labels and raw questions never enter
//! the output records.

use crate::data::{PerturbedRecord, PrivateRecord};
use crate::error::{Error, Result};
use crate::model::{Tensor, TransformerModel};
use crate::num;
use crate::vocab::Vocab;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where an embedding table came from; recorded for audit output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    ModelEmbedding,
    ExternalFile,
}

/// Validated carrier for the utility function's vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vectors: Tensor<f32>,
    pub source: EmbeddingSource,
}

impl EmbeddingTable {
    pub fn new(vectors: Tensor<f32>, source: EmbeddingSource) -> Result<Self> {
        if vectors.shape.len() != 2 {
            return Err(Error::Data(format!(
                "embedding table must be 2-d, got {:?}",
                vectors.shape
            )));
        }
        let (v, d) = (vectors.shape[0], vectors.shape[1]);
        if v == 0 || d == 0 {
            return Err(Error::Data("embedding table is empty".into()));
        }
        for i in 0..v {
            let row = &vectors.data[i * d..(i + 1) * d];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("embedding row {i} has non-finite entries")));
            }
            if num::sumsq(row) == 0.0 {
                return Err(Error::Data(format!(
                    "embedding row {i} is all-zero; cosine utility undefined"
                )));
            }
        }
        Ok(EmbeddingTable { vectors, source })
    }

    /// Use the model's own token-embedding matrix (the default source).
    pub fn from_model(model: &TransformerModel<f32>) -> Result<Self> {
        Self::new(model.tok_emb.clone(), EmbeddingSource::ModelEmbedding)
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.shape[0]
    }

    fn row(&self, id: u32) -> &[f32] {
        let d = self.vectors.shape[1];
        &self.vectors.data[id as usize * d..(id as usize + 1) * d]
    }
}

/// ε plus the sensitivity Δu that scales the mechanism's exponent.
#[derive(Debug, Clone, Copy)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub sensitivity: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, sensitivity: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Data(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(sensitivity > 0.0) || !sensitivity.is_finite() {
            return Err(Error::Data(format!(
                "sensitivity must be positive, got {sensitivity} (degenerate table?)"
            )));
        }
        Ok(PrivacyBudget { epsilon, sensitivity })
    }
}

/// How Δu is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityMode {
    /// Exhaustive maximum over all (x, x′, y) triples — exact on small
    /// vocabularies.
    Exact,
    /// The cosine-range constant 2, a safe upper bound for any table.
    Bound,
}

/// Conservative Δu for cosine utility: |u| ≤ 1, so any difference ≤ 2.
pub const SENSITIVITY_BOUND: f64 = 2.0;

/// Cosine-similarity utility between two tokens' embedding rows.
pub fn utility(x: u32, y: u32, table: &EmbeddingTable) -> Result<f64> {
    let v = table.vocab_size() as u32;
    if x >= v || y >= v {
        return Err(Error::Data(format!("utility: token id out of range ({x}, {y}) vs {v}")));
    }
    Ok(num::cosine(table.row(x), table.row(y)))
}

/// All-pairs utility matrix, row x → [u(x, 0), u(x, 1), ...].
fn utility_matrix(table: &EmbeddingTable) -> Vec<f64> {
    let v = table.vocab_size();
    let norms: Vec<f64> = (0..v)
        .map(|i| num::sumsq(table.row(i as u32)).sqrt())
        .collect();
    let mut u = vec![0.0f64; v * v];
    for x in 0..v {
        u[x * v + x] = 1.0;
        for y in 0..x {
            let c = num::dot(table.row(x as u32), table.row(y as u32)) / (norms[x] * norms[y]);
            u[x * v + y] = c;
            u[y * v + x] = c;
        }
    }
    u
}

/// Exact sensitivity: `max over (x, x′, y) of |u(x,y) − u(x′,y)|`, which is
/// the widest per-column utility spread.
pub fn sensitivity(table: &EmbeddingTable) -> f64 {
    let v = table.vocab_size();
    let u = utility_matrix(table);
    let mut worst = 0.0f64;
    for y in 0..v {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in 0..v {
            let val = u[x * v + y];
            lo = lo.min(val);
            hi = hi.max(val);
        }
        worst = worst.max(hi - lo);
    }
    worst
}

pub fn compute_sensitivity(table: &EmbeddingTable, mode: SensitivityMode) -> f64 {
    match mode {
        SensitivityMode::Exact => sensitivity(table),
        SensitivityMode::Bound => SENSITIVITY_BOUND,
    }
}

/// Precomputed replacement distributions, one row per input token.
pub struct Mechanism {
    vocab: usize,
    /// `[V, V]`: probs[x·V + y] = P(y | x).
    probs: Vec<f64>,
}

impl Mechanism {
    pub fn new(table: &EmbeddingTable, budget: PrivacyBudget) -> Result<Self> {
        let v = table.vocab_size();
        let u = utility_matrix(table);
        let scale = budget.epsilon / (2.0 * budget.sensitivity);
        let mut probs = vec![0.0f64; v * v];
        for x in 0..v {
            let row = &u[x * v..(x + 1) * v];
            let logw: Vec<f64> = row.iter().map(|&ui| scale * ui).collect();
            let lse = num::log_sum_exp(&logw);
            for y in 0..v {
                probs[x * v + y] = (logw[y] - lse).exp();
            }
        }
        Ok(Mechanism { vocab: v, probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Analytic replacement distribution for token x.
    pub fn distribution(&self, x: u32) -> &[f64] {
        &self.probs[x as usize * self.vocab..(x as usize + 1) * self.vocab]
    }

    /// Draw one replacement by inverse-CDF over the analytic distribution.
    pub fn sample<G: Rng>(&self, x: u32, rng: &mut G) -> u32 {
        let row = self.distribution(x);
        let r: f64 = rng.gen();
        let mut acc = 0.0f64;
        for (y, &p) in row.iter().enumerate() {
            acc += p;
            if r < acc {
                return y as u32;
            }
        }
        (self.vocab - 1) as u32 // cumulative rounding shortfall
    }
}

/// Replace one token under the mechanism.
pub fn perturb_token<G: Rng>(
    x: u32,
    budget: PrivacyBudget,
    table: &EmbeddingTable,
    rng: &mut G,
) -> Result<u32> {
    if x as usize >= table.vocab_size() {
        return Err(Error::Data(format!("perturb: token id {x} out of range")));
    }
    let mech = Mechanism::new(table, budget)?;
    Ok(mech.sample(x, rng))
}

/// Perturb every question independently, token by token. Output order
/// matches input order; labels and raw questions are dropped by
/// construction of [`PerturbedRecord`].
pub fn perturb_dataset<G: Rng>(
    records: &[PrivateRecord],
    vocab: &Vocab,
    budget: PrivacyBudget,
    table: &EmbeddingTable,
    rng: &mut G,
) -> Result<Vec<PerturbedRecord>> {
    if records.is_empty() {
        return Err(Error::Data("perturb: no input records".into()));
    }
    if table.vocab_size() != vocab.len() {
        return Err(Error::Data(format!(
            "perturb: table has {} rows but vocabulary has {} tokens",
            table.vocab_size(),
            vocab.len()
        )));
    }
    let mech = Mechanism::new(table, budget)?;
    let mut out = Vec::with_capacity(records.len());
    for (idx, rec) in records.iter().enumerate() {
        rec.validate()
            .map_err(|e| Error::Data(format!("record {idx}: {e}")))?;
        let ids = vocab.encode(&rec.question);
        let perturbed: Vec<u32> = ids.iter().map(|&x| mech.sample(x, rng)).collect();
        out.push(PerturbedRecord {
            id: rec.id.clone(),
            perturbed_question: vocab.decode(&perturbed),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::rng_for;

    fn table(rows: &[&[f32]]) -> EmbeddingTable {
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingTable::new(
            Tensor {
                shape: vec![rows.len(), d],
                data,
            },
            EmbeddingSource::ExternalFile,
        )
        .unwrap()
    }

    fn random_table(v: usize, d: usize, seed: u64) -> EmbeddingTable {
        use rand_distr::{Distribution, Normal};
        let mut rng = rng_for(seed, "dp-test-table");
        let n = Normal::new(0.0f64, 1.0).unwrap();
        let data: Vec<f32> = (0..v * d).map(|_| n.sample(&mut rng) as f32).collect();
        EmbeddingTable::new(
            Tensor {
                shape: vec![v, d],
                data,
            },
            EmbeddingSource::ExternalFile,
        )
        .unwrap()
    }

    #[test]
    fn table_validation_rejects_degenerate_rows() {
        let zero_row = Tensor {
            shape: vec![2, 2],
            data: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!(EmbeddingTable::new(zero_row, EmbeddingSource::ExternalFile).is_err());
        let nan_row = Tensor {
            shape: vec![1, 2],
            data: vec![f32::NAN, 1.0],
        };
        assert!(EmbeddingTable::new(nan_row, EmbeddingSource::ExternalFile).is_err());
    }

    #[test]
    fn utility_limits() {
        let t = table(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 2.0]]);
        assert!((utility(0, 0, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((utility(0, 1, &t).unwrap() + 1.0).abs() < 1e-12);
        assert!(utility(0, 2, &t).unwrap().abs() < 1e-12);
        assert!(utility(0, 9, &t).is_err());
    }

    #[test]
    fn sensitivity_hits_cosine_range_on_antipodal_pair() {
        let t = table(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.5, 0.5]]);
        // u(0,0)=1 and u(1,0)=−1 ⇒ spread 2 in column y=0.
        assert!((sensitivity(&t) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_matches_brute_force_triple_loop() {
        let t = random_table(5, 7, 42);
        let fast = sensitivity(&t);
        let mut brute = 0.0f64;
        for x in 0..5u32 {
            for xp in 0..5u32 {
                for y in 0..5u32 {
                    let d = (utility(x, y, &t).unwrap() - utility(xp, y, &t).unwrap()).abs();
                    brute = brute.max(d);
                }
            }
        }
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
        assert!(fast <= 2.0);
    }

    #[test]
    fn budget_rejects_degenerate_values() {
        assert!(PrivacyBudget::new(0.0, 2.0).is_err());
        assert!(PrivacyBudget::new(-1.0, 2.0).is_err());
        assert!(PrivacyBudget::new(3.0, 0.0).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 2.0).is_err());
        PrivacyBudget::new(3.0, 2.0).unwrap();
        // Single-token vocabulary has zero sensitivity and is rejected at
        // budget construction.
        let t = table(&[&[1.0, 0.0]]);
        assert_eq!(sensitivity(&t), 0.0);
        assert!(PrivacyBudget::new(3.0, sensitivity(&t)).is_err());
    }

    /// Fixed 3-outcome softmax with utilities (1, 0.5, 0), Δu=2, ε=4:
    /// exp(1)/Z, exp(0.5)/Z, exp(0)/Z for Z = e¹ + e½ + e⁰.
    #[test]
    fn analytic_distribution_matches_worked_example() {
        // Build geometry with u(x0,·) = (1.0, 0.5, 0.0): x0 itself, a row
        // at 60°, and an orthogonal row.
        let t = table(&[
            &[1.0, 0.0],
            &[0.5, 0.75f32.sqrt()],
            &[0.0, 1.0],
        ]);
        let budget = PrivacyBudget::new(4.0, 2.0).unwrap();
        let mech = Mechanism::new(&t, budget).unwrap();
        let p = mech.distribution(0);
        let expect = [0.50648, 0.30719, 0.18632];
        for (got, want) in p.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dp_ratio_bound_holds_analytically() {
        for (v, seed) in [(3usize, 1u64), (8, 2), (16, 3)] {
            let t = random_table(v, 6, seed);
            for eps in [0.5f64, 3.0] {
                let budget = PrivacyBudget::new(eps, sensitivity(&t)).unwrap();
                let mech = Mechanism::new(&t, budget).unwrap();
                for x in 0..v as u32 {
                    for xp in 0..v as u32 {
                        let px = mech.distribution(x);
                        let pxp = mech.distribution(xp);
                        for y in 0..v {
                            let ratio = px[y].ln() - pxp[y].ln();
                            assert!(
                                ratio <= eps,
                                "V={v} eps={eps}: log-ratio {ratio} for ({x},{xp},{y})"
                            );
                        }
                    }
                }
            }
        }
    }

    fn total_variation(emp: &[f64], analytic: &[f64]) -> f64 {
        emp.iter()
            .zip(analytic)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0
    }

    #[test]
    fn sampling_matches_analytic_distribution() {
        let t = random_table(16, 8, 7);
        let budget = PrivacyBudget::new(3.0, sensitivity(&t)).unwrap();
        let mech = Mechanism::new(&t, budget).unwrap();
        let mut rng = rng_for(100, "dp-tv");
        let n = 100_000;
        let mut counts = vec![0usize; 16];
        for _ in 0..n {
            counts[mech.sample(4, &mut rng) as usize] += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let tv = total_variation(&emp, mech.distribution(4));
        assert!(tv < 0.01, "TV distance {tv}");
    }

    #[test]
    fn vanishing_epsilon_approaches_uniform() {
        let t = random_table(12, 8, 9);
        let budget = PrivacyBudget::new(1e-9, sensitivity(&t)).unwrap();
        let mech = Mechanism::new(&t, budget).unwrap();
        let uniform = vec![1.0 / 12.0; 12];
        let mut rng = rng_for(101, "dp-eps0");
        let n = 100_000;
        let mut counts = vec![0usize; 12];
        for _ in 0..n {
            counts[mech.sample(3, &mut rng) as usize] += 1;
        }
        let emp: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!(total_variation(&emp, &uniform) < 0.01);
    }

    #[test]
    fn huge_epsilon_keeps_the_token() {
        let t = random_table(10, 8, 11);
        let budget = PrivacyBudget::new(100.0, sensitivity(&t)).unwrap();
        let mech = Mechanism::new(&t, budget).unwrap();
        let mut rng = rng_for(102, "dp-eps100");
        let n = 2000;
        let kept = (0..n).filter(|_| mech.sample(6, &mut rng) == 6).count();
        assert!(
            kept as f64 / n as f64 >= 0.999,
            "kept fraction {}",
            kept as f64 / n as f64
        );
    }

    #[test]
    fn expected_utility_is_monotone_in_epsilon() {
        let t = random_table(14, 8, 13);
        let du = sensitivity(&t);
        let mut last = f64::NEG_INFINITY;
        for eps in [0.5, 1.0, 3.0, 5.0, 10.0] {
            let mech = Mechanism::new(&t, PrivacyBudget::new(eps, du).unwrap()).unwrap();
            let p = mech.distribution(2);
            let eu: f64 = (0..14u32)
                .map(|y| p[y as usize] * utility(2, y, &t).unwrap())
                .sum();
            assert!(eu >= last - 1e-12, "expected utility dropped: {last} -> {eu} at eps {eps}");
            last = eu;
        }
    }

    #[test]
    fn dataset_perturbation_preserves_order_and_drops_labels() {
        let vocab = Vocab::new(["key", "k1", "k2", "maps", "to", "which", "value", "v1", "v2"]);
        let t = random_table(vocab.len(), 8, 17);
        let budget = PrivacyBudget::new(3.0, sensitivity(&t)).unwrap();
        let records: Vec<PrivateRecord> = (0..5)
            .map(|i| PrivateRecord {
                id: format!("r{i}"),
                question: "key k1 maps to which value".into(),
                choices: vec!["v1".into(), "v2".into()],
                answer: "v2".into(),
            })
            .collect();
        let mut rng = rng_for(7, "perturb");
        let out = perturb_dataset(&records, &vocab, budget, &t, &mut rng).unwrap();
        assert_eq!(out.len(), 5);
        for (i, p) in out.iter().enumerate() {
            assert_eq!(p.id, format!("r{i}"));
            let json = serde_json::to_string(p).unwrap();
            let value: serde_json::Value = serde_json::from_str(&json).unwrap();
            let keys: Vec<&str> = value.as_object().unwrap().keys().map(|s| s.as_str()).collect();
            assert_eq!(keys, ["id", "perturbed_question"]);
        }
        // Same seed reproduces bit-identically; a different seed does not.
        let mut rng2 = rng_for(7, "perturb");
        let again = perturb_dataset(&records, &vocab, budget, &t, &mut rng2).unwrap();
        assert_eq!(again, out);
        let mut rng3 = rng_for(8, "perturb");
        let other = perturb_dataset(&records, &vocab, budget, &t, &mut rng3).unwrap();
        assert_ne!(other, out);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let vocab = Vocab::new(["a"]);
        let t = random_table(vocab.len(), 4, 19);
        let budget = PrivacyBudget::new(3.0, 2.0).unwrap();
        let mut rng = rng_for(1, "perturb");
        assert!(perturb_dataset(&[], &vocab, budget, &t, &mut rng).is_err());
    }
}
