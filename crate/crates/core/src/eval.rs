//! Mean measurement fidelity and cross-model comparison reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::QubitState;
use crate::error::{Error, ParseError, Result};

/// `counts[prepared][measured]` over all `2^n` states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionTable {
    pub n_ions: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionTable {
    pub fn new(n_ions: usize) -> Self {
        let n = 1 << n_ions;
        ConfusionTable {
            n_ions,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn n_states(&self) -> usize {
        1 << self.n_ions
    }

    pub fn row_total(&self, prepared: usize) -> u64 {
        self.counts[prepared].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.n_states();
        if self.n_ions == 0 || self.n_ions > 8 || self.counts.len() != n || self.counts.iter().any(|r| r.len() != n) {
            return Err(Error::Evaluation(format!(
                "confusion table is not {n}x{n} for {} ions",
                self.n_ions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityResult {
    pub mmf: f64,
    pub error: f64,
    /// `p(measured i | prepared i)` for every state `i`.
    pub diagonal: Vec<f64>,
}

pub fn tally(predictions: &[QubitState], labels: &[QubitState], n_ions: usize) -> Result<ConfusionTable> {
    if predictions.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut table = ConfusionTable::new(n_ions);
    for (p, l) in predictions.iter().zip(labels) {
        if p.n_ions() != n_ions || l.n_ions() != n_ions {
            return Err(Error::Evaluation(format!(
                "state with {} ions in a {n_ions}-ion tally",
                if p.n_ions() != n_ions { p.n_ions() } else { l.n_ions() }
            )));
        }
        table.counts[l.class_index()][p.class_index()] += 1;
    }
    Ok(table)
}

/// Average over prepared states of the probability of measuring that state.
pub fn mmf(table: &ConfusionTable) -> Result<FidelityResult> {
    table.check_shape()?;
    let mut diagonal = Vec::with_capacity(table.n_states());
    for i in 0..table.n_states() {
        let total = table.row_total(i);
        if total == 0 {
            let state = QubitState::from_class(table.n_ions, i)?;
            return Err(Error::Evaluation(format!("no samples prepared in state {state}")));
        }
        diagonal.push(table.counts[i][i] as f64 / total as f64);
    }
    let mmf = diagonal.iter().sum::<f64>() / diagonal.len() as f64;
    Ok(FidelityResult {
        mmf,
        error: 1.0 - mmf,
        diagonal,
    })
}

/// Mean per-class hit rate over class indices; classes without samples are
/// skipped. Used for checkpoint selection where states may be missing.
pub fn class_mean_fidelity(predicted: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut hits = vec![0u64; n_classes];
    let mut totals = vec![0u64; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        totals[l] += 1;
        hits[l] += (p == l) as u64;
    }
    let rates: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

/// Outcome of evaluating one classifier on one dataset, as persisted by the
/// `classify` and `infer` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub dataset: String,
    pub model: String,
    pub samples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
    pub fidelity: FidelityResult,
    pub confusion: ConfusionTable,
}

impl ResultRecord {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>, confusion: ConfusionTable) -> Result<Self> {
        let fidelity = mmf(&confusion)?;
        Ok(ResultRecord {
            dataset: dataset.into(),
            model: model.into(),
            samples: confusion.total(),
            latency_seconds: None,
            fidelity,
            confusion,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("result record serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ParseError> {
        let rec: ResultRecord = toml::from_str(text).map_err(|e| ParseError::Malformed {
            what: "result record",
            detail: e.message().to_string(),
        })?;
        rec.confusion.check_shape().map_err(|e| ParseError::Malformed {
            what: "result record",
            detail: e.to_string(),
        })?;
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_toml_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub error_percent: f64,
    /// Threshold error divided by this model's error, one decimal.
    pub reduction_factor: Option<f64>,
    pub latency_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
}

fn is_baseline(model: &str) -> bool {
    model.eq_ignore_ascii_case("threshold")
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Builds the dataset/model/error grid. Within each dataset, every non
/// threshold model gets a reduction factor against that dataset's threshold
/// row, if there is one.
pub fn compare_report(results: &[ResultRecord]) -> Result<ComparisonReport> {
    if results.is_empty() {
        return Err(Error::Evaluation("report needs at least one result".into()));
    }
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let baseline = results
            .iter()
            .find(|b| b.dataset == r.dataset && is_baseline(&b.model))
            .map(|b| b.fidelity.error);
        let reduction_factor = match baseline {
            Some(base) if !is_baseline(&r.model) => Some(if r.fidelity.error > 0.0 {
                round1(base / r.fidelity.error)
            } else {
                f64::INFINITY
            }),
            _ => None,
        };
        rows.push(ReportRow {
            dataset: r.dataset.clone(),
            model: r.model.clone(),
            error_percent: r.fidelity.error * 100.0,
            reduction_factor,
            latency_seconds: r.latency_seconds,
        });
    }
    Ok(ComparisonReport { rows })
}

impl ComparisonReport {
    /// Aligned plain-text table; the dataset name is printed once per group.
    pub fn to_text(&self) -> String {
        let dw = self.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
        let mw = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<dw$}  {:<mw$}  {:>13}  {:>9}  {:>12}",
            "Dataset", "Model", "MMF Error (%)", "Reduction", "Latency (s)"
        );
        let _ = writeln!(out, "{}", "-".repeat(dw + mw + 13 + 9 + 12 + 8));
        let mut last = None;
        for r in &self.rows {
            let ds = if last == Some(&r.dataset) { "" } else { r.dataset.as_str() };
            last = Some(&r.dataset);
            let factor = r.reduction_factor.map_or("-".to_string(), |f| format!("{f:.1}x"));
            let latency = r.latency_seconds.map_or("-".to_string(), |l| format!("{l:.6e}"));
            let _ = writeln!(
                out,
                "{:<dw$}  {:<mw$}  {:>13.2}  {:>9}  {:>12}",
                ds, r.model, r.error_percent, factor, latency
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model,mmf_error_percent,reduction_factor,latency_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{}",
                csv_field(&r.dataset),
                csv_field(&r.model),
                r.error_percent,
                r.reduction_factor.map_or(String::new(), |f| format!("{f:.1}")),
                r.latency_seconds.map_or(String::new(), |l| format!("{l:e}")),
            );
        }
        out
    }

    /// Writes `<prefix>.txt` and `<prefix>.csv`.
    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        std::fs::write(with_suffix(prefix, "txt"), self.to_text())?;
        std::fs::write(with_suffix(prefix, "csv"), self.to_csv())?;
        Ok(())
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(n: usize, b: usize) -> QubitState {
        QubitState::from_class(n, b).unwrap()
    }

    fn table_with_diagonal(n_ions: usize, per_state: u64, correct: u64) -> ConfusionTable {
        let mut t = ConfusionTable::new(n_ions);
        let n = t.n_states();
        for i in 0..n {
            t.counts[i][i] = correct;
            t.counts[i][(i + 1) % n] = per_state - correct;
        }
        t
    }

    #[test]
    fn tally_examples() {
        let preds: Vec<_> = (0..8).map(|i| st(3, i)).collect();
        let t = tally(&preds, &preds, 3).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(t.counts[i][j], u64::from(i == j));
            }
        }
        let t = tally(&[st(1, 1)], &[st(1, 0)], 1).unwrap();
        assert_eq!(t.counts[0][1], 1);
        assert!(tally(&[st(1, 1)], &[], 1).is_err());
    }

    #[test]
    fn tally_matches_independent_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<_> = (0..1000).map(|_| st(3, rng.random_range(0..8))).collect();
        let preds: Vec<_> = (0..1000).map(|_| st(3, rng.random_range(0..8))).collect();
        let t = tally(&preds, &labels, 3).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let n = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(l, p)| l.bits() as usize == i && p.bits() as usize == j)
                    .count() as u64;
                assert_eq!(t.counts[i][j], n);
            }
        }
    }

    #[test]
    fn mmf_examples() {
        let r = mmf(&table_with_diagonal(1, 50, 49)).unwrap();
        assert!((r.mmf - 0.98).abs() < 1e-15);
        assert!((r.error * 100.0 - 2.0).abs() < 1e-12);
        assert_eq!(r.error, 1.0 - r.mmf);

        assert_eq!(mmf(&table_with_diagonal(2, 10, 10)).unwrap().mmf, 1.0);

        let r = mmf(&table_with_diagonal(3, 200, 197)).unwrap();
        assert!((r.mmf - 0.985).abs() < 1e-15);
    }

    #[test]
    fn empty_prepared_state_is_named() {
        let mut t = ConfusionTable::new(3);
        for i in 0..8 {
            if i != 5 {
                t.counts[i][i] = 1;
            }
        }
        let err = mmf(&t).unwrap_err().to_string();
        assert!(err.contains("101"), "{err}");
    }

    fn record(dataset: &str, model: &str, error: f64) -> ResultRecord {
        ResultRecord {
            dataset: dataset.into(),
            model: model.into(),
            samples: 0,
            latency_seconds: None,
            fidelity: FidelityResult {
                mmf: 1.0 - error,
                error,
                diagonal: vec![],
            },
            confusion: ConfusionTable::new(1),
        }
    }

    #[test]
    fn reduction_factors() {
        let rep = compare_report(&[
            record("3-Qubit", "Threshold", 0.114),
            record("3-Qubit", "ViT", 0.015),
            record("1-Qubit", "Threshold", 0.020),
            record("1-Qubit", "MLP", 0.011),
        ])
        .unwrap();
        assert_eq!(rep.rows[0].reduction_factor, None);
        assert_eq!(rep.rows[1].reduction_factor, Some(7.6));
        assert_eq!(rep.rows[3].reduction_factor, Some(1.8));
        let csv = rep.to_csv();
        assert!(csv.starts_with("dataset,model,mmf_error_percent,reduction_factor,latency_seconds\n"));
        assert!(csv.contains("3-Qubit,ViT,1.5000,7.6,"));
        assert!(rep.to_text().contains("7.6x"));
    }

    #[test]
    fn single_model_report() {
        let rep = compare_report(&[record("3-Qubit", "MLP", 0.03)]).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].reduction_factor, None);
        assert!(compare_report(&[]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let preds = [st(1, 0), st(1, 1), st(1, 1)];
        let labels = [st(1, 0), st(1, 1), st(1, 0)];
        let mut rec = ResultRecord::new("1-Qubit", "MLP", tally(&preds, &labels, 1).unwrap()).unwrap();
        rec.latency_seconds = Some(2e-8);
        let back = ResultRecord::from_toml_str(&rec.to_toml()).unwrap();
        assert_eq!(back, rec);
        assert!(ResultRecord::from_toml_str("dataset = 1").is_err());
    }

    proptest! {
        #[test]
        fn mmf_matches_brute_force_and_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 8..200),
            perm_seed in any::<u64>(),
        ) {
            let labels: Vec<_> = pairs.iter().map(|&(l, _)| st(2, l)).collect();
            let preds: Vec<_> = pairs.iter().map(|&(_, p)| st(2, p)).collect();
            let present = (0..4).all(|s| labels.iter().any(|l| l.class_index() == s));
            prop_assume!(present);
            let r = mmf(&tally(&preds, &labels, 2).unwrap()).unwrap();

            let mut brute = 0.0;
            for s in 0..4 {
                let prepared = pairs.iter().filter(|p| p.0 == s).count() as f64;
                let hit = pairs.iter().filter(|p| p.0 == s && p.1 == s).count() as f64;
                brute += hit / prepared;
            }
            prop_assert!((r.mmf - brute / 4.0).abs() < 1e-12);

            let mut perm = [0usize, 1, 2, 3];
            let k = (perm_seed % 24) as usize;
            perm.swap(0, k % 4);
            perm.swap(1, 1 + (k / 4) % 3);
            perm.swap(2, 2 + (k / 12) % 2);
            let pl: Vec<_> = labels.iter().map(|s| st(2, perm[s.class_index()])).collect();
            let pp: Vec<_> = preds.iter().map(|s| st(2, perm[s.class_index()])).collect();
            let r2 = mmf(&tally(&pp, &pl, 2).unwrap()).unwrap();
            prop_assert!((r.mmf - r2.mmf).abs() < 1e-12);
        }
    }

    #[test]
    fn class_mean_fidelity_skips_empty_classes() {
        // class 2 never prepared; classes 0 and 1 score 1/2 and 1
        let labels = [0, 0, 1, 1, 1];
        let predicted = [0, 1, 1, 1, 1];
        assert_eq!(class_mean_fidelity(&predicted, &labels, 4), 0.75);
        let states = |v: &[usize]| v.iter().map(|&c| QubitState::from_class(1, c).unwrap()).collect::<Vec<_>>();
        let full = mmf(&tally(&states(&predicted), &states(&labels), 1).unwrap()).unwrap();
        assert_eq!(class_mean_fidelity(&predicted, &labels, 2), full.mmf);
    }
}
