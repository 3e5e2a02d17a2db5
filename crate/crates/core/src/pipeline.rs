//! The end-to-end workflow, stage by stage.
//!
//! Each stage writes into `<out>/<stage>/<key>/`, where the key hashes the
//! configuration the stage depends on together with its upstream keys. A
//! directory holding a `complete` marker is reused unless `force` is set.
//! Downstream stages always read their inputs back from disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{build_dataset_with_threads, load_dataset, save_dataset, Dataset, IonImage, QubitState};
use crate::error::{Error, Result};
use crate::eval::{compare_report, tally, ComparisonReport, ResultRecord};
use crate::polymlp::{compile_truth_tables, train_with_threads, LutNetwork, PolyMlpModel, VerifyMode};
use crate::threshold::{calibrate_model, ThresholdModel};
use crate::timingsim::{latency_report, seconds, simulate_frame, DnnLatencyProfile};
use crate::vit::{quantize_vit, train_vit_with_progress, FixedVitModel, VitModel};

pub const STAGES: [&str; 10] = [
    "gen",
    "calibrate",
    "train-mlp",
    "compile-lut",
    "verify-lut",
    "train-vit",
    "quantize",
    "infer",
    "report",
    "simulate",
];

const MARKER: &str = "complete";

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out_dir: PathBuf,
    pub force: bool,
    /// Worker threads for dataset generation and MLP training; 0 runs on
    /// the calling thread.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub stage: &'static str,
    pub key: String,
    pub artifacts: Vec<PathBuf>,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub stages: Vec<StageRecord>,
    pub report: ComparisonReport,
}

fn stage_key(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update([0]);
    h.update(stage.as_bytes());
    for p in parts {
        h.update([0]);
        h.update(p.as_bytes());
    }
    h.finalize()[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Runner<'a> {
    opts: &'a PipelineOptions,
    records: Vec<StageRecord>,
    log: &'a mut dyn FnMut(&StageRecord),
}

impl Runner<'_> {
    /// Runs `body` into a fresh stage directory unless a finished one with
    /// the same key exists. `files` names the artifacts inside it.
    fn stage(
        &mut self,
        stage: &'static str,
        key: String,
        files: &[&str],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let dir = self.opts.out_dir.join(stage).join(&key);
        let cached = !self.opts.force && dir.join(MARKER).is_file() && files.iter().all(|f| dir.join(f).is_file());
        if !cached {
            let run = || -> Result<()> {
                if dir.exists() {
                    std::fs::remove_dir_all(&dir)?;
                }
                std::fs::create_dir_all(&dir)?;
                body(&dir)?;
                write(&dir.join(MARKER), key.as_bytes())
            };
            run().map_err(|e| Error::Stage {
                stage,
                source: Box::new(e),
            })?;
        }
        let rec = StageRecord {
            stage,
            key,
            artifacts: files.iter().map(|f| dir.join(f)).collect(),
            cached,
        };
        (self.log)(&rec);
        self.records.push(rec);
        Ok(dir)
    }
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

fn dnn_train_split<'a>(cfg: &RunConfig, ds: &'a Dataset) -> &'a [IonImage] {
    match cfg.dnn_train_images {
        0 => &ds.train,
        n => &ds.train[..n.min(ds.train.len())],
    }
}

fn evaluate(
    cfg: &RunConfig,
    model: &str,
    test: &[IonImage],
    classify: impl Fn(&IonImage) -> Result<QubitState>,
) -> Result<ResultRecord> {
    let predictions = test.iter().map(classify).collect::<Result<Vec<_>>>()?;
    let labels: Vec<QubitState> = test.iter().map(|i| i.label).collect();
    ResultRecord::new(cfg.name.clone(), model, tally(&predictions, &labels, cfg.dataset.n_ions())?)
}

fn dnn_valid_seconds(cfg: &RunConfig, profile: &DnnLatencyProfile) -> Result<f64> {
    let t = cfg.timing_config(profile)?;
    Ok(seconds(latency_report(&simulate_frame(&t)?, &t)?.dnn_valid_latency))
}

/// Runs every stage in order, reporting each one through `log` as it
/// finishes.
pub fn run_pipeline(
    cfg: &RunConfig,
    opts: &PipelineOptions,
    log: &mut dyn FnMut(&StageRecord),
) -> Result<PipelineSummary> {
    cfg.validate()?;
    let mut run = Runner {
        opts,
        records: Vec::new(),
        log,
    };

    let gen_key = stage_key(
        "gen",
        &[
            &cfg.seed.to_string(),
            &cfg.n_images.to_string(),
            &cfg.split_ratio.to_string(),
            &toml_of(&cfg.dataset),
        ],
    );
    let dir = run.stage("gen", gen_key.clone(), &["dataset.qimg"], |d| {
        let ds = build_dataset_with_threads(&cfg.dataset, cfg.n_images, cfg.split_ratio, cfg.seed, opts.threads)?;
        save_dataset(&ds, d.join("dataset.qimg"))
    })?;
    let ds = in_stage("gen", load_dataset(dir.join("dataset.qimg")))?;
    let dnn_train = dnn_train_split(cfg, &ds);

    let cal_key = stage_key("calibrate", &[&gen_key, &toml_of(&cfg.threshold)]);
    let dir = run.stage("calibrate", cal_key.clone(), &["threshold.toml"], |d| {
        calibrate_model(&ds.train, &cfg.rois())?.save(d.join("threshold.toml"))
    })?;
    let threshold = in_stage("calibrate", ThresholdModel::load(dir.join("threshold.toml")))?;

    let mlp_key = stage_key(
        "train-mlp",
        &[&gen_key, &cfg.dnn_train_images.to_string(), &toml_of(&cfg.mlp)],
    );
    let dir = run.stage("train-mlp", mlp_key.clone(), &["model.qmlp"], |d| {
        train_with_threads(&cfg.mlp, dnn_train, opts.threads, |_, _| {})?.save(d.join("model.qmlp"))
    })?;
    let mlp = in_stage("train-mlp", PolyMlpModel::load(dir.join("model.qmlp")))?;

    let lut_key = stage_key("compile-lut", &[&mlp_key]);
    let dir = run.stage("compile-lut", lut_key.clone(), &["network.qlut", "netlist.txt"], |d| {
        let lut = compile_truth_tables(&mlp)?;
        lut.save(d.join("network.qlut"))?;
        write(&d.join("netlist.txt"), lut.netlist())
    })?;
    let lut = in_stage("compile-lut", LutNetwork::load(dir.join("network.qlut")))?;

    let verify_key = stage_key("verify-lut", &[&lut_key, &gen_key]);
    run.stage("verify-lut", verify_key, &["equivalence.txt"], |d| {
        let eq = lut.verify_equivalence(&mlp, VerifyMode::Exhaustive)?;
        let inputs = ds.test.iter().map(|i| lut.quantize(i)).collect::<Result<Vec<_>>>()?;
        let agree = lut.end_to_end_agreement(&mlp, &inputs)?;
        if agree != inputs.len() {
            return Err(Error::Evaluation(format!(
                "lookup and arithmetic argmax agree on only {agree} of {} test images",
                inputs.len()
            )));
        }
        write(
            &d.join("equivalence.txt"),
            format!(
                "tables checked: {}\nentries checked: {}\nmismatches: 0\nend-to-end agreement: {agree}/{}\n",
                eq.tables_checked,
                eq.entries_checked,
                inputs.len()
            ),
        )
    })?;

    let vit_key = stage_key(
        "train-vit",
        &[&gen_key, &cfg.dnn_train_images.to_string(), &toml_of(&cfg.vit)],
    );
    let dir = run.stage("train-vit", vit_key.clone(), &["model.qvit"], |d| {
        train_vit_with_progress(&cfg.vit, dnn_train, |_, _| {})?.save(d.join("model.qvit"))
    })?;
    let vit = in_stage("train-vit", VitModel::load(dir.join("model.qvit")))?;

    let q_key = stage_key("quantize", &[&vit_key, &cfg.fixed.format.to_string()]);
    let dir = run.stage("quantize", q_key.clone(), &["model.qvit"], |d| {
        quantize_vit(&vit, cfg.fixed.format)?.save(d.join("model.qvit"))
    })?;
    let fixed = in_stage("quantize", FixedVitModel::load(dir.join("model.qvit")))?;

    let results = ["threshold.toml", "mlp.toml", "vit.toml", "vit-float.toml"];
    let infer_key = stage_key("infer", &[&gen_key, &cal_key, &lut_key, &vit_key, &q_key, &cfg.name]);
    let dir = run.stage("infer", infer_key.clone(), &results, |d| {
        evaluate(cfg, "threshold", &ds.test, |i| threshold.classify(i))?.save(d.join(results[0]))?;
        evaluate(cfg, "MLP", &ds.test, |i| lut.classify(i))?.save(d.join(results[1]))?;
        evaluate(cfg, "ViT", &ds.test, |i| fixed.predict(i))?.save(d.join(results[2]))?;
        evaluate(cfg, "ViT (float)", &ds.test, |i| vit.predict(i))?.save(d.join(results[3]))
    })?;
    let mut records = in_stage(
        "infer",
        results[..3].iter().map(|f| ResultRecord::load(dir.join(f))).collect::<Result<Vec<_>>>(),
    )?;

    let report_key = stage_key("report", &[&infer_key, &toml_of(&cfg.timing)]);
    let report = in_stage("report", {
        let latencies = [None, Some(DnnLatencyProfile::mlp()), Some(cfg.vit_profile())];
        (|| {
            for (rec, profile) in records.iter_mut().zip(&latencies) {
                rec.latency_seconds = profile.as_ref().map(|p| dnn_valid_seconds(cfg, p)).transpose()?;
            }
            compare_report(&records)
        })()
    })?;
    run.stage("report", report_key, &["report.txt", "report.csv"], |d| report.write(d.join("report")))?;

    let sim_key = stage_key("simulate", &[&toml_of(&cfg.timing), &toml_of(&cfg.dataset)]);
    let files = ["mlp.trace", "mlp-latency.txt", "vit.trace", "vit-latency.txt"];
    run.stage("simulate", sim_key, &files, |d| {
        for (profile, trace, text) in [
            (DnnLatencyProfile::mlp(), files[0], files[1]),
            (cfg.vit_profile(), files[2], files[3]),
        ] {
            let t = cfg.timing_config(&profile)?;
            let tr = simulate_frame(&t)?;
            write(&d.join(trace), tr.to_text())?;
            write(&d.join(text), latency_report(&tr, &t)?.to_text())?;
        }
        Ok(())
    })?;

    Ok(PipelineSummary {
        stages: run.records,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(n: usize) -> RunConfig {
        let mut cfg = RunConfig::preset("paper-1qubit").unwrap();
        cfg.n_images = n;
        cfg.mlp.hidden_widths = vec![16, 8];
        cfg.mlp.epochs = 2;
        cfg.mlp.batch_size = 64;
        cfg.vit.epochs = 2;
        cfg
    }

    fn run(cfg: &RunConfig, dir: &Path, force: bool) -> (PipelineSummary, Vec<String>) {
        let mut seen = Vec::new();
        let opts = PipelineOptions {
            out_dir: dir.to_path_buf(),
            force,
            threads: 0,
        };
        let s = run_pipeline(cfg, &opts, &mut |r| seen.push(r.stage.to_string())).unwrap();
        (s, seen)
    }

    #[test]
    fn runs_every_stage_then_reuses_them() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = smoke(200);
        let (first, seen) = run(&cfg, tmp.path(), false);
        assert_eq!(seen, STAGES);
        assert!(first.stages.iter().all(|s| !s.cached));
        assert!(first.stages.iter().flat_map(|s| &s.artifacts).all(|p| p.is_file()));
        assert_eq!(first.report.rows.len(), 3);

        let (second, _) = run(&cfg, tmp.path(), false);
        assert!(second.stages.iter().all(|s| s.cached));
        let (third, _) = run(&cfg, tmp.path(), true);
        assert!(third.stages.iter().all(|s| !s.cached));
        assert_eq!(first.report, third.report);
    }

    #[test]
    fn changed_config_only_reruns_downstream() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = smoke(120);
        run(&cfg, tmp.path(), false);
        let mut changed = cfg.clone();
        changed.vit.learning_rate = 0.01;
        let (s, _) = run(&changed, tmp.path(), false);
        let cached: Vec<_> = s.stages.iter().filter(|r| r.cached).map(|r| r.stage).collect();
        assert_eq!(cached, ["gen", "calibrate", "train-mlp", "compile-lut", "verify-lut", "simulate"]);
    }

    #[test]
    fn failures_name_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("gen"), b"not a directory").unwrap();
        let opts = PipelineOptions {
            out_dir: tmp.path().to_path_buf(),
            force: false,
            threads: 0,
        };
        let err = run_pipeline(&smoke(50), &opts, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "gen", .. }), "{err}");
    }
}
