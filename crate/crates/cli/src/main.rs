//! `qdetect`: generate readout images, train and compile the classifiers,
//! score them and simulate the camera-to-decision latency.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qdetect_core::config::{RunConfig, PRESET_NAMES};
use qdetect_core::dataset::{build_dataset, load_dataset, save_dataset, Dataset, ImageConfig, IonImage, QubitState};
use qdetect_core::eval::{compare_report, tally, ResultRecord};
use qdetect_core::fixedpoint::FixedFormat;
use qdetect_core::parallel::configured_threads;
use qdetect_core::pipeline::{run_pipeline, PipelineOptions};
use qdetect_core::polymlp::{compile_truth_tables, train_with_progress, LutNetwork, PolyMlpModel, VerifyMode};
use qdetect_core::threshold::{calibrate_model, ThresholdModel};
use qdetect_core::timingsim::{latency_report, simulate_frame, DnnLatencyProfile, TimingConfig, TimingTrace};
use qdetect_core::vit::{quantize_vit, train_vit_with_progress, AnyVitModel, VitModel};
use qdetect_core::{dataset, polymlp, vit};

// Stdout writes that end the process quietly when the reader goes away.
macro_rules! put {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))
    };
}

macro_rules! say {
    () => {
        emit(format_args!("\n"))
    };
    ($($arg:tt)*) => {
        emit(format_args!("{}\n", format_args!($($arg)*)))
    };
}

fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

#[derive(Parser)]
#[command(name = "qdetect", version, about = "Trapped-ion readout twin: images, classifiers, fidelity and latency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Mlp,
    Vit1,
    Vit3,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset
    Gen {
        /// Number of ions (dataset.ion_centers)
        #[arg(long, value_parser = ["1", "3"])]
        ions: String,
        /// Number of images (n_images)
        #[arg(long)]
        count: usize,
        /// Dataset seed (seed)
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of images in the training split (split_ratio)
        #[arg(long, default_value_t = 0.9)]
        split: f64,
        /// PSF standard deviation in pixels (dataset.psf_sigma)
        #[arg(long)]
        sigma: Option<f64>,
        /// PSF peak amplitude in counts (dataset.psf_amplitude)
        #[arg(long)]
        amp: Option<f64>,
        /// Shot-noise Poisson mean (dataset.poisson_lambda)
        #[arg(long)]
        lambda: Option<f64>,
        /// Background mean in counts (dataset.bg_mean)
        #[arg(long)]
        bg_mean: Option<f64>,
        /// Background standard deviation in counts (dataset.bg_sigma)
        #[arg(long)]
        bg_sigma: Option<f64>,
    },
    /// Calibrate per-ion ROI thresholds on the training split
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying the ROI size (threshold.*)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a threshold model on the test split
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the polynomial MLP
    TrainMlp {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration supplying the mlp section; the preset matching
        /// the ion count otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate an MLP into truth tables
    CompileLut {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the table netlist here
        #[arg(long)]
        netlist: Option<PathBuf>,
    },
    /// Check every table entry against the MLP arithmetic
    VerifyLut {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// Also check argmax agreement on this dataset's test split
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the transformer in floating point
    TrainVit {
        #[arg(long)]
        data: PathBuf,
        /// Run configuration supplying the vit section; the preset matching
        /// the ion count otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a float transformer to fixed point
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// `T.F` descriptor (fixed.format)
        #[arg(long, default_value = "16.8")]
        format: FixedFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a transformer, MLP or LUT model on the test split
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Combine result records into the comparison table
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Writes PREFIX.txt and PREFIX.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one frame through the camera link and classifier
    Simulate {
        #[arg(long, value_enum)]
        profile: Profile,
        /// Frame size as HxW
        #[arg(long)]
        image: String,
        /// Pixel slots per line (timing.slots_per_line)
        #[arg(long, default_value_t = qdetect_core::timingsim::NOMINAL_SLOTS)]
        slots: u32,
        /// Camera pixel clock in Hz (timing.pixel_clock_hz)
        #[arg(long, default_value_t = qdetect_core::timingsim::DEFAULT_PIXEL_CLOCK_HZ)]
        pixel_clock: u64,
        /// FPGA clock in Hz (timing.fpga_clock_hz)
        #[arg(long, default_value_t = qdetect_core::timingsim::DEFAULT_FPGA_CLOCK_HZ)]
        fpga_clock: u64,
        /// Exposure in seconds (timing.exposure_s)
        #[arg(long, default_value_t = qdetect_core::timingsim::DEFAULT_EXPOSURE_S)]
        exposure: f64,
        /// Frame transfer in seconds (timing.frame_transfer_s)
        #[arg(long, default_value_t = qdetect_core::timingsim::DEFAULT_FRAME_TRANSFER_S)]
        frame_transfer: f64,
        /// FPGA cycles between buffer swap and classifier start (timing.fifo_stall_cycles)
        #[arg(long, default_value_t = 0)]
        stall: u64,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run every stage end to end
    Run {
        /// Named preset
        #[arg(long, value_parser = PRESET_NAMES, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        /// Run configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the image count (n_images)
        #[arg(long)]
        count: Option<usize>,
        /// Override the neural training-set size (dnn_train_images)
        #[arg(long)]
        dnn_train_images: Option<usize>,
        /// Recompute stages even when cached
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "qdetect-out")]
        out: PathBuf,
    },
    /// Print a preset as a run configuration
    Preset {
        #[arg(value_parser = PRESET_NAMES)]
        name: String,
    },
    /// Describe an artifact, or list the binary format versions
    Info { file: Option<PathBuf> },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn wrote(path: &Path) {
    say!("wrote {}", path.display());
}

fn load_config_or_preset(config: Option<&Path>, n_ions: usize) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::preset(if n_ions == 1 { "paper-1qubit" } else { "paper-3qubit" })?),
    }
}

fn score(
    ds: &Dataset,
    model: &str,
    classify: impl Fn(&IonImage) -> qdetect_core::Result<QubitState>,
) -> Result<ResultRecord> {
    let predictions = ds.test.iter().map(classify).collect::<qdetect_core::Result<Vec<_>>>()?;
    let labels: Vec<_> = ds.test.iter().map(|i| i.label).collect();
    let name = format!("{}-qubit", ds.n_ions());
    Ok(ResultRecord::new(name, model, tally(&predictions, &labels, ds.n_ions())?)?)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn print_record(r: &ResultRecord) {
    say!(
        "{} on {}: MMF {:.4}, error {:.2}% over {} images",
        r.model,
        r.dataset,
        r.fidelity.mmf,
        r.fidelity.error * 100.0,
        r.samples
    );
}

fn parse_image(s: &str) -> Result<(u32, u32)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("image size {s:?} is not HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            ions,
            count,
            seed,
            out,
            split,
            sigma,
            amp,
            lambda,
            bg_mean,
            bg_sigma,
        } => {
            let mut cfg = if ions == "1" { ImageConfig::one_qubit() } else { ImageConfig::three_qubit() };
            cfg.psf_sigma = sigma.unwrap_or(cfg.psf_sigma);
            cfg.psf_amplitude = amp.unwrap_or(cfg.psf_amplitude);
            cfg.poisson_lambda = lambda.unwrap_or(cfg.poisson_lambda);
            cfg.bg_mean = bg_mean.unwrap_or(cfg.bg_mean);
            cfg.bg_sigma = bg_sigma.unwrap_or(cfg.bg_sigma);
            let ds = build_dataset(&cfg, count, split, seed)?;
            save_dataset(&ds, &out)?;
            say!("{} train / {} test images", ds.train.len(), ds.test.len());
            wrote(&out);
        }
        Command::Calibrate { data, out, config } => {
            let ds = read_dataset(&data)?;
            let rois = match config {
                Some(p) => RunConfig::load(&p)?.rois(),
                None => qdetect_core::threshold::default_rois(&ds.config),
            };
            let model = calibrate_model(&ds.train, &rois)?;
            for ion in &model.ions {
                say!(
                    "ion {}: threshold {} (calibration fidelity {:.4})",
                    ion.index, ion.threshold, ion.calibration_fidelity
                );
            }
            model.save(&out)?;
            wrote(&out);
        }
        Command::Classify { model, data, report } => {
            let m = ThresholdModel::load(&model)?;
            let ds = read_dataset(&data)?;
            let rec = score(&ds, "threshold", |i| m.classify(i))?;
            print_record(&rec);
            rec.save(&report)?;
            wrote(&report);
        }
        Command::TrainMlp { data, config, out } => {
            let ds = read_dataset(&data)?;
            let cfg = load_config_or_preset(config.as_deref(), ds.n_ions())?;
            let m = train_with_progress(&cfg.mlp, &ds.train, |e, l| eprintln!("epoch {e}: loss {l:.5}"))?;
            m.save(&out)?;
            wrote(&out);
        }
        Command::CompileLut { model, out, netlist } => {
            let m = PolyMlpModel::load(&model)?;
            let lut = compile_truth_tables(&m)?;
            say!("{} tables, {} lookups per inference", lut.table_count(), lut.lookups_per_inference());
            lut.save(&out)?;
            wrote(&out);
            if let Some(p) = netlist {
                std::fs::write(&p, lut.netlist())?;
                wrote(&p);
            }
        }
        Command::VerifyLut { model, lut, data } => {
            let m = PolyMlpModel::load(&model)?;
            let net = LutNetwork::load(&lut)?;
            let eq = net.verify_equivalence(&m, VerifyMode::Exhaustive)?;
            say!("{} tables, {} entries match", eq.tables_checked, eq.entries_checked);
            if let Some(d) = data {
                let ds = read_dataset(&d)?;
                let inputs = ds.test.iter().map(|i| net.quantize(i)).collect::<qdetect_core::Result<Vec<_>>>()?;
                let agree = net.end_to_end_agreement(&m, &inputs)?;
                say!("argmax agreement {agree}/{}", inputs.len());
                if agree != inputs.len() {
                    bail!("lookup evaluation disagrees with the model on {} images", inputs.len() - agree);
                }
            }
        }
        Command::TrainVit { data, config, out } => {
            let ds = read_dataset(&data)?;
            let cfg = load_config_or_preset(config.as_deref(), ds.n_ions())?;
            let m = train_vit_with_progress(&cfg.vit, &ds.train, |e, l| eprintln!("epoch {e}: loss {l:.5}"))?;
            m.save(&out)?;
            wrote(&out);
        }
        Command::Quantize { model, format, out } => {
            let m = VitModel::load(&model)?;
            let fx = quantize_vit(&m, format)?;
            if fx.saturated > 0 {
                eprintln!("warning: {} parameters saturated to the {format} range", fx.saturated);
            }
            fx.save(&out)?;
            wrote(&out);
        }
        Command::Infer { model, data, report } => {
            let ds = read_dataset(&data)?;
            let bytes = std::fs::read(&model).with_context(|| format!("reading {}", model.display()))?;
            let rec = if bytes.starts_with(vit::VIT_MAGIC) {
                match AnyVitModel::from_bytes(&bytes)? {
                    AnyVitModel::Float(m) => score(&ds, "ViT (float)", |i| m.predict(i))?,
                    AnyVitModel::Fixed(m) => score(&ds, "ViT", |i| m.predict(i))?,
                }
            } else if bytes.starts_with(polymlp::lut::LUT_MAGIC) {
                let net = LutNetwork::from_bytes(&bytes)?;
                score(&ds, "MLP", |i| net.classify(i))?
            } else if bytes.starts_with(polymlp::MLP_MAGIC) {
                let m = PolyMlpModel::from_bytes(&bytes)?;
                score(&ds, "MLP (arithmetic)", |i| m.predict(i))?
            } else {
                bail!("{}: not a QVIT, QLUT or QMLP model", model.display());
            };
            print_record(&rec);
            rec.save(&report)?;
            wrote(&report);
        }
        Command::Report { inputs, out } => {
            let records = inputs
                .iter()
                .map(|p| ResultRecord::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let rep = compare_report(&records)?;
            put!("{}", rep.to_text());
            rep.write(&out)?;
            wrote(&out.with_extension("txt"));
            wrote(&out.with_extension("csv"));
        }
        Command::Simulate {
            profile,
            image,
            slots,
            pixel_clock,
            fpga_clock,
            exposure,
            frame_transfer,
            stall,
            trace,
            report,
        } => {
            let (h, w) = parse_image(&image)?;
            let p = match profile {
                Profile::Mlp => DnnLatencyProfile::mlp(),
                Profile::Vit1 => DnnLatencyProfile::vit_one_qubit(),
                Profile::Vit3 => DnnLatencyProfile::vit_three_qubit(),
            };
            let cfg = TimingConfig {
                pixel_clock_hz: pixel_clock,
                slots_per_line: slots,
                height: h,
                width: w,
                exposure_s: exposure,
                frame_transfer_s: frame_transfer,
                fpga_clock_hz: fpga_clock,
                dnn_cycles: p.cycles,
                fifo_stall_cycles: stall,
            };
            let tr = simulate_frame(&cfg)?;
            let rep = latency_report(&tr, &cfg)?;
            put!("{}", rep.to_text());
            std::fs::write(&trace, tr.to_text())?;
            wrote(&trace);
            std::fs::write(&report, rep.to_text())?;
            wrote(&report);
        }
        Command::Run {
            preset,
            config,
            count,
            dnn_train_images,
            force,
            out,
        } => {
            let mut cfg = match (preset, config) {
                (Some(name), _) => RunConfig::preset(&name)?,
                (None, Some(p)) => RunConfig::load(&p).with_context(|| format!("reading {}", p.display()))?,
                (None, None) => bail!("either --preset or --config is required"),
            };
            cfg.n_images = count.unwrap_or(cfg.n_images);
            cfg.dnn_train_images = dnn_train_images.unwrap_or(cfg.dnn_train_images);
            let opts = PipelineOptions {
                out_dir: out,
                force,
                threads: configured_threads(),
            };
            let summary = run_pipeline(&cfg, &opts, &mut |rec| {
                let how = if rec.cached { "cached" } else { "done" };
                say!("[{}] {how} ({})", rec.stage, rec.key);
                for a in &rec.artifacts {
                    say!("  {}", a.display());
                }
            })?;
            put!("{}", summary.report.to_text());
        }
        Command::Preset { name } => put!("{}", RunConfig::preset(&name)?.to_toml()),
        Command::Info { file } => match file {
            None => {
                say!("{} dataset v{}", String::from_utf8_lossy(dataset::DATASET_MAGIC), dataset::DATASET_VERSION);
                say!("{} MLP model v{}", String::from_utf8_lossy(polymlp::MLP_MAGIC), polymlp::MLP_VERSION);
                say!("{} LUT network v{}", String::from_utf8_lossy(polymlp::lut::LUT_MAGIC), polymlp::lut::LUT_VERSION);
                say!("{} ViT model v{}", String::from_utf8_lossy(vit::VIT_MAGIC), vit::VIT_VERSION);
            }
            Some(p) => info(&p)?,
        },
    }
    Ok(())
}

fn info(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(dataset::DATASET_MAGIC) {
        let ds = Dataset::from_bytes(&bytes)?;
        let c = &ds.config;
        say!("QIMG dataset v{}", dataset::DATASET_VERSION);
        say!("images: {} ({} train, {} test)", ds.n_images(), ds.train.len(), ds.test.len());
        say!("frame: {}x{}, {} ion(s), {}-bit pixels", c.height, c.width, c.n_ions(), c.pixel_depth);
        say!("seed: {}", ds.seed);
    } else if bytes.starts_with(polymlp::lut::LUT_MAGIC) {
        let net = LutNetwork::from_bytes(&bytes)?;
        say!("QLUT network v{}", polymlp::lut::LUT_VERSION);
        say!("inputs: {}, classes: {}", net.n_inputs, net.n_classes);
        say!("beta: {}, fan-in: {}, sub-neurons: {}", net.beta, net.fan_in, net.subneurons);
        say!("widths: {:?}", net.widths());
        let entries: usize = net.layers.iter().flatten().map(|n| n.entry_count()).sum();
        say!("tables: {}, entries: {entries}", net.table_count());
    } else if bytes.starts_with(polymlp::MLP_MAGIC) {
        let m = PolyMlpModel::from_bytes(&bytes)?;
        say!("QMLP model v{}", polymlp::MLP_VERSION);
        say!("inputs: {}, classes: {}, widths: {:?}", m.n_inputs, m.n_classes, m.widths());
        let c = &m.config;
        say!(
            "beta: {}, fan-in: {}, degree: {}, sub-neurons: {}",
            c.activation_bits, c.fan_in, c.poly_degree, c.subneurons
        );
    } else if bytes.starts_with(vit::VIT_MAGIC) {
        let (cfg, kind) = match AnyVitModel::from_bytes(&bytes)? {
            AnyVitModel::Float(m) => (m.config, "float".to_string()),
            AnyVitModel::Fixed(m) => (m.config.clone(), format!("fixed {} ({} saturated)", m.format, m.saturated)),
        };
        say!("QVIT model v{}, {kind}", vit::VIT_VERSION);
        say!(
            "image {}x{}, patch {}, D {}, heads {}, layers {}, classes {}",
            cfg.height, cfg.width, cfg.patch_size, cfg.latent_dim, cfg.n_heads, cfg.n_layers, cfg.n_classes
        );
    } else if let Some(text) = std::str::from_utf8(&bytes).ok().filter(|t| !t.contains('\0')) {
        if let Ok(cfg) = RunConfig::from_toml_str(text) {
            say!("run configuration {:?}: {} images, seed {}", cfg.name, cfg.n_images, cfg.seed);
        } else if let Ok(m) = ThresholdModel::from_toml_str(text) {
            say!("threshold model, {} ion(s)", m.ions.len());
        } else if let Ok(r) = ResultRecord::from_toml_str(text) {
            print_record(&r);
        } else if let Ok(tr) = TimingTrace::from_text(text) {
            say!("timing trace, {} events", tr.events.len());
        } else {
            bail!("{}: not a run config, threshold model, result record or trace", path.display());
        }
    } else {
        let found: String = bytes.iter().take(4).map(|&b| b as char).collect();
        bail!(
            "{}: unrecognized magic {found:?} (expected one of QIMG, QMLP, QLUT, QVIT)",
            path.display()
        );
    }
    Ok(())
}
