//! Event-driven model of the camera link and classifier handoff.
//!
//! Time is exact: every timestamp is a rational number of seconds, so
//! clock-period arithmetic never accumulates rounding error. Exposure and
//! frame-transfer intervals are taken to the nearest picosecond.
//!
//! Line `i` raises LVAL one pixel period after FVAL plus `i` line intervals
//! of `slots_per_line` periods. Pixel `j` of the line is latched `j` periods
//! after LVAL rises, and LVAL falls after `W` periods. The double-buffered
//! FIFO swaps as the last pixel lands, so the classifier starts at
//! `tx_done` plus any injected stall.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::vit::{HeadMode, VitConfig};

/// Seconds, exact.
pub type Time = Ratio<i128>;

pub const DEFAULT_PIXEL_CLOCK_HZ: u64 = 17_000_000;
pub const DEFAULT_FPGA_CLOCK_HZ: u64 = 250_000_000;
pub const DEFAULT_EXPOSURE_S: f64 = 1e-3;
pub const DEFAULT_FRAME_TRANSFER_S: f64 = 0.41e-3;
/// Pixel slots per line as the camera documents them.
pub const NOMINAL_SLOTS: u32 = 512;
/// Line interval that reproduces the measured line utilization.
pub const CALIBRATED_SLOTS: u32 = 649;
/// Ideal send time quoted alongside the measurements, for the report.
pub const REFERENCE_IDEAL_SEND_S: f64 = 5.45e-6;

const PICOS: i128 = 1_000_000_000_000;

pub fn seconds(t: Time) -> f64 {
    *t.numer() as f64 / *t.denom() as f64
}

/// Nearest picosecond.
pub fn time_from_seconds(s: f64) -> Result<Time> {
    if !s.is_finite() || !(0.0..=1e6).contains(&s) {
        return Err(Error::Config(format!("time {s} s must be finite, non-negative and below 1e6 s")));
    }
    Ok(Ratio::new((s * PICOS as f64).round() as i128, PICOS))
}

fn cycles_at(cycles: u64, hz: u64) -> Time {
    Ratio::new(cycles as i128, hz as i128)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DnnKind {
    Mlp,
    Vit,
}

/// Fixed classifier latency in FPGA cycles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnnLatencyProfile {
    pub name: String,
    pub kind: DnnKind,
    pub cycles: u64,
}

impl DnnLatencyProfile {
    pub fn mlp() -> Self {
        DnnLatencyProfile {
            name: "mlp".into(),
            kind: DnnKind::Mlp,
            cycles: 5,
        }
    }

    /// Measured cycle count of the single-ion transformer.
    pub fn vit_one_qubit() -> Self {
        DnnLatencyProfile {
            name: "vit1".into(),
            kind: DnnKind::Vit,
            cycles: 4054,
        }
    }

    /// Measured cycle count of the three-ion transformer.
    pub fn vit_three_qubit() -> Self {
        DnnLatencyProfile {
            name: "vit3".into(),
            kind: DnnKind::Vit,
            cycles: 8797,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mlp()),
            "vit1" => Ok(Self::vit_one_qubit()),
            "vit3" => Ok(Self::vit_three_qubit()),
            other => Err(Error::Config(format!("unknown latency profile {other:?} (expected mlp, vit1 or vit3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub pixel_clock_hz: u64,
    pub slots_per_line: u32,
    pub height: u32,
    pub width: u32,
    pub exposure_s: f64,
    pub frame_transfer_s: f64,
    pub fpga_clock_hz: u64,
    pub dnn_cycles: u64,
    /// FPGA cycles between the buffer swap and the classifier start.
    #[serde(default)]
    pub fifo_stall_cycles: u64,
}

impl TimingConfig {
    pub fn new(height: u32, width: u32, slots_per_line: u32, profile: &DnnLatencyProfile) -> Self {
        TimingConfig {
            pixel_clock_hz: DEFAULT_PIXEL_CLOCK_HZ,
            slots_per_line,
            height,
            width,
            exposure_s: DEFAULT_EXPOSURE_S,
            frame_transfer_s: DEFAULT_FRAME_TRANSFER_S,
            fpga_clock_hz: DEFAULT_FPGA_CLOCK_HZ,
            dnn_cycles: profile.cycles,
            fifo_stall_cycles: 0,
        }
    }

    pub fn nominal(height: u32, width: u32, profile: &DnnLatencyProfile) -> Self {
        Self::new(height, width, NOMINAL_SLOTS, profile)
    }

    pub fn calibrated(height: u32, width: u32, profile: &DnnLatencyProfile) -> Self {
        Self::new(height, width, CALIBRATED_SLOTS, profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image {}x{} must be non-empty", self.height, self.width)));
        }
        if self.width > self.slots_per_line {
            return Err(Error::Config(format!(
                "image width {} exceeds {} slots per line",
                self.width, self.slots_per_line
            )));
        }
        if self.pixel_clock_hz == 0 || self.fpga_clock_hz == 0 {
            return Err(Error::Config("clock frequencies must be positive".into()));
        }
        if self.dnn_cycles == 0 {
            return Err(Error::Config("classifier needs at least one cycle".into()));
        }
        time_from_seconds(self.exposure_s)?;
        time_from_seconds(self.frame_transfer_s)?;
        Ok(())
    }

    pub fn pixel_period(&self) -> Time {
        cycles_at(1, self.pixel_clock_hz)
    }

    /// `nominal`, `calibrated`, or `custom`.
    pub fn line_profile(&self) -> &'static str {
        match self.slots_per_line {
            NOMINAL_SLOTS => "nominal",
            CALIBRATED_SLOTS => "calibrated",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    Trigger,
    FvalRise,
    FvalFall,
    LvalRise,
    LvalFall,
    TxDoneRise,
    DnnValidRise,
}

impl Signal {
    pub const ALL: [Signal; 7] = [
        Signal::Trigger,
        Signal::FvalRise,
        Signal::FvalFall,
        Signal::LvalRise,
        Signal::LvalFall,
        Signal::TxDoneRise,
        Signal::DnnValidRise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Trigger => "trigger",
            Signal::FvalRise => "FVAL_rise",
            Signal::FvalFall => "FVAL_fall",
            Signal::LvalRise => "LVAL_rise",
            Signal::LvalFall => "LVAL_fall",
            Signal::TxDoneRise => "tx_done_rise",
            Signal::DnnValidRise => "DNN_valid_rise",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Signal::ALL
            .into_iter()
            .find(|sig| sig.name() == s)
            .ok_or_else(|| format!("unknown signal {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub signal: Signal,
    pub time: Time,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimingTrace {
    pub events: Vec<TraceEvent>,
    /// Latch time of every received pixel. Not part of the text export.
    pub pixel_times: Vec<Time>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Trigger,
    FrameStart,
    LineStart(u32),
    Pixel(u32, u32),
    LineEnd(u32),
    FrameEnd,
    DnnStart,
    DnnDone,
}

/// Two frame buffers: pixels land in one while the classifier reads the
/// other.
#[derive(Debug, Default)]
struct PingPong {
    filling: usize,
    staged: u64,
    swaps: u64,
}

impl PingPong {
    fn push(&mut self) {
        self.staged += 1;
    }

    fn swap(&mut self) -> u64 {
        self.filling ^= 1;
        self.swaps += 1;
        std::mem::take(&mut self.staged)
    }
}

struct Scheduler {
    queue: BinaryHeap<Reverse<(Time, u64, Action)>>,
    seq: u64,
}

impl Scheduler {
    fn at(&mut self, time: Time, action: Action) {
        self.queue.push(Reverse((time, self.seq, action)));
        self.seq += 1;
    }
}

pub fn simulate_frame(cfg: &TimingConfig) -> Result<TimingTrace> {
    cfg.validate()?;
    let period = cfg.pixel_period();
    let line = period * cfg.slots_per_line as i128;
    let fval = time_from_seconds(cfg.exposure_s)? + time_from_seconds(cfg.frame_transfer_s)?;
    let frame_pixels = cfg.height as u64 * cfg.width as u64;

    let mut trace = TimingTrace {
        events: Vec::with_capacity(4 + 2 * cfg.height as usize),
        pixel_times: Vec::with_capacity(frame_pixels as usize),
    };
    let mut fifo = PingPong::default();
    let mut sched = Scheduler {
        queue: BinaryHeap::new(),
        seq: 0,
    };
    sched.at(Time::from_integer(0), Action::Trigger);

    while let Some(Reverse((now, _, action))) = sched.queue.pop() {
        let mut emit = |signal| trace.events.push(TraceEvent { signal, time: now });
        match action {
            Action::Trigger => {
                emit(Signal::Trigger);
                sched.at(fval, Action::FrameStart);
            }
            Action::FrameStart => {
                emit(Signal::FvalRise);
                sched.at(now + period, Action::LineStart(0));
            }
            Action::LineStart(i) => {
                emit(Signal::LvalRise);
                sched.at(now, Action::Pixel(i, 0));
                sched.at(now + period * cfg.width as i128, Action::LineEnd(i));
                if i + 1 < cfg.height {
                    sched.at(now + line, Action::LineStart(i + 1));
                } else {
                    sched.at(now + line, Action::FrameEnd);
                }
            }
            Action::Pixel(i, j) => {
                trace.pixel_times.push(now);
                fifo.push();
                if j + 1 < cfg.width {
                    sched.at(now + period, Action::Pixel(i, j + 1));
                }
                if trace.pixel_times.len() as u64 == frame_pixels {
                    emit(Signal::TxDoneRise);
                    let staged = fifo.swap();
                    debug_assert_eq!(staged, frame_pixels);
                    sched.at(now + cycles_at(cfg.fifo_stall_cycles, cfg.fpga_clock_hz), Action::DnnStart);
                }
            }
            Action::LineEnd(_) => emit(Signal::LvalFall),
            Action::FrameEnd => emit(Signal::FvalFall),
            Action::DnnStart => sched.at(now + cycles_at(cfg.dnn_cycles, cfg.fpga_clock_hz), Action::DnnDone),
            Action::DnnDone => emit(Signal::DnnValidRise),
        }
    }
    debug_assert_eq!(fifo.swaps, 1);
    Ok(trace)
}

/// Fraction of each line interval that carries pixels.
pub fn line_utilization(cfg: &TimingConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.width as f64 / cfg.slots_per_line as f64)
}

/// Time to send the frame with no idle slots, and how much faster that is
/// than sending every line interval.
pub fn ideal_send_time(cfg: &TimingConfig) -> Result<(Time, f64)> {
    cfg.validate()?;
    let period = cfg.pixel_period();
    let ideal = period * (cfg.height as i128 * cfg.width as i128);
    let actual = period * (cfg.height as i128 * cfg.slots_per_line as i128);
    Ok((ideal, seconds(actual / ideal)))
}

impl TimingTrace {
    pub fn first(&self, signal: Signal) -> Option<Time> {
        self.events.iter().find(|e| e.signal == signal).map(|e| e.time)
    }

    pub fn count(&self, signal: Signal) -> usize {
        self.events.iter().filter(|e| e.signal == signal).count()
    }

    /// One `signal<TAB>nanoseconds` line per event, nanoseconds rounded to
    /// the nearest integer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let ns = (e.time * 1_000_000_000).round().to_integer();
            let _ = writeln!(out, "{}\t{}", e.signal, ns);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TimingTrace, ParseError> {
        let bad = |line: usize, detail: String| ParseError::Malformed {
            what: "timing trace",
            detail: format!("line {line}: {detail}"),
        };
        let mut events = Vec::new();
        let mut last = Time::from_integer(0);
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line.is_empty() {
                continue;
            }
            let (name, ns) = line.split_once('\t').ok_or_else(|| bad(n, "expected signal<TAB>ns".into()))?;
            let signal: Signal = name.parse().map_err(|e| bad(n, e))?;
            let ns: i64 = ns.parse().map_err(|e| bad(n, format!("timestamp {ns:?}: {e}")))?;
            if ns < 0 {
                return Err(bad(n, format!("negative timestamp {ns}")));
            }
            let time = Ratio::new(ns as i128, 1_000_000_000);
            if time < last {
                return Err(bad(n, "timestamps decrease".into()));
            }
            last = time;
            events.push(TraceEvent { signal, time });
        }
        Ok(TimingTrace {
            events,
            pixel_times: Vec::new(),
        })
    }
}

/// One measured row in the latency breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: &'static str,
    pub start: Time,
    pub end: Time,
}

impl Stage {
    pub fn duration(&self) -> Time {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub line_profile: &'static str,
    pub height: u32,
    pub width: u32,
    pub fval_latency: Time,
    pub tx_done_latency: Time,
    pub dnn_valid_latency: Time,
    pub line_utilization: f64,
    pub ideal_send: Time,
    pub send_speedup: f64,
    pub stages: Vec<Stage>,
}

/// Hardware measurements quoted as fixed comparison rows, in ms.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub platform: &'static str,
    pub signal: &'static str,
    pub one_qubit_ms: Option<f64>,
    pub three_qubit_ms: Option<f64>,
}

pub const REFERENCE_ROWS: [ReferenceRow; 8] = [
    ReferenceRow { platform: "FPGA", signal: "FVAL", one_qubit_ms: Some(1.41), three_qubit_ms: Some(1.41) },
    ReferenceRow { platform: "FPGA", signal: "tx_done", one_qubit_ms: Some(1.76), three_qubit_ms: Some(2.25) },
    ReferenceRow { platform: "FPGA", signal: "DNN_valid", one_qubit_ms: Some(1.78), three_qubit_ms: Some(2.29) },
    ReferenceRow { platform: "FPGA", signal: "ViT model", one_qubit_ms: Some(0.016), three_qubit_ms: Some(0.035) },
    ReferenceRow { platform: "GPU", signal: "FVAL", one_qubit_ms: Some(1.41), three_qubit_ms: Some(1.41) },
    ReferenceRow { platform: "GPU", signal: "tx_done", one_qubit_ms: None, three_qubit_ms: None },
    ReferenceRow { platform: "GPU", signal: "DNN_valid", one_qubit_ms: Some(211.95), three_qubit_ms: Some(214.70) },
    ReferenceRow { platform: "GPU", signal: "ViT model", one_qubit_ms: Some(2.85), three_qubit_ms: Some(2.95) },
];

pub fn latency_report(trace: &TimingTrace, cfg: &TimingConfig) -> Result<LatencyReport> {
    cfg.validate()?;
    let need = |s: Signal| trace.first(s).ok_or_else(|| Error::Trace(format!("trace has no {s} event")));
    let trigger = need(Signal::Trigger)?;
    let fval = need(Signal::FvalRise)?;
    let lval = need(Signal::LvalRise)?;
    let tx = need(Signal::TxDoneRise)?;
    let dnn = need(Signal::DnnValidRise)?;
    if trace.events.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(Error::Trace("timestamps decrease".into()));
    }
    if !(trigger <= fval && fval < lval && lval <= tx && tx < dnn) {
        return Err(Error::Trace("events out of order: expected trigger <= FVAL < LVAL <= tx_done < DNN_valid".into()));
    }
    let pulses = trace.count(Signal::LvalRise);
    if pulses != cfg.height as usize {
        return Err(Error::Trace(format!("{pulses} LVAL pulses for {} lines", cfg.height)));
    }
    let (ideal_send, send_speedup) = ideal_send_time(cfg)?;
    Ok(LatencyReport {
        line_profile: cfg.line_profile(),
        height: cfg.height,
        width: cfg.width,
        fval_latency: fval - trigger,
        tx_done_latency: tx - trigger,
        dnn_valid_latency: dnn - trigger,
        line_utilization: line_utilization(cfg)?,
        ideal_send,
        send_speedup,
        stages: vec![
            Stage { name: "exposure + frame transfer", start: trigger, end: fval },
            Stage { name: "image send", start: fval, end: tx },
            Stage { name: "classifier", start: tx, end: dnn },
        ],
    })
}

fn ms(t: Time) -> f64 {
    seconds(t) * 1e3
}

impl LatencyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image {}x{}, {} line profile", self.height, self.width, self.line_profile);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<12} {:>14}", "signal", "latency (ms)");
        for (name, t) in [
            ("FVAL", self.fval_latency),
            ("tx_done", self.tx_done_latency),
            ("DNN_valid", self.dnn_valid_latency),
        ] {
            let _ = writeln!(s, "{name:<12} {:>14.6}", ms(t));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>14} {:>14} {:>14}", "stage", "start (ms)", "end (ms)", "duration (us)");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<28} {:>14.6} {:>14.6} {:>14.3}",
                st.name,
                ms(st.start),
                ms(st.end),
                seconds(st.duration()) * 1e6
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "line utilization   {:.4}%", self.line_utilization * 100.0);
        let _ = writeln!(
            s,
            "ideal send         {:.3} us (reference {:.2} us)",
            seconds(self.ideal_send) * 1e6,
            REFERENCE_IDEAL_SEND_S * 1e6
        );
        let _ = writeln!(s, "send speedup       {:.1}x", self.send_speedup);
        let _ = writeln!(s);
        let _ = writeln!(s, "reference measurements (ms, not simulated)");
        let _ = writeln!(s, "{:<8} {:<12} {:>10} {:>10}", "platform", "signal", "1-qubit", "3-qubit");
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
        for r in REFERENCE_ROWS {
            let _ = writeln!(
                s,
                "{:<8} {:<12} {:>10} {:>10}",
                r.platform,
                r.signal,
                cell(r.one_qubit_ms),
                cell(r.three_qubit_ms)
            );
        }
        s
    }
}

/// Per-stage time-division factors for the analytic transformer model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseFactors {
    pub embed: u64,
    pub qkv: u64,
    pub scores: u64,
    pub context: u64,
    pub output: u64,
    pub linear: u64,
    pub head: u64,
}

impl ReuseFactors {
    pub fn uniform(r: u64) -> Self {
        ReuseFactors {
            embed: r,
            qkv: r,
            scores: r,
            context: r,
            output: r,
            linear: r,
            head: r,
        }
    }
}

impl Default for ReuseFactors {
    fn default() -> Self {
        Self::uniform(1)
    }
}

/// Cycles of a multiply round: one multiplier stage.
const MULT_LATENCY: u64 = 1;
const EXP_LOOKUP_LATENCY: u64 = 1;
const RECIPROCAL_LATENCY: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCycles {
    pub name: String,
    pub multiplications: u64,
    /// `None` for stages without multiplexed multipliers.
    pub reuse: Option<u64>,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleEstimate {
    pub stages: Vec<StageCycles>,
    pub total: u64,
}

fn adder_depth(terms: u64) -> u64 {
    (terms.max(1) as f64).log2().ceil() as u64
}

/// Rough cycle count of one inference, stage by stage in dataflow order.
///
/// A multiplexed stage with `M` multiplications and reuse factor `R` holds
/// `M / R` multipliers and runs `R` rounds, each a multiply followed by an
/// adder tree over the reduction length. Softmax, batch norm and the
/// residual adds have fixed latencies. This is an approximation; measured
/// totals ship as [`DnnLatencyProfile`] data.
pub fn vit_cycle_model(cfg: &VitConfig, reuse: &ReuseFactors) -> Result<CycleEstimate> {
    cfg.validate()?;
    let t = cfg.n_tokens() as u64;
    let n = cfg.n_patches() as u64;
    let d = cfg.latent_dim as u64;
    let h = cfg.n_heads as u64;
    let hd = cfg.head_dim() as u64;
    let p2 = cfg.patch_len() as u64;
    let cw = match cfg.head_mode {
        HeadMode::Split => h * hd,
        HeadMode::Literal => d,
    };
    let c = cfg.n_classes as u64;

    let mut stages = Vec::new();
    let mux = |stages: &mut Vec<StageCycles>, name: String, mults: u64, reduce: u64, r: u64| -> Result<()> {
        if r == 0 || !mults.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "reuse factor {r} does not divide the {mults} multiplications of stage {name}"
            )));
        }
        stages.push(StageCycles {
            name,
            multiplications: mults,
            reuse: Some(r),
            cycles: r * (MULT_LATENCY + adder_depth(reduce)),
        });
        Ok(())
    };
    let fixed = |stages: &mut Vec<StageCycles>, name: String, cycles: u64| {
        stages.push(StageCycles {
            name,
            multiplications: 0,
            reuse: None,
            cycles,
        })
    };
    let softmax = EXP_LOOKUP_LATENCY + adder_depth(t) + RECIPROCAL_LATENCY + MULT_LATENCY;

    mux(&mut stages, "embed".into(), n * p2 * d, p2, reuse.embed)?;
    fixed(&mut stages, "embed: position add".into(), 1);
    for l in 0..cfg.n_layers {
        mux(&mut stages, format!("layer{l}: qkv"), 3 * t * d * h * hd, d, reuse.qkv)?;
        mux(&mut stages, format!("layer{l}: scores"), h * t * t * hd, hd, reuse.scores)?;
        fixed(&mut stages, format!("layer{l}: softmax"), softmax);
        mux(&mut stages, format!("layer{l}: context"), h * t * t * hd, t, reuse.context)?;
        mux(&mut stages, format!("layer{l}: output"), t * cw * d, cw, reuse.output)?;
        fixed(&mut stages, format!("layer{l}: residual + bn"), 3);
        mux(&mut stages, format!("layer{l}: linear"), t * d * d, d, reuse.linear)?;
        fixed(&mut stages, format!("layer{l}: relu + residual"), 1);
    }
    fixed(&mut stages, "head: bn".into(), 2);
    mux(&mut stages, "head: linear".into(), d * c, d, reuse.head)?;
    let total = stages.iter().map(|s| s.cycles).sum();
    Ok(CycleEstimate { stages, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(h: u32, w: u32, slots: u32, profile: DnnLatencyProfile) -> TimingConfig {
        TimingConfig::new(h, w, slots, &profile)
    }

    #[test]
    fn send_time_matches_slot_arithmetic() {
        let c = cfg(10, 10, 512, DnnLatencyProfile::mlp());
        let t = simulate_frame(&c).unwrap();
        let send = t.first(Signal::TxDoneRise).unwrap() - t.first(Signal::FvalRise).unwrap();
        assert_eq!(send, Ratio::new(9 * 512 + 10, 17_000_000));
        assert!((seconds(send) - 271.6e-6).abs() < 0.1e-6);
    }

    #[test]
    fn classifier_latencies_are_exact() {
        for (p, ns) in [
            (DnnLatencyProfile::mlp(), 20),
            (DnnLatencyProfile::vit_one_qubit(), 16_216),
            (DnnLatencyProfile::vit_three_qubit(), 35_188),
        ] {
            let t = simulate_frame(&cfg(12, 24, 512, p)).unwrap();
            let d = t.first(Signal::DnnValidRise).unwrap() - t.first(Signal::TxDoneRise).unwrap();
            assert_eq!(d, Ratio::new(ns, 1_000_000_000));
        }
    }

    #[test]
    fn fval_latency_is_exposure_plus_transfer() {
        let c = cfg(10, 10, 649, DnnLatencyProfile::vit_one_qubit());
        let r = latency_report(&simulate_frame(&c).unwrap(), &c).unwrap();
        assert_eq!(r.fval_latency, Ratio::new(141, 100_000));
        assert_eq!(r.line_profile, "calibrated");
        assert!((r.line_utilization - 0.0154).abs() < 1e-4);
        assert!((r.send_speedup - 64.9).abs() < 1e-9);
    }

    #[test]
    fn utilization_and_speedup_examples() {
        let c = cfg(10, 10, 512, DnnLatencyProfile::mlp());
        assert!((line_utilization(&c).unwrap() - 10.0 / 512.0).abs() < 1e-15);
        let (ideal, _) = ideal_send_time(&c).unwrap();
        assert_eq!(ideal, Ratio::new(100, 17_000_000));
        let full = cfg(10, 10, 10, DnnLatencyProfile::mlp());
        assert_eq!(line_utilization(&full).unwrap(), 1.0);
        assert_eq!(ideal_send_time(&full).unwrap().1, 1.0);
    }

    #[test]
    fn width_beyond_line_is_rejected() {
        let c = cfg(10, 513, 512, DnnLatencyProfile::mlp());
        assert!(matches!(simulate_frame(&c), Err(Error::Config(_))));
    }

    #[test]
    fn trace_shape() {
        let c = cfg(3, 4, 8, DnnLatencyProfile::mlp());
        let t = simulate_frame(&c).unwrap();
        let names: Vec<_> = t.events.iter().map(|e| e.signal.name()).collect();
        assert_eq!(
            names,
            [
                "trigger",
                "FVAL_rise",
                "LVAL_rise",
                "LVAL_fall",
                "LVAL_rise",
                "LVAL_fall",
                "LVAL_rise",
                "tx_done_rise",
                "DNN_valid_rise",
                "LVAL_fall",
                "FVAL_fall"
            ]
        );
        assert_eq!(t.pixel_times.len(), 12);
        let period = c.pixel_period();
        let fval = t.first(Signal::FvalRise).unwrap();
        // pixel (1, 2) is the 7th received
        assert_eq!(t.pixel_times[6], fval + period * (8 + 2 + 1));
        assert_eq!(t.events.last().unwrap().time, fval + period * (3 * 8 + 1));
    }

    #[test]
    fn stall_delays_only_the_classifier() {
        let mut c = cfg(2, 2, 4, DnnLatencyProfile::mlp());
        let a = simulate_frame(&c).unwrap();
        c.fifo_stall_cycles = 3;
        let b = simulate_frame(&c).unwrap();
        assert_eq!(a.first(Signal::TxDoneRise), b.first(Signal::TxDoneRise));
        let shift = b.first(Signal::DnnValidRise).unwrap() - a.first(Signal::DnnValidRise).unwrap();
        assert_eq!(shift, Ratio::new(3, 250_000_000));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let c = cfg(10, 10, 512, DnnLatencyProfile::vit_one_qubit());
        let t = simulate_frame(&c).unwrap();
        let text = t.to_text();
        assert!(text.starts_with("trigger\t0\nFVAL_rise\t1410000\n"));
        let back = TimingTrace::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        let r = latency_report(&back, &c).unwrap();
        assert_eq!(r.fval_latency, Ratio::new(141, 100_000));
        assert!(TimingTrace::from_text("bogus\t1\n").is_err());
        assert!(TimingTrace::from_text("trigger 1\n").is_err());
        assert!(TimingTrace::from_text("trigger\t5\nFVAL_rise\t4\n").is_err());
        assert!(TimingTrace::from_text("trigger\t-1\n").is_err());
    }

    #[test]
    fn report_needs_complete_trace() {
        let c = cfg(2, 2, 4, DnnLatencyProfile::mlp());
        let mut t = simulate_frame(&c).unwrap();
        t.events.retain(|e| e.signal != Signal::TxDoneRise);
        assert!(matches!(latency_report(&t, &c), Err(Error::Trace(_))));
    }

    #[test]
    fn report_text_lists_reference_rows() {
        let c = cfg(10, 10, 649, DnnLatencyProfile::vit_one_qubit());
        let text = latency_report(&simulate_frame(&c).unwrap(), &c).unwrap().to_text();
        assert!(text.contains("calibrated line profile"));
        assert!(text.contains("211.95"));
        assert!(text.contains("5.45"));
    }

    #[test]
    fn reuse_scales_multiplexed_stages() {
        let vc = VitConfig::one_qubit();
        let one = vit_cycle_model(&vc, &ReuseFactors::uniform(1)).unwrap();
        let two = vit_cycle_model(&vc, &ReuseFactors::uniform(2)).unwrap();
        let four = vit_cycle_model(&vc, &ReuseFactors::uniform(4)).unwrap();
        for ((a, b), c) in one.stages.iter().zip(&two.stages).zip(&four.stages) {
            if a.reuse.is_some() {
                assert_eq!(b.cycles, 2 * a.cycles, "{}", a.name);
                assert_eq!(c.cycles, 4 * a.cycles, "{}", a.name);
            } else {
                assert_eq!(a.cycles, c.cycles);
            }
        }
        assert!(two.total > one.total);
    }

    #[test]
    fn non_dividing_reuse_is_rejected() {
        let vc = VitConfig::one_qubit();
        // the head has 16 * 2 multiplications
        let r = ReuseFactors { head: 3, ..ReuseFactors::default() };
        assert!(matches!(vit_cycle_model(&vc, &r), Err(Error::Config(_))));
    }

    fn arb_config() -> impl Strategy<Value = TimingConfig> {
        (
            1u32..40,
            1u32..40,
            0u32..600,
            1_000_000u64..100_000_000,
            0u64..5_000_000,
            0u64..1_000_000,
            1_000_000u64..500_000_000,
            1u64..20_000,
            0u64..50,
        )
            .prop_map(|(h, w, extra, px, exp_ns, ft_ns, fpga, cycles, stall)| TimingConfig {
                pixel_clock_hz: px,
                slots_per_line: w + extra,
                height: h,
                width: w,
                exposure_s: exp_ns as f64 * 1e-9,
                frame_transfer_s: ft_ns as f64 * 1e-9,
                fpga_clock_hz: fpga,
                dnn_cycles: cycles,
                fifo_stall_cycles: stall,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn event_ordering_holds(c in arb_config()) {
            let t = simulate_frame(&c).unwrap();
            prop_assert!(t.events.windows(2).all(|w| w[0].time <= w[1].time));
            let g = |s| t.first(s).unwrap();
            prop_assert!(g(Signal::Trigger) <= g(Signal::FvalRise));
            prop_assert!(g(Signal::FvalRise) < g(Signal::LvalRise));
            prop_assert!(g(Signal::LvalRise) <= g(Signal::TxDoneRise));
            prop_assert!(g(Signal::TxDoneRise) < g(Signal::DnnValidRise));
            prop_assert_eq!(t.count(Signal::LvalRise), c.height as usize);
            prop_assert_eq!(t.count(Signal::LvalFall), c.height as usize);
            // pixel conservation
            let (f, x) = (g(Signal::FvalRise), g(Signal::TxDoneRise));
            prop_assert_eq!(t.pixel_times.iter().filter(|&&p| p > f && p <= x).count(), (c.height * c.width) as usize);
            prop_assert_eq!(*t.pixel_times.last().unwrap(), x);
            prop_assert!(latency_report(&t, &c).is_ok());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn doubling_pixel_clock_halves_send(c in arb_config()) {
            let send = |c: &TimingConfig| {
                let t = simulate_frame(c).unwrap();
                t.first(Signal::TxDoneRise).unwrap() - t.first(Signal::FvalRise).unwrap()
            };
            let mut fast = c.clone();
            fast.pixel_clock_hz *= 2;
            prop_assert_eq!(send(&fast) * 2, send(&c));
        }

        #[test]
        fn classifier_time_depends_only_on_cycles_and_clock(a in arb_config(), b in arb_config()) {
            let mut b = b;
            b.dnn_cycles = a.dnn_cycles;
            b.fpga_clock_hz = a.fpga_clock_hz;
            b.fifo_stall_cycles = a.fifo_stall_cycles;
            let gap = |c: &TimingConfig| {
                let t = simulate_frame(c).unwrap();
                t.first(Signal::DnnValidRise).unwrap() - t.first(Signal::TxDoneRise).unwrap()
            };
            prop_assert_eq!(gap(&a), gap(&b));
        }

        #[test]
        fn simulation_is_deterministic(c in arb_config()) {
            prop_assert_eq!(simulate_frame(&c).unwrap(), simulate_frame(&c).unwrap());
        }
    }
}
