//! Run configuration and on-disk formats.
//!
//! JSON output goes through [`FullPrecision`], which writes every `f64` with
//! 17 significant digits so values read back bit-for-bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::approximator::{Checkpoint, RefineConfig, TrainConfig, TrainReport};
use crate::closedloop::{GainCertificate, Reconstruction, SimOptions, SimulationResult, TrackingResult};
use crate::error::{Error, Result};
use crate::linear::{resolve_discount, LinearAnalysis};
use crate::manifold::{pick_horizon, Dataset, DatasetMeta, GenerationConfig, Sample, Trajectory};
use crate::model::{build_allen_cahn, AllenCahnConfig, ControlSystem, Gamma, Vector};

pub const CONFIG_VERSION: u32 = 1;

/// `d.ddddddddddddddddde±x`, 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        file: path.display().to_string(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| format_err(path, format!("cannot open: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let f = File::create(path).map_err(|e| format_err(path, format!("cannot create: {e}")))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", to_json(value)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarLqConfig {
    #[serde(default = "one")]
    pub a: f64,
    pub gamma: Gamma,
    pub alpha_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    AllenCahn(AllenCahnConfig),
    ScalarLq(ScalarLqConfig),
}

impl SystemSpec {
    pub fn gamma(&self) -> Gamma {
        match self {
            SystemSpec::AllenCahn(c) => c.gamma,
            SystemSpec::ScalarLq(c) => c.gamma,
        }
    }

    pub fn alpha_fraction(&self) -> f64 {
        match self {
            SystemSpec::AllenCahn(c) => c.alpha_fraction,
            SystemSpec::ScalarLq(c) => c.alpha_fraction,
        }
    }

    pub fn with_gamma(&self, gamma: Gamma) -> SystemSpec {
        match self {
            SystemSpec::AllenCahn(c) => SystemSpec::AllenCahn(AllenCahnConfig { gamma, ..c.clone() }),
            SystemSpec::ScalarLq(c) => SystemSpec::ScalarLq(ScalarLqConfig { gamma, ..c.clone() }),
        }
    }

    /// Undiscounted model.
    pub fn base_system(&self) -> Result<ControlSystem> {
        match self {
            SystemSpec::AllenCahn(c) => build_allen_cahn(c),
            SystemSpec::ScalarLq(c) => ControlSystem::scalar_lq(c.a, c.gamma, 0.0),
        }
    }

    /// Discounted model with `α = alpha_fraction · ᾱ` and its analysis.
    pub fn build(&self) -> Result<(ControlSystem, LinearAnalysis)> {
        resolve_discount(&self.base_system()?, self.alpha_fraction())
    }
}

/// Repeated adaptive refinement after the first training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSettings {
    pub rounds: usize,
    pub fraction: f64,
    pub per_point: usize,
    pub max_angle: f64,
    pub seed: u64,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let c = RefineConfig::default();
        RefineSettings {
            rounds: 0,
            fraction: c.fraction,
            per_point: c.per_point,
            max_angle: c.max_angle,
            seed: c.seed,
        }
    }
}

impl RefineSettings {
    pub fn config(&self) -> RefineConfig {
        RefineConfig {
            fraction: self.fraction,
            per_point: self.per_point,
            max_angle: self.max_angle,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub options: SimOptions,
    /// Initial states are drawn uniformly on the sphere of this radius.
    pub x0_radius: f64,
    pub draws: usize,
    pub horizon: f64,
    /// Signal applied to every disturbance channel by `simulate`.
    pub disturbance: String,
    /// Signal applied to every disturbance channel by `gain`.
    pub gain_disturbance: String,
    /// Defaults to the system's `γ`.
    pub gamma_threshold: Option<f64>,
    pub epsilon: f64,
    /// The gain horizon satisfies `e^{−αT} ≤ horizon_tol`.
    pub horizon_tol: f64,
    /// Reference applied to every node by `track`.
    pub reference: String,
    pub update_rate_hz: f64,
    pub track_horizon: f64,
    pub reconstruction: Reconstruction,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            options: SimOptions::default(),
            x0_radius: 0.4,
            draws: 10,
            horizon: 30.0,
            disturbance: "0".into(),
            gain_disturbance: "0.3*sin(t)".into(),
            gamma_threshold: None,
            epsilon: 0.1,
            horizon_tol: 1e-6,
            reference: "sin(t)".into(),
            update_rate_hz: 500.0,
            track_horizon: 20.0,
            reconstruction: Reconstruction::Current,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub refine: RefineSettings,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

impl RunConfig {
    pub fn new(system: SystemSpec) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            system,
            generation: GenerationConfig::default(),
            training: TrainConfig::default(),
            refine: RefineSettings::default(),
            simulation: SimulationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if !(0.0..1.0).contains(&self.system.alpha_fraction()) {
            return Err(Error::InvalidConfig("system.alpha_fraction must lie in [0, 1)".into()));
        }
        if let SystemSpec::AllenCahn(c) = &self.system {
            c.validate()?;
        }
        self.generation.validate()?;
        self.training.validate()?;
        let s = &self.simulation;
        if !(s.x0_radius >= 0.0 && s.horizon > 0.0 && s.update_rate_hz > 0.0 && s.track_horizon > 0.0) {
            return Err(Error::InvalidConfig("simulation: radii, horizons and rates must be positive".into()));
        }
        if !(s.horizon_tol > 0.0 && s.horizon_tol < 1.0) || !(s.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("simulation: horizon_tol must lie in (0, 1), epsilon >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate().map_err(|e| format_err(path, e.to_string()))?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Linear analysis report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeReport {
    pub n: usize,
    pub gamma: Gamma,
    pub alpha_fraction: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub delta0: f64,
    pub gare_residual: f64,
    pub h_stable_margin: f64,
    pub horizon_margin: f64,
    /// `T∞` picked from `horizon_margin` and the generation `tail_tol`.
    pub horizon: f64,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub closedloop_spectrum: Vec<[f64; 2]>,
}

impl AnalyzeReport {
    pub fn new(la: &LinearAnalysis, alpha_fraction: f64, tail_tol: f64) -> Result<Self> {
        let c = &la.cert;
        Ok(AnalyzeReport {
            n: c.p.nrows(),
            gamma: c.gamma,
            alpha_fraction,
            alpha: c.alpha,
            alpha_bar: c.alpha_bar,
            delta0: c.delta0,
            gare_residual: c.gare_residual,
            h_stable_margin: c.h_stable_margin,
            horizon_margin: c.horizon_margin,
            horizon: pick_horizon(c.horizon_margin, tail_tol)?,
            p: c.p.transpose().as_slice().to_vec(),
            closedloop_spectrum: c.closedloop_spectrum.iter().map(|z| [z.re, z.im]).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Dataset JSONL

#[derive(Serialize)]
struct Header<'a> {
    meta: &'a DatasetMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderOwned {
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    traj: usize,
    t: f64,
    x: Vec<f64>,
    p: Vec<f64>,
    #[serde(rename = "V")]
    v: f64,
}

pub fn write_dataset_to<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    writeln!(w, "{}", to_json(&Header { meta: &ds.meta })?)?;
    for s in &ds.samples {
        let rec = SampleRecord {
            traj: s.traj,
            t: s.t,
            x: s.x.as_slice().to_vec(),
            p: s.p.as_slice().to_vec(),
            v: s.v,
        };
        writeln!(w, "{}", to_json(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_dataset_to(create(path)?, ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines().enumerate();
    let meta = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str::<HeaderOwned>(&line)
                .map_err(|e| format_err(path, format!("line 1 (header): {e}")))?
                .meta
        }
        None => return Err(format_err(path, "empty file: missing `meta` header")),
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        if rec.x.len() != meta.n || rec.p.len() != meta.n {
            return Err(format_err(
                path,
                format!("line {}: field `x`/`p` has length {}/{}, expected {}", i + 1, rec.x.len(), rec.p.len(), meta.n),
            ));
        }
        samples.push(Sample {
            traj: rec.traj,
            t: rec.t,
            x: Vector::from_vec(rec.x),
            p: Vector::from_vec(rec.p),
            v: rec.v,
        });
    }
    Ok(Dataset { meta, samples })
}

// ---------------------------------------------------------------------------
// CSV exports

fn csv_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

/// `t,x_1..x_n,p_1..p_n,V,H_residual`.
pub fn trajectory_csv(traj: &Trajectory, sys: &ControlSystem) -> String {
    let n = sys.n();
    let mut head = vec!["t".to_string()];
    head.extend(names("x", n));
    head.extend(names("p", n));
    head.push("V".into());
    head.push("H_residual".into());
    let mut out = head.join(",") + "\n";
    for (pt, h) in traj.points.iter().zip(traj.residuals(sys)) {
        let row = std::iter::once(pt.t)
            .chain(pt.x.iter().copied())
            .chain(pt.p.iter().copied())
            .chain([pt.v, h]);
        csv_row(&mut out, row);
    }
    out
}

/// `t,x_1..,u_1..,d_1..,I_z,I_d`.
pub fn trace_csv(sim: &SimulationResult) -> String {
    let n = sim.x.first().map_or(0, |v| v.len());
    let m = sim.u.first().map_or(0, |v| v.len());
    let l = sim.d.first().map_or(0, |v| v.len());
    let mut head = vec!["t".to_string()];
    head.extend(names("x", n));
    head.extend(names("u", m));
    head.extend(names("d", l));
    head.push("I_z".into());
    head.push("I_d".into());
    let mut out = head.join(",") + "\n";
    for k in 0..sim.len() {
        let row = std::iter::once(sim.t[k])
            .chain(sim.x[k].iter().copied())
            .chain(sim.u[k].iter().copied())
            .chain(sim.d[k].iter().copied())
            .chain([sim.i_z[k], sim.i_d[k]]);
        csv_row(&mut out, row);
    }
    out
}

/// `epoch,lr,train_loss,val_loss`; the last column is empty on epochs
/// without a validation pass.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for (k, (lr, tl)) in report.lr.iter().zip(&report.train_loss).enumerate() {
        let val = report.val_loss.get(k).copied().flatten().map(fmt_f64).unwrap_or_default();
        let _ = writeln!(out, "{k},{},{},{val}", fmt_f64(*lr), fmt_f64(*tl));
    }
    out
}

/// `t,x_1..,r_1..,error_sup,error_l2` at the update instants.
pub fn tracking_csv(res: &TrackingResult) -> String {
    let n = res.x.first().map_or(0, |v| v.len());
    let mut head = vec!["t".to_string()];
    head.extend(names("x", n));
    head.extend(names("r", n));
    head.push("error_sup".into());
    head.push("error_l2".into());
    let mut out = head.join(",") + "\n";
    for k in 0..res.t.len() {
        let row = std::iter::once(res.t[k])
            .chain(res.x[k].iter().copied())
            .chain(res.r[k].iter().copied())
            .chain([res.error_sup[k], res.error_l2[k]]);
        csv_row(&mut out, row);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_json(path, ck)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = read_json(path)?;
    ck.to_network().map_err(|e| format_err(path, e.to_string()))?;
    Ok(ck)
}

pub fn write_gain_certificate(path: &Path, cert: &GainCertificate) -> Result<()> {
    write_json(path, cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::GenerationConfig;
    use proptest::prelude::*;

    fn tiny_dataset(values: &[f64]) -> Dataset {
        let meta = DatasetMeta {
            n: 2,
            gamma: Gamma::Infinite,
            alpha: 0.5,
            horizon: 23.1,
            attempted: 1,
            accepted: 1,
            rejected: 0,
            config: GenerationConfig::default(),
        };
        let samples = values
            .chunks(2)
            .enumerate()
            .map(|(i, c)| Sample {
                traj: i / 3,
                t: i as f64 * 0.1,
                x: Vector::from_vec(vec![c[0], c.get(1).copied().unwrap_or(0.0)]),
                p: Vector::from_vec(vec![-c[0], 1.0 / 3.0]),
                v: c[0] * c[0],
            })
            .collect();
        Dataset { meta, samples }
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(to_json(&[0.3, 1e-300]).unwrap(), "[2.9999999999999999e-1,1.0000000000000000e-300]");
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = RunConfig::from_json(
            r#"{"version":1,"system":{"allen_cahn":{"intervals":11,"sigma":0.1,"gamma":1.2,"alpha_fraction":0.5}}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.generation, GenerationConfig::default());
        let err = RunConfig::from_json(r#"{"version":1,"system":{"scalar_lq":{"gamma":"inf","alpha_fraction":0.5}},"trainig":{}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("trainig"));
        let err = RunConfig::from_json(
            r#"{"version":1,"system":{"scalar_lq":{"gamma":"inf","alpha_fraction":0.5}},"training":{"epoch":3}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("epoch"));
        let mut bad = RunConfig::new(SystemSpec::ScalarLq(ScalarLqConfig {
            a: 1.0,
            gamma: Gamma::Infinite,
            alpha_fraction: 0.5,
        }));
        bad.version = 2;
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_roundtrip() {
        let cfg = RunConfig::new(SystemSpec::AllenCahn(AllenCahnConfig {
            intervals: 31,
            sigma: 0.1,
            gamma: Gamma::Finite(1.2),
            alpha_fraction: 0.5,
        }));
        let back = RunConfig::from_json(&to_json(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn scalar_analyze_report() {
        let spec = SystemSpec::ScalarLq(ScalarLqConfig {
            a: 1.0,
            gamma: Gamma::Infinite,
            alpha_fraction: 0.5,
        });
        let (_, la) = spec.build().unwrap();
        let rep = AnalyzeReport::new(&la, 0.5, 1e-5).unwrap();
        assert!((rep.alpha_bar - 2f64.sqrt()).abs() < 1e-10);
        assert_eq!(rep.p.len(), 1);
        let json = to_json(&rep).unwrap();
        assert!(json.contains("\"P\":[") && json.contains("\"closedloop_spectrum\":[["));
    }

    #[test]
    fn dataset_errors_name_file_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &tiny_dataset(&[0.1, 0.2])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"V\"", "\"W\"")).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { file, message }) => {
                assert!(file.ends_with("d.jsonl"));
                assert!(message.contains("line 2") && message.contains('W'), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_dataset(&dir.path().join("missing.jsonl")), Err(Error::Format { .. })));
    }

    #[test]
    fn loss_csv_layout() {
        let rep = TrainReport {
            lr: vec![1e-3, 1e-3],
            train_loss: vec![0.5, 0.25],
            val_loss: vec![Some(0.6), None],
            ..TrainReport::default()
        };
        let csv = loss_csv(&rep);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,lr,train_loss,val_loss");
        assert!(lines[2].ends_with(','));
        assert_eq!(lines.len(), 3);
    }

    proptest! {
        #[test]
        fn dataset_roundtrip_is_bit_exact(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let mut values = values;
            if values.len() % 2 == 1 { values.pop(); }
            let ds = tiny_dataset(&values);
            let mut buf = Vec::new();
            write_dataset_to(&mut buf, &ds).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ds.jsonl");
            std::fs::write(&path, &buf).unwrap();
            let back = read_dataset(&path).unwrap();
            prop_assert_eq!(back.samples.len(), ds.samples.len());
            for (a, b) in back.samples.iter().zip(&ds.samples) {
                prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                prop_assert_eq!(a.v.to_bits(), b.v.to_bits());
                for (u, w) in a.x.iter().chain(a.p.iter()).zip(b.x.iter().chain(b.p.iter())) {
                    prop_assert_eq!(u.to_bits(), w.to_bits());
                }
            }
            prop_assert_eq!(back.meta, ds.meta);
        }

        #[test]
        fn any_float_roundtrips(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back: f64 = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
