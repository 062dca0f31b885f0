//! Evaluation metrics, non-neural baselines and the per-sample metric
//! report.

mod baselines;
mod decay;
mod distance;

pub use baselines::{mono_energy, mono_mono, stereo_energy};
pub use decay::{c50, edt, schroeder_curve, t60, DECAY_FLOOR_DB};
pub use distance::{env_distance, hilbert_envelope, mag_distance};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{PhaseSource, StftConfig, Waveform, DEFAULT_GL_ITERS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::scene::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Model,
    MonoMono,
    MonoEnergy,
    StereoEnergy,
    /// The target itself; every distance is zero.
    GroundTruth,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Model,
        Method::MonoMono,
        Method::MonoEnergy,
        Method::StereoEnergy,
        Method::GroundTruth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::MonoMono => "mono_mono",
            Method::MonoEnergy => "mono_energy",
            Method::StereoEnergy => "stereo_energy",
            Method::GroundTruth => "ground_truth",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub gl_iters: usize,
    /// Griffin-Lim starting phase used by `synth` and `eval`.
    pub phase: PhaseSource,
    /// Seed of the `random` phase.
    pub phase_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Model, Method::MonoMono, Method::MonoEnergy, Method::StereoEnergy],
            gl_iters: DEFAULT_GL_ITERS,
            phase: PhaseSource::Zero,
            phase_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn synthesis(&self) -> SynthesisOptions {
        SynthesisOptions {
            gl_iters: self.gl_iters,
            phase: self.phase,
            phase_seed: self.phase_seed,
        }
    }
}

/// How the model's magnitudes are turned back into audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthesisOptions {
    pub gl_iters: usize,
    pub phase: PhaseSource,
    pub phase_seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        EvalConfig::default().synthesis()
    }
}

/// Synthesizes the model's binaural output for a mono `source` clip.
pub fn synthesize_model(model: &Model, input: &ModelInput, source: &[f64], opts: SynthesisOptions) -> Result<Waveform> {
    let init = opts.phase.init(source, model.cfg().stft, opts.phase_seed)?;
    model.synthesize(input, source.len(), opts.gl_iters, &init)
}

/// Per-sample or aggregate metrics. `None` marks a metric that does not
/// apply to the row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub sample_id: String,
    pub mag: Option<f64>,
    pub env: Option<f64>,
    pub t60_err_pct: Option<f64>,
    pub c50_err_db: Option<f64>,
    pub edt_err_s: Option<f64>,
}

pub const AGGREGATE_ID: &str = "mean";
pub const METRIC_HEADER: &str = "method,sample_id,mag,env,t60_err_pct,c50_err_db,edt_err_s";

impl MetricRow {
    pub fn binaural(method: &str, sample_id: &str, mag: f64, env: f64) -> Self {
        Self {
            method: method.into(),
            sample_id: sample_id.into(),
            mag: Some(mag),
            env: Some(env),
            t60_err_pct: None,
            c50_err_db: None,
            edt_err_s: None,
        }
    }

    fn values(&self) -> [Option<f64>; 5] {
        [self.mag, self.env, self.t60_err_pct, self.c50_err_db, self.edt_err_s]
    }

    pub fn is_aggregate(&self) -> bool {
        self.sample_id == AGGREGATE_ID
    }
}

/// Errors of a predicted impulse response's parameters against a reference:
/// `(T60 % error, |ΔC50| dB, |ΔEDT| s)`. An infinite C50 on either side
/// yields an infinite error, which aggregation skips.
pub fn rir_errors(pred: &[f64], gt: &[f64], sample_rate: u32) -> Result<(f64, f64, f64)> {
    let (tp, tg) = (t60(pred, sample_rate)?, t60(gt, sample_rate)?);
    let (cp, cg) = (c50(pred, sample_rate)?, c50(gt, sample_rate)?);
    let (ep, eg) = (edt(pred, sample_rate)?, edt(gt, sample_rate)?);
    let c = if cp.is_finite() && cg.is_finite() { (cp - cg).abs() } else { f64::INFINITY };
    Ok((100.0 * (tp - tg).abs() / tg, c, (ep - eg).abs()))
}

/// Mean and count of one method's finite values per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub samples: usize,
    pub means: [Option<f64>; 5],
    /// Finite values per column entering each mean.
    pub counts: [usize; 5],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x}"),
    }
}

fn parse_value(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Data(format!("bad metric value `{s}`")))
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn summary(&self, method: &str) -> Summary {
        let rows: Vec<&MetricRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && !r.is_aggregate())
            .collect();
        let mut means = [None; 5];
        let mut counts = [0; 5];
        for c in 0..5 {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values()[c]).filter(|v| v.is_finite()).collect();
            counts[c] = vals.len();
            if !vals.is_empty() {
                means[c] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Summary {
            method: method.into(),
            samples: rows.len(),
            means,
            counts,
        }
    }

    /// Appends one aggregate row per method holding the column means.
    pub fn add_aggregates(&mut self) {
        for m in self.methods() {
            let s = self.summary(&m);
            let [mag, env, t60_err_pct, c50_err_db, edt_err_s] = s.means;
            self.rows.push(MetricRow {
                method: m,
                sample_id: AGGREGATE_ID.into(),
                mag,
                env,
                t60_err_pct,
                c50_err_db,
                edt_err_s,
            });
        }
    }

    pub fn aggregate(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.is_aggregate())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRIC_HEADER}\n");
        for r in &self.rows {
            let vals: Vec<String> = r.values().iter().map(|v| fmt_value(*v)).collect();
            s.push_str(&format!("{},{},{}\n", r.method, r.sample_id, vals.join(",")));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRIC_HEADER) {
            return Err(Error::Data("metric CSV header does not match".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("metric row has {} fields: `{line}`", f.len())));
            }
            rows.push(MetricRow {
                method: f[0].into(),
                sample_id: f[1].into(),
                mag: parse_value(f[2])?,
                env: parse_value(f[3])?,
                t60_err_pct: parse_value(f[4])?,
                c50_err_db: parse_value(f[5])?,
                edt_err_s: parse_value(f[6])?,
            });
        }
        Ok(Self { rows })
    }
}

/// The waveform a method produces for one sample.
pub fn method_output(
    method: Method,
    model: Option<&Model>,
    source: &Waveform,
    target: &Waveform,
    input: impl FnOnce(&Model) -> Result<ModelInput>,
    opts: SynthesisOptions,
) -> Result<Waveform> {
    match method {
        Method::MonoMono => mono_mono(source),
        Method::MonoEnergy => mono_energy(source, target),
        Method::StereoEnergy => stereo_energy(source, target),
        Method::GroundTruth => Ok(target.clone()),
        Method::Model => {
            let model = model.ok_or_else(|| Error::InvalidArgument("method `model` needs a checkpoint".into()))?;
            synthesize_model(model, &input(model)?, source.channel(0), opts)
        }
    }
}

/// Scores every requested method on every sample of `split`, then appends
/// the per-method aggregate rows.
pub fn evaluate(
    model: Option<&Model>,
    ds: &Dataset,
    split: Split,
    methods: &[Method],
    stft_cfg: StftConfig,
    opts: SynthesisOptions,
) -> Result<MetricReport> {
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("dataset has no {} samples", split.as_str())));
    }
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no evaluation methods requested".into()));
    }
    let diag = ds.scene.room.diagonal();
    let mut report = MetricReport::default();
    for &m in methods {
        for s in &samples {
            let out = method_output(
                m,
                model,
                &s.source,
                &s.target,
                |model| ModelInput::from_audio(model.cfg(), &s.priors, &s.pose, diag, s.source.channel(0)),
                opts,
            )?;
            let mag = mag_distance(&out, &s.target, stft_cfg)?;
            let env = env_distance(&out, &s.target)?;
            report.push(MetricRow::binaural(m.as_str(), &s.id.to_string(), mag, env));
        }
    }
    report.add_aggregates();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_empty_and_sentinel_fields() {
        let mut r = MetricReport::default();
        r.push(MetricRow::binaural("a", "0", 1.5, 0.25));
        r.push(MetricRow {
            method: "rir".into(),
            sample_id: "1".into(),
            mag: None,
            env: None,
            t60_err_pct: Some(2.0),
            c50_err_db: Some(f64::INFINITY),
            edt_err_s: Some(0.01),
        });
        r.add_aggregates();
        let text = r.to_csv();
        assert!(text.starts_with("method,sample_id,mag,env,t60_err_pct,c50_err_db,edt_err_s\n"));
        assert!(text.contains("a,0,1.5,0.25,,,\n"));
        assert!(text.contains("rir,1,,,2,inf,0.01\n"));
        assert_eq!(MetricReport::from_csv(&text).unwrap(), r);
        let s = r.summary("rir");
        assert_eq!(s.counts, [0, 0, 1, 0, 1]);
        assert_eq!(r.aggregate("rir").unwrap().c50_err_db, None);
    }

    #[test]
    fn phase_mode_parses_and_reaches_synthesis_options() {
        let c: EvalConfig = toml::from_str("phase = \"source\"\nphase_seed = 3\ngl_iters = 5").unwrap();
        assert_eq!(
            c.synthesis(),
            SynthesisOptions { gl_iters: 5, phase: PhaseSource::Source, phase_seed: 3 }
        );
        assert_eq!(SynthesisOptions::default().phase, PhaseSource::Zero);
        assert!(toml::from_str::<EvalConfig>("phase = \"given\"").is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("stereo".parse::<Method>().is_err());
    }
}
