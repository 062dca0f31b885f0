use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::{CameraPose, RoomSpec, Vec3};
use super::ism::{simulate_binaural, DEFAULT_ORDER};
use super::points::sample_points;
use super::render::{render_priors, RenderConfig, ScenePriors};
use crate::dsp::{wav_read, wav_write, BitDepth, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// A listener pose as written in scene files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub position: Vec3,
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
}

impl PoseSpec {
    pub fn pose(&self) -> CameraPose {
        CameraPose::from_yaw_pitch(self.position, self.yaw_deg, self.pitch_deg)
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub room: RoomSpec,
    pub emitter: Vec3,
    pub poses: Vec<PoseSpec>,
    pub render: RenderConfig,
    pub num_points: usize,
    pub order: usize,
    pub clip_seconds: f64,
    /// Dry source recording; a seeded synthetic voice is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_wav: Option<PathBuf>,
    pub seed: u64,
}

/// The 16-pose desk scene: a 4 × 4 grid of listeners at ear height, each
/// facing a different direction.
pub fn default_poses() -> Vec<PoseSpec> {
    let mut poses = Vec::with_capacity(16);
    for (gy, y) in [0.8, 1.6, 2.4, 3.2].into_iter().enumerate() {
        for (gx, x) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            let i = gy * 4 + gx;
            poses.push(PoseSpec {
                position: [x, y, 1.5],
                yaw_deg: 22.5 * ((5 * i) % 16) as f64 - 180.0,
                pitch_deg: 0.0,
            });
        }
    }
    poses
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: RoomSpec::default(),
            emitter: [2.5, 2.0, 1.3],
            poses: default_poses(),
            render: RenderConfig::default(),
            num_points: 1024,
            order: DEFAULT_ORDER,
            clip_seconds: 1.0,
            source_wav: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        self.room.check_inside("emitter", self.emitter)?;
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("scene has no poses".into()));
        }
        for (i, p) in self.poses.iter().enumerate() {
            self.room
                .check_inside(&format!("pose {i}"), p.position)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        if self.num_points == 0 {
            return Err(Error::InvalidArgument("num_points must be at least 1".into()));
        }
        if !(self.clip_seconds > 0.0) {
            return Err(Error::InvalidArgument("clip_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * DEFAULT_SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// Validation count for `n` samples: 20 % rounded, at least one, leaving at
/// least one training sample.
pub fn validation_count(n: usize) -> usize {
    ((0.2 * n as f64).round() as usize).clamp(1, n - 1)
}

fn split_key(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeded train/validation assignment: the `validation_count(n)` indices
/// with the smallest hash of `(seed, index)` go to validation.
pub fn assign_splits(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 poses to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_key(seed, i), i));
    let mut out = vec![Split::Train; n];
    for &i in &order[..validation_count(n)] {
        out[i] = Split::Val;
    }
    Ok(out)
}

/// Speech-like test signal: voiced harmonic syllables with moving formants
/// separated by short noise bursts, peak-normalized to 0.5.
pub fn synthetic_voice(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let len = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x766f_6963_65);
    let mut x = vec![0.0; len];
    let mut pos = 0usize;
    let tau = 2.0 * std::f64::consts::PI;
    while pos < len {
        let syl = (rng.random_range(0.12..0.3) * sr) as usize;
        let end = (pos + syl).min(len);
        if rng.random::<f64>() < 0.8 {
            let f0 = rng.random_range(95.0..240.0);
            let glide = rng.random_range(-0.25..0.25);
            let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0)];
            let mut phase = 0.0;
            for n in pos..end {
                let t = (n - pos) as f64 / syl as f64;
                let f = f0 * (1.0 + glide * t);
                phase += tau * f / sr;
                let env = (std::f64::consts::PI * t).sin().powi(2);
                let mut s = 0.0;
                let mut k = 1;
                while k as f64 * f < 0.45 * sr && k <= 40 {
                    let fk = k as f64 * f;
                    let shape: f64 = formants
                        .iter()
                        .map(|fm| (-((fk - fm) / 250.0).powi(2)).exp())
                        .sum::<f64>()
                        + 0.05;
                    s += shape / k as f64 * (k as f64 * phase).sin();
                    k += 1;
                }
                x[n] = env * s;
            }
        } else {
            for v in &mut x[pos..end] {
                *v = 0.3 * rng.random_range(-1.0..1.0);
            }
        }
        pos = end + (rng.random_range(0.02..0.08) * sr) as usize;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    x
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub pose: CameraPose,
    pub clip_start: usize,
    pub priors: ScenePriors,
    pub source: Waveform,
    pub target: Waveform,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// The dry source the scene draws its clips from.
pub fn scene_source(scene: &SceneConfig) -> Result<Vec<f64>> {
    match &scene.source_wav {
        Some(p) => Ok(wav_read(p)?.to_mono()),
        None => Ok(synthetic_voice(
            scene.clip_seconds * scene.poses.len() as f64,
            DEFAULT_SAMPLE_RATE,
            scene.seed,
        )),
    }
}

/// Clip `index` starts `index · clip_len` samples in, wrapping when the
/// source is shorter than the whole pose set.
pub fn clip_start(index: usize, clip_len: usize, source_len: usize) -> Result<usize> {
    if source_len < clip_len {
        return Err(Error::InvalidArgument(format!(
            "source has {source_len} samples, shorter than one {clip_len}-sample clip"
        )));
    }
    Ok((index * clip_len) % (source_len - clip_len + 1))
}

/// Renders one sample given the shared scene data.
pub fn build_sample(
    scene: &SceneConfig,
    index: usize,
    split: Split,
    points: &[Vec3],
    source: &[f64],
) -> Result<Sample> {
    let clip_len = scene.clip_len();
    let start = clip_start(index, clip_len, source.len())?;
    let pose = scene.poses[index].pose();
    let priors = render_priors(&scene.room, &pose, &scene.render, points.to_vec())?;
    // Audio is kept at float-WAV precision so a dataset read back from disk
    // is identical to the one built in memory.
    let clip = Waveform::mono(source[start..start + clip_len].to_vec(), DEFAULT_SAMPLE_RATE)?.round_to_f32();
    let target = simulate_binaural(&scene.room, scene.emitter, &pose, &clip, scene.order)?.round_to_f32();
    Ok(Sample {
        id: index,
        split,
        pose,
        clip_start: start,
        priors,
        source: clip,
        target,
    })
}

/// Priors for an arbitrary pose in the scene, with the same point set the
/// dataset samples use.
pub fn priors_for_pose(scene: &SceneConfig, pose: &CameraPose) -> Result<ScenePriors> {
    scene.validate()?;
    let points = sample_points(&scene.room, scene.num_points, scene.seed)?;
    render_priors(&scene.room, pose, &scene.render, points)
}

pub fn build_dataset(scene: &SceneConfig) -> Result<Dataset> {
    scene.validate()?;
    let splits = assign_splits(scene.poses.len(), scene.seed)?;
    let points = sample_points(&scene.room, scene.num_points, scene.seed)?;
    let source = scene_source(scene)?;
    let samples = splits
        .iter()
        .enumerate()
        .map(|(i, s)| build_sample(scene, i, *s, &points, &source))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        scene: scene.clone(),
        samples,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const PRIORS_MAGIC: &[u8; 4] = b"AVPR";
const PRIORS_VERSION: u32 = 1;

pub fn encode_priors(p: &ScenePriors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PRIORS_MAGIC);
    out.extend_from_slice(&PRIORS_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.width as u32).to_le_bytes());
    out.extend_from_slice(&(p.height as u32).to_le_bytes());
    out.extend_from_slice(&(p.points.len() as u64).to_le_bytes());
    let floats = p
        .rgb
        .iter()
        .chain(&p.depth)
        .chain(&p.normal)
        .chain(p.points.iter().flatten());
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_priors(bytes: &[u8]) -> Result<ScenePriors> {
    let bad = |m: &str| Error::Data(format!("priors blob: {m}"));
    if bytes.len() < 24 || &bytes[..4] != PRIORS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != PRIORS_VERSION {
        return Err(bad(&format!("unsupported version {}", u32_at(4))));
    }
    let (w, h) = (u32_at(8) as usize, u32_at(12) as usize);
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let plane = w * h;
    let count = 7 * plane + 3 * n;
    if bytes.len() != 24 + 8 * count {
        return Err(bad(&format!("expected {} bytes, found {}", 24 + 8 * count, bytes.len())));
    }
    let vals: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ScenePriors {
        width: w,
        height: h,
        rgb: vals[..3 * plane].to_vec(),
        depth: vals[3 * plane..4 * plane].to_vec(),
        normal: vals[4 * plane..7 * plane].to_vec(),
        points: vals[7 * plane..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SCENE_FILE: &str = "scene.toml";
const MANIFEST_HEADER: &str = "# avsurf dataset manifest v1";

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: usize,
    pub split: Split,
    pub pose: CameraPose,
    pub clip_start: usize,
    pub source: String,
    pub source_sha256: String,
    pub target: String,
    pub target_sha256: String,
    pub priors: String,
    pub priors_sha256: String,
}

fn fmt_vec(v: Vec3) -> String {
    format!("{:?},{:?},{:?}", v[0], v[1], v[2])
}

fn parse_vec(s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.parse::<f64>().map_err(|e| Error::Data(format!("bad number '{p}': {e}"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Data(format!("expected 3 components in '{s}'")))
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!(
            "id={} split={} position={} forward={} up={} clip_start={} source={} source_sha256={} target={} target_sha256={} priors={} priors_sha256={}",
            self.id,
            self.split.as_str(),
            fmt_vec(self.pose.position),
            fmt_vec(self.pose.forward),
            fmt_vec(self.pose.up),
            self.clip_start,
            self.source,
            self.source_sha256,
            self.target,
            self.target_sha256,
            self.priors,
            self.priors_sha256
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed manifest field '{tok}'")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("manifest record missing '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Data(format!("bad {k}: {e}")))
        };
        Ok(Self {
            id: num("id")?,
            split: Split::parse(get("split")?)?,
            pose: CameraPose::new(
                parse_vec(get("position")?)?,
                parse_vec(get("forward")?)?,
                parse_vec(get("up")?)?,
            )
            .map_err(|e| Error::Data(e.to_string()))?,
            clip_start: num("clip_start")?,
            source: get("source")?.to_string(),
            source_sha256: get("source_sha256")?.to_string(),
            target: get("target")?.to_string(),
            target_sha256: get("target_sha256")?.to_string(),
            priors: get("priors")?.to_string(),
            priors_sha256: get("priors_sha256")?.to_string(),
        })
    }
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Data("missing or unsupported manifest header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(ManifestRecord::parse)
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a sample's three files under `dir` and returns its manifest line.
pub fn write_sample(dir: &Path, s: &Sample) -> Result<ManifestRecord> {
    let sub = dir.join("samples");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let stem = format!("samples/{:04}", s.id);
    let (src, tgt, pri) = (
        format!("{stem}_source.wav"),
        format!("{stem}_target.wav"),
        format!("{stem}_priors.bin"),
    );
    wav_write(&dir.join(&src), &s.source, BitDepth::Float32)?;
    wav_write(&dir.join(&tgt), &s.target, BitDepth::Float32)?;
    write_file(&dir.join(&pri), &encode_priors(&s.priors))?;
    Ok(ManifestRecord {
        id: s.id,
        split: s.split,
        pose: s.pose,
        clip_start: s.clip_start,
        source_sha256: sha256_hex(&read_file(&dir.join(&src))?),
        target_sha256: sha256_hex(&read_file(&dir.join(&tgt))?),
        priors_sha256: sha256_hex(&read_file(&dir.join(&pri))?),
        source: src,
        target: tgt,
        priors: pri,
    })
}

/// Writes the whole dataset (samples, manifest, scene description).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = ds
        .samples
        .iter()
        .map(|s| write_sample(dir, s))
        .collect::<Result<Vec<_>>>()?;
    let scene = toml::to_string(&ds.scene).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(SCENE_FILE), scene.as_bytes())?;
    write_file(&dir.join(MANIFEST_FILE), format_manifest(&records).as_bytes())?;
    Ok(records)
}

pub fn read_scene(dir: &Path) -> Result<SceneConfig> {
    let path = dir.join(SCENE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

/// Loads a dataset written by [`write_dataset`], verifying every file hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let scene = read_scene(dir)?;
    let records = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let check = |rel: &str, want: &str| -> Result<Vec<u8>> {
            let bytes = read_file(&dir.join(rel))?;
            let got = sha256_hex(&bytes);
            if got != want {
                return Err(Error::Data(format!("{rel}: hash {got} does not match manifest {want}")));
            }
            Ok(bytes)
        };
        check(&r.source, &r.source_sha256)?;
        check(&r.target, &r.target_sha256)?;
        let priors = decode_priors(&check(&r.priors, &r.priors_sha256)?)?;
        samples.push(Sample {
            id: r.id,
            split: r.split,
            pose: r.pose,
            clip_start: r.clip_start,
            priors,
            source: wav_read(&dir.join(&r.source))?,
            target: wav_read(&dir.join(&r.target))?,
        });
    }
    Ok(Dataset { scene, samples })
}
