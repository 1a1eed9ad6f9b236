//! Skeleton-sequence data: the SKEL sample format, dataset manifests,
//! preprocessing, bone features, and a deterministic synthetic generator.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DataError, Error, TensorError};
use crate::graph::SkeletonTopology;
use crate::net::Example;
use crate::tensor::{Real, Tensor};

/// One recorded sequence. `coords` is (C, T, V, M): channels (x, y, z — or
/// x, y, confidence for pose-estimation data), frames, joints, persons.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSample {
    pub coords: Tensor<f32>,
    pub label: usize,
    pub id: String,
}

impl SkeletonSample {
    pub fn new(coords: Tensor<f32>, label: usize, id: impl Into<String>) -> Result<Self, Error> {
        check_coords(&coords)?;
        Ok(Self { coords, label, id: id.into() })
    }

    /// (C, T, V, M).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.coords.shape();
        (s[0], s[1], s[2], s[3])
    }
}

fn check_coords(coords: &Tensor<f32>) -> Result<(), Error> {
    if coords.rank() != 4 {
        return Err(TensorError::InvalidShape {
            shape: coords.shape().to_vec(),
            reason: "skeleton coords must be (channels, frames, joints, persons)".into(),
        }
        .into());
    }
    if coords.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("skeleton coords").into());
    }
    Ok(())
}

fn check_joints(coords: &Tensor<f32>, topo: &SkeletonTopology) -> Result<(), Error> {
    check_coords(coords)?;
    if coords.shape()[2] != topo.v() {
        return Err(DataError::JointMismatch {
            expected: topo.v(),
            found: coords.shape()[2],
        }
        .into());
    }
    Ok(())
}

/// Bone features: at every joint the vector from its parent (the neighbor one
/// hop closer to the center joint) to the joint itself. The center joint has
/// no parent and keeps a zero bone. Output shape matches `coords`.
pub fn compute_bones(
    coords: &Tensor<f32>,
    topo: &SkeletonTopology,
) -> Result<Tensor<f32>, Error> {
    check_joints(coords, topo)?;
    let (c, t, v, m) = dims4(coords);
    let parents = topo.parents_toward_center();
    let mut out = Tensor::zeros(coords.shape());
    let src = coords.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for ti in 0..t {
            let row = (ci * t + ti) * v * m;
            for (vi, parent) in parents.iter().enumerate() {
                let Some(p) = parent else { continue };
                for mi in 0..m {
                    dst[row + vi * m + mi] = src[row + vi * m + mi] - src[row + p * m + mi];
                }
            }
        }
    }
    Ok(out)
}

/// Channel-concatenates joint coordinates and bone vectors, joints first.
pub fn concat_bones(joints: &Tensor<f32>, bones: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
    check_coords(joints)?;
    check_coords(bones)?;
    if joints.shape()[1..] != bones.shape()[1..] {
        return Err(TensorError::DimMismatch {
            op: "concat_bones",
            lhs: joints.shape().to_vec(),
            rhs: bones.shape().to_vec(),
        }
        .into());
    }
    let mut shape = joints.shape().to_vec();
    shape[0] += bones.shape()[0];
    let mut data = Vec::with_capacity(joints.numel() + bones.numel());
    data.extend_from_slice(joints.data());
    data.extend_from_slice(bones.data());
    Ok(Tensor::new(shape, data).expect("channel concat preserves element count"))
}

fn dims4(x: &Tensor<f32>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn frame_is_zero(coords: &Tensor<f32>, t: usize) -> bool {
    let (c, frames, v, m) = dims4(coords);
    (0..c).all(|ci| {
        let row = (ci * frames + t) * v * m;
        coords.data()[row..row + v * m].iter().all(|&x| x == 0.0)
    })
}

/// Normalizes a sequence for the network: trailing all-zero frames are
/// treated as recording padding and dropped, the remainder is loop-padded
/// (frames 0,1,2,0,1,2,…) or uniform-stride subsampled to `t_target`, and
/// the whole sequence is translated so the center joint of frame 0, person 0
/// sits at the origin. Person slots that are entirely zero (absent trackers)
/// stay zero. Applying it twice is a no-op.
pub fn preprocess(
    coords: &Tensor<f32>,
    t_target: usize,
    topo: &SkeletonTopology,
) -> Result<Tensor<f32>, Error> {
    check_joints(coords, topo)?;
    if t_target == 0 {
        return Err(ConfigError("preprocess target length must be at least 1".into()).into());
    }
    let (c, t, v, m) = dims4(coords);
    let valid = (0..t)
        .rev()
        .find(|&ti| !frame_is_zero(coords, ti))
        .map(|ti| ti + 1)
        .ok_or(DataError::EmptySequence)?;

    let absent: Vec<bool> = (0..m)
        .map(|mi| {
            coords
                .data()
                .iter()
                .skip(mi)
                .step_by(m)
                .all(|&x| x == 0.0)
        })
        .collect();

    let pick = |ti: usize| -> usize {
        if valid >= t_target {
            ti * valid / t_target
        } else {
            ti % valid
        }
    };
    let mut out = Tensor::zeros(&[c, t_target, v, m]);
    let src = coords.data();
    let offsets: Vec<f32> = (0..c)
        .map(|ci| src[((ci * t + pick(0)) * v + topo.center()) * m])
        .collect();
    let dst = out.data_mut();
    for ci in 0..c {
        for ti in 0..t_target {
            let from = (ci * t + pick(ti)) * v * m;
            let to = (ci * t_target + ti) * v * m;
            for vi in 0..v {
                for mi in 0..m {
                    if !absent[mi] {
                        dst[to + vi * m + mi] = src[from + vi * m + mi] - offsets[ci];
                    }
                }
            }
        }
    }
    Ok(out)
}

const SAMPLE_MAGIC: &[u8; 4] = b"SKEL";
const SAMPLE_VERSION: u32 = 1;

/// Writes one sample: magic "SKEL", format version, dims C,T,V,M and the
/// label as u32, then the coordinates as 32-bit little-endian floats.
pub fn write_sample(path: &Path, sample: &SkeletonSample) -> Result<(), DataError> {
    let (c, t, v, m) = sample.dims();
    let mut buf = Vec::with_capacity(28 + sample.coords.numel() * 4);
    buf.extend_from_slice(SAMPLE_MAGIC);
    for dim in [SAMPLE_VERSION, c as u32, t as u32, v as u32, m as u32, sample.label as u32] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for &x in sample.coords.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct SampleReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> SampleReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DataError::Truncated)?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a sample written by [`write_sample`]; the sample id is the file stem.
pub fn read_sample(path: &Path) -> Result<SkeletonSample, DataError> {
    let buf = fs::read(path)?;
    let mut r = SampleReader { buf: &buf, at: 0 };
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32()?;
    if version != SAMPLE_VERSION {
        return Err(DataError::Version(version));
    }
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
    let label = r.u32()? as usize;
    let numel: usize = dims.iter().product();
    if numel == 0 {
        return Err(DataError::EmptySequence);
    }
    let payload = r.take(numel * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SkeletonSample {
        coords: Tensor::new(dims, data).expect("payload length was checked"),
        label,
        id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
}

/// Dataset index, stored as `manifest.json` next to the sample files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "T_target")]
    pub t_target: usize,
    /// "ntu25", "kin18", or a path to a topology json relative to the manifest.
    pub topology: String,
    pub classes: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve_topology(&self, base: &Path) -> Result<SkeletonTopology, Error> {
        match self.topology.as_str() {
            "ntu25" => Ok(SkeletonTopology::ntu25()),
            "kin18" => Ok(SkeletonTopology::kinetics18()),
            rel => {
                let text = fs::read_to_string(base.join(rel)).map_err(DataError::Io)?;
                Ok(SkeletonTopology::from_json(&text)?)
            }
        }
    }
}

/// A manifest together with its loaded samples, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SkeletonSample>,
}

/// Writes every sample plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    if ds.manifest.samples.len() != ds.samples.len() {
        return Err(DataError::Manifest(format!(
            "manifest lists {} samples but {} were provided",
            ds.manifest.samples.len(),
            ds.samples.len()
        )));
    }
    fs::create_dir_all(dir)?;
    for (entry, sample) in ds.manifest.samples.iter().zip(&ds.samples) {
        if entry.label != sample.label {
            return Err(DataError::Manifest(format!(
                "label mismatch for {}: manifest says {}, sample says {}",
                entry.file, entry.label, sample.label
            )));
        }
        write_sample(&dir.join(&entry.file), sample)?;
    }
    let json = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads just the manifest from a manifest path or a directory holding
/// `manifest.json`.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_owned() };
    let text = fs::read_to_string(&manifest_path)?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))
}

/// Loads a dataset from a manifest path (or a directory holding
/// `manifest.json`), validating joint counts and labels against the manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_owned() };
    let manifest = read_manifest(&manifest_path)?;
    let dir = manifest_path.parent().map(Path::to_owned).unwrap_or_default();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let sample = read_sample(&dir.join(&entry.file))?;
        if sample.coords.shape()[2] != manifest.v {
            return Err(DataError::JointMismatch {
                expected: manifest.v,
                found: sample.coords.shape()[2],
            });
        }
        if sample.label != entry.label {
            return Err(DataError::Manifest(format!(
                "label mismatch for {}: manifest says {}, sample says {}",
                entry.file, entry.label, sample.label
            )));
        }
        samples.push(sample);
    }
    Ok(Dataset { manifest, samples })
}

/// Motion archetypes of the synthetic generator, defined on the 25-joint
/// body model. The classes differ in which joints move and how the motion
/// correlates across joints and frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    /// The right arm sweeps from hanging to raised; the rest is still.
    RaiseOneArm,
    /// Both arms sweep up together, mirror-symmetric.
    RaiseBothArmsSymmetric,
    /// The right arm is held up while the forearm oscillates sideways.
    WavePeriodic,
    /// The whole body sinks into a crouch while drifting sideways.
    CrouchGlobalTranslation,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::RaiseOneArm,
        Archetype::RaiseBothArmsSymmetric,
        Archetype::WavePeriodic,
        Archetype::CrouchGlobalTranslation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::RaiseOneArm => "raise-one-arm",
            Archetype::RaiseBothArmsSymmetric => "raise-both-arms-symmetric",
            Archetype::WavePeriodic => "wave-periodic",
            Archetype::CrouchGlobalTranslation => "crouch-global-translation",
        }
    }

    pub fn parse(name: &str) -> Result<Self, DataError> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| DataError::UnknownArchetype(name.into()))
    }
}

const SYNTH_V: usize = 25;

// Rest pose for the 25-joint body model (x: left/right, y: up, z: forward),
// roughly metric. Indices follow the Kinect v2 convention used by `ntu25`.
#[rustfmt::skip]
const REST_POSE: [[f64; 3]; SYNTH_V] = [
    [ 0.00,  0.00, 0.00], // 0  spine base
    [ 0.00,  0.22, 0.00], // 1  spine mid
    [ 0.00,  0.52, 0.00], // 2  neck
    [ 0.00,  0.66, 0.00], // 3  head
    [-0.18,  0.44, 0.00], // 4  shoulder left
    [-0.24,  0.18, 0.00], // 5  elbow left
    [-0.27, -0.05, 0.00], // 6  wrist left
    [-0.28, -0.12, 0.00], // 7  hand left
    [ 0.18,  0.44, 0.00], // 8  shoulder right
    [ 0.24,  0.18, 0.00], // 9  elbow right
    [ 0.27, -0.05, 0.00], // 10 wrist right
    [ 0.28, -0.12, 0.00], // 11 hand right
    [-0.10, -0.08, 0.00], // 12 hip left
    [-0.11, -0.48, 0.00], // 13 knee left
    [-0.12, -0.86, 0.00], // 14 ankle left
    [-0.12, -0.92, 0.10], // 15 foot left
    [ 0.10, -0.08, 0.00], // 16 hip right
    [ 0.11, -0.48, 0.00], // 17 knee right
    [ 0.12, -0.86, 0.00], // 18 ankle right
    [ 0.12, -0.92, 0.10], // 19 foot right
    [ 0.00,  0.40, 0.00], // 20 spine shoulder
    [-0.29, -0.19, 0.00], // 21 hand tip left
    [-0.25, -0.15, 0.03], // 22 thumb left
    [ 0.29, -0.19, 0.00], // 23 hand tip right
    [ 0.25, -0.15, 0.03], // 24 thumb right
];

// Arm joints below the shoulder, proximal to distal.
const LEFT_ARM: [usize; 5] = [5, 6, 7, 22, 21];
const RIGHT_ARM: [usize; 5] = [9, 10, 11, 24, 23];

// Raised-arm pose (arm pointing up from the shoulder), right side; the left
// side mirrors x.
#[rustfmt::skip]
const RIGHT_ARM_RAISED: [[f64; 3]; 5] = [
    [0.22, 0.70, 0.00], // elbow
    [0.25, 0.94, 0.00], // wrist
    [0.26, 1.01, 0.00], // hand
    [0.23, 1.04, 0.03], // thumb
    [0.27, 1.08, 0.00], // hand tip
];

fn smooth(p: f64) -> f64 {
    0.5 - 0.5 * (std::f64::consts::PI * p.clamp(0.0, 1.0)).cos()
}

struct MotionParams {
    amp: f64,
    delay: f64,
    speed: f64,
    freq: f64,
    phase: f64,
}

impl MotionParams {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: rng.gen_range(0.75..1.15),
            delay: rng.gen_range(0.0..0.2),
            speed: rng.gen_range(1.0..1.5),
            freq: rng.gen_range(1.5..3.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Ramp progress at normalized time `tau`, shifted by the random delay
    /// and speed so no fixed frame pins the motion.
    fn progress(&self, tau: f64) -> f64 {
        smooth((tau - self.delay) * self.speed)
    }
}

fn pose_at(arch: Archetype, p: &MotionParams, tau: f64) -> [[f64; 3]; SYNTH_V] {
    let mut pose = REST_POSE;
    let raise = |pose: &mut [[f64; 3]; SYNTH_V], arm: &[usize; 5], mirror: f64, f: f64| {
        for (k, &j) in arm.iter().enumerate() {
            for c in 0..3 {
                let target = RIGHT_ARM_RAISED[k][c] * if c == 0 { mirror } else { 1.0 };
                pose[j][c] += f * (target - pose[j][c]);
            }
        }
    };
    match arch {
        Archetype::RaiseOneArm => {
            raise(&mut pose, &RIGHT_ARM, 1.0, p.amp * p.progress(tau));
        }
        Archetype::RaiseBothArmsSymmetric => {
            let f = p.amp * p.progress(tau);
            raise(&mut pose, &RIGHT_ARM, 1.0, f);
            raise(&mut pose, &LEFT_ARM, -1.0, f);
        }
        Archetype::WavePeriodic => {
            raise(&mut pose, &RIGHT_ARM, 1.0, 1.0);
            let sway = p.amp * 0.12 * (std::f64::consts::TAU * p.freq * tau + p.phase).sin();
            // Forearm joints sway more the further they sit from the elbow.
            for (k, &j) in RIGHT_ARM.iter().enumerate().skip(1) {
                pose[j][0] += sway * (0.4 + 0.2 * k as f64);
            }
        }
        Archetype::CrouchGlobalTranslation => {
            let f = p.progress(tau);
            let dx = p.amp * 0.35 * tau;
            let dy = p.amp * 0.30 * f;
            for joint in pose.iter_mut() {
                joint[0] += dx;
                joint[1] -= dy;
            }
            for knee in [13, 17] {
                pose[knee][2] += p.amp * 0.20 * f;
            }
        }
    }
    pose
}

/// Builds a labeled dataset of `archetypes.len() * n_per_class` single-person
/// sequences on the 25-joint body model (`v` must be 25). Every sample draws
/// its own rng seeded `seed ^ sample_index`, so generation is deterministic
/// and order-independent; phase, amplitude, and timing vary per sample, and
/// `noise` scales i.i.d. Gaussian jitter on every coordinate.
pub fn generate_synthetic(
    seed: u64,
    archetypes: &[Archetype],
    n_per_class: usize,
    v: usize,
    t: usize,
    noise: f64,
) -> Result<Dataset, Error> {
    if v != SYNTH_V {
        return Err(DataError::JointMismatch { expected: SYNTH_V, found: v }.into());
    }
    if t == 0 {
        return Err(DataError::EmptySequence.into());
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(ConfigError(format!("noise must be finite and non-negative, got {noise}")).into());
    }
    let mut samples = Vec::with_capacity(archetypes.len() * n_per_class);
    let mut entries = Vec::with_capacity(samples.capacity());
    for (label, &arch) in archetypes.iter().enumerate() {
        for i in 0..n_per_class {
            let idx = label * n_per_class + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
            let params = MotionParams::draw(&mut rng);
            let mut coords = Tensor::zeros(&[3, t, SYNTH_V, 1]);
            for ti in 0..t {
                let tau = if t > 1 { ti as f64 / (t - 1) as f64 } else { 0.0 };
                let pose = pose_at(arch, &params, tau);
                for (vi, joint) in pose.iter().enumerate() {
                    for (ci, &x) in joint.iter().enumerate() {
                        let jitter: f64 = rng.sample(StandardNormal);
                        coords.data_mut()[(ci * t + ti) * SYNTH_V + vi] =
                            (x + noise * jitter) as f32;
                    }
                }
            }
            let id = format!("s{idx:05}");
            entries.push(ManifestEntry { file: format!("{id}.skel"), label });
            samples.push(SkeletonSample { coords, label, id });
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            v: SYNTH_V,
            t_target: t,
            topology: "ntu25".into(),
            classes: archetypes.iter().map(|a| a.name().into()).collect(),
            samples: entries,
        },
        samples,
    })
}

/// Input features for a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    Joints,
    Bones,
    JointsBones,
}

impl Features {
    pub fn channels(self) -> usize {
        match self {
            Features::Joints | Features::Bones => 3,
            Features::JointsBones => 6,
        }
    }
}

/// One person slot of a (C, T, V, M) tensor as a (C, T, V) view.
pub fn person_view(x: &Tensor<f32>, mi: usize) -> Tensor<f32> {
    let (c, t, v, m) = dims4(x);
    Tensor::from_fn(&[c, t, v], |idx| x.data()[((idx[0] * t + idx[1]) * v + idx[2]) * m + mi])
}

/// Preprocesses every sample to the manifest's target length, builds the
/// requested features, and splits person slots into training views. Person
/// slots that stayed all-zero (absent trackers) are dropped, keeping at
/// least slot 0.
pub fn prepare_examples<F: Real>(
    ds: &Dataset,
    topo: &SkeletonTopology,
    features: Features,
) -> Result<Vec<Example<F>>, Error> {
    let mut out = Vec::with_capacity(ds.samples.len());
    for sample in &ds.samples {
        let joints = preprocess(&sample.coords, ds.manifest.t_target, topo)?;
        let x = match features {
            Features::Joints => joints,
            Features::Bones => compute_bones(&joints, topo)?,
            Features::JointsBones => {
                let bones = compute_bones(&joints, topo)?;
                concat_bones(&joints, &bones)?
            }
        };
        let m = x.shape()[3];
        let mut persons: Vec<Tensor<F>> = (0..m)
            .map(|mi| person_view(&x, mi))
            .filter(|view| view.data().iter().any(|&v| v != 0.0))
            .map(|view| view.cast())
            .collect();
        if persons.is_empty() {
            persons.push(person_view(&x, 0).cast());
        }
        out.push(Example { persons, label: sample.label });
    }
    Ok(out)
}
