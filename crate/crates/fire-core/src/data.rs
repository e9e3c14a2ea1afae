//! Synthetic multi-modality phantom data, random ground-truth
//! perturbations, and volume file I/O.
//!
//! A phantom is one random smooth geometry — nested ellipsoids plus a
//! stem-like protrusion — rendered twice under two invertible intensity
//! mappings standing in for MR modalities, with shared binary label masks
//! for three structures. Perturbations are seeded and deterministic.
//!
//! Volume container on disk: `<stem>.vol.json` header plus
//! `<stem>.vol.f32` (little-endian row-major scalars) plus one
//! `<stem>.<label>.msk.u8` byte mask per label. 2-D volumes can also emit
//! a binary PGM (P5) preview.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FireError, Result};
use crate::tensor::Tensor;
use crate::warp::{compose, sample, sample_nearest, AffineMatrix, Border, DisplacementField};

/// An image on a physical grid with optional binary label masks.
#[derive(Debug, Clone)]
pub struct Volume {
    /// `[1, spatial...]`, intensities in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Per-axis voxel size in millimeters.
    pub spacing_mm: Vec<f64>,
    /// Strictly `{0, 1}` masks of the image's spatial shape.
    pub labels: BTreeMap<String, Tensor<f32>>,
}

impl Volume {
    pub fn new(
        image: Tensor<f32>,
        spacing_mm: Vec<f64>,
        labels: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let sh = image.shape();
        if sh.len() < 2 || sh[0] != 1 {
            return Err(FireError::InvalidShape {
                op: "volume",
                shape: sh.to_vec(),
                reason: "expected a [1, spatial...] image".into(),
            });
        }
        if spacing_mm.len() != sh.len() - 1 || spacing_mm.iter().any(|s| *s <= 0.0) {
            return Err(FireError::InvalidArgument(format!(
                "spacing {spacing_mm:?} does not match spatial rank {}",
                sh.len() - 1
            )));
        }
        for (name, mask) in &labels {
            if mask.shape() != &sh[1..] {
                return Err(FireError::ShapeMismatch {
                    op: "volume_label",
                    lhs: mask.shape().to_vec(),
                    rhs: sh[1..].to_vec(),
                });
            }
            if !is_binary(mask) {
                return Err(FireError::InvalidArgument(format!(
                    "label `{name}` is not strictly binary"
                )));
            }
        }
        Ok(Volume {
            image,
            spacing_mm,
            labels,
        })
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.image.shape()[1..]
    }
}

pub fn is_binary(mask: &Tensor<f32>) -> bool {
    mask.data().iter().all(|v| *v == 0.0 || *v == 1.0)
}

/// Invertible intensity mapping standing in for an MR modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityStyle {
    /// Linear map of tissue intensity onto `[-1, 1]`.
    Plain,
    /// Contrast-inverted gamma map, `1 - 2 t^0.7`.
    InvertedGamma,
}

impl ModalityStyle {
    fn apply(self, t: f64) -> f64 {
        match self {
            ModalityStyle::Plain => 2.0 * t - 1.0,
            ModalityStyle::InvertedGamma => 1.0 - 2.0 * t.powf(0.7),
        }
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    center: Vec<f64>,
    axes: Vec<f64>,
    /// Rotation in the (0, 1) plane.
    angle: f64,
}

impl Ellipse {
    /// Normalized squared radius: <= 1 inside.
    fn q(&self, p: &[f64]) -> f64 {
        let mut d: Vec<f64> = p
            .iter()
            .zip(&self.center)
            .map(|(p, c)| p - c)
            .collect();
        if d.len() >= 2 && self.angle != 0.0 {
            let (s, c) = self.angle.sin_cos();
            let (d0, d1) = (d[0], d[1]);
            d[0] = c * d0 + s * d1;
            d[1] = -s * d0 + c * d1;
        }
        d.iter()
            .zip(&self.axes)
            .map(|(d, a)| (d / a) * (d / a))
            .sum()
    }

    /// Soft coverage in [0, 1] with an edge band of `soft` in sqrt-q units.
    fn coverage(&self, p: &[f64], soft: f64) -> f64 {
        let r = self.q(p).sqrt();
        let t = ((1.0 - r) / soft + 0.5).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    fn inside(&self, p: &[f64]) -> bool {
        self.q(p) <= 1.0
    }
}

struct Geometry {
    body: Ellipse,
    mid: Ellipse,
    core: Ellipse,
    stem: Ellipse,
}

fn random_geometry(rng: &mut ChaCha8Rng, dim: usize) -> Geometry {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    let center: Vec<f64> = (0..dim).map(|_| u(rng, -0.06, 0.06)).collect();
    let body_axes: Vec<f64> = (0..dim).map(|_| u(rng, 0.52, 0.66)).collect();
    let angle = u(rng, 0.0, std::f64::consts::PI);
    let body = Ellipse {
        center: center.clone(),
        axes: body_axes.clone(),
        angle,
    };
    let mid_scale = u(rng, 0.58, 0.70);
    let mid = Ellipse {
        center: center.iter().map(|c| c + u(rng, -0.04, 0.04)).collect(),
        axes: body_axes.iter().map(|a| a * mid_scale).collect(),
        angle,
    };
    let core_scale = u(rng, 0.38, 0.46);
    let core = Ellipse {
        center: mid.center.iter().map(|c| c + u(rng, -0.05, 0.05)).collect(),
        axes: body_axes.iter().map(|a| a * core_scale).collect(),
        angle,
    };
    // Stem: a narrow ellipse protruding radially from the body boundary.
    let phi = u(rng, 0.0, 2.0 * std::f64::consts::PI);
    let dir: Vec<f64> = match dim {
        2 => vec![phi.sin(), phi.cos()],
        _ => {
            let z = u(rng, -0.5, 0.5);
            let r = (1.0 - z * z).sqrt();
            vec![z, r * phi.sin(), r * phi.cos()]
        }
    };
    let body_r = body_axes.iter().sum::<f64>() / dim as f64;
    let stem_len = u(rng, 0.16, 0.22);
    let stem_center: Vec<f64> = center
        .iter()
        .zip(&dir)
        .map(|(c, d)| c + d * (body_r * 0.92 + stem_len * 0.5))
        .collect();
    let mut stem_axes = vec![u(rng, 0.10, 0.13); dim];
    stem_axes[0] = stem_len;
    let stem_angle = match dim {
        2 => -phi, // align axis 0 of the stem with the radial direction
        _ => 0.0,
    };
    let stem = Ellipse {
        center: stem_center,
        axes: stem_axes,
        angle: stem_angle,
    };
    Geometry {
        body,
        mid,
        core,
        stem,
    }
}

/// Grid of normalized coordinates for rendering.
fn coord_grid(size: &[usize]) -> Vec<Vec<f64>> {
    let npts: usize = size.iter().product();
    let mut coords = vec![vec![0.0; size.len()]; npts];
    let mut idx = vec![0usize; size.len()];
    for point in coords.iter_mut() {
        for (a, &i) in idx.iter().enumerate() {
            point[a] = -1.0 + 2.0 * i as f64 / (size[a] - 1) as f64;
        }
        for a in (0..size.len()).rev() {
            idx[a] += 1;
            if idx[a] < size[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    coords
}

/// One random phantom rendered under two modality styles; the returned
/// volumes share identical label masks for `body`, `core` and `stem`.
pub fn generate_phantom_pair(
    seed: u64,
    dim: usize,
    size: usize,
    style_a: ModalityStyle,
    style_b: ModalityStyle,
) -> Result<(Volume, Volume)> {
    if dim != 2 && dim != 3 {
        return Err(FireError::InvalidArgument(format!(
            "phantom dim must be 2 or 3, got {dim}"
        )));
    }
    if size < 16 || size % 4 != 0 {
        return Err(FireError::InvalidArgument(format!(
            "phantom size must be >= 16 and divisible by 4, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = random_geometry(&mut rng, dim);
    let shape = vec![size; dim];
    let npts: usize = shape.iter().product();
    let coords = coord_grid(&shape);

    // ~1.5 pixels of edge softness, in sqrt-q units of the body scale.
    let px = 2.0 / size as f64;
    let soft = 1.5 * px / (geo.body.axes.iter().sum::<f64>() / dim as f64);

    let mut tissue = vec![0.05f64; npts];
    let mut body_mask = vec![0.0f32; npts];
    let mut core_mask = vec![0.0f32; npts];
    let mut stem_mask = vec![0.0f32; npts];
    for (i, p) in coords.iter().enumerate() {
        let mut t = 0.05;
        let mix = |t: f64, v: f64, a: f64| t + (v - t) * a;
        t = mix(t, 0.40, geo.body.coverage(p, soft));
        t = mix(t, 0.80, geo.stem.coverage(p, soft * 2.0));
        t = mix(t, 0.65, geo.mid.coverage(p, soft));
        t = mix(t, 0.95, geo.core.coverage(p, soft));
        tissue[i] = t;
        if geo.body.inside(p) || geo.stem.inside(p) {
            body_mask[i] = 1.0;
        }
        if geo.core.inside(p) {
            core_mask[i] = 1.0;
        }
        if geo.stem.inside(p) {
            stem_mask[i] = 1.0;
        }
    }

    let mut img_shape = vec![1usize];
    img_shape.extend(&shape);
    let render = |style: ModalityStyle| -> Result<Tensor<f32>> {
        let data: Vec<f32> = tissue
            .iter()
            .map(|t| style.apply(*t).clamp(-1.0, 1.0) as f32)
            .collect();
        Tensor::new(&img_shape, data)
    };
    let labels: BTreeMap<String, Tensor<f32>> = [
        ("body", body_mask),
        ("core", core_mask),
        ("stem", stem_mask),
    ]
    .into_iter()
    .map(|(n, m)| Ok((n.to_string(), Tensor::new(&shape, m)?)))
    .collect::<Result<_>>()?;

    let spacing = vec![1.0; dim];
    let a = Volume::new(render(style_a)?, spacing.clone(), labels.clone())?;
    let b = Volume::new(render(style_b)?, spacing, labels)?;
    Ok((a, b))
}

/// Random perturbation protocol: moderate-to-strong changes where at least
/// one axis sees a fractional change within `strength`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    /// `[lo, hi]` fractional change on the driving axis.
    pub strength: [f64; 2],
    pub include_nonrigid: bool,
    /// Max non-rigid displacement magnitude in normalized units.
    pub nonrigid_amplitude: f64,
    /// Control-grid extent per axis for the non-rigid field.
    pub nonrigid_smoothness: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            strength: [0.2, 0.5],
            include_nonrigid: true,
            nonrigid_amplitude: 0.04,
            nonrigid_smoothness: 5,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.strength;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(FireError::InvalidArgument(format!(
                "perturbation strength must satisfy 0 <= lo <= hi < 1, got {:?}",
                self.strength
            )));
        }
        if self.nonrigid_amplitude >= 1.0 || self.nonrigid_amplitude < 0.0 {
            return Err(FireError::InvalidArgument(
                "nonrigid_amplitude must lie in [0, 1)".into(),
            ));
        }
        if self.include_nonrigid && self.nonrigid_smoothness < 3 {
            return Err(FireError::InvalidArgument(
                "nonrigid_smoothness (control grid extent) must be >= 3".into(),
            ));
        }
        Ok(())
    }
}

/// Random affine perturbation: one driving axis receives a scale change of
/// magnitude within `strength`; the other axes get mild scales, plus a
/// small rotation and per-axis translations. The driving scale is always
/// above 1 in the backward map, which keeps the phantom inside the frame
/// so ground-truth warps stay invertible without information loss.
/// Deterministic given the rng.
pub fn random_affine_rng(
    spec: &PerturbationSpec,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> AffineMatrix<f32> {
    let [lo, hi] = spec.strength;
    let driver = rng.random_range(0..dim);
    let mut scales = vec![0.0f64; dim];
    for (a, s) in scales.iter_mut().enumerate() {
        *s = if a == driver {
            1.0 + rng.random_range(lo..=hi)
        } else {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            1.0 + sign * rng.random_range(0.0..=0.3 * lo)
        };
    }
    let max_rot = 0.5 * lo;
    let angle = rng.random_range(-max_rot..=max_rot);
    // translation as a fraction of the axis extent (2 in normalized units)
    let max_t = 0.4 * lo;
    let trans: Vec<f64> = (0..dim)
        .map(|_| rng.random_range(-max_t..=max_t) * 2.0)
        .collect();

    // linear part: rotation in a plane composed with per-axis scaling
    let mut lin = vec![vec![0.0f64; dim]; dim];
    for (a, row) in lin.iter_mut().enumerate() {
        row[a] = scales[a];
    }
    let (i, j) = if dim == 2 {
        (0, 1)
    } else {
        match rng.random_range(0..3) {
            0 => (0, 1),
            1 => (0, 2),
            _ => (1, 2),
        }
    };
    let (sin, cos) = angle.sin_cos();
    for row in lin.iter_mut() {
        let (ri, rj) = (row[i], row[j]);
        row[i] = cos * ri - sin * rj;
        row[j] = sin * ri + cos * rj;
    }

    let mut entries = vec![0.0f32; dim * (dim + 1)];
    for r in 0..dim {
        for c in 0..dim {
            entries[r * (dim + 1) + c] = lin[r][c] as f32;
        }
        entries[r * (dim + 1) + dim] = trans[r] as f32;
    }
    AffineMatrix::from_tensor(Tensor::new(&[dim, dim + 1], entries).expect("finite entries"))
        .expect("valid matrix")
}

/// Deterministic wrapper over [`random_affine_rng`] seeded by the spec.
pub fn random_affine(spec: &PerturbationSpec, dim: usize) -> AffineMatrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    random_affine_rng(spec, dim, &mut rng)
}

/// Smooth random displacement field from seeded control-point offsets,
/// linearly upsampled to `shape`. The amplitude is capped below half the
/// control-cell pitch, which keeps the map fold-free.
pub fn random_smooth_field_rng(
    spec: &PerturbationSpec,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<DisplacementField<f32>> {
    let dim = shape.len();
    let c = spec.nonrigid_smoothness;
    if c < 3 {
        return Err(FireError::InvalidArgument(
            "control grid extent must be >= 3".into(),
        ));
    }
    let pitch = 2.0 / (c - 1) as f64;
    let amp = spec.nonrigid_amplitude.min(0.45 * pitch);
    let mut ctrl_shape = vec![dim];
    ctrl_shape.extend(std::iter::repeat_n(c, dim));
    let n: usize = ctrl_shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| rng.random_range(-amp..=amp) as f32)
        .collect();
    let ctrl = DisplacementField::from_tensor(Tensor::new(&ctrl_shape, data)?)?;
    let up = ctrl.tensor().resize_linear(shape)?;
    DisplacementField::from_tensor(up)
}

/// Deterministic wrapper over [`random_smooth_field_rng`].
pub fn random_smooth_field(
    spec: &PerturbationSpec,
    shape: &[usize],
) -> Result<DisplacementField<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    random_smooth_field_rng(spec, shape, &mut rng)
}

/// A ground-truth perturbation, recorded next to the warped volume.
#[derive(Debug, Clone)]
pub struct GroundTruthWarp {
    pub affine: AffineMatrix<f32>,
    pub field: Option<DisplacementField<f32>>,
}

/// Draw a full perturbation (affine plus optional non-rigid part) from one
/// rng stream.
pub fn random_perturbation_rng(
    spec: &PerturbationSpec,
    dim: usize,
    field_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<GroundTruthWarp> {
    let affine = random_affine_rng(spec, dim, rng);
    let field = if spec.include_nonrigid && spec.nonrigid_amplitude > 0.0 {
        Some(random_smooth_field_rng(spec, field_shape, rng)?)
    } else {
        None
    };
    Ok(GroundTruthWarp { affine, field })
}

impl GroundTruthWarp {
    pub fn grid(&self, shape: &[usize]) -> Result<crate::warp::SampleGrid<f32>> {
        match &self.field {
            Some(u) => compose(&self.affine, u, shape),
            None => compose(
                &self.affine,
                &DisplacementField::zero(shape),
                shape,
            ),
        }
    }
}

/// Warp a volume by a ground-truth transform: linear resampling for the
/// image, nearest-neighbor for the masks (so they stay binary).
pub fn apply_ground_truth_warp(v: &Volume, warp: &GroundTruthWarp) -> Result<Volume> {
    let sp = v.spatial_shape().to_vec();
    let grid = warp.grid(&sp)?;
    let image = sample(&v.image, &grid, Border::Clamp)?.detach();
    let labels = v
        .labels
        .iter()
        .map(|(name, mask)| {
            let mut msh = vec![1usize];
            msh.extend(&sp);
            let m = mask.reshape(&msh)?.detach();
            let warped = sample_nearest(&m, &grid)?;
            Ok((name.clone(), warped.reshape(&sp)?.detach()))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Volume::new(image, v.spacing_mm.clone(), labels)
}

// ---------------------------------------------------------------------------
// Volume container I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LabelEntry {
    name: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    version: u32,
    shape: Vec<usize>,
    spacing_mm: Vec<f64>,
    dtype: String,
    labels: Vec<LabelEntry>,
}

fn strip_vol_suffix(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    match s.strip_suffix(".vol.json") {
        Some(stem) => PathBuf::from(stem),
        None => path.to_path_buf(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let p = |e| FireError::io(path.display().to_string(), e);
    std::fs::write(&tmp, bytes).map_err(p)?;
    std::fs::rename(&tmp, path).map_err(|e| FireError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Write a raw tensor in the volume container (any channel count).
pub fn save_tensor(t: &Tensor<f32>, spacing_mm: &[f64], stem: &Path) -> Result<()> {
    let stem = strip_vol_suffix(stem);
    let header = VolumeHeader {
        version: 1,
        shape: t.shape().to_vec(),
        spacing_mm: spacing_mm.to_vec(),
        dtype: "f32".into(),
        labels: Vec::new(),
    };
    let mut payload = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&stem.with_extension("vol.f32"), &payload)?;
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| FireError::format(stem.display().to_string(), e.to_string()))?;
    write_atomic(&stem.with_extension("vol.json"), &json)
}

/// Read a raw tensor saved with [`save_tensor`] / [`save_volume`].
pub fn load_tensor(path: &Path) -> Result<(Tensor<f32>, Vec<f64>)> {
    let stem = strip_vol_suffix(path);
    let json_path = stem.with_extension("vol.json");
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| FireError::io(json_path.display().to_string(), e))?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| FireError::format(json_path.display().to_string(), e.to_string()))?;
    if header.version != 1 {
        return Err(FireError::format(
            json_path.display().to_string(),
            format!("unsupported version {}", header.version),
        ));
    }
    if header.dtype != "f32" {
        return Err(FireError::format(
            json_path.display().to_string(),
            format!("unsupported dtype `{}`", header.dtype),
        ));
    }
    let payload_path = stem.with_extension("vol.f32");
    let bytes = std::fs::read(&payload_path)
        .map_err(|e| FireError::io(payload_path.display().to_string(), e))?;
    let expect: usize = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(FireError::format(
            payload_path.display().to_string(),
            format!(
                "payload holds {} bytes but header shape {:?} wants {expect}",
                bytes.len(),
                header.shape
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Tensor::new(&header.shape, data)?, header.spacing_mm))
}

/// Write a volume: header, image payload and one byte-mask per label.
pub fn save_volume(v: &Volume, stem: &Path) -> Result<()> {
    let stem = strip_vol_suffix(stem);
    let stem_name = stem
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .ok_or_else(|| FireError::InvalidArgument("empty volume path".into()))?;
    let header = VolumeHeader {
        version: 1,
        shape: v.image.shape().to_vec(),
        spacing_mm: v.spacing_mm.clone(),
        dtype: "f32".into(),
        labels: v
            .labels
            .keys()
            .map(|name| LabelEntry {
                name: name.clone(),
                file: format!("{stem_name}.{name}.msk.u8"),
            })
            .collect(),
    };
    let mut payload = Vec::with_capacity(v.image.numel() * 4);
    for x in v.image.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(&stem.with_extension("vol.f32"), &payload)?;
    for (name, mask) in &v.labels {
        let bytes: Vec<u8> = mask.data().iter().map(|v| *v as u8).collect();
        let path = stem.with_extension(format!("{name}.msk.u8"));
        write_atomic(&path, &bytes)?;
    }
    let json = serde_json::to_vec_pretty(&header)
        .map_err(|e| FireError::format(stem.display().to_string(), e.to_string()))?;
    write_atomic(&stem.with_extension("vol.json"), &json)
}

/// Read a volume written by [`save_volume`]; the image must be
/// single-channel.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let stem = strip_vol_suffix(path);
    let json_path = stem.with_extension("vol.json");
    let text = std::fs::read_to_string(&json_path)
        .map_err(|e| FireError::io(json_path.display().to_string(), e))?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| FireError::format(json_path.display().to_string(), e.to_string()))?;
    let (image, spacing) = load_tensor(&stem)?;
    if image.shape()[0] != 1 {
        return Err(FireError::format(
            json_path.display().to_string(),
            format!("expected a single-channel volume, got shape {:?}", image.shape()),
        ));
    }
    let spatial: Vec<usize> = image.shape()[1..].to_vec();
    let dir = stem.parent().unwrap_or(Path::new("."));
    let mut labels = BTreeMap::new();
    for entry in &header.labels {
        let mpath = dir.join(&entry.file);
        let bytes =
            std::fs::read(&mpath).map_err(|e| FireError::io(mpath.display().to_string(), e))?;
        let expect: usize = spatial.iter().product();
        if bytes.len() != expect {
            return Err(FireError::format(
                mpath.display().to_string(),
                format!("mask holds {} bytes, expected {expect}", bytes.len()),
            ));
        }
        if bytes.iter().any(|b| *b > 1) {
            return Err(FireError::format(
                mpath.display().to_string(),
                "mask bytes must be 0 or 1",
            ));
        }
        let data: Vec<f32> = bytes.iter().map(|b| *b as f32).collect();
        labels.insert(entry.name.clone(), Tensor::new(&spatial, data)?);
    }
    Volume::new(image, spacing, labels)
}

/// 8-bit binary PGM (P5) preview of a 2-D volume, intensities mapped
/// linearly from [-1, 1] to [0, 255].
pub fn write_pgm_preview(v: &Volume, path: &Path) -> Result<()> {
    let sp = v.spatial_shape();
    if sp.len() != 2 {
        return Err(FireError::InvalidArgument(
            "PGM preview requires a 2-D volume".into(),
        ));
    }
    let (h, w) = (sp[0], sp[1]);
    let mut out = Vec::with_capacity(h * w + 32);
    write!(&mut out, "P5\n{w} {h}\n255\n")
        .map_err(|e| FireError::io(path.display().to_string(), e))?;
    for x in v.image.data() {
        let g = ((*x as f64 + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
        out.push(g);
    }
    write_atomic(path, &out)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestPair {
    pub index: usize,
    pub seed: u64,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dim: usize,
    pub size: usize,
    pub seed: u64,
    pub style_a: ModalityStyle,
    pub style_b: ModalityStyle,
    pub pairs: Vec<ManifestPair>,
}

pub fn pair_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps per-pair streams independent of `count`
    let mut z = dataset_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `count` phantom pairs under `dir` and write `manifest.json`.
pub fn synth_dataset(
    dir: &Path,
    count: usize,
    dim: usize,
    size: usize,
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| FireError::io(dir.display().to_string(), e))?;
    let (style_a, style_b) = (ModalityStyle::Plain, ModalityStyle::InvertedGamma);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let ps = pair_seed(seed, i);
        let (a, b) = generate_phantom_pair(ps, dim, size, style_a, style_b)?;
        let a_stem = format!("pair{i:04}_a");
        let b_stem = format!("pair{i:04}_b");
        save_volume(&a, &dir.join(&a_stem))?;
        save_volume(&b, &dir.join(&b_stem))?;
        pairs.push(ManifestPair {
            index: i,
            seed: ps,
            a: a_stem,
            b: b_stem,
        });
    }
    let manifest = Manifest {
        version: 1,
        dim,
        size,
        seed,
        style_a,
        style_b,
        pairs,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| FireError::format(dir.display().to_string(), e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// Load every pair listed in a dataset manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Volume, Volume)>> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| FireError::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| FireError::format(mpath.display().to_string(), e.to_string()))?;
    if manifest.version != 1 {
        return Err(FireError::format(
            mpath.display().to_string(),
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    manifest
        .pairs
        .iter()
        .map(|p| Ok((load_volume(&dir.join(&p.a))?, load_volume(&dir.join(&p.b))?)))
        .collect()
}
