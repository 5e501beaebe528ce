//! Volume container, synthetic hemorrhage generator and augmentations.
//!
//! A volume lives in its own directory:
//!
//! ```text
//! <dir>/meta.json   {"patient_id", "shape": [S,H,W], "image_dtype": "f32le",
//!                    "mask_dtype": "u8", "slice_thickness_mm",
//!                    "pixel_spacing_mm": [height, width]}
//! <dir>/image.raw   S*H*W little-endian f32, row-major
//! <dir>/mask.raw    S*H*W bytes, each 0 or 1
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{blood_volume, ContrastViewSet, VoxelGeometry};

/// A CT-like image stack with its binary annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegVolume {
    pub patient_id: String,
    /// (S, H, W), intensities in [0, 1].
    pub image: Array3<f32>,
    /// (S, H, W), values in {0, 1}.
    pub mask: Array3<u8>,
    pub geom: VoxelGeometry,
}

impl SegVolume {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(Error::Data(format!(
                "{}: image {:?} and mask {:?} differ",
                self.patient_id,
                self.image.dim(),
                self.mask.dim()
            )));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("{}: mask is not binary", self.patient_id)));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{}: image has non-finite values",
                self.patient_id
            )));
        }
        self.geom.validate()
    }

    pub fn slices(&self) -> usize {
        self.image.dim().0
    }

    /// Annotated blood volume in mL.
    pub fn annotated_ml(&self) -> Result<f64> {
        blood_volume(self.mask.view(), &self.geom)
    }

    pub fn slice_image(&self, s: usize) -> Array2<f64> {
        self.image.index_axis(Axis(0), s).mapv(f64::from)
    }

    pub fn slice_mask(&self, s: usize) -> Array2<u8> {
        self.mask.index_axis(Axis(0), s).to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VolumeMeta {
    patient_id: String,
    shape: [usize; 3],
    image_dtype: String,
    mask_dtype: String,
    slice_thickness_mm: f64,
    pixel_spacing_mm: [f64; 2],
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_segvol(vol: &SegVolume, dir: &Path) -> Result<()> {
    vol.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (s, h, w) = vol.image.dim();
    let meta = VolumeMeta {
        patient_id: vol.patient_id.clone(),
        shape: [s, h, w],
        image_dtype: "f32le".into(),
        mask_dtype: "u8".into(),
        slice_thickness_mm: vol.geom.slice_thickness_mm,
        pixel_spacing_mm: [vol.geom.pixel_height_mm, vol.geom.pixel_width_mm],
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let mut bytes = Vec::with_capacity(vol.image.len() * 4);
    for v in vol.image.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let image_path = dir.join("image.raw");
    fs::write(&image_path, bytes).map_err(|e| Error::io(&image_path, e))?;
    let mask_path = dir.join("mask.raw");
    let mask: Vec<u8> = vol.mask.iter().copied().collect();
    fs::write(&mask_path, mask).map_err(|e| Error::io(&mask_path, e))
}

pub fn read_segvol(dir: &Path) -> Result<SegVolume> {
    let meta: VolumeMeta = read_json(&dir.join("meta.json"))?;
    if meta.image_dtype != "f32le" || meta.mask_dtype != "u8" {
        return Err(Error::Data(format!(
            "{}: unsupported dtypes {}/{}",
            dir.display(),
            meta.image_dtype,
            meta.mask_dtype
        )));
    }
    let [s, h, w] = meta.shape;
    let n = s * h * w;
    let image_path = dir.join("image.raw");
    let raw = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
    if raw.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            image_path.display(),
            n * 4,
            meta.shape,
            raw.len()
        )));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask_path = dir.join("mask.raw");
    let mask = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    if mask.len() != n {
        return Err(Error::Data(format!(
            "{}: expected {n} bytes for shape {:?}, found {}",
            mask_path.display(),
            meta.shape,
            mask.len()
        )));
    }
    if let Some(bad) = mask.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!(
            "{}: mask byte {bad} is not binary",
            mask_path.display()
        )));
    }
    let vol = SegVolume {
        patient_id: meta.patient_id,
        image: Array3::from_shape_vec((s, h, w), values).expect("length checked"),
        mask: Array3::from_shape_vec((s, h, w), mask).expect("length checked"),
        geom: VoxelGeometry {
            slice_thickness_mm: meta.slice_thickness_mm,
            pixel_height_mm: meta.pixel_spacing_mm[0],
            pixel_width_mm: meta.pixel_spacing_mm[1],
        },
    };
    vol.validate()?;
    Ok(vol)
}

/// `index.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub patients: Vec<String>,
}

/// Writes every volume to `<dir>/<patient_id>/` plus `<dir>/index.json`.
pub fn write_dataset(vols: &[SegVolume], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in vols {
        write_segvol(v, &dir.join(&v.patient_id))?;
    }
    let index = DatasetIndex {
        patients: vols.iter().map(|v| v.patient_id.clone()).collect(),
    };
    write_json(&dir.join("index.json"), &index)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SegVolume>> {
    let index: DatasetIndex = read_json(&dir.join("index.json"))?;
    index
        .patients
        .iter()
        .map(|id| read_segvol(&dir.join(id)))
        .collect()
}

/// Parameters of the synthetic hemorrhage generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub patient_count: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of blob clusters per slice.
    pub blob_count: [usize; 2],
    pub blob_radius_px: [f64; 2],
    /// Each patient's annotated volume is drawn uniformly from this range.
    pub target_volume_ml: [f64; 2],
    pub slice_thickness_mm: f64,
    /// [height, width] of a pixel.
    pub pixel_spacing_mm: [f64; 2],
    pub brain_intensity: f64,
    pub csf_intensity: f64,
    /// Intensity added on hemorrhage pixels.
    pub hemorrhage_contrast: f64,
    pub noise: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            patient_count: 6,
            slices: 8,
            height: 32,
            width: 32,
            blob_count: [1, 3],
            blob_radius_px: [1.5, 4.0],
            target_volume_ml: [5.0, 200.0],
            slice_thickness_mm: 5.0,
            pixel_spacing_mm: [6.0, 6.0],
            brain_intensity: 0.45,
            csf_intensity: 0.2,
            hemorrhage_contrast: 0.3,
            noise: 0.02,
            seed: 0,
            id_prefix: "synth".into(),
        }
    }
}

/// Largest share of brain pixels the generator will mark as hemorrhage.
const MAX_FILL: f64 = 0.6;

impl SynthSpec {
    pub fn geometry(&self) -> Result<VoxelGeometry> {
        VoxelGeometry::new(
            self.slice_thickness_mm,
            self.pixel_spacing_mm[0],
            self.pixel_spacing_mm[1],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patient_count == 0 || self.slices == 0 {
            return bad("patient_count and slices must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.blob_count[0] == 0 {
            return bad("blob_count must be at least 1: hemorrhage-free volumes are not generated".into());
        }
        if self.blob_count[0] > self.blob_count[1] {
            return bad("blob_count range is inverted".into());
        }
        let [r0, r1] = self.blob_radius_px;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("invalid blob radius range {r0}..{r1}"));
        }
        let [v0, v1] = self.target_volume_ml;
        if !(v0 > 0.0 && v0 <= v1 && v1 <= 300.0) {
            return bad(format!("target volume range must lie in (0, 300] mL, got {v0}..{v1}"));
        }
        self.geometry()?;
        let intensities = [
            self.brain_intensity,
            self.csf_intensity,
            self.brain_intensity + self.hemorrhage_contrast,
        ];
        if intensities.iter().any(|v| !(0.0..=1.0).contains(v)) || self.noise.is_nan() || self.noise < 0.0 {
            return bad("intensities must lie in [0, 1] and noise must be nonnegative".into());
        }
        Ok(())
    }
}

fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

/// Generates one volume per patient. Each annotated volume equals the drawn
/// target up to one voxel.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SegVolume>> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.patient_count)
        .map(|p| {
            let target = rng.random_range(spec.target_volume_ml[0]..=spec.target_volume_ml[1]);
            let patient_seed: u64 = rng.random();
            generate_patient(
                spec,
                &geom,
                format!("{}{:03}", spec.id_prefix, p),
                target,
                patient_seed,
            )
        })
        .collect()
}

fn generate_patient(
    spec: &SynthSpec,
    geom: &VoxelGeometry,
    patient_id: String,
    target_ml: f64,
    seed: u64,
) -> Result<SegVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, h, w) = (spec.slices, spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mid = (s as f64 - 1.0) / 2.0;
    let mut brain = Array3::<bool>::from_elem((s, h, w), false);
    let mut csf = Array3::<bool>::from_elem((s, h, w), false);
    let mut priority = Array3::<f64>::zeros((s, h, w));
    let (cy, cx) = (hf / 2.0, wf / 2.0);
    let ry0 = 0.42 * hf * rng.random_range(0.95..1.05);
    let rx0 = 0.36 * wf * rng.random_range(0.95..1.05);
    for z in 0..s {
        let taper = if mid > 0.0 {
            1.0 - 0.3 * ((z as f64 - mid).abs() / mid)
        } else {
            1.0
        };
        let (ry, rx) = (ry0 * taper, rx0 * taper);
        let vent_dx = 0.12 * wf;
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                brain[[z, y, x]] = in_ellipse(yf, xf, cy, cx, ry, rx);
                csf[[z, y, x]] = in_ellipse(yf, xf, cy - 0.05 * hf, cx - vent_dx, 0.14 * hf, 0.05 * wf)
                    || in_ellipse(yf, xf, cy - 0.05 * hf, cx + vent_dx, 0.14 * hf, 0.05 * wf);
            }
        }
        let blobs = rng.random_range(spec.blob_count[0]..=spec.blob_count[1]);
        for _ in 0..blobs {
            let (by, bx) = loop {
                let by = rng.random_range(cy - ry..cy + ry);
                let bx = rng.random_range(cx - rx..cx + rx);
                if in_ellipse(by, bx, cy, cx, ry * 0.85, rx * 0.85) {
                    break (by, bx);
                }
            };
            let rby = rng.random_range(spec.blob_radius_px[0]..=spec.blob_radius_px[1]);
            let rbx = rng.random_range(spec.blob_radius_px[0]..=spec.blob_radius_px[1]);
            let peak = rng.random_range(0.8..1.0);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - by) / rby;
                    let dx = (x as f64 + 0.5 - bx) / rbx;
                    let v = peak * (-(dy * dy + dx * dx) / 2.0).exp();
                    let p = &mut priority[[z, y, x]];
                    *p = p.max(v);
                }
            }
        }
    }
    let brain_pixels = brain.iter().filter(|&&b| b).count();
    let wanted = (target_ml * 1000.0 / geom.voxel_mm3()).round() as usize;
    if wanted == 0 || wanted as f64 > MAX_FILL * brain_pixels as f64 {
        return Err(Error::Config(format!(
            "target {target_ml:.1} mL needs {wanted} voxels but the brain region only \
             allows {} at this image size and spacing",
            (MAX_FILL * brain_pixels as f64) as usize
        )));
    }
    // Mark the `wanted` brain voxels with the highest blob priority.
    let mut order: Vec<(usize, f64)> = priority
        .iter()
        .zip(brain.iter())
        .enumerate()
        .filter(|(_, (_, &b))| b)
        .map(|(i, (&p, _))| (i, p))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mask = Array3::<u8>::zeros((s, h, w));
    {
        let flat = mask.as_slice_mut().expect("fresh array");
        for &(i, _) in order.iter().take(wanted) {
            flat[i] = 1;
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut image = Array3::<f32>::zeros((s, h, w));
    for ((z, y, x), v) in image.indexed_iter_mut() {
        if !brain[[z, y, x]] {
            continue;
        }
        let texture = 0.03 * ((y as f64 * 0.7 + phase).sin() * (x as f64 * 0.5 - phase).cos());
        let base = if mask[[z, y, x]] == 1 {
            spec.brain_intensity + spec.hemorrhage_contrast
        } else if csf[[z, y, x]] {
            spec.csf_intensity
        } else {
            spec.brain_intensity + texture
        };
        let jitter = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (base + jitter).clamp(0.0, 1.0) as f32;
    }
    let vol = SegVolume {
        patient_id,
        image,
        mask,
        geom: *geom,
    };
    vol.validate()?;
    Ok(vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Contrast,
    Hflip,
    Elastic,
}

impl FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "contrast" => Ok(AugmentKind::Contrast),
            "hflip" => Ok(AugmentKind::Hflip),
            "elastic" => Ok(AugmentKind::Elastic),
            _ => Err(Error::Config(format!("unknown augmentation `{s}`"))),
        }
    }
}

/// Augmentation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub gamma_range: [f64; 2],
    pub flip_probability: f64,
    /// Standard deviation (px) of the coarse displacement vectors.
    pub elastic_sigma_px: f64,
    /// Spacing (px) of the coarse displacement grid.
    pub elastic_grid_px: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            gamma_range: [0.7, 1.4],
            flip_probability: 0.5,
            elastic_sigma_px: 1.0,
            elastic_grid_px: 8,
        }
    }
}

/// Gamma remap `v ↦ v^γ` on [0, 1] intensities.
pub fn adjust_contrast(image: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    if gamma == 1.0 {
        return image.to_owned();
    }
    image.mapv(|v| v.clamp(0.0, 1.0).powf(gamma))
}

/// Mirror along the width axis.
pub fn hflip<T: Clone>(a: ArrayView2<T>) -> Array2<T> {
    a.slice(ndarray::s![.., ..;-1]).to_owned()
}

/// Smooth displacement field (dy, dx) interpolated from a coarse random grid.
pub fn displacement_field(
    h: usize,
    w: usize,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let g = params.elastic_grid_px.max(1);
    let (gh, gw) = (h.div_ceil(g) + 1, w.div_ceil(g) + 1);
    let normal = Normal::new(0.0, params.elastic_sigma_px.max(0.0)).expect("finite sigma");
    let coarse_y = Array2::from_shape_simple_fn((gh, gw), || normal.sample(rng));
    let coarse_x = Array2::from_shape_simple_fn((gh, gw), || normal.sample(rng));
    let up = |c: &Array2<f64>| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            bilinear(c.view(), y as f64 / g as f64, x as f64 / g as f64)
        })
    };
    (up(&coarse_y), up(&coarse_x))
}

/// Bilinear sample with edge clamping.
fn bilinear(a: ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = a.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
    let bottom = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps the image bilinearly and the mask by nearest neighbour with the
/// same displacement field.
pub fn elastic_deform(
    image: ArrayView2<f64>,
    mask: ArrayView2<u8>,
    field: &(Array2<f64>, Array2<f64>),
) -> (Array2<f64>, Array2<u8>) {
    let (h, w) = image.dim();
    let (dy, dx) = field;
    let warped = Array2::from_shape_fn((h, w), |(y, x)| {
        bilinear(image, y as f64 + dy[[y, x]], x as f64 + dx[[y, x]])
    });
    let warped_mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y as f64 + dy[[y, x]]).round().clamp(0.0, (h - 1) as f64) as usize;
        let sx = (x as f64 + dx[[y, x]]).round().clamp(0.0, (w - 1) as f64) as usize;
        mask[[sy, sx]]
    });
    (warped, warped_mask)
}

/// Applies the requested augmentations to one slice.
pub fn augment_slice(
    image: ArrayView2<f64>,
    mask: ArrayView2<u8>,
    kinds: &[AugmentKind],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<u8>) {
    let mut img = image.to_owned();
    let mut msk = mask.to_owned();
    if kinds.contains(&AugmentKind::Elastic) {
        let field = displacement_field(img.nrows(), img.ncols(), params, rng);
        (img, msk) = elastic_deform(img.view(), msk.view(), &field);
    }
    if kinds.contains(&AugmentKind::Hflip) && rng.random_bool(params.flip_probability) {
        img = hflip(img.view());
        msk = hflip(msk.view());
    }
    if kinds.contains(&AugmentKind::Contrast) {
        let gamma = rng.random_range(params.gamma_range[0]..=params.gamma_range[1]);
        img = adjust_contrast(img.view(), gamma);
    }
    (img, msk)
}

/// Augments a whole volume. Contrast and flip are drawn once per volume (one
/// scan, one remap); the elastic field is drawn per slice. Deterministic in `seed`.
pub fn augment(vol: &SegVolume, kinds: &[AugmentKind], seed: u64) -> Result<SegVolume> {
    augment_with(vol, kinds, &AugmentParams::default(), seed)
}

pub fn augment_with(
    vol: &SegVolume,
    kinds: &[AugmentKind],
    params: &AugmentParams,
    seed: u64,
) -> Result<SegVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = kinds.contains(&AugmentKind::Hflip) && rng.random_bool(params.flip_probability);
    let gamma = kinds
        .contains(&AugmentKind::Contrast)
        .then(|| rng.random_range(params.gamma_range[0]..=params.gamma_range[1]));
    let mut out = vol.clone();
    for s in 0..vol.slices() {
        let mut img = vol.slice_image(s);
        let mut msk = vol.slice_mask(s);
        if kinds.contains(&AugmentKind::Elastic) {
            let field = displacement_field(img.nrows(), img.ncols(), params, &mut rng);
            (img, msk) = elastic_deform(img.view(), msk.view(), &field);
        }
        if flip {
            img = hflip(img.view());
            msk = hflip(msk.view());
        }
        if let Some(g) = gamma {
            img = adjust_contrast(img.view(), g);
        }
        out.image
            .index_axis_mut(Axis(0), s)
            .assign(&img.mapv(|v| v as f32));
        out.mask.index_axis_mut(Axis(0), s).assign(&msk);
    }
    Ok(out)
}

/// Parses augmentation names, rejecting unknown ones.
pub fn parse_augmentations<S: AsRef<str>>(names: &[S]) -> Result<Vec<AugmentKind>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Largest gamma offset used for contrast views.
pub const MAX_VIEW_DISTORTION: f64 = 0.3;

/// Builds `n_views` images: the original followed by gamma-perturbed copies
/// with strictly increasing distortion `|γ-1|` and weights `1/(1+|γ-1|)`.
pub fn make_views(image: ArrayView2<f64>, n_views: usize, seed: u64) -> Result<ContrastViewSet> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = n_views - 1;
    let mut views = vec![image.to_owned()];
    let mut distortions = vec![0.0];
    for i in 0..extra {
        // One distortion per disjoint sub-interval keeps them ordered.
        let u: f64 = rng.random_range(0.05..0.95);
        let d = MAX_VIEW_DISTORTION * (i as f64 + u) / extra as f64;
        let gamma = if rng.random_bool(0.5) { 1.0 + d } else { 1.0 - d };
        views.push(adjust_contrast(image, gamma));
        distortions.push(d);
    }
    let weights = distortions.iter().map(|&d| ContrastViewSet::weight_for(d)).collect();
    Ok(ContrastViewSet {
        views,
        weights,
        distortions,
    })
}
