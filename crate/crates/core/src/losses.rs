//! Segmentation losses, Dice and blood-volume measurements.

use ndarray::{Array, Array2, Array4, ArrayView, ArrayView2, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::backbones::Network;
use crate::error::{Error, Result};

/// Channel index of the hemorrhage class in a probability map.
pub const FOREGROUND: usize = 1;

fn check_pair<D: Dimension>(
    annotation: &ArrayView<f64, D>,
    output: &ArrayView<f64, D>,
) -> Result<()> {
    if annotation.shape() != output.shape() {
        return Err(Error::Shape(format!(
            "annotation {:?} vs output {:?}",
            annotation.shape(),
            output.shape()
        )));
    }
    if annotation.iter().chain(output.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("loss inputs must be finite".into()));
    }
    Ok(())
}

/// One pixel's contribution `L·O/(L+O)`, with `0/0 := 0`.
#[inline]
fn pixel_term(l: f64, o: f64) -> f64 {
    let den = l + o;
    if den == 0.0 {
        0.0
    } else {
        l * o / den
    }
}

/// `-Σ_x L(x)·O(x) / (L(x) + O(x))` over all pixels.
pub fn image_loss<D: Dimension>(
    annotation: ArrayView<f64, D>,
    output: ArrayView<f64, D>,
) -> Result<f64> {
    check_pair(&annotation, &output)?;
    Ok(-Zip::from(&annotation)
        .and(&output)
        .fold(0.0, |acc, &l, &o| acc + pixel_term(l, o)))
}

/// Derivative of [`image_loss`] with respect to the output: `-L²/(L+O)²`.
pub fn image_loss_grad<D: Dimension>(
    annotation: ArrayView<f64, D>,
    output: ArrayView<f64, D>,
) -> Result<Array<f64, D>> {
    check_pair(&annotation, &output)?;
    let mut g = Array::zeros(output.raw_dim());
    Zip::from(&mut g)
        .and(&annotation)
        .and(&output)
        .for_each(|g, &l, &o| {
            let den = l + o;
            // Squaring the ratio avoids 0/0 once (L+O)² underflows.
            *g = if den == 0.0 { 0.0 } else { -(l / den).powi(2) };
        });
    Ok(g)
}

/// Which softmax channels the training objective scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossClasses {
    /// Only the hemorrhage channel against the annotation.
    Foreground,
    /// Every channel against its one-hot target (background target is `1-L`).
    AllClasses,
    /// Like `AllClasses`, but each channel's term is rescaled by
    /// `sqrt(|Ω| / (2·|target pixels|))`, which keeps small lesions from
    /// being drowned out by the background without over-rewarding them.
    #[default]
    Balanced,
}

/// Weighted image loss of a batch of probability maps and its gradient.
///
/// `probs` is (N, C, H, W); `masks` holds one (H, W) annotation per batch
/// entry and `weights` one view weight per entry.
pub fn batch_loss_and_grad(
    probs: &Array4<f64>,
    masks: &[ArrayView2<f64>],
    weights: &[f64],
    classes: LossClasses,
) -> Result<(f64, Array4<f64>)> {
    let (n, c, h, w) = probs.dim();
    if masks.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} maps but {} masks and {} weights",
            masks.len(),
            weights.len()
        )));
    }
    if c < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    let mut grad = Array4::<f64>::zeros((n, c, h, w));
    let mut total = 0.0;
    for b in 0..n {
        let l = masks[b];
        let bg_target = l.mapv(|v| 1.0 - v);
        let terms: &[(usize, ArrayView2<f64>)] = match classes {
            LossClasses::Foreground => &[(FOREGROUND, l)],
            _ => &[(FOREGROUND, l), (0, bg_target.view())],
        };
        for &(k, target) in terms {
            let mut wgt = weights[b];
            if classes == LossClasses::Balanced {
                wgt *= ((h * w) as f64 / (2.0 * target.sum().max(1.0))).sqrt();
            }
            let p = probs.slice(ndarray::s![b, k, .., ..]);
            total += wgt * image_loss(target, p)?;
            grad.slice_mut(ndarray::s![b, k, .., ..])
                .assign(&(image_loss_grad(target, p)? * wgt));
        }
    }
    Ok((total, grad))
}

/// A reference image with contrast-perturbed copies and their loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastViewSet {
    pub views: Vec<Array2<f64>>,
    pub weights: Vec<f64>,
    /// Distortion magnitude of each view (0 for the reference).
    pub distortions: Vec<f64>,
}

impl ContrastViewSet {
    /// View weight for a given distortion magnitude: `1/(1+d)`.
    pub fn weight_for(distortion: f64) -> f64 {
        1.0 / (1.0 + distortion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("view set is empty".into()));
        }
        if self.views.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} views but {} weights",
                self.views.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("view weights must be nonnegative".into()));
        }
        if self.weights[0] != 1.0 {
            return Err(Error::Config("reference view weight must be 1".into()));
        }
        Ok(())
    }
}

/// `Σ_i w_i · image_loss(L, O_i)` over precomputed foreground maps.
pub fn mixed_loss_from_outputs(
    weights: &[f64],
    annotation: ArrayView2<f64>,
    outputs: &[ArrayView2<f64>],
) -> Result<f64> {
    if weights.len() != outputs.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} outputs",
            weights.len(),
            outputs.len()
        )));
    }
    weights
        .iter()
        .zip(outputs)
        .try_fold(0.0, |acc, (w, o)| Ok(acc + w * image_loss(annotation, *o)?))
}

/// Mixed loss of a network over a view set: every view is run through the
/// network and its hemorrhage channel scored against the shared annotation.
pub fn mixed_loss(views: &ContrastViewSet, annotation: ArrayView2<f64>, net: &Network) -> Result<f64> {
    views.validate()?;
    let (h, w) = annotation.dim();
    let mut batch = Array4::<f64>::zeros((views.views.len(), 1, h, w));
    for (i, v) in views.views.iter().enumerate() {
        if v.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "view {i} is {:?}, annotation is {:?}",
                v.dim(),
                (h, w)
            )));
        }
        batch.slice_mut(ndarray::s![i, 0, .., ..]).assign(v);
    }
    let probs = net.forward(&batch)?;
    let fg = probs.index_axis(Axis(1), FOREGROUND);
    let outputs: Vec<_> = fg.outer_iter().collect();
    mixed_loss_from_outputs(&views.weights, annotation, &outputs)
}

/// `2TP / (2TP + FN + FP)`; two empty masks score 1.
pub fn dice<D: Dimension>(annotation: ArrayView<u8, D>, prediction: ArrayView<u8, D>) -> Result<f64> {
    if annotation.shape() != prediction.shape() {
        return Err(Error::Shape(format!(
            "dice on {:?} vs {:?}",
            annotation.shape(),
            prediction.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&a, &p) in annotation.iter().zip(prediction.iter()) {
        match (a != 0, p != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 {
        1.0
    } else {
        (2 * tp) as f64 / den as f64
    })
}

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGeometry {
    pub slice_thickness_mm: f64,
    pub pixel_height_mm: f64,
    pub pixel_width_mm: f64,
}

impl VoxelGeometry {
    pub fn new(slice_thickness_mm: f64, pixel_height_mm: f64, pixel_width_mm: f64) -> Result<Self> {
        let g = Self {
            slice_thickness_mm,
            pixel_height_mm,
            pixel_width_mm,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.slice_thickness_mm,
            self.pixel_height_mm,
            self.pixel_width_mm,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Data(format!(
                "voxel geometry must be strictly positive, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn voxel_mm3(&self) -> f64 {
        self.slice_thickness_mm * self.pixel_height_mm * self.pixel_width_mm
    }
}

/// Volume in millilitres of the nonzero voxels of a binary mask.
pub fn blood_volume<D: Dimension>(mask: ArrayView<u8, D>, geom: &VoxelGeometry) -> Result<f64> {
    geom.validate()?;
    let mut n = 0u64;
    for &v in mask.iter() {
        match v {
            0 => {}
            1 => n += 1,
            other => {
                return Err(Error::Data(format!("mask value {other} is not binary")));
            }
        }
    }
    Ok(n as f64 * geom.voxel_mm3() / 1000.0)
}
