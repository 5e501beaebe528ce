//! Low-rank factor containers for the three convolution factorizations and
//! the contractions that turn them into a full (c_out, c_in, k_h, k_w) update.
//!
//! Every factorization here is linear in each factor, so the backward passes
//! are plain contractions of the update gradient against the other factors.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayView4};

use crate::error::{Error, Result};

/// Layer-wise factors: `A` is (R, c_in, k_w) and `B` is (c_out, k_h, R).
///
/// The update is `ΔW[o,i,h,w] = Σ_r B[o,h,r] · A[r,i,w]`, i.e. an ordinary
/// rank-R product once the weight is viewed as a (c_out·k_h) × (c_in·k_w)
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraCFactors {
    pub a: Array3<f64>,
    pub b: Array3<f64>,
}

/// Channel-mixing factors: `A` is a bank of R kernels (R, c_in, k_h, k_w)
/// and `B` (c_out, R) mixes them per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoraFactors {
    pub a: Array4<f64>,
    pub b: Array2<f64>,
}

/// Rank-R CP factors, one (R, d) matrix per weight mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    /// Output-channel mode, (R, c_out).
    pub a1: Array2<f64>,
    /// Input-channel mode, (R, c_in).
    pub a2: Array2<f64>,
    /// Kernel-height mode, (R, k_h).
    pub a3: Array2<f64>,
    /// Kernel-width mode, (R, k_w).
    pub a4: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    LoraC(LoraCFactors),
    ConvLora(ConvLoraFactors),
    Cp(CpFactors),
}

impl LoraCFactors {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, rank: usize) -> Self {
        Self {
            a: Array3::zeros((rank, c_in, kw)),
            b: Array3::zeros((c_out, kh, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.dim().0
    }

    /// (c_out, c_in, k_h, k_w) of the update these factors produce.
    pub fn weight_dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (r, c_in, kw) = self.a.dim();
        let (c_out, kh, rb) = self.b.dim();
        if r != rb {
            return Err(Error::Shape(format!(
                "LoRA-C rank mismatch: A has {r}, B has {rb}"
            )));
        }
        Ok((c_out, c_in, kh, kw))
    }
}

impl ConvLoraFactors {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, rank: usize) -> Self {
        Self {
            a: Array4::zeros((rank, c_in, kh, kw)),
            b: Array2::zeros((c_out, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.dim().0
    }

    pub fn weight_dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (r, c_in, kh, kw) = self.a.dim();
        let (c_out, rb) = self.b.dim();
        if r != rb {
            return Err(Error::Shape(format!(
                "convLoRA rank mismatch: A has {r}, B has {rb}"
            )));
        }
        Ok((c_out, c_in, kh, kw))
    }
}

impl CpFactors {
    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, rank: usize) -> Self {
        Self {
            a1: Array2::zeros((rank, c_out)),
            a2: Array2::zeros((rank, c_in)),
            a3: Array2::zeros((rank, kh)),
            a4: Array2::zeros((rank, kw)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a1.nrows()
    }

    pub fn weight_dims(&self) -> Result<(usize, usize, usize, usize)> {
        let r = self.a1.nrows();
        if [&self.a2, &self.a3, &self.a4].iter().any(|m| m.nrows() != r) {
            return Err(Error::Shape(format!(
                "CP rank mismatch: factor row counts {}, {}, {}, {}",
                r,
                self.a2.nrows(),
                self.a3.nrows(),
                self.a4.nrows()
            )));
        }
        Ok((
            self.a1.ncols(),
            self.a2.ncols(),
            self.a3.ncols(),
            self.a4.ncols(),
        ))
    }

    /// Row-wise Khatri-Rao products: `P[r, o*c_in + i] = a1[r,o]·a2[r,i]`
    /// and `T[r, h*k_w + w] = a3[r,h]·a4[r,w]`.
    fn mode_products(&self) -> (Array2<f64>, Array2<f64>) {
        let r = self.rank();
        let (c_out, c_in, kh, kw) = (
            self.a1.ncols(),
            self.a2.ncols(),
            self.a3.ncols(),
            self.a4.ncols(),
        );
        let channels = Array2::from_shape_fn((r, c_out * c_in), |(q, j)| {
            self.a1[[q, j / c_in]] * self.a2[[q, j % c_in]]
        });
        let spatial = Array2::from_shape_fn((r, kh * kw), |(q, j)| {
            self.a3[[q, j / kw]] * self.a4[[q, j % kw]]
        });
        (channels, spatial)
    }
}

/// `ΔW[o,i,h,w] = Σ_r B[o,h,r] · A[r,i,w]` (unscaled).
pub fn delta_lorac(f: &LoraCFactors) -> Result<Array4<f64>> {
    let (c_out, c_in, kh, kw) = f.weight_dims()?;
    let r = f.rank();
    let b = f
        .b
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out * kh, r))
        .expect("contiguous");
    let a = f
        .a
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((r, c_in * kw))
        .expect("contiguous");
    let mut m = Array2::<f64>::zeros((c_out * kh, c_in * kw));
    general_mat_mul(1.0, &b, &a, 0.0, &mut m);
    let m = m
        .into_shape_with_order((c_out, kh, c_in, kw))
        .expect("reshape")
        .permuted_axes([0, 2, 1, 3]);
    Ok(m.as_standard_layout().into_owned())
}

/// `ΔW[o,i,h,w] = Σ_r B[o,r] · A[r,i,h,w]` (unscaled).
pub fn delta_convlora(f: &ConvLoraFactors) -> Result<Array4<f64>> {
    let (c_out, c_in, kh, kw) = f.weight_dims()?;
    let r = f.rank();
    let a = f
        .a
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((r, c_in * kh * kw))
        .expect("contiguous");
    let mut m = Array2::<f64>::zeros((c_out, c_in * kh * kw));
    general_mat_mul(1.0, &f.b, &a, 0.0, &mut m);
    Ok(m
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("reshape"))
}

/// `ΔW[o,i,h,w] = Σ_r a1[r,o]·a2[r,i]·a3[r,h]·a4[r,w]` (unscaled).
pub fn delta_cp(f: &CpFactors) -> Result<Array4<f64>> {
    let (c_out, c_in, kh, kw) = f.weight_dims()?;
    let (channels, spatial) = f.mode_products();
    let mut m = Array2::<f64>::zeros((c_out * c_in, kh * kw));
    general_mat_mul(1.0, &channels.t(), &spatial, 0.0, &mut m);
    Ok(m
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("reshape"))
}

impl Factors {
    pub fn rank(&self) -> usize {
        match self {
            Factors::LoraC(f) => f.rank(),
            Factors::ConvLora(f) => f.rank(),
            Factors::Cp(f) => f.rank(),
        }
    }

    pub fn weight_dims(&self) -> Result<(usize, usize, usize, usize)> {
        match self {
            Factors::LoraC(f) => f.weight_dims(),
            Factors::ConvLora(f) => f.weight_dims(),
            Factors::Cp(f) => f.weight_dims(),
        }
    }

    /// Unscaled weight update.
    pub fn delta(&self) -> Result<Array4<f64>> {
        match self {
            Factors::LoraC(f) => delta_lorac(f),
            Factors::ConvLora(f) => delta_convlora(f),
            Factors::Cp(f) => delta_cp(f),
        }
    }

    /// Same-shaped factors filled with zeros (used as gradient buffers).
    pub fn zeros_like(&self) -> Factors {
        match self {
            Factors::LoraC(f) => Factors::LoraC(LoraCFactors {
                a: Array3::zeros(f.a.raw_dim()),
                b: Array3::zeros(f.b.raw_dim()),
            }),
            Factors::ConvLora(f) => Factors::ConvLora(ConvLoraFactors {
                a: Array4::zeros(f.a.raw_dim()),
                b: Array2::zeros(f.b.raw_dim()),
            }),
            Factors::Cp(f) => Factors::Cp(CpFactors {
                a1: Array2::zeros(f.a1.raw_dim()),
                a2: Array2::zeros(f.a2.raw_dim()),
                a3: Array2::zeros(f.a3.raw_dim()),
                a4: Array2::zeros(f.a4.raw_dim()),
            }),
        }
    }

    /// Pulls a gradient on the unscaled update back onto every factor.
    pub fn backward(&self, grad_delta: ArrayView4<f64>) -> Result<Factors> {
        let dims = self.weight_dims()?;
        if grad_delta.dim() != dims {
            return Err(Error::Shape(format!(
                "update gradient {:?} does not match factor dims {:?}",
                grad_delta.dim(),
                dims
            )));
        }
        let (c_out, c_in, kh, kw) = dims;
        let g = grad_delta.as_standard_layout().into_owned();
        Ok(match self {
            Factors::LoraC(f) => {
                let r = f.rank();
                let gm = g
                    .permuted_axes([0, 2, 1, 3])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c_out * kh, c_in * kw))
                    .expect("reshape");
                let b = f
                    .b
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c_out * kh, r))
                    .expect("reshape");
                let a = f
                    .a
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((r, c_in * kw))
                    .expect("reshape");
                let mut db = Array2::<f64>::zeros((c_out * kh, r));
                general_mat_mul(1.0, &gm, &a.t(), 0.0, &mut db);
                let mut da = Array2::<f64>::zeros((r, c_in * kw));
                general_mat_mul(1.0, &b.t(), &gm, 0.0, &mut da);
                Factors::LoraC(LoraCFactors {
                    a: da.into_shape_with_order((r, c_in, kw)).expect("reshape"),
                    b: db.into_shape_with_order((c_out, kh, r)).expect("reshape"),
                })
            }
            Factors::ConvLora(f) => {
                let r = f.rank();
                let gm = g
                    .into_shape_with_order((c_out, c_in * kh * kw))
                    .expect("reshape");
                let a = f
                    .a
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((r, c_in * kh * kw))
                    .expect("reshape");
                let mut db = Array2::<f64>::zeros((c_out, r));
                general_mat_mul(1.0, &gm, &a.t(), 0.0, &mut db);
                let mut da = Array2::<f64>::zeros((r, c_in * kh * kw));
                general_mat_mul(1.0, &f.b.t(), &gm, 0.0, &mut da);
                Factors::ConvLora(ConvLoraFactors {
                    a: da
                        .into_shape_with_order((r, c_in, kh, kw))
                        .expect("reshape"),
                    b: db,
                })
            }
            Factors::Cp(f) => {
                let r = f.rank();
                let gm = g
                    .into_shape_with_order((c_out * c_in, kh * kw))
                    .expect("reshape");
                let (channels, spatial) = f.mode_products();
                // Contract against the spatial modes, then the channel modes.
                let mut by_channel = Array2::<f64>::zeros((r, c_out * c_in));
                general_mat_mul(1.0, &spatial, &gm.t(), 0.0, &mut by_channel);
                let mut by_spatial = Array2::<f64>::zeros((r, kh * kw));
                general_mat_mul(1.0, &channels, &gm, 0.0, &mut by_spatial);
                let mut grads = CpFactors::zeros(c_out, c_in, kh, kw, r);
                for q in 0..r {
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let v = by_channel[[q, o * c_in + i]];
                            grads.a1[[q, o]] += v * f.a2[[q, i]];
                            grads.a2[[q, i]] += v * f.a1[[q, o]];
                        }
                    }
                    for h in 0..kh {
                        for w in 0..kw {
                            let v = by_spatial[[q, h * kw + w]];
                            grads.a3[[q, h]] += v * f.a4[[q, w]];
                            grads.a4[[q, w]] += v * f.a3[[q, h]];
                        }
                    }
                }
                Factors::Cp(grads)
            }
        })
    }

    /// Named views over every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn entry<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a ndarray::Array<f64, D>,
        ) -> (&'static str, Vec<usize>, &'a [f64]) {
            (
                name,
                a.shape().to_vec(),
                a.as_slice().expect("factors are kept in standard layout"),
            )
        }
        match self {
            Factors::LoraC(f) => vec![entry("lora_a", &f.a), entry("lora_b", &f.b)],
            Factors::ConvLora(f) => vec![entry("lora_a", &f.a), entry("lora_b", &f.b)],
            Factors::Cp(f) => vec![
                entry("cp_a1", &f.a1),
                entry("cp_a2", &f.a2),
                entry("cp_a3", &f.a3),
                entry("cp_a4", &f.a4),
            ],
        }
    }

    /// Mutable counterpart of [`Factors::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn entry<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
        ) -> (&'static str, &'a mut [f64]) {
            (
                name,
                a.as_slice_mut()
                    .expect("factors are kept in standard layout"),
            )
        }
        match self {
            Factors::LoraC(f) => vec![entry("lora_a", &mut f.a), entry("lora_b", &mut f.b)],
            Factors::ConvLora(f) => vec![entry("lora_a", &mut f.a), entry("lora_b", &mut f.b)],
            Factors::Cp(f) => vec![
                entry("cp_a1", &mut f.a1),
                entry("cp_a2", &mut f.a2),
                entry("cp_a3", &mut f.a3),
                entry("cp_a4", &mut f.a4),
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}
