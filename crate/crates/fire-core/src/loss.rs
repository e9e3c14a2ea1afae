//! The training objective: synthesis, registration and regularization
//! terms, combined with unit weights everywhere except the bending-energy
//! smoothness term, which is scaled by `lambda = 2^(2n) / (10 N)`.

use crate::error::Result;
use crate::model::ForwardBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::warp::{bending_energy, sample, Border};

/// Scalar snapshot of one loss evaluation, in trace-column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub syn_acc: f64,
    pub syn_fea: f64,
    pub syn_cyc: f64,
    pub syn_align: f64,
    pub reg_acc: f64,
    pub reg_ic: f64,
    pub r_syn: f64,
    pub r_reg: f64,
    pub r_smooth: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "iter,total,syn_acc,syn_fea,syn_cyc,syn_align,reg_acc,reg_ic,r_syn,r_reg,r_smooth,lambda";

    pub fn csv_row(&self, iter: u64) -> String {
        format!(
            "{iter},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.total,
            self.syn_acc,
            self.syn_fea,
            self.syn_cyc,
            self.syn_align,
            self.reg_acc,
            self.reg_ic,
            self.r_syn,
            self.r_reg,
            self.r_smooth,
            self.lambda
        )
    }

    /// Name and value of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("syn_acc", self.syn_acc),
            ("syn_fea", self.syn_fea),
            ("syn_cyc", self.syn_cyc),
            ("syn_align", self.syn_align),
            ("reg_acc", self.reg_acc),
            ("reg_ic", self.reg_ic),
            ("r_syn", self.r_syn),
            ("r_reg", self.r_reg),
            ("r_smooth", self.r_smooth),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Smoothness weight for n-D images with N points.
pub fn lambda_for(dim: usize, n_points: usize) -> f64 {
    (1u64 << (2 * dim)) as f64 / (10.0 * n_points as f64)
}

/// Synthesis terms: accuracy, feature, cycle and alignment sums of RMS.
pub fn synthesis_loss<S: Scalar>(
    b: &ForwardBundle<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let acc = b
        .synth_warped_b
        .rms(&b.input_b)?
        .add(&b.synth_warped_a.rms(&b.input_a)?)?;
    let fea = b
        .g_a
        .rms(&b.warped_feat_ba)?
        .add(&b.g_b.rms(&b.warped_feat_ab)?)?;
    let cyc = b.cycle_a.rms(&b.input_a)?.add(&b.cycle_b.rms(&b.input_b)?)?;
    let align = b
        .g_a
        .rms(&b.g_of_synth_b)?
        .add(&b.g_b.rms(&b.g_of_synth_a)?)?;
    Ok((acc, fea, cyc, align))
}

/// Registration terms: accuracy and the inverse-consistency round trip
/// (two sequential image-resolution warps per direction).
pub fn registration_loss<S: Scalar>(b: &ForwardBundle<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let acc = b
        .synth_warped_b
        .rms(&b.input_b)?
        .add(&b.synth_warped_a.rms(&b.input_a)?)?;
    let round_a = sample(&b.warped_input_a, &b.grid_ba_img, Border::Clamp)?;
    let round_b = sample(&b.warped_input_b, &b.grid_ab_img, Border::Clamp)?;
    let ic = b.input_a.rms(&round_a)?.add(&b.input_b.rms(&round_b)?)?;
    Ok((acc, ic))
}

/// Regularization terms: affine-only synthesis and registration
/// reconstructions plus the bending-energy smoothness penalty.
///
/// The synthesis variant decodes affinely warped *features*; the
/// registration variant re-encodes affinely warped *images* — deliberately
/// distinct reconstruction paths.
pub fn regularization<S: Scalar>(
    b: &ForwardBundle<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let r_syn = b
        .input_b
        .rms(&b.affine_feat_decode_b)?
        .add(&b.input_a.rms(&b.affine_feat_decode_a)?)?;
    let r_reg = b
        .input_b
        .rms(&b.affine_image_decode_b)?
        .add(&b.input_a.rms(&b.affine_image_decode_a)?)?;
    let r_smooth = bending_energy(&b.u_ab)?.add(&bending_energy(&b.u_ba)?)?;
    Ok((r_syn, r_reg, r_smooth))
}

/// Full objective: all components with unit weights, except the smoothness
/// term scaled by [`lambda_for`]. Returns the differentiable scalar total
/// and the plain-number breakdown.
pub fn total_loss<S: Scalar>(b: &ForwardBundle<S>) -> Result<(Tensor<S>, LossBreakdown)> {
    let dim = b.input_a.shape().len() - 1;
    let n_points: usize = b.input_a.shape()[1..].iter().product();
    let lambda = lambda_for(dim, n_points);

    let (syn_acc, syn_fea, syn_cyc, syn_align) = synthesis_loss(b)?;
    let (reg_acc, reg_ic) = registration_loss(b)?;
    let (r_syn, r_reg, r_smooth) = regularization(b)?;

    let total = syn_acc
        .add(&syn_fea)?
        .add(&syn_cyc)?
        .add(&syn_align)?
        .add(&reg_acc)?
        .add(&reg_ic)?
        .add(&r_syn)?
        .add(&r_reg)?
        .add(&r_smooth.scale(lambda))?;

    let breakdown = LossBreakdown {
        total: total.item().to_f64(),
        syn_acc: syn_acc.item().to_f64(),
        syn_fea: syn_fea.item().to_f64(),
        syn_cyc: syn_cyc.item().to_f64(),
        syn_align: syn_align.item().to_f64(),
        reg_acc: reg_acc.item().to_f64(),
        reg_ic: reg_ic.item().to_f64(),
        r_syn: r_syn.item().to_f64(),
        r_reg: r_reg.item().to_f64(),
        r_smooth: r_smooth.item().to_f64(),
        lambda,
    };
    Ok((total, breakdown))
}
