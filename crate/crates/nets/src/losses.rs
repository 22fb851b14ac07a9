//! Training objectives, built on a graph so they differentiate with the
//! network. The evaluation order is fixed; see [`loss_frm`].

use intrinsic_autodiff::{Float, Graph, Var};

use crate::config::LossWeights;
use crate::Result;

/// `γ_R·mse(R̂, R) + γ_S·mse(Ŝ, S)`
pub fn loss_cl<T: Float>(g: &mut Graph<T>, r_hat: Var, r: Var, s_hat: Var, s: Var, w: &LossWeights) -> Result<Var> {
    let mr = g.mse_loss(r_hat, r)?;
    let ms = g.mse_loss(s_hat, s)?;
    let a = g.scale(mr, T::of(w.gamma_r));
    let b = g.scale(ms, T::of(w.gamma_s));
    Ok(g.add(a, b)?)
}

/// `γ_IMF·mse(R̂ ⊙ Ŝ, I)`
pub fn loss_imf<T: Float>(g: &mut Graph<T>, r_hat: Var, s_hat: Var, image: Var, gamma_imf: f64) -> Result<Var> {
    let rs = g.mul_elem(r_hat, s_hat)?;
    let m = g.mse_loss(rs, image)?;
    Ok(g.scale(m, T::of(gamma_imf)))
}

/// `loss_cl + loss_imf`
#[allow(clippy::too_many_arguments)]
pub fn loss_fl<T: Float>(
    g: &mut Graph<T>,
    r_hat: Var,
    r: Var,
    s_hat: Var,
    s: Var,
    image: Var,
    w: &LossWeights,
) -> Result<Var> {
    let cl = loss_cl(g, r_hat, r, s_hat, s, w)?;
    let imf = loss_imf(g, r_hat, s_hat, image, w.gamma_imf)?;
    Ok(g.add(cl, imf)?)
}

/// Prediction/target pairs of the full reflection model.
#[derive(Debug, Clone, Copy)]
pub struct FullModelTerms {
    pub r_hat: Var,
    pub r: Var,
    pub s_hat: Var,
    pub s: Var,
    pub h_hat: Var,
    pub h: Var,
    /// Per-pixel (`N×3×H×W`) or global (`N×3×1×1`) illuminant.
    pub e_hat: Var,
    pub e: Var,
    pub image: Var,
}

/// `((loss_cl + γ_H·mse_H) + γ_E·mse_E) + γ_IMF·mse(R̂⊙Ŝ⊙Ê + Ĥ⊙Ê, I)`.
///
/// With `Ĥ ≡ 0`, `Ê ≡ 1` and `γ_H = γ_E = 0` every extra operation is an
/// exact identity, so the result equals [`loss_fl`] bit for bit.
pub fn loss_frm<T: Float>(g: &mut Graph<T>, t: FullModelTerms, w: &LossWeights) -> Result<Var> {
    let cl = loss_cl(g, t.r_hat, t.r, t.s_hat, t.s, w)?;
    let mh = g.mse_loss(t.h_hat, t.h)?;
    let me = g.mse_loss(t.e_hat, t.e)?;
    let wh = g.scale(mh, T::of(w.gamma_h));
    let we = g.scale(me, T::of(w.gamma_e));
    let acc = g.add(cl, wh)?;
    let acc = g.add(acc, we)?;
    let rs = g.mul_elem(t.r_hat, t.s_hat)?;
    let body = g.mul_elem(rs, t.e_hat)?;
    let interface = g.mul_elem(t.h_hat, t.e_hat)?;
    let recon = g.add(body, interface)?;
    let m = g.mse_loss(recon, t.image)?;
    let imf = g.scale(m, T::of(w.gamma_imf));
    Ok(g.add(acc, imf)?)
}

/// `loss_cl` on gradient maps of reflectance and shading.
pub fn loss_s1<T: Float>(
    g: &mut Graph<T>,
    grad_r_hat: Var,
    grad_r: Var,
    grad_s_hat: Var,
    grad_s: Var,
    w: &LossWeights,
) -> Result<Var> {
    loss_cl(g, grad_r_hat, grad_r, grad_s_hat, grad_s, w)
}
