use super::model::Discriminator;
use crate::error::{HdtError, Result};
use crate::tensor::{ParamStore, Tape, Var};

/// Norm offset when unit-normalizing latent and code rows.
pub const L2_EPS: f64 = 1e-8;
/// Discriminator logits are clamped to this magnitude before log-sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;
pub const LAMBDA_MAX: f64 = 1e4;
const LAMBDA_EPS: f64 = 1e-6;

/// Quantization objective and its parts, all scalar vars.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// `‖x − x̂‖² + ‖sg[latent] − z_q‖² + β‖sg[z_q] − latent‖²`, each term an
/// element mean.
pub fn vq_loss(tape: &mut Tape, x: Var, x_hat: Var, latent: Var, z_q: Var, beta: f64) -> Result<VqLoss> {
    let reconstruction = tape.mse(x, x_hat)?;
    let latent_sg = tape.detach(latent);
    let codebook = tape.mse(latent_sg, z_q)?;
    let z_q_sg = tape.detach(z_q);
    let commit = tape.mse(z_q_sg, latent)?;
    let commitment = tape.scale(commit, beta);
    let t = tape.add(reconstruction, codebook)?;
    let total = tape.add(t, commitment)?;
    Ok(VqLoss { total, reconstruction, codebook, commitment })
}

/// Squared distance between unit-normalized latent rows and their matched
/// entries, summed over the code dimension and averaged over rows. The
/// entries enter as constants, so only the encoder is pulled by this term.
pub fn l2_reg_loss(tape: &mut Tape, latent: Var, entries: Var) -> Result<Var> {
    let rows = tape.shape(latent)[0];
    let u = tape.l2_normalize_rows(latent, L2_EPS);
    let e = tape.detach(entries);
    let v = tape.l2_normalize_rows(e, L2_EPS);
    let diff = tape.sub(u, v)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// `−mean[log σ(r)] − mean[log(1 − σ(f))]` on clamped logits.
pub fn discriminator_loss_from_logits(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let real = tape.clamp(real, -LOGIT_CLAMP, LOGIT_CLAMP);
    let fake = tape.clamp(fake, -LOGIT_CLAMP, LOGIT_CLAMP);
    let lr = tape.log_sigmoid(real);
    let lr = tape.mean(lr);
    // log(1 − σ(z)) = log σ(−z)
    let neg = tape.scale(fake, -1.0);
    let lf = tape.log_sigmoid(neg);
    let lf = tape.mean(lf);
    let s = tape.add(lr, lf).expect("scalars");
    tape.scale(s, -1.0)
}

/// Non-saturating `−mean[log σ(f)]` on clamped logits.
pub fn generator_loss_from_logits(tape: &mut Tape, fake: Var) -> Var {
    let fake = tape.clamp(fake, -LOGIT_CLAMP, LOGIT_CLAMP);
    let l = tape.log_sigmoid(fake);
    let l = tape.mean(l);
    tape.scale(l, -1.0)
}

/// Discriminator loss with `x̂` cut from the generator graph.
pub fn discriminator_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    store: &ParamStore,
    x: Var,
    x_hat: Var,
) -> Result<Var> {
    let real = disc.forward(tape, store, x)?;
    let fake_in = tape.detach(x_hat);
    let fake = disc.forward(tape, store, fake_in)?;
    Ok(discriminator_loss_from_logits(tape, real, fake))
}

pub fn generator_loss(tape: &mut Tape, disc: &Discriminator, store: &ParamStore, x_hat: Var) -> Result<Var> {
    let fake = disc.forward(tape, store, x_hat)?;
    Ok(generator_loss_from_logits(tape, fake))
}

/// `(d_loss, g_loss)` against the same discriminator parameters.
pub fn gan_losses(
    tape: &mut Tape,
    disc: &Discriminator,
    store: &ParamStore,
    x: Var,
    x_hat: Var,
) -> Result<(Var, Var)> {
    let d = discriminator_loss(tape, disc, store, x, x_hat)?;
    let g = generator_loss(tape, disc, store, x_hat)?;
    Ok((d, g))
}

/// `‖∇L_rec‖ / (‖∇L_GAN‖ + 1e-6)` clamped to `[0, 1e4]`, from gradient norms
/// taken at the decoder's last layer.
pub fn adaptive_lambda(rec_grad_norm: f64, gan_grad_norm: f64) -> Result<f64> {
    if !rec_grad_norm.is_finite() || !gan_grad_norm.is_finite() {
        return Err(HdtError::Training(format!(
            "non-finite gradient norm in adaptive weight (rec {rec_grad_norm}, gan {gan_grad_norm})"
        )));
    }
    Ok((rec_grad_norm / (gan_grad_norm + LAMBDA_EPS)).clamp(0.0, LAMBDA_MAX))
}
