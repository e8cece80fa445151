use hdt::tensor::{ParamStore, Tape, Tensor};
use hdt::transformer::{HdtPrior, PriorConfig, TokenDecoder};
use hdt::Result;
use rand::Rng;

pub fn random<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// 2 variates, history 8, horizon 8 (4 tokens), hidden 8, codebooks 5 and 6.
pub fn tiny_config() -> PriorConfig {
    let mut c = PriorConfig::new(2, 8, 8, 8, 5);
    c.target_codebook = 6;
    c.selfcond_layers = 2;
    c.base_layers = 2;
    c.enc_layers = 1;
    c
}

pub fn tiny_prior(seed: u64) -> HdtPrior {
    HdtPrior::new(tiny_config(), seed).unwrap()
}

/// Max |∂‖logits[pos]‖²/∂x[j]| over embedded inputs `x` for `j > pos` and
/// for `j ≤ pos`, with random memory and (if present) condition inputs.
pub fn causal_probe<R: Rng>(
    decoder: &TokenDecoder,
    store: &ParamStore,
    hidden: usize,
    history: usize,
    pos: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let len = decoder.len;
    let mut tape = Tape::eval();
    let x = tape.leaf(random(rng, &[1, len, hidden]));
    let memory = tape.leaf(random(rng, &[1, history, hidden]));
    let cond = decoder
        .has_condition()
        .then(|| tape.leaf(random(rng, &[1, len, hidden])));
    let logits = decoder.logits_from_embedded(&mut tape, store, x, memory, cond, 0.0)?;
    let row = tape.slice(logits, 0, pos, 1)?;
    let sq = tape.square(row);
    let out = tape.sum(sq);
    let grads = tape.backward(out)?;
    let gx = grads.get(&tape, x).expect("input gradient");
    let (mut future, mut past) = (0.0f64, 0.0f64);
    for j in 0..len {
        let m = gx.data()[j * hidden..(j + 1) * hidden]
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if j > pos {
            future = future.max(m);
        } else {
            past = past.max(m);
        }
    }
    Ok((future, past))
}
