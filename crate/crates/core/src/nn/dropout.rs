use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};
use rand::Rng;

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1−p)`; eval mode (or `p = 0`) returns
/// `x` itself.
pub fn dropout<T: Float, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
    let m = g.constant(&mask);
    g.mul(x, m)
}
