use rand::Rng as _;

use crate::rng::Rng;

use super::{Scalar, Tensor};

/// Fan-in and fan-out of a dense (`F × U`) or conv (`kh × kw × Cin × Cout`)
/// weight shape.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [f, u] => (f, u),
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [n] => (n, n),
        _ => {
            let receptive: usize = shape[..shape.len() - 2].iter().product();
            (receptive * shape[shape.len() - 2], receptive * shape[shape.len() - 1])
        }
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let (fi, fo) = fans(shape);
    let limit = (6.0 / (fi + fo) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
