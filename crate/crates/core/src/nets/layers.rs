use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// He-style init for a layer followed by a leaky relu of the given slope.
pub(crate) fn init_hidden<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    slope: f64,
    rng: &mut R,
) {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    store.insert(format!("{prefix}.w"), gaussian(rng, fan_in, fan_out, std));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), gaussian(rng, fan_in, fan_out, std));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

/// Binds `{prefix}.w` / `{prefix}.b` and applies the affine map.
pub(crate) fn dense(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let wn = format!("{prefix}.w");
    let bn = format!("{prefix}.b");
    let w = g.param(&wn, store.get(&wn)?)?;
    let b = g.param(&bn, store.get(&bn)?)?;
    g.dense(x, w, b)
}

/// Appends `extra` zero-mean Gaussian columns (std 0.01) and zero biases
/// to an output layer, keeping existing entries bit-identical.
pub(crate) fn expand_columns<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    new_total: usize,
    rng: &mut R,
) -> Result<()> {
    let wn = format!("{prefix}.w");
    let bn = format!("{prefix}.b");
    let w = store.get(&wn)?.clone();
    let (rows, cols) = w.dims2();
    if new_total <= cols {
        return Err(Error::InvalidArgument(format!(
            "cannot expand {prefix} from {cols} to {new_total} classes"
        )));
    }
    let fresh = gaussian(rng, rows, new_total - cols, 0.01);
    let mut data = Vec::with_capacity(rows * new_total);
    for r in 0..rows {
        data.extend_from_slice(w.row_slice(r));
        data.extend_from_slice(fresh.row_slice(r));
    }
    store.insert(wn, Tensor::matrix(rows, new_total, data)?);
    let mut b = store.get(&bn)?.data().to_vec();
    b.resize(new_total, 0.0);
    store.insert(bn, Tensor::row(b));
    Ok(())
}

pub(crate) fn check_input(x: &Tensor, in_dim: usize, what: &str) -> Result<()> {
    if x.rank() != 2 || x.dims2().1 != in_dim {
        return Err(Error::shape(
            what,
            format!("expected [n, {in_dim}] input, got {:?}", x.shape()),
        ));
    }
    Ok(())
}
