// The tape-based autodiff engine, checked against central differences.

use detpretrain::numerics::{gradient_check, CheckOptions, Graph, Probe, Tensor};

/// `mean(relu(W x) ^ 2)`-like toy: a linear layer, a sigmoid and a log loss.
fn probe(x: &[f64], want_grad: bool) -> detpretrain::Result<Probe> {
    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![2, 3], x.to_vec())?);
    let input = g.constant(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0])?);
    let h = g.linear(input, w, None)?;
    let p = g.sigmoid(h);
    let lp = g.log(p);
    let s = g.mean(lp);
    let loss = g.scale(s, -1.0);
    let grad = if want_grad { Some(g.backward(loss)?.get_or_zeros(w, x.len())) } else { None };
    Ok(Probe { value: g.item(loss), signature: g.kink_signature(), grad })
}

pub fn run_example() -> detpretrain::Result<()> {
    let x = [0.1, -0.4, 0.3, 0.8, 0.2, -0.5];
    let p = probe(&x, true)?;
    println!("loss {:.6}", p.value);
    println!("grad {:.6?}", p.grad.unwrap_or_default());
    let r = gradient_check(probe, &x, &CheckOptions::default())?;
    println!("finite differences: max rel error {:.2e} over {} coordinates, passed {}", r.max_rel_error, r.checked, r.passed);
    Ok(())
}

#[allow(dead_code)]
fn main() -> detpretrain::Result<()> {
    run_example()
}
