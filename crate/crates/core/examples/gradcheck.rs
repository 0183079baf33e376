//! Reverse-mode gradients of a small two-layer expression, checked against
//! central differences.
//!
//! cargo run --example gradcheck

use raformer::{Tape, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let w = tape.param(w.clone());
    let h = tape.matmul(x, w).unwrap();
    let a = tape.gelu(h);
    let p = tape.softmax_rows(a);
    let l = tape.cross_entropy(p, &[1, 0]).unwrap();
    tape.backward(l).unwrap();
    (tape.value(l).item(), tape.grad(w).unwrap().to_vec())
}

fn main() {
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.3, -0.7]]).unwrap();
    let w = Tensor::from_rows(&[vec![0.1, -0.2], vec![0.4, 0.3], vec![-0.5, 0.2]]).unwrap();
    let (value, grad) = loss(&x, &w);
    println!("loss = {value:.6}");
    let h = 1e-5;
    for (i, g) in grad.iter().enumerate() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus).0 - loss(&x, &minus).0) / (2.0 * h);
        println!("dL/dw[{i}]  tape {g:+.8}  numeric {numeric:+.8}");
    }
}
