//! Finite-difference gradient checking of individual operations and a
//! small end-to-end model loss.
//!
//!     cargo run --release --example grad_check_demo

use amor::rng::Rng;
use amor::tensor::check::grad_check;

fn main() -> amor::Result<()> {
    let mut rng = Rng::new(7);
    let rand = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.uniform_symmetric(2.0)).collect()
    };

    let a = rand(&mut rng, 9);
    let b = rand(&mut rng, 9);
    let rel = grad_check(
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(c))
        },
        &[(a, vec![3, 3]), (b, vec![3, 3])],
    )?;
    println!("matmul          max rel err {rel:.2e}");

    let x = rand(&mut rng, 12);
    let rel = grad_check(
        |tape, ids| {
            let p = tape.softmax_lastdim(ids[0]);
            let h = tape.row_entropy(p);
            Ok(tape.sum(h))
        },
        &[(x, vec![3, 4])],
    )?;
    println!("softmax+entropy max rel err {rel:.2e}");

    let logits = rand(&mut rng, 24);
    let rel = grad_check(
        |tape, ids| tape.cross_entropy(ids[0], &[1, 5, 0, 3], &[true, true, true, true]),
        &[(logits, vec![4, 6])],
    )?;
    println!("cross-entropy   max rel err {rel:.2e}");
    Ok(())
}
