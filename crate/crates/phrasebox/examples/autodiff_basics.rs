//! The reverse-mode tape in isolation: record a computation, run backward,
//! and confirm the gradients against finite differences.

use phrasebox::gradcheck::grad_check;
use phrasebox::nn::{ParamStore, Session};
use phrasebox::tensor::Tensor;

fn main() -> phrasebox::Result<()> {
    // forward: loss = sum(sigmoid(x W)^2)
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::row(vec![0.5, -1.0, 2.0]))?;
    let w = store.add("w", Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?)?;

    let mut sess = Session::new(&store, false)?;
    let prod = sess.tape.matmul(sess.p(x), sess.p(w))?;
    let act = sess.tape.sigmoid(prod)?;
    let sq = sess.tape.mul(act, act)?;
    let loss = sess.tape.sum_all(sq)?;
    println!("loss = {:.6}", sess.tape.value(loss).data()[0]);

    sess.tape.backward(loss)?;
    println!("d loss / d x = {:?}", sess.tape.grad(sess.p(x)).unwrap());
    println!("d loss / d w = {:?}", sess.tape.grad(sess.p(w)).unwrap());

    // the same gradients, verified numerically
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check(
        &mut store,
        &ids,
        |s, want| {
            let mut sess = Session::new(s, false)?;
            let prod = sess.tape.matmul(sess.p(x), sess.p(w))?;
            let act = sess.tape.sigmoid(prod)?;
            let sq = sess.tape.mul(act, act)?;
            let loss = sess.tape.sum_all(sq)?;
            let val = sess.tape.value(loss).data()[0];
            if want {
                sess.tape.backward(loss)?;
                Ok((val, sess.grads(s)))
            } else {
                Ok((val, vec![]))
            }
        },
        1e-6,
        1e-8,
    )?;
    println!(
        "finite differences: max relative error {:.3e} over {} coordinates -> {}",
        report.max_rel_err,
        report.coords_checked,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(())
}
