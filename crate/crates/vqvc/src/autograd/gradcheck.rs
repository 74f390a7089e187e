//! Central finite-difference verification of the backward pass.

use super::{Tape, Value};

/// Compare the backward gradient of `f` (a scalar-valued function of one
/// input) against central finite differences, returning the maximum
/// relative error over all coordinates.
///
/// Runs entirely in f64; the relative error denominator is
/// `max(|analytic|, |numeric|, 1)` so near-zero coordinates are compared
/// absolutely.
pub fn grad_check<F>(f: F, rows: usize, cols: usize, input: &[f64]) -> f64
where
    F: Fn(&mut Tape<f64>, Value) -> Value,
{
    grad_check_eps(f, rows, cols, input, 1e-4)
}

pub fn grad_check_eps<F>(f: F, rows: usize, cols: usize, input: &[f64], eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, Value) -> Value,
{
    assert_eq!(input.len(), rows * cols);
    let mut tape = Tape::new();
    let x = tape.leaf(rows, cols, input.to_vec(), true);
    let loss = f(&mut tape, x);
    tape.backward(loss);
    let analytic = tape.grad(x).to_vec();

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(rows, cols, data.to_vec(), false);
        let l = f(&mut t, v);
        t.scalar_value(l)
    };

    let mut max_rel = 0.0f64;
    let mut probe = input.to_vec();
    for i in 0..input.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe);
        probe[i] = orig - eps;
        let lo = eval(&probe);
        probe[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn analytic_quadratic_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = random_input(&mut rng, 12, -2.0, 2.0);
        let err = grad_check(
            |t, x| {
                let sq = t.square(x);
                t.mean(sq)
            },
            3,
            4,
            &input,
        );
        assert!(err <= 1e-6, "rel err {err}");
    }

    /// Every primitive passes finite differences, 10 seeded repetitions.
    #[test]
    fn all_primitives_pass_finite_differences() {
        type Case = (&'static str, fn(&mut Tape<f64>, Value) -> Value, f64, f64);
        let cases: Vec<Case> = vec![
            ("add", |t, x| { let c = t.constant(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()); let y = t.add(x, c); t.mean(y) }, -2.0, 2.0),
            ("sub", |t, x| { let c = t.constant(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()); let y = t.sub(c, x); t.mean(y) }, -2.0, 2.0),
            ("mul", |t, x| { let y = t.mul(x, x); t.mean(y) }, -2.0, 2.0),
            ("div", |t, x| { let c = t.constant(3, 4, (1..13).map(|i| i as f64 * 0.3).collect()); let y = t.div(c, x); t.mean(y) }, 0.5, 2.0),
            ("add_row", |t, x| { let top = t.slice(x, 0, 0, 1); let y = t.add_row(x, top); t.mean(y) }, -2.0, 2.0),
            ("scale", |t, x| { let y = t.scale(x, -1.7); t.mean(y) }, -2.0, 2.0),
            ("square", |t, x| { let y = t.square(x); t.mean(y) }, -2.0, 2.0),
            ("abs", |t, x| { let y = t.abs(x); t.mean(y) }, 0.2, 2.0),
            ("exp", |t, x| { let y = t.exp(x); t.mean(y) }, -1.0, 1.0),
            ("log", |t, x| { let y = t.log(x); t.mean(y) }, 0.3, 3.0),
            ("sqrt", |t, x| { let y = t.sqrt(x); t.mean(y) }, 0.3, 3.0),
            ("sigmoid", |t, x| { let y = t.sigmoid(x); t.mean(y) }, -3.0, 3.0),
            ("tanh", |t, x| { let y = t.tanh(x); t.mean(y) }, -2.0, 2.0),
            ("relu", |t, x| { let y = t.relu(x); t.mean(y) }, 0.2, 2.0),
            ("sum", |t, x| { let y = t.square(x); t.sum(y) }, -1.0, 1.0),
            ("concat", |t, x| {
                let sq = t.square(x);
                let c = t.concat(&[x, sq], 1);
                t.mean(c)
            }, -2.0, 2.0),
            ("slice", |t, x| { let s = t.slice(x, 1, 1, 3); let y = t.square(s); t.mean(y) }, -2.0, 2.0),
            ("matmul", |t, x| {
                let w = t.constant(4, 2, (0..8).map(|i| (i as f64 - 3.5) * 0.25).collect());
                let y = t.matmul(x, w);
                let sq = t.square(y);
                t.mean(sq)
            }, -2.0, 2.0),
            ("embedding", |t, x| {
                let e = t.embedding_lookup(x, &[0, 2, 1, 2]);
                let sq = t.square(e);
                t.mean(sq)
            }, -2.0, 2.0),
            ("softmax_ce", |t, x| {
                let row = t.slice(x, 0, 0, 1);
                let flat = t.concat(&[row], 0);
                t.softmax_cross_entropy(flat, 2)
            }, -2.0, 2.0),
            ("glu", |t, x| { let y = t.glu(x); t.mean(y) }, -2.0, 2.0),
            ("mean_rows", |t, x| { let m = t.mean_rows(x); let sq = t.square(m); t.mean(sq) }, -2.0, 2.0),
        ];
        for (name, f, lo, hi) in cases {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let input = random_input(&mut rng, 12, lo, hi);
                let err = grad_check(f, 3, 4, &input);
                assert!(err <= 1e-4, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn conv_and_kernel_gradients_pass() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7 + seed);
            // gradient w.r.t. input, T=8 Cin=Cout=3 k=3 d=2
            let kernel: Vec<f64> = (0..27).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let kc = kernel.clone();
            let input = random_input(&mut rng, 24, -1.0, 1.0);
            let err = grad_check(
                move |t, x| {
                    let w = t.constant(9, 3, kc.clone());
                    let y = t.conv1d_dilated(x, w, 3, 2, false);
                    let sq = t.square(y);
                    t.mean(sq)
                },
                8,
                3,
                &input,
            );
            assert!(err <= 1e-4, "input grad seed {seed}: {err}");

            // gradient w.r.t. kernel
            let signal = random_input(&mut rng, 24, -1.0, 1.0);
            let sc = signal.clone();
            let kernel_in = random_input(&mut rng, 27, -0.5, 0.5);
            let err = grad_check(
                move |t, w| {
                    let x = t.constant(8, 3, sc.clone());
                    let y = t.conv1d_dilated(x, w, 3, 2, true);
                    let sq = t.square(y);
                    t.mean(sq)
                },
                9,
                3,
                &kernel_in,
            );
            assert!(err <= 1e-4, "kernel grad seed {seed}: {err}");
        }
    }

    /// Gradient flows to the codebook only through the codebook term of a
    /// `||sg[h] - e||^2` loss; finite differences over e agree.
    #[test]
    fn codebook_term_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hc = h.clone();
        let e0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            move |t, e| {
                let h = t.constant(4, 2, hc.clone());
                let sg_h = t.stop_gradient(h);
                let diff = t.sub(sg_h, e);
                let sq = t.square(diff);
                let s = t.sum(sq);
                t.scale(s, 1.0 / 4.0)
            },
            4,
            2,
            &e0,
        );
        assert!(err <= 1e-6, "rel err {err}");
    }

    /// A function with a stop_gradient branch: backward reports zero on the
    /// blocked branch while full-function finite differences do not. This
    /// divergence is the expected contract.
    #[test]
    fn stop_gradient_branch_diverges_from_fd_by_construction() {
        let f = |t: &mut Tape<f64>, x: Value| {
            let sg = t.stop_gradient(x);
            let sq = t.square(sg);
            t.mean(sq)
        };
        let input = vec![0.5, 1.0, 1.5, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(2, 2, input.clone(), true);
        let loss = f(&mut tape, x);
        tape.backward(loss);
        assert!(tape.grad(x).iter().all(|&g| g == 0.0));
        // the raw FD estimate sees straight through the stop_gradient
        let err = grad_check(f, 2, 2, &input);
        assert!(err > 0.1, "expected divergence, got {err}");
    }
}
