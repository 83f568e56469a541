//! Small reverse-mode autodiff over dense f64 matrices.

mod graph;
mod tensor;

pub use graph::{gelu, Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tensor::dot;

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compare the tape gradient of `build` against fourth-order central
/// finite differences.
///
/// `build` must record a scalar loss. Relative error uses
/// `|a - n| / max(|a|, |n|, floor)`. When `limit` is set, at most that many
/// coordinates per tensor are probed, spread evenly.
pub fn check_gradients<F>(
    params: &mut [Tensor],
    build: F,
    step: f64,
    floor: f64,
    limit: Option<usize>,
) -> crate::Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut coords = Vec::new();
    for (id, t) in params.iter().enumerate() {
        let stride = limit.map_or(1, |l| t.len().div_ceil(l.max(1)).max(1));
        coords.extend((0..t.len()).step_by(stride).map(|k| (id, k)));
    }
    check_gradients_at(params, build, step, floor, &coords)
}

/// Like [`check_gradients`] but probes exactly the `(tensor, element)`
/// coordinates given.
pub fn check_gradients_at<F>(
    params: &mut [Tensor],
    build: F,
    step: f64,
    floor: f64,
    coords: &[(usize, usize)],
) -> crate::Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let analytic = {
        let view: &[Tensor] = params;
        let mut tape = Tape::new(view);
        let loss = build(&mut tape);
        tape.backward(loss)?
    };
    let eval = |params: &[Tensor]| {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        tape.value(loss).scalar()
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for &(id, k) in coords {
        let orig = params[id].data()[k];
        let mut at = |x: f64| {
            params[id].data_mut()[k] = x;
            eval(params)
        };
        let (p1, m1) = (at(orig + step), at(orig - step));
        let (p2, m2) = (at(orig + 2.0 * step), at(orig - 2.0 * step));
        params[id].data_mut()[k] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        out.max_abs_error = out.max_abs_error.max(abs);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn assert_grad(params: &mut [Tensor], build: impl Fn(&mut Tape<'_>) -> Var) {
        let r = check_gradients(params, build, 1e-6, 1e-6, None).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 3, 4)];
        assert_grad(&mut p, |t| {
            let a = t.param(0);
            let b = t.param(1);
            let s = t.add(a, b);
            let d = t.sub(s, b);
            let m = t.mul(d, b);
            let e = t.exp(m);
            let g = t.gelu(e);
            let q = t.square(g);
            let c = t.sum_cols(q);
            let c = t.scale(c, 0.7);
            t.mean(c)
        });
    }

    #[test]
    fn linear_layer_norm_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = vec![
            rand_tensor(&mut rng, 5, 3),
            rand_tensor(&mut rng, 3, 6),
            rand_tensor(&mut rng, 1, 6),
            rand_tensor(&mut rng, 1, 8),
            rand_tensor(&mut rng, 1, 8),
            rand_tensor(&mut rng, 5, 1),
        ];
        assert_grad(&mut p, |t| {
            let x = t.param(0);
            let w = t.param(1);
            let b = t.param(2);
            let h = t.linear(x, w, Some(b));
            let cat = t.concat_cols(&[h, x]);
            let sl = t.slice_cols(cat, 1, 8);
            let (g, b2, col) = (t.param(3), t.param(4), t.param(5));
            let ln = t.layer_norm(sl, g, b2, 1e-5);
            let sc = t.mul_column(ln, col);
            let g = t.gelu(sc);
            let sq = t.square(g);
            t.sum(sq)
        });
    }

    #[test]
    fn attention_with_masked_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = vec![
            rand_tensor(&mut rng, 8, 4),
            rand_tensor(&mut rng, 8, 4),
            rand_tensor(&mut rng, 8, 4),
            rand_tensor(&mut rng, 8, 4),
        ];
        let allowed = vec![true, false, true, true, true, true, false, false];
        assert_grad(&mut p, |t| {
            let q = t.param(0);
            let k = t.param(1);
            let v = t.param(2);
            let w = t.param(3);
            let a = t.attention(q, k, v, 4, 2, allowed.clone());
            let m = t.mul(a, w);
            t.sum(m)
        });
    }

    #[test]
    fn masked_keys_do_not_influence_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 4, 4);
        let k = rand_tensor(&mut rng, 4, 4);
        let v = rand_tensor(&mut rng, 4, 4);
        let allowed = vec![true, true, false, true];
        let run = |k: &Tensor, v: &Tensor| {
            let params = vec![q.clone(), k.clone(), v.clone()];
            let mut t = Tape::new(&params);
            let (a, b, c) = (t.param(0), t.param(1), t.param(2));
            let o = t.attention(a, b, c, 4, 2, allowed.clone());
            t.value(o).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.row_mut(2).fill(100.0);
        v2.row_mut(2).fill(-7.0);
        assert_eq!(base, run(&k2, &v2));
    }

    #[test]
    fn geometry_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = vec![
            rand_tensor(&mut rng, 3, 3),
            rand_tensor(&mut rng, 3, 3),
            rand_tensor(&mut rng, 3, 9),
            rand_tensor(&mut rng, 3, 9),
        ];
        for v in p[0].data_mut() {
            *v += 2.0;
        }
        assert_grad(&mut p, |t| {
            let a = t.param(0);
            let b = t.param(1);
            let n = t.normalize_rows(a);
            let c = t.cross_rows(n, b);
            let d = t.dot_rows(c, a);
            let (m1, m2) = (t.param(2), t.param(3));
            let m = t.mat3_mul(m1, m2);
            let mv = t.mat3_vec(m, c);
            let s = t.mul_column(mv, d);
            let g = t.gather_rows(s, vec![2, 0, 2]);
            let i = t.interleave_rows(&[g, b]);
            let q = t.square(i);
            t.sum(q)
        });
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let params = vec![Tensor::zeros(2, 2)];
        let mut t = Tape::new(&params);
        let p = t.param(0);
        assert!(t.backward(p).is_err());
        let empty = Tape::new(&params);
        assert!(empty.backward(Var::dangling()).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let params = vec![Tensor::filled(1, 2, 2.0)];
        let mut t = Tape::new(&params);
        let p = t.param(0);
        let c = t.constant(Tensor::filled(1, 2, 3.0));
        let m = t.mul(p, c);
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[3.0, 3.0]);
    }
}
