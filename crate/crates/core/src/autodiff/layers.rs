//! Fused recurrent and dense layers. Sequences are `(batch, time, features)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2, Ix3};
use rand::Rng;

use super::{sigmoid, uniform, ParamSet, Tensor, Var};

/// Parameter indices of one GRU layer.
///
/// Gate blocks are stacked `[z; r; h]` along the first axis:
/// `w` is `(3H, d_in)`, `u` is `(3H, H)`, `b` is `(3H,)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruWeights {
    pub w: usize,
    pub u: usize,
    pub b: usize,
    pub input: usize,
    pub hidden: usize,
}

impl GruWeights {
    /// Registers `{prefix}.w`, `{prefix}.u`, `{prefix}.b`, every entry
    /// uniform in `+-1/sqrt(hidden)`.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = params.add(
            format!("{prefix}.w"),
            uniform(rng, &[3 * hidden, input], bound),
            true,
        );
        let u = params.add(
            format!("{prefix}.u"),
            uniform(rng, &[3 * hidden, hidden], bound),
            true,
        );
        let b = params.add(
            format!("{prefix}.b"),
            uniform(rng, &[3 * hidden], bound),
            true,
        );
        GruWeights {
            w,
            u,
            b,
            input,
            hidden,
        }
    }

    /// Looks the three tensors up by name in an existing set.
    pub fn find(params: &ParamSet, prefix: &str) -> Option<Self> {
        let w = params.index_of(&format!("{prefix}.w"))?;
        let u = params.index_of(&format!("{prefix}.u"))?;
        let b = params.index_of(&format!("{prefix}.b"))?;
        let shape = params.get(w).value.shape();
        Some(GruWeights {
            w,
            u,
            b,
            input: shape[1],
            hidden: shape[0] / 3,
        })
    }
}

fn to3(t: &Tensor) -> Array3<f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("rank-3 tensor")
        .to_owned()
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}

/// GRU over a `(B, T, d_in)` batch, returning all hidden states `(B, T, H)`.
///
/// `z = sig(W_z x + U_z h + b_z)`, `r = sig(W_r x + U_r h + b_r)`,
/// `c = tanh(W_h x + b_h + r * (U_h h))`, `h' = z * h + (1 - z) * c`.
/// `h0` defaults to zeros and, when given, is `(B, H)`.
pub fn gru_forward<'t>(
    x: Var<'t>,
    w: Var<'t>,
    u: Var<'t>,
    b: Var<'t>,
    h0: Option<Var<'t>>,
) -> Var<'t> {
    let tape = x.tape();
    let xv = to3(&x.value());
    let wv = to2(&w.value());
    let uv = to2(&u.value());
    let bv = b
        .value()
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 bias")
        .to_owned();
    let (nb, nt, d) = xv.dim();
    let hd = uv.ncols();
    assert_eq!(wv.dim(), (3 * hd, d), "gru: input weight shape");
    assert_eq!(uv.dim(), (3 * hd, hd), "gru: hidden weight shape");
    assert_eq!(bv.len(), 3 * hd, "gru: bias shape");
    let h_init = match &h0 {
        Some(h) => to2(&h.value()),
        None => Array2::zeros((nb, hd)),
    };
    assert_eq!(h_init.dim(), (nb, hd), "gru: initial state shape");

    // Work time-major, one contiguous block per gate: row `t * nb + b` holds
    // step `t` of example `b`.
    let gate = |m: &Array2<f64>, g: usize| m.slice(s![g * hd..(g + 1) * hd, ..]).to_owned();
    let (w_z, w_r, w_h) = (gate(&wv, 0), gate(&wv, 1), gate(&wv, 2));
    let (u_z, u_r, u_h) = (gate(&uv, 0), gate(&uv, 1), gate(&uv, 2));
    let xf = time_major(&xv);
    let project = |wg: &Array2<f64>, g: usize| {
        let mut out = xf.dot(&wg.t());
        out += &bv.slice(s![g * hd..(g + 1) * hd]);
        out
    };
    let (gx_z, gx_r, gx_h) = (project(&w_z, 0), project(&w_r, 1), project(&w_h, 2));

    // hs block t is the state entering step t; block nt is the last output.
    let mut hs = Array2::<f64>::zeros(((nt + 1) * nb, hd));
    hs.slice_mut(s![..nb, ..]).assign(&h_init);
    let mut zs = Array2::<f64>::zeros((nt * nb, hd));
    let mut rs = Array2::<f64>::zeros((nt * nb, hd));
    let mut cs = Array2::<f64>::zeros((nt * nb, hd));
    let mut uhs = Array2::<f64>::zeros((nt * nb, hd));
    let (u_z_t, u_r_t, u_h_t) = (u_z.t(), u_r.t(), u_h.t());
    for t in 0..nt {
        let rows = s![t * nb..(t + 1) * nb, ..];
        let (done, mut rest) = hs.view_mut().split_at(Axis(0), (t + 1) * nb);
        let hp = done.slice(s![t * nb.., ..]);
        let mut z = zs.slice_mut(rows);
        general_mat_mul(1.0, &hp, &u_z_t, 0.0, &mut z);
        for (z, &g) in flat_mut(&mut z).iter_mut().zip(flat(gx_z.slice(rows))) {
            *z = sigmoid(*z + g);
        }
        let mut r = rs.slice_mut(rows);
        general_mat_mul(1.0, &hp, &u_r_t, 0.0, &mut r);
        for (r, &g) in flat_mut(&mut r).iter_mut().zip(flat(gx_r.slice(rows))) {
            *r = sigmoid(*r + g);
        }
        let mut uh = uhs.slice_mut(rows);
        general_mat_mul(1.0, &hp, &u_h_t, 0.0, &mut uh);
        let mut c = cs.slice_mut(rows);
        let (fr, fuh, fg) = (flat(r.view()), flat(uh.view()), flat(gx_h.slice(rows)));
        for (i, c) in flat_mut(&mut c).iter_mut().enumerate() {
            *c = fast_tanh(fg[i] + fr[i] * fuh[i]);
        }
        let mut hn = rest.slice_mut(s![..nb, ..]);
        let hn = flat_mut(&mut hn);
        let (z, hp, c) = (flat(z.view()), flat(hp), flat(c.view()));
        for i in 0..hn.len() {
            hn[i] = z[i] * hp[i] + (1.0 - z[i]) * c[i];
        }
    }

    let out = batch_major(hs.slice(s![nb.., ..]), nb, nt).into_dyn();
    let mut parents = vec![x, w, u, b];
    if let Some(h) = h0 {
        parents.push(h);
    }
    let has_h0 = h0.is_some();
    tape.custom(&parents, out, move |g| {
        let dhs = time_major(&to3(g));
        let mut da_z = Array2::<f64>::zeros((nt * nb, hd));
        let mut da_r = Array2::<f64>::zeros((nt * nb, hd));
        let mut da_h = Array2::<f64>::zeros((nt * nb, hd));
        let mut da_uh = Array2::<f64>::zeros((nt * nb, hd));
        let mut dh_next = Array2::<f64>::zeros((nb, hd));
        for t in (0..nt).rev() {
            let rows = s![t * nb..(t + 1) * nb, ..];
            let hp = hs.slice(rows);
            let (z, r, c, uh) = (
                zs.slice(rows),
                rs.slice(rows),
                cs.slice(rows),
                uhs.slice(rows),
            );
            let mut dh = dhs.slice(rows).to_owned();
            dh += &dh_next;
            let (fz, fr, fc, fuh, fhp, fdh) = (
                flat(z),
                flat(r),
                flat(c),
                flat(uh),
                flat(hp),
                flat(dh.view()),
            );
            let mut ah = da_h.slice_mut(rows);
            let mut auh = da_uh.slice_mut(rows);
            let mut ar = da_r.slice_mut(rows);
            let (fah, fauh, far) = (flat_mut(&mut ah), flat_mut(&mut auh), flat_mut(&mut ar));
            for i in 0..fah.len() {
                let a = fdh[i] * (1.0 - fz[i]) * (1.0 - fc[i] * fc[i]);
                fah[i] = a;
                fauh[i] = a * fr[i];
                far[i] = a * fuh[i] * fr[i] * (1.0 - fr[i]);
            }
            let mut az = da_z.slice_mut(rows);
            for (i, o) in flat_mut(&mut az).iter_mut().enumerate() {
                *o = fdh[i] * (fhp[i] - fc[i]) * fz[i] * (1.0 - fz[i]);
            }
            {
                let dn = dh_next.as_slice_mut().expect("contiguous");
                for i in 0..dn.len() {
                    dn[i] = fdh[i] * fz[i];
                }
            }
            general_mat_mul(1.0, &auh, &u_h, 1.0, &mut dh_next);
            general_mat_mul(1.0, &az, &u_z, 1.0, &mut dh_next);
            general_mat_mul(1.0, &ar, &u_r, 1.0, &mut dh_next);
        }
        // Weight gradients as single products over all steps.
        let h_in = hs.slice(s![..nt * nb, ..]);
        let mut dw = Array2::<f64>::zeros((3 * hd, d));
        let mut du = Array2::<f64>::zeros((3 * hd, hd));
        let mut db = Array1::<f64>::zeros(3 * hd);
        for (g, (da, dau)) in [(&da_z, &da_z), (&da_r, &da_r), (&da_h, &da_uh)]
            .into_iter()
            .enumerate()
        {
            let blk = s![g * hd..(g + 1) * hd, ..];
            dw.slice_mut(blk).assign(&da.t().dot(&xf));
            du.slice_mut(blk).assign(&dau.t().dot(&h_in));
            db.slice_mut(s![g * hd..(g + 1) * hd])
                .assign(&da.sum_axis(Axis(0)));
        }
        let mut dxf = da_z.dot(&w_z);
        general_mat_mul(1.0, &da_r, &w_r, 1.0, &mut dxf);
        general_mat_mul(1.0, &da_h, &w_h, 1.0, &mut dxf);
        let dx = batch_major(dxf.view(), nb, nt);
        let mut grads = vec![
            Some(dx.into_dyn()),
            Some(dw.into_dyn()),
            Some(du.into_dyn()),
            Some(db.into_dyn()),
        ];
        if has_h0 {
            grads.push(Some(dh_next.into_dyn()));
        }
        grads
    })
}

fn flat<'a>(a: ArrayView2<'a, f64>) -> &'a [f64] {
    a.to_slice().expect("contiguous rows")
}

fn flat_mut<'a>(a: &'a mut ArrayViewMut2<'_, f64>) -> &'a mut [f64] {
    a.as_slice_mut().expect("contiguous rows")
}

/// `tanh` through a single exponential.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// `(B, T, d)` to time-major rows `t * B + b`.
fn time_major(x: &Array3<f64>) -> Array2<f64> {
    let (nb, nt, d) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nt * nb, d))
        .expect("contiguous")
}

/// Inverse of [`time_major`].
fn batch_major(rows: ndarray::ArrayView2<f64>, nb: usize, nt: usize) -> Array3<f64> {
    let d = rows.ncols();
    rows.to_owned()
        .into_shape_with_order((nt, nb, d))
        .expect("contiguous")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
}

fn xf_owned(x: &Array3<f64>) -> Array2<f64> {
    let (nb, nt, d) = x.dim();
    x.view()
        .into_shape_with_order((nb * nt, d))
        .expect("contiguous")
        .to_owned()
}

/// `y_t = W x_t + b` with the same `W: (d_out, d_in)` and `b: (d_out,)` at
/// every step of a `(B, T, d_in)` batch.
pub fn linear_timedistributed<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = x.tape();
    let xv = to3(&x.value());
    let wv = to2(&w.value());
    let bv = b
        .value()
        .view()
        .into_dimensionality::<Ix1>()
        .expect("rank-1 bias")
        .to_owned();
    let (nb, nt, d) = xv.dim();
    let dout = wv.nrows();
    assert_eq!(wv.ncols(), d, "linear: weight shape");
    assert_eq!(bv.len(), dout, "linear: bias shape");
    let xf = xf_owned(&xv);
    let mut y = xf.dot(&wv.t());
    y += &bv;
    let y = y
        .into_shape_with_order((nb, nt, dout))
        .expect("size")
        .into_dyn();
    tape.custom(&[x, w, b], y, move |g| {
        let gf = to3(g).into_shape_with_order((nb * nt, dout)).expect("size");
        let dx = gf
            .dot(&wv)
            .into_shape_with_order((nb, nt, d))
            .expect("size");
        let dw = gf.t().dot(&xf);
        let db = gf.sum_axis(Axis(0));
        vec![
            Some(dx.into_dyn()),
            Some(dw.into_dyn()),
            Some(db.into_dyn()),
        ]
    })
}

/// `0.5 * v_max * tanh(x)`, bounded by `v_max / 2`.
pub fn scaled_tanh<'t>(x: Var<'t>, v_max: f64) -> Var<'t> {
    x.tanh().scale(0.5 * v_max)
}

#[cfg(test)]
mod tests {
    use super::super::{finite_difference_error, Tape};
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(rng, shape, 1.7)
    }

    #[test]
    fn zero_weights_zero_state_give_zero_output() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(vec![2, 5, 6], 0.7));
        let w = tape.constant(ArrayD::zeros(vec![12, 6]));
        let u = tape.constant(ArrayD::zeros(vec![12, 4]));
        let b = tape.constant(ArrayD::zeros(vec![12]));
        let h = gru_forward(x, w, u, b, None);
        assert!(h.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_halve_the_state_each_step() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(vec![1, 6, 2]));
        let w = tape.constant(ArrayD::zeros(vec![9, 2]));
        let u = tape.constant(ArrayD::zeros(vec![9, 3]));
        let b = tape.constant(ArrayD::zeros(vec![9]));
        let h0v = ndarray::arr2(&[[1.0, -2.0, 0.5]]).into_dyn();
        let h = gru_forward(x, w, u, b, Some(tape.constant(h0v.clone())));
        let hv = h.value();
        for t in 0..6 {
            for k in 0..3 {
                let expect = 0.5f64.powi(t as i32 + 1) * h0v[[0, k]];
                assert!((hv[[0, t, k]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let (nb, nt, d, hd) = (2, 4, 3, 5);
            let vals = [
                random(&mut rng, &[nb, nt, d]).mapv(|v| 3.0 * v),
                random(&mut rng, &[3 * hd, d]).mapv(|v| 2.0 * v),
                random(&mut rng, &[3 * hd, hd]).mapv(|v| 2.0 * v),
                random(&mut rng, &[3 * hd]),
                random(&mut rng, &[nb, hd]),
            ];
            let target = random(&mut rng, &[nb, nt, hd]);
            let run =
                |vals: &[Tensor], which: usize, repl: Option<&Tensor>| -> (f64, Option<Tensor>) {
                    let tape = Tape::new();
                    let vars: Vec<Var> = vals
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let v = if i == which {
                                repl.unwrap_or(v).clone()
                            } else {
                                v.clone()
                            };
                            if i == which {
                                tape.input(v)
                            } else {
                                tape.constant(v)
                            }
                        })
                        .collect();
                    let h = gru_forward(vars[0], vars[1], vars[2], vars[3], Some(vars[4]));
                    let loss = h.mse(&target);
                    let (_, inputs) = tape.backward(loss, 0).unwrap();
                    (loss.item(), inputs.into_iter().next().map(|(_, g)| g))
                };
            for which in 0..5 {
                let (_, g) = run(&vals, which, None);
                let g = g.unwrap();
                let err = finite_difference_error(&vals[which], &g, 1e-6, |x| {
                    run(&vals, which, Some(x)).0
                });
                assert!(err < 1e-5, "trial {trial} input {which}: {err}");
            }
        }
    }

    #[test]
    fn linear_and_scaled_tanh_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let vals = [
                random(&mut rng, &[2, 3, 4]),
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[5]),
            ];
            let target = random(&mut rng, &[2, 3, 5]);
            let run =
                |vals: &[Tensor], which: usize, repl: Option<&Tensor>| -> (f64, Option<Tensor>) {
                    let tape = Tape::new();
                    let vars: Vec<Var> = vals
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            if i == which {
                                tape.input(repl.unwrap_or(v).clone())
                            } else {
                                tape.constant(v.clone())
                            }
                        })
                        .collect();
                    let y = scaled_tanh(linear_timedistributed(vars[0], vars[1], vars[2]), 10.0);
                    let loss = y.mse(&target);
                    let (_, inputs) = tape.backward(loss, 0).unwrap();
                    (loss.item(), inputs.into_iter().next().map(|(_, g)| g))
                };
            for which in 0..3 {
                let g = run(&vals, which, None).1.unwrap();
                let err = finite_difference_error(&vals[which], &g, 1e-6, |x| {
                    run(&vals, which, Some(x)).0
                });
                assert!(err < 1e-5, "input {which}: {err}");
            }
        }
    }

    #[test]
    fn batching_matches_per_example_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[3, 7, 2]);
        let w = random(&mut rng, &[12, 2]);
        let u = random(&mut rng, &[12, 4]);
        let b = random(&mut rng, &[12]);
        let tape = Tape::new();
        let all = gru_forward(
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(u.clone()),
            tape.constant(b.clone()),
            None,
        )
        .value();
        for i in 0..3 {
            let xi = x.slice(s![i..i + 1, .., ..]).to_owned().into_dyn();
            let one = gru_forward(
                tape.constant(xi),
                tape.constant(w.clone()),
                tape.constant(u.clone()),
                tape.constant(b.clone()),
                None,
            )
            .value();
            let diff = (&one.slice(s![0, .., ..]) - &all.slice(s![i, .., ..])).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-14));
        }
    }

    #[test]
    fn identity_dense_layer_and_bias() {
        let tape = Tape::new();
        let xv = ArrayD::from_shape_fn(vec![1, 4, 3], |ix| (ix[1] * 3 + ix[2]) as f64);
        let eye = Array2::<f64>::eye(3).into_dyn();
        let y = linear_timedistributed(
            tape.constant(xv.clone()),
            tape.constant(eye),
            tape.constant(ArrayD::zeros(vec![3])),
        );
        assert_eq!(*y.value(), xv);
        let c = ndarray::arr1(&[0.5, -1.0]).into_dyn();
        let y = linear_timedistributed(
            tape.constant(ArrayD::zeros(vec![1, 4, 3])),
            tape.constant(ArrayD::from_elem(vec![2, 3], 0.3)),
            tape.constant(c),
        );
        for t in 0..4 {
            assert_eq!(y.value()[[0, t, 0]], 0.5);
            assert_eq!(y.value()[[0, t, 1]], -1.0);
        }
    }

    #[test]
    fn scaled_tanh_values() {
        let tape = Tape::new();
        let x = tape.constant(ndarray::arr1(&[0.0, 1.0, 1e6, -1e6]).into_dyn());
        let y = scaled_tanh(x, 10.0).value();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 3.8079).abs() < 1e-4);
        assert!(y[2] <= 5.0 && y[3] >= -5.0);
        assert!((y[2] - 5.0).abs() < 1e-12);
    }
}
