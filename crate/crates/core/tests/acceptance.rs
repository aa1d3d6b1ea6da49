//! Acceptance suite: end-to-end checks that the library's pieces are
//! correct and work together — autodiff gradients, nearest-point projection
//! geometry, PDE solver cross-validation, reduced-order error orderings,
//! trained-model forecasting accuracy, and linear-baseline recovery.
//!
//! Each test covers one acceptance criterion and prints a `[PASS]` line
//! with its headline metrics (visible with `--nocapture`); an assertion
//! failure marks that criterion failed.

use gdvae_core::analysis::l1_relative_error;
use gdvae_core::baselines::{cole_hopf_rom, dmd, pod};
use gdvae_core::diffcore::{
    activation, add, add_const, add_scalar, affine, conv2d, custom_gradient_node, exp,
    finite_difference_check, linear, mat_const, mul_const, reshape, row_add_const, scale, square,
    sub_const, sum_all, tconv2d, Activation, NodeId, ParamId, ParamSet, Tape, Tensor,
};
use gdvae_core::manifold::{build_point_cloud, ManifoldAtlas};
use gdvae_core::pde_data::{
    brusselator_solve, burgers_solve_fd, burgers_solve_spectral, sample_ic,
    BrusselatorIntegrator, BrusselatorParams, Field2D, IcFamily,
};
use gdvae_core::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

const SUITE_SEED: u64 = 0xACCE_97;

fn pass(name: &str, detail: String) {
    println!("[PASS] {name}: {detail}");
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Like `rand_tensor` but keeps every entry at least `margin` away from
/// zero, so finite differences never straddle an activation kink.
fn rand_tensor_off_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------------

/// Builds `loss = Σ (op(x))²`, backpropagates, and finite-difference checks
/// the gradient w.r.t. the input and each listed parameter. Returns the
/// worst relative error across all of them.
fn fd_op_trial(
    ps: &ParamSet,
    check_params: &[ParamId],
    x0: &Tensor,
    build: &dyn Fn(&mut Tape, &ParamSet, NodeId) -> NodeId,
) -> f64 {
    let run = |ps: &ParamSet, xin: &Tensor| -> (Tape, NodeId, NodeId) {
        let mut tape = Tape::new();
        let x = tape.input(xin.clone());
        let y = build(&mut tape, ps, x);
        let sq = square(&mut tape, y);
        let loss = sum_all(&mut tape, sq);
        (tape, x, loss)
    };
    let (tape, xnode, loss) = run(ps, x0);
    let mut ps2 = ps.clone();
    let grads = tape.backward(loss, &mut ps2).expect("backward");

    let mut fx = |xin: &Tensor| {
        let (t, _, l) = run(ps, xin);
        t.value(l).item()
    };
    let mut worst = finite_difference_check(&mut fx, &grads[xnode.index()], x0, 1e-6);

    for &pid in check_params {
        let p0 = ps.value(pid).clone();
        let mut fp = |pv: &Tensor| {
            let mut alt = ps.clone();
            alt.get_mut(pid).value = pv.clone();
            let (t, _, l) = run(&alt, x0);
            t.value(l).item()
        };
        worst = worst.max(finite_difference_check(&mut fp, ps2.grad(pid), &p0, 1e-6));
    }
    worst
}

/// The five latent-space geometries exercised throughout the suite.
fn five_manifolds() -> Vec<(&'static str, ManifoldAtlas)> {
    vec![
        ("circle", ManifoldAtlas::circle()),
        ("two-circle product", ManifoldAtlas::product_of_circles(2)),
        ("cylinder", ManifoldAtlas::cylinder(1, 1, (-2.0, 2.0))),
        ("ring torus", ManifoldAtlas::torus3d(1.0, 0.4).unwrap()),
        ("klein surface", ManifoldAtlas::klein4d(1.0, 0.4, 48).unwrap()),
    ]
}

/// Random point near (but off) the manifold: a chart point plus bounded
/// ambient noise small enough to stay inside the projector's good region.
fn sample_near_manifold(atlas: &ManifoldAtlas, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let chart = &atlas.charts[0];
    let u: Vec<f64> = chart
        .domain
        .iter()
        .zip(&chart.periodic)
        .map(|(&(lo, hi), &wraps)| {
            // Keep free (non-periodic) coordinates away from the box edge so
            // noisy queries stay well inside the sampled chart region.
            let pad = if wraps { 0.0 } else { 0.35 };
            rng.gen_range(lo + pad..hi - pad)
        })
        .collect();
    let on = chart.eval(&u).z;
    on.iter().map(|&c| c + rng.gen_range(-noise..noise)).collect()
}

#[test]
fn c01_gradient_suite_ops_and_projections() {
    let mut rng = stream_rng(SUITE_SEED, 1);
    let trials = 20;
    let tol = 1e-4;
    let mut worst_overall: (f64, String) = (0.0, String::new());
    let note = |name: &str, err: f64, worst: &mut (f64, String)| {
        assert!(
            err < tol,
            "{name}: finite-difference relative error {err:.3e} exceeds {tol:.0e}"
        );
        if err > worst.0 {
            *worst = (err, name.to_string());
        }
    };

    // --- tensor ops ---
    for t in 0..trials {
        let seed_rng = |rng: &mut ChaCha8Rng| stream_rng(rng.gen(), t as u64);
        {
            // affine: y = x W^T + b, with weight and bias gradients.
            let mut r = seed_rng(&mut rng);
            let mut ps = ParamSet::new();
            let w = ps.add(rand_tensor(vec![3, 4], &mut r, -1.0, 1.0));
            let b = ps.add(rand_tensor(vec![3], &mut r, -1.0, 1.0));
            let x0 = rand_tensor(vec![2, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[w, b], &x0, &|t, p, x| affine(t, p, x, w, b).unwrap());
            note("affine", err, &mut worst_overall);
        }
        {
            // linear: y = x W^T, with weight gradient.
            let mut r = seed_rng(&mut rng);
            let mut ps = ParamSet::new();
            let w = ps.add(rand_tensor(vec![3, 4], &mut r, -1.0, 1.0));
            let x0 = rand_tensor(vec![2, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[w], &x0, &|t, p, x| linear(t, p, x, w).unwrap());
            note("linear", err, &mut worst_overall);
        }
        {
            // activations, sampled away from the kink at zero.
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor_off_zero(vec![2, 6], &mut r, 0.05);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| {
                activation(t, x, Activation::Relu)
            });
            note("activation/relu", err, &mut worst_overall);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| {
                activation(t, x, Activation::LeakyRelu(0.1))
            });
            note("activation/leaky", err, &mut worst_overall);
        }
        {
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor(vec![2, 5], &mut r, -1.0, 1.0);
            let c: f64 = r.gen_range(0.5..2.0);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| scale(t, x, c));
            note("scale", err, &mut worst_overall);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| add_scalar(t, x, c));
            note("add_scalar", err, &mut worst_overall);
        }
        {
            // constant-tensor arithmetic: add/sub/mul against a fixed tensor.
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor(vec![2, 5], &mut r, -1.0, 1.0);
            let k = rand_tensor(vec![2, 5], &mut r, 0.5, 1.5);
            let kc = k.clone();
            let err = fd_op_trial(&ps, &[], &x0, &move |t, _, x| {
                add_const(t, x, &kc).unwrap()
            });
            note("add_const", err, &mut worst_overall);
            let kc = k.clone();
            let err = fd_op_trial(&ps, &[], &x0, &move |t, _, x| {
                sub_const(t, x, &kc).unwrap()
            });
            note("sub_const", err, &mut worst_overall);
            let kc = k.clone();
            let err = fd_op_trial(&ps, &[], &x0, &move |t, _, x| {
                mul_const(t, x, &kc).unwrap()
            });
            note("mul_const", err, &mut worst_overall);
        }
        {
            // broadcast row add and constant matrix multiply.
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor(vec![3, 4], &mut r, -1.0, 1.0);
            let v = rand_tensor(vec![4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[], &x0, &move |t, _, x| {
                row_add_const(t, x, &v).unwrap()
            });
            note("row_add_const", err, &mut worst_overall);
            let m = rand_tensor(vec![5, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[], &x0, &move |t, _, x| mat_const(t, x, &m).unwrap());
            note("mat_const", err, &mut worst_overall);
        }
        {
            // add: gradient must flow through both operands, so feed the
            // input in twice through different linear heads.
            let mut r = seed_rng(&mut rng);
            let mut ps = ParamSet::new();
            let w1 = ps.add(rand_tensor(vec![3, 4], &mut r, -1.0, 1.0));
            let w2 = ps.add(rand_tensor(vec![3, 4], &mut r, -1.0, 1.0));
            let x0 = rand_tensor(vec![2, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[w1, w2], &x0, &|t, p, x| {
                let a = linear(t, p, x, w1).unwrap();
                let b = linear(t, p, x, w2).unwrap();
                add(t, a, b).unwrap()
            });
            note("add", err, &mut worst_overall);
        }
        {
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor(vec![2, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| exp(t, x));
            note("exp", err, &mut worst_overall);
            // square's loss gradient is quartic in x (4x³ after the chain
            // rule), so keep entries away from zero where finite
            // differences are pure cancellation noise.
            let xq = rand_tensor_off_zero(vec![2, 4], &mut r, 0.3);
            let err = fd_op_trial(&ps, &[], &xq, &|t, _, x| square(t, x));
            note("square", err, &mut worst_overall);
            // sum_all's loss gradient is 2·Σx for every entry; keep the sum
            // itself away from zero for the same reason.
            let xs = rand_tensor(vec![2, 4], &mut r, 0.2, 1.0);
            let err = fd_op_trial(&ps, &[], &xs, &|t, _, x| sum_all(t, x));
            note("sum_all", err, &mut worst_overall);
            let xr = rand_tensor_off_zero(vec![2, 4], &mut r, 0.05);
            let err = fd_op_trial(&ps, &[], &xr, &|t, _, x| {
                reshape(t, x, vec![4, 2]).unwrap()
            });
            note("reshape", err, &mut worst_overall);
        }
        {
            // conv2d / tconv2d with kernel gradients, alternating geometry.
            let mut r = seed_rng(&mut rng);
            let (stride, padding) = if t % 2 == 0 { (1, 1) } else { (2, 0) };
            let mut ps = ParamSet::new();
            let k = ps.add(rand_tensor(vec![3, 2, 3, 3], &mut r, -0.7, 0.7));
            let x0 = rand_tensor(vec![2, 2, 5, 5], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[k], &x0, &move |t, p, x| {
                conv2d(t, p, x, k, stride, padding).unwrap()
            });
            note("conv2d", err, &mut worst_overall);

            let mut ps = ParamSet::new();
            let k = ps.add(rand_tensor(vec![2, 3, 3, 3], &mut r, -0.7, 0.7));
            let x0 = rand_tensor(vec![2, 2, 3, 3], &mut r, -1.0, 1.0);
            let out_hw = if t % 2 == 0 { (7, 7) } else { (5, 5) };
            let (stride, padding) = if t % 2 == 0 { (2, 0) } else { (1, 0) };
            let err = fd_op_trial(&ps, &[k], &x0, &move |t, p, x| {
                tconv2d(t, p, x, k, stride, padding, out_hw).unwrap()
            });
            note("tconv2d", err, &mut worst_overall);
        }
        {
            // custom_gradient_node with a genuinely nonlinear map (sin) and
            // its hand-written vector-Jacobian product.
            let mut r = seed_rng(&mut rng);
            let ps = ParamSet::new();
            let x0 = rand_tensor(vec![2, 4], &mut r, -1.0, 1.0);
            let err = fd_op_trial(&ps, &[], &x0, &|t, _, x| {
                let xv = t.value(x).clone();
                custom_gradient_node(
                    t,
                    x,
                    |v| {
                        Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.sin()).collect())
                    },
                    Box::new(move |g| {
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(xv.data())
                                .map(|(gi, xi)| gi * xi.cos())
                                .collect(),
                        )
                        .unwrap()
                    }),
                )
                .unwrap()
            });
            note("custom_gradient_node", err, &mut worst_overall);
        }
    }

    // --- nearest-point projection Jacobians on all five manifolds ---
    for (name, atlas) in five_manifolds() {
        let n = atlas.embed_dim;
        let mut done = 0;
        let mut attempts = 0;
        while done < trials {
            attempts += 1;
            assert!(attempts < trials * 10, "{name}: too many degenerate draws");
            let w = sample_near_manifold(&atlas, &mut rng, 0.25);
            let res = atlas.project(&w).expect("projection");
            if res.degenerate {
                continue;
            }
            // Scalar probe f(w) = c · z*(w); analytic gradient J^T c.
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut analytic = vec![0.0; n];
            for row in 0..n {
                for col in 0..n {
                    analytic[col] += c[row] * res.jacobian[row * n + col];
                }
            }
            let atlas_ref = &atlas;
            let cc = c.clone();
            let mut f = |win: &Tensor| {
                let r = atlas_ref.project(win.data()).expect("projection");
                r.z.iter().zip(&cc).map(|(a, b)| a * b).sum::<f64>()
            };
            let err = finite_difference_check(
                &mut f,
                &Tensor::vector(analytic),
                &Tensor::vector(w),
                1e-6,
            );
            assert!(
                err < tol,
                "{name} projection: FD relative error {err:.3e} exceeds {tol:.0e}"
            );
            if err > worst_overall.0 {
                worst_overall = (err, format!("{name} projection"));
            }
            done += 1;
        }
    }

    pass(
        "c01_gradient_suite_ops_and_projections",
        format!(
            "all ops and 5 projections, {trials} trials each, worst rel err {:.2e} ({})",
            worst_overall.0, worst_overall.1
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: projection geometry on all five manifolds
// ---------------------------------------------------------------------------

#[test]
fn c02_projection_properties_five_manifolds() {
    let mut rng = stream_rng(SUITE_SEED, 2);
    let trials = 30;
    // (cloud resolution per intrinsic axis, allowed gap between the cloud
    //  minimum and the projector's minimum — the grid discretization bound)
    let cloud_cfg: [(usize, f64); 5] = [
        (4096, 2e-3),
        (512, 2e-2),
        (512, 2e-2),
        (512, 2e-2),
        (192, 8e-2),
    ];
    let mut headline = String::new();

    for (idx, (name, atlas)) in five_manifolds().into_iter().enumerate() {
        let (resolution, cloud_slack) = cloud_cfg[idx];
        let cloud = build_point_cloud(&atlas, resolution).expect("point cloud");
        let n = atlas.embed_dim;
        let m = atlas.intrinsic_dim;
        let (mut worst_idem, mut worst_resid, mut worst_tan, mut worst_gap) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64);

        for _ in 0..trials {
            let w = sample_near_manifold(&atlas, &mut rng, 0.25);
            let res = atlas.project(&w).expect("projection");
            assert!(!res.degenerate, "{name}: unexpected degenerate projection");

            // Idempotence: projecting a manifold point returns it.
            let again = atlas.project(&res.z).expect("re-projection");
            let idem = dist(&again.z, &res.z);
            worst_idem = worst_idem.max(idem);
            assert!(idem < 1e-9, "{name}: re-projection moved by {idem:.3e}");

            // Constraint residual at the solution, plus chart consistency.
            worst_resid = worst_resid.max(res.residual);
            assert!(
                res.residual < 1e-9,
                "{name}: constraint residual {:.3e}",
                res.residual
            );
            let chart = &atlas.charts[res.chart_id];
            let on = chart.eval(&res.u);
            let chart_gap = dist(&on.z, &res.z);
            assert!(
                chart_gap < 1e-9,
                "{name}: chart re-evaluation differs by {chart_gap:.3e}"
            );

            // Tangency: every Jacobian column lies in the tangent span.
            // Orthonormalize the chart tangent vectors, then measure the
            // out-of-span component of each column.
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for i in 0..m {
                let mut t: Vec<f64> = (0..n).map(|row| on.jac[row * m + i]).collect();
                for q in &basis {
                    let d: f64 = t.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (tv, qv) in t.iter_mut().zip(q) {
                        *tv -= d * qv;
                    }
                }
                let norm = l2(&t);
                assert!(norm > 1e-12, "{name}: rank-deficient tangent basis");
                for tv in t.iter_mut() {
                    *tv /= norm;
                }
                basis.push(t);
            }
            for col in 0..n {
                let v: Vec<f64> = (0..n).map(|row| res.jacobian[row * n + col]).collect();
                let mut out = v.clone();
                for q in &basis {
                    let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (ov, qv) in out.iter_mut().zip(q) {
                        *ov -= d * qv;
                    }
                }
                let tan = l2(&out) / l2(&v).max(1.0);
                worst_tan = worst_tan.max(tan);
                assert!(
                    tan < 1e-6,
                    "{name}: Jacobian column {col} leaves the tangent space by {tan:.3e}"
                );
            }

            // Minimality against a dense on-manifold point cloud: no cloud
            // point may beat the projector (up to roundoff), and the best
            // cloud point must come within the grid discretization bound.
            let d_proj = dist(&w, &res.z);
            let near = cloud.nearest(&w);
            let cp = &cloud.points[near * n..(near + 1) * n];
            let d_cloud = dist(&w, cp);
            assert!(
                d_proj <= d_cloud + 1e-9,
                "{name}: cloud point beats projector ({d_cloud:.6e} < {d_proj:.6e})"
            );
            let gap = d_cloud - d_proj;
            worst_gap = worst_gap.max(gap);
            assert!(
                gap <= cloud_slack,
                "{name}: projector not near the cloud minimum (gap {gap:.3e})"
            );
        }
        headline.push_str(&format!(
            "{name}: idem {worst_idem:.1e} resid {worst_resid:.1e} tan {worst_tan:.1e} gap {worst_gap:.1e}; "
        ));
    }

    pass(
        "c02_projection_properties_five_manifolds",
        format!("{trials} points per manifold — {headline}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: PDE solver cross-validation
// ---------------------------------------------------------------------------

#[test]
fn c03_solver_cross_validation() {
    let family = IcFamily::MixedSine;
    let nu = 0.02;

    // Spectral vs. independent finite-difference solver across the
    // initial-condition family, at two times up to t = 1.
    let mut worst_gap = 0.0f64;
    let mut worst_mean = 0.0f64;
    for &alpha in &[0.1, 0.35, 0.6, 0.85] {
        let ic = family.condition(&[alpha]).unwrap();
        let u0 = sample_ic(ic, 512).unwrap();
        for &t in &[0.5, 1.0] {
            let sp = burgers_solve_spectral(&u0, nu, t).unwrap();
            let fd = burgers_solve_fd(&u0, nu, t, 4e-5, 1.0 / 512.0).unwrap();
            let gap = l1_relative_error(sp.values(), fd.values()).unwrap();
            worst_gap = worst_gap.max(gap);
            assert!(
                gap < 1e-3,
                "spectral vs finite-difference gap {gap:.3e} at alpha={alpha}, t={t}"
            );
            let mean_drift = (sp.mean() - u0.mean()).abs();
            worst_mean = worst_mean.max(mean_drift);
            assert!(
                mean_drift < 1e-10,
                "mean not conserved: drift {mean_drift:.3e} at alpha={alpha}, t={t}"
            );
        }
    }

    // The reaction-diffusion fixed point (a, b/a) is stationary.
    let params = BrusselatorParams::default();
    let fixed = Field2D::constant(16, 16, params.a, params.b / params.a);
    let snaps = brusselator_solve(&fixed, &params, 5.0, 5.0).unwrap();
    let (_, last) = snaps.last().unwrap();
    let mut worst_fix = 0.0f64;
    for i in 0..last.cells() {
        worst_fix = worst_fix.max((last.u[i] - params.a).abs());
        worst_fix = worst_fix.max((last.v[i] - params.b / params.a).abs());
    }
    assert!(
        worst_fix < 1e-9,
        "fixed point drifted by {worst_fix:.3e} over 5 time units"
    );

    // Explicit and semi-implicit integrators agree on a perturbed state.
    let l = 16;
    let mut u = vec![0.0; l * l];
    let mut v = vec![0.0; l * l];
    for y in 0..l {
        for x in 0..l {
            let (fx, fy) = (x as f64 / l as f64, y as f64 / l as f64);
            u[y * l + x] = 1.0 + 0.1 * (TAU * fx).sin() * (TAU * fy).cos();
            v[y * l + x] = 3.0 - 0.1 * (TAU * fx).cos();
        }
    }
    let ic = Field2D::new(l, l, u, v).unwrap();
    let expl = BrusselatorParams {
        integrator: BrusselatorIntegrator::ExplicitEuler,
        ..BrusselatorParams::default()
    };
    let semi = BrusselatorParams {
        integrator: BrusselatorIntegrator::SemiImplicit,
        ..BrusselatorParams::default()
    };
    let se = brusselator_solve(&ic, &expl, 1.0, 1.0).unwrap();
    let ss = brusselator_solve(&ic, &semi, 1.0, 1.0).unwrap();
    let (_, fe) = se.last().unwrap();
    let (_, fs) = ss.last().unwrap();
    let gap_u = l1_relative_error(&fe.u, &fs.u).unwrap();
    let gap_v = l1_relative_error(&fe.v, &fs.v).unwrap();
    assert!(
        gap_u < 1e-3 && gap_v < 1e-3,
        "integrator disagreement: u {gap_u:.3e}, v {gap_v:.3e}"
    );

    pass(
        "c03_solver_cross_validation",
        format!(
            "spectral-vs-FD worst {worst_gap:.2e}, mean drift {worst_mean:.1e}, \
             fixed point {worst_fix:.1e}, integrator gap u {gap_u:.2e} v {gap_v:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: low-mode transform ROM error ordering
// ---------------------------------------------------------------------------

#[test]
fn c04_truncated_transform_rom_error_ordering() {
    let family = IcFamily::MixedSine;
    let (nu, t, n) = (0.02, 1.0, 128);
    let grid = 16;
    let mut errs = [0.0f64; 3]; // 2, 4, 6 retained dimensions

    for i in 0..grid {
        let alpha = (i as f64 + 0.5) / grid as f64;
        let ic = family.condition(&[alpha]).unwrap();
        let u0 = sample_ic(ic, n).unwrap();
        let truth = burgers_solve_spectral(&u0, nu, t).unwrap();
        for (slot, n_f) in [2usize, 4, 6].into_iter().enumerate() {
            let rom = cole_hopf_rom(&u0, nu, t, n_f).unwrap();
            errs[slot] += l1_relative_error(rom.values(), truth.values()).unwrap();
        }
    }
    for e in errs.iter_mut() {
        *e /= grid as f64;
    }

    assert!(
        errs[2] < errs[1] && errs[1] < errs[0],
        "error ordering violated: 2D {:.3e}, 4D {:.3e}, 6D {:.3e}",
        errs[0],
        errs[1],
        errs[2]
    );
    assert!(
        errs[2] <= 1e-4,
        "6-dimensional ROM error {:.3e} exceeds 1e-4",
        errs[2]
    );

    pass(
        "c04_truncated_transform_rom_error_ordering",
        format!(
            "mean errors over {grid} initial conditions at t={t}: \
             2D {:.2e} > 4D {:.2e} > 6D {:.2e} (6D <= 1e-4)",
            errs[0], errs[1], errs[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 12: linear reduction oracles
// ---------------------------------------------------------------------------

/// Builds an orthogonal matrix from a QR factorization of a random one.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &q {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let norm = l2(&v);
        if norm < 1e-6 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        q.push(v);
    }
    q
}

#[test]
fn c12_linear_reduction_oracles() {
    let mut worst_eig = 0.0f64;
    // Dynamic-mode eigenvalue recovery on constructed linear systems:
    // A = Q B Q^T with B block diagonal (three real modes, one rotation).
    for trial in 0..5 {
        let mut rng = stream_rng(SUITE_SEED, 120 + trial);
        let n = 6;
        let (re, im) = (0.5f64, 0.3f64);
        let reals = [0.9f64, -0.8, 0.3, 0.96];
        let q = random_orthogonal(n, &mut rng);
        // B blocks: diag(reals[0..2]) ++ [[re,-im],[im,re]] ++ diag(reals[3]).
        let mut b = vec![vec![0.0; n]; n];
        b[0][0] = reals[0];
        b[1][1] = reals[1];
        b[2][2] = re;
        b[2][3] = -im;
        b[3][2] = im;
        b[3][3] = re;
        b[4][4] = reals[2];
        b[5][5] = reals[3];
        // A = Q^T B Q (similar to B, so it has B's eigenvalues).
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    for m in 0..n {
                        s += q[k][i] * b[k][m] * q[m][j];
                    }
                }
                a[i][j] = s;
            }
        }

        let steps = 40;
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut first = Vec::with_capacity(steps * n);
        let mut second = Vec::with_capacity(steps * n);
        for _ in 0..steps {
            let next: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| a[i][j] * x[j]).sum())
                .collect();
            first.extend_from_slice(&x);
            second.extend_from_slice(&next);
            x = next;
        }
        let xf = Tensor::new(vec![steps, n], first).unwrap();
        let xs = Tensor::new(vec![steps, n], second).unwrap();
        let rom = dmd(&xf, &xs, n, false).unwrap();

        let mut got: Vec<(f64, f64)> = rom
            .eig_re
            .iter()
            .zip(&rom.eig_im)
            .map(|(&r, &i)| (r, i))
            .collect();
        let mut want = vec![
            (reals[0], 0.0),
            (reals[1], 0.0),
            (re, im),
            (re, -im),
            (reals[2], 0.0),
            (reals[3], 0.0),
        ];
        let key = |p: &(f64, f64)| (p.0, p.1);
        got.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        want.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        for (g, w) in got.iter().zip(&want) {
            let d = ((g.0 - w.0).powi(2) + (g.1 - w.1).powi(2)).sqrt();
            worst_eig = worst_eig.max(d);
            assert!(
                d < 1e-8,
                "trial {trial}: eigenvalue {g:?} vs expected {w:?} (|diff| {d:.3e})"
            );
        }
    }

    // Optimal low-rank property: the rank-r orthogonal reconstruction error
    // equals the energy in the discarded singular values, exactly.
    let mut rng = stream_rng(SUITE_SEED, 126);
    let (m, n, r) = (40usize, 12usize, 5usize);
    let snaps = rand_tensor(vec![m, n], &mut rng, -1.0, 1.0);
    let mut worst_pod = 0.0f64;
    for mean_subtract in [false, true] {
        let full = pod(&snaps, n, mean_subtract).unwrap();
        let red = pod(&snaps, r, mean_subtract).unwrap();
        let basis = red.basis.data(); // [n, r]
        let mut err2 = 0.0;
        for row in 0..m {
            let x: Vec<f64> = (0..n)
                .map(|j| snaps.data()[row * n + j] - red.mean[j])
                .collect();
            let z: Vec<f64> = (0..r)
                .map(|k| (0..n).map(|j| x[j] * basis[j * r + k]).sum())
                .collect();
            for j in 0..n {
                let xhat: f64 = (0..r).map(|k| basis[j * r + k] * z[k]).sum();
                err2 += (x[j] - xhat) * (x[j] - xhat);
            }
        }
        let tail: f64 = full.singular_values[r..].iter().map(|s| s * s).sum();
        let rel = (err2 - tail).abs() / tail.max(1e-300);
        worst_pod = worst_pod.max(rel);
        assert!(
            rel < 1e-8,
            "rank-{r} reconstruction energy {err2:.12e} vs discarded {tail:.12e} \
             (rel {rel:.3e}, mean_subtract={mean_subtract})"
        );
    }

    pass(
        "c12_linear_reduction_oracles",
        format!(
            "eigenvalue recovery worst |diff| {worst_eig:.2e}; \
             low-rank energy identity worst rel {worst_pod:.2e}"
        ),
    );
}
