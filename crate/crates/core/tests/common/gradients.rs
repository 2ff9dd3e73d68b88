//! Finite-difference checks of every differentiable building block in f64.

use lowshot::interp::saliency;
use lowshot::loss::{combined_loss_batch, cosine_matrix, cross_entropy_batch, similarity_loss_batch};
use lowshot::nn::{ArchConfig, ClassifierHead, FeatureExtractor, Mode, Network, ParamKind, ParamStore, ResidualBlock, ResidualBlockSpec};
use lowshot::tape::BnStats;
use lowshot::{finite_diff_check, Tape, Tensor, TensorError, Var};

use super::{kink_free_tensor, loss_err, nn_err, project, random_tensor, rng};

pub const EPS: f64 = 1e-6;

type Check = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>>;

fn run(name: &str, x: Tensor<f64>, f: Check, out: &mut Vec<(String, f64)>) {
    let err = finite_diff_check(f, &x, EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push((name.to_string(), err));
}

/// Largest relative error of a parameter store's tape gradients against
/// central differences taken by perturbing the store itself.
fn store_check(store: &ParamStore<f64>, f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>, bool) -> Result<(Var, lowshot::nn::Bound), TensorError>) -> f64 {
    let mut tape = Tape::new();
    let (root, bound) = f(&mut tape, store, true).unwrap();
    let grads = tape.backward(root).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let (r, _) = f(&mut t, s, false).unwrap();
        t.value(r).item()
    };
    let mut worst: f64 = 0.0;
    for (id, var) in bound.pairs() {
        if store.kind(id) != ParamKind::Trainable {
            continue;
        }
        let g = grads.get(var).unwrap().clone();
        for i in 0..g.numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

fn block_suite(name: &str, spec: ResidualBlockSpec, mode: Mode, out: &mut Vec<(String, f64)>) {
    let mut store = ParamStore::<f64>::new();
    let block = ResidualBlock::new(&mut store, "b", spec, false, &mut rng(11)).unwrap();
    // Non-trivial running statistics for the eval-mode path.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("running_mean") {
            *store.get_mut(id) = random_tensor(store.get(id).shape(), &mut rng(12)).map(|v| 0.1 * v);
        } else if store.name(id).ends_with("running_var") {
            *store.get_mut(id) = random_tensor(store.get(id).shape(), &mut rng(13)).map(|v| 1.0 + 0.5 * v);
        }
    }
    let x = kink_free_tensor(&[2, spec.first.in_channels, 5, 5], &mut rng(14));
    let (b1, s1) = (block.clone(), store.clone());
    run(
        &format!("{name} wrt input"),
        x.clone(),
        Box::new(move |t, x| {
            let bound = s1.bind(t, false);
            let y = b1.forward(t, &s1, &bound, x, mode, &mut Vec::new()).map_err(nn_err)?;
            project(t, y, 15)
        }),
        out,
    );
    let err = store_check(&store, &|t, s, track| {
        let bound = s.bind(t, track);
        let xv = t.constant(x.clone());
        let y = block.forward(t, s, &bound, xv, mode, &mut Vec::new()).map_err(nn_err)?;
        Ok((project(t, y, 15)?, bound))
    });
    out.push((format!("{name} wrt parameters"), err));
}

/// `(check name, max relative error)` for every layer and loss.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();

    let w = random_tensor(&[3, 2, 3, 3], &mut rng(1));
    let b = random_tensor(&[3], &mut rng(2));
    let x = random_tensor(&[2, 2, 6, 5], &mut rng(3));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let (wc, bc) = (w.clone(), b.clone());
        run(
            &format!("conv2d s{stride} p{pad} wrt input"),
            x.clone(),
            Box::new(move |t, x| {
                let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
                let y = t.conv2d(x, w, Some(b), stride, pad)?;
                project(t, y, 4)
            }),
            &mut out,
        );
        let (xc, bc) = (x.clone(), b.clone());
        run(
            &format!("conv2d s{stride} p{pad} wrt weight"),
            w.clone(),
            Box::new(move |t, w| {
                let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
                let y = t.conv2d(x, w, Some(b), stride, pad)?;
                project(t, y, 4)
            }),
            &mut out,
        );
        let (xc, wc) = (x.clone(), w.clone());
        run(
            &format!("conv2d s{stride} p{pad} wrt bias"),
            b.clone(),
            Box::new(move |t, b| {
                let (x, w) = (t.constant(xc.clone()), t.constant(wc.clone()));
                let y = t.conv2d(x, w, Some(b), stride, pad)?;
                project(t, y, 4)
            }),
            &mut out,
        );
    }

    let xb = random_tensor(&[4, 3, 3, 2], &mut rng(5));
    let gamma = random_tensor(&[3], &mut rng(6)).map(|v| 1.0 + 0.5 * v);
    let beta = random_tensor(&[3], &mut rng(7));
    let mean = random_tensor(&[3], &mut rng(8)).map(|v| 0.2 * v);
    let var = random_tensor(&[3], &mut rng(9)).map(|v| 1.0 + 0.5 * v);
    for train in [true, false] {
        let mode = if train { "train" } else { "eval" };
        for which in 0..3 {
            let (xc, gc, bc, mc, vc) = (xb.clone(), gamma.clone(), beta.clone(), mean.clone(), var.clone());
            let target = [&xb, &gamma, &beta][which].clone();
            let label = ["input", "gamma", "beta"][which];
            run(
                &format!("batchnorm {mode} wrt {label}"),
                target,
                Box::new(move |t, leaf| {
                    let mut vars = [None, None, None];
                    vars[which] = Some(leaf);
                    let x = vars[0].unwrap_or_else(|| t.constant(xc.clone()));
                    let g = vars[1].unwrap_or_else(|| t.constant(gc.clone()));
                    let b = vars[2].unwrap_or_else(|| t.constant(bc.clone()));
                    let stats = if train {
                        BnStats::Batch { eps: 1e-5 }
                    } else {
                        BnStats::Fixed { mean: mc.data(), var: vc.data(), eps: 1e-5 }
                    };
                    let (y, _) = t.batch_norm(x, g, b, stats)?;
                    project(t, y, 10)
                }),
                &mut out,
            );
        }
    }

    run(
        "relu",
        kink_free_tensor(&[3, 7], &mut rng(20)),
        Box::new(|t, x| {
            let y = t.relu(x)?;
            project(t, y, 21)
        }),
        &mut out,
    );
    run(
        "avgpool 2x2",
        random_tensor(&[2, 2, 5, 4], &mut rng(22)),
        Box::new(|t, x| {
            let y = t.avg_pool(x, 2)?;
            project(t, y, 23)
        }),
        &mut out,
    );

    let lw = random_tensor(&[4, 6], &mut rng(24));
    let lb = random_tensor(&[4], &mut rng(25));
    let lx = random_tensor(&[3, 6], &mut rng(26));
    for which in 0..3 {
        let (xc, wc, bc) = (lx.clone(), lw.clone(), lb.clone());
        let target = [&lx, &lw, &lb][which].clone();
        let label = ["input", "weight", "bias"][which];
        run(
            &format!("linear wrt {label}"),
            target,
            Box::new(move |t, leaf| {
                let mut vars = [None, None, None];
                vars[which] = Some(leaf);
                let x = vars[0].unwrap_or_else(|| t.constant(xc.clone()));
                let w = vars[1].unwrap_or_else(|| t.constant(wc.clone()));
                let b = vars[2].unwrap_or_else(|| t.constant(bc.clone()));
                let y = t.linear(x, w, b)?;
                project(t, y, 27)
            }),
            &mut out,
        );
    }

    block_suite("residual block identity skip, train", ResidualBlockSpec::basic(3, 3, 1), Mode::Train, &mut out);
    block_suite("residual block projection skip, train", ResidualBlockSpec::basic(2, 3, 2), Mode::Train, &mut out);
    block_suite("residual block projection skip, eval", ResidualBlockSpec::basic(2, 3, 2), Mode::Eval, &mut out);

    // Softmax probabilities.
    run(
        "softmax",
        random_tensor(&[3, 5], &mut rng(30)),
        Box::new(|t, x| {
            let p = t.softmax_rows(x)?;
            project(t, p, 31)
        }),
        &mut out,
    );
    // Mean cross-entropy.
    run(
        "cross-entropy",
        random_tensor(&[4, 5], &mut rng(32)),
        Box::new(|t, x| cross_entropy_batch(t, x, &[0, 4, 2, 2]).map_err(loss_err)),
        &mut out,
    );
    // Cosine similarity, both arguments.
    let fa = random_tensor(&[3, 6], &mut rng(33));
    let fb = random_tensor(&[4, 6], &mut rng(34));
    let fbc = fb.clone();
    run(
        "cosine similarity wrt first",
        fa.clone(),
        Box::new(move |t, a| {
            let b = t.constant(fbc.clone());
            let s = cosine_matrix(t, a, b).map_err(loss_err)?;
            project(t, s, 35)
        }),
        &mut out,
    );
    let fac = fa.clone();
    run(
        "cosine similarity wrt second",
        fb.clone(),
        Box::new(move |t, b| {
            let a = t.constant(fac.clone());
            let s = cosine_matrix(t, a, b).map_err(loss_err)?;
            project(t, s, 35)
        }),
        &mut out,
    );
    // Normalized similarities: softmax over one reference set's cosines.
    let fbc = fb.clone();
    run(
        "normalized similarities",
        fa.clone(),
        Box::new(move |t, a| {
            let b = t.constant(fbc.clone());
            let s = cosine_matrix(t, a, b).map_err(loss_err)?;
            let p = t.softmax_rows(s)?;
            project(t, p, 36)
        }),
        &mut out,
    );
    // Similarity loss against reference features, with every sample using
    // its own reference set.
    let refs = random_tensor(&[6, 6], &mut rng(37));
    let rows = vec![vec![0, 1, 2, 3], vec![4, 1, 5, 3], vec![0, 5, 2, 4]];
    let labels = [1, 3, 0];
    let (rc, rr) = (refs.clone(), rows.clone());
    run(
        "similarity loss wrt features",
        fa.clone(),
        Box::new(move |t, f| {
            let r = t.constant(rc.clone());
            similarity_loss_batch(t, f, r, &rr, &labels).map_err(loss_err)
        }),
        &mut out,
    );
    let (fc, rr) = (fa.clone(), rows.clone());
    run(
        "similarity loss wrt reference features",
        refs.clone(),
        Box::new(move |t, r| {
            let f = t.constant(fc.clone());
            similarity_loss_batch(t, f, r, &rr, &labels).map_err(loss_err)
        }),
        &mut out,
    );
    // Combined objective through a linear head on shared features.
    let head_w = random_tensor(&[4, 6], &mut rng(38));
    let (rc, rr, hw) = (refs.clone(), rows.clone(), head_w.clone());
    run(
        "combined loss, lambda 0.7",
        fa.clone(),
        Box::new(move |t, f| {
            let w = t.constant(hw.clone());
            let b = t.constant(Tensor::zeros(&[4]));
            let logits = t.linear(f, w, b)?;
            let ce = cross_entropy_batch(t, logits, &labels).map_err(loss_err)?;
            let r = t.constant(rc.clone());
            let ls = similarity_loss_batch(t, f, r, &rr, &labels).map_err(loss_err)?;
            combined_loss_batch(t, ce, ls, 0.7).map_err(loss_err)
        }),
        &mut out,
    );
    out
}

/// Small residual network used for saliency checks.
pub fn saliency_network() -> Network<f64> {
    let arch = ArchConfig {
        stem_channels: Some(2),
        block_channels: [2, 3, 3, 4],
        block_strides: [1, 2, 1, 2],
        pool: 2,
        ..ArchConfig::default()
    };
    let mut extractor = FeatureExtractor::<f64>::new(arch, (8, 12), 41).unwrap();
    let ids: Vec<_> = extractor.params.ids().collect();
    for id in ids {
        let name = extractor.params.name(id).to_string();
        if name.ends_with("running_mean") {
            let t = random_tensor(extractor.params.get(id).shape(), &mut rng(42)).map(|v| 0.1 * v);
            *extractor.params.get_mut(id) = t;
        } else if name.ends_with("running_var") {
            let t = random_tensor(extractor.params.get(id).shape(), &mut rng(43)).map(|v| 1.0 + 0.3 * v);
            *extractor.params.get_mut(id) = t;
        }
    }
    let head = ClassifierHead::new(extractor.feature_dim(), 5, 44);
    Network::new(extractor, head).unwrap()
}

/// Largest absolute difference between the saliency map of every class and
/// central differences of the eval-mode logit.
pub fn saliency_fd_error() -> f64 {
    let net = saliency_network();
    let image = random_tensor(&[8, 12], &mut rng(45)).map(|v| 0.5 + 0.5 * v);
    let logit = |img: &Tensor<f64>, c: usize| {
        let batch = img.clone().reshape(&[1, 1, 8, 12]).unwrap();
        net.logits(&batch).unwrap().data()[c]
    };
    let mut worst: f64 = 0.0;
    for class in 0..5 {
        let map = saliency(&net, &image, class).unwrap();
        for i in 0..image.numel() {
            let mut plus = image.clone();
            plus.data_mut()[i] += EPS;
            let mut minus = image.clone();
            minus.data_mut()[i] -= EPS;
            let numeric = (logit(&plus, class) - logit(&minus, class)) / (2.0 * EPS);
            worst = worst.max((map.gradient[i] - numeric).abs());
        }
    }
    worst
}
