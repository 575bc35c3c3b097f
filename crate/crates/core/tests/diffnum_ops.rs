use avsync::diffnum::gradcheck::{self, relative_error};
use avsync::diffnum::{Graph, ParamSet, Tensor};
use avsync::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_shape() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 4]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 4]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn avg_pool_of_constant_is_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 30, 2], 2.5));
    let y = g.avg_pool(x, 1, 7, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 12, 2]);
    assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.mul(x, x).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn unused_input_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let p = g.param(Tensor::from_vec(vec![7.0]));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(p).is_none());
    assert_eq!(grads.wrt(p).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Backward(_))));
    let d = g.detach(y);
    let s = g.sum(d);
    assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    let other = Graph::new();
    let loss = g.sum(x);
    assert!(matches!(other.backward(loss), Err(Error::Backward(_))));
}

#[test]
fn non_finite_detection() {
    let t = Tensor::from_vec(vec![0.0, f64::NAN]);
    let err = t.check_finite("probe").unwrap_err().to_string();
    assert!(err.contains("probe") && err.contains("element 1"), "{err}");
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

/// 12-parameter two-layer tanh network; gradients against central differences.
#[test]
fn small_mlp_matches_finite_differences() {
    let mut r = rng(11);
    let mut p = ParamSet::new();
    p.insert("w1", Tensor::randn(&[2, 3], 0.8, &mut r));
    p.insert("b1", Tensor::randn(&[3], 0.3, &mut r));
    p.insert("w2", Tensor::randn(&[3, 1], 0.8, &mut r));
    assert_eq!(p.num_values(), 12);
    let x = Tensor::randn(&[5, 2], 1.0, &mut r);
    let y = Tensor::randn(&[5, 1], 1.0, &mut r);
    let report = gradcheck::check(
        &p,
        |g, b| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let h = g.linear(xv, b.get("w1"), Some(b.get("b1")))?;
            let h = g.tanh(h);
            let o = g.matmul(h, b.get("w2"))?;
            let d = g.sub(o, yv)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert_eq!(report.checked, 12);
    assert!(report.passes(1e-4), "{report:?}");
}

/// Every primitive with a reverse rule, chained into one scalar.
#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let mut p = ParamSet::new();
        p.insert("x", Tensor::randn(&[2, 9, 4], 0.7, &mut r));
        p.insert("w", Tensor::randn(&[3, 4, 4], 0.5, &mut r));
        p.insert("m", Tensor::randn(&[4, 4], 0.5, &mut r));
        p.insert("bias", Tensor::randn(&[4], 0.5, &mut r));
        p.insert("pos", Tensor::uniform(&[2, 4], 1.0, &mut r).map(|v| v.abs() + 0.5));
        let report = gradcheck::check(
            &p,
            |g, b| {
                let x = b.get("x");
                let conv = g.conv1d(x, b.get("w"), 2)?; // [2,4,4]
                let conv = g.add(conv, b.get("bias"))?;
                let act = g.gelu(conv);
                let ln = g.layer_norm(act, 1e-5);
                let sm = g.softmax(ln);
                let lsm = g.log_softmax(conv);
                let prod = g.mul(sm, lsm)?;
                let padded = g.pad_replicate(x, 1, 3, 3)?;
                let pooled = g.avg_pool(padded, 1, 7, 2)?; // [2,6,4]
                let up = g.interp_linear(pooled, 1, 9)?;
                let sig = g.sigmoid(up);
                let rel = g.relu(x);
                let mix = g.sub(sig, rel)?;
                let att = g.attention(mix, x, x, 2, None)?;
                let perm = g.permute(att, &[0, 2, 1])?; // [2,4,9]
                let flat = g.reshape(perm, &[8, 9])?;
                let sel = g.index_select(flat, 1, &[0, 0, 3, 8])?;
                let sel = g.reshape(sel, &[2, 4, 4])?;
                let bm = g.bmm(sel, prod)?;
                let lin = g.linear(bm, b.get("m"), None)?;
                let cat = g.concat(&[lin, prod], 1)?;
                let s1 = g.sum_axis(cat, 1)?;
                let cos = g.cosine(s1, b.get("pos"), 1e-8)?;
                let n = g.l2_norm(s1);
                let e = g.exp(cos);
                let lg = g.log(b.get("pos"));
                let sq = g.sqrt(b.get("pos"));
                let ratio = g.div(lg, sq)?;
                let t = g.tanh(ratio);
                let a = g.mean(e);
                let c = g.mean(n);
                let d = g.sum(t);
                let ac = g.add(a, c)?;
                let tot = g.add(ac, d)?;
                Ok(g.add_scalar(tot, 0.5))
            },
            1e-5,
            Some(12),
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn causal_mask_blocks_future_positions() {
    let mut r = rng(5);
    let x = Tensor::randn(&[1, 6, 4], 1.0, &mut r);
    let mut mask = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        for j in i + 1..6 {
            mask.data_mut()[i * 6 + j] = -1e9;
        }
    }
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.attention(v, v, v, 2, Some(&mask)).unwrap();
        g.value(y).clone()
    };
    let base = run(x.clone());
    let mut perturbed = x.clone();
    for c in 0..4 {
        perturbed.data_mut()[5 * 4 + c] += 3.0;
    }
    let out = run(perturbed);
    for t in 0..5 {
        for c in 0..4 {
            assert_eq!(base.data()[t * 4 + c], out.data()[t * 4 + c]);
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(3);
    let x0 = Tensor::randn(&[4, 3], 1.0, &mut r);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let a = g.tanh(x);
        let la = g.sum(a);
        let b = g.square(x);
        let lb = g.mean(b);
        let loss = match which {
            0 => la,
            1 => lb,
            _ => g.add(la, lb).unwrap(),
        };
        g.backward(loss).unwrap().wrt(x)
    };
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..12 {
        let sum = ga.data()[i] + gb.data()[i];
        assert!(relative_error(gs.data()[i], sum) < 1e-14);
    }
}

#[test]
fn broadcasting_gradients_reduce_to_input_shape() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(&[3, 2], 1.0));
    let b = g.param(Tensor::from_vec(vec![2.0, 3.0]));
    let c = g.mul(a, b).unwrap();
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(b).data(), &[3.0, 3.0]);
    assert_eq!(grads.wrt(a).data(), &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
}

#[test]
fn frozen_inference_is_shareable_across_threads() {
    let mut r = rng(8);
    let mut p = ParamSet::new();
    p.insert("w", Tensor::randn(&[3, 3], 1.0, &mut r));
    let p = std::sync::Arc::new(p);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let p = p.clone();
            std::thread::spawn(move || {
                let mut g = Graph::new();
                let b = p.bind(&mut g, false);
                let x = g.constant(Tensor::full(&[1, 3], 1.0));
                let y = g.matmul(x, b.get("w")).unwrap();
                g.value(y).data().to_vec()
            })
        })
        .collect();
    let outs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn probes_straddling_a_kink_retry_with_a_smaller_step() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::from_vec(vec![0.0]));
    // relu(x + 3e-6) has slope 1 at zero, but a 1e-5 central difference sees 0.65.
    let report = gradcheck::check(
        &p,
        |g, b| {
            let s = g.add_scalar(b.get("x"), 3e-6);
            let r = g.relu(s);
            Ok(g.sum(r))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.kinks >= 1, "{report:?}");
    assert!(report.passes(1e-6), "{report:?}");
}
