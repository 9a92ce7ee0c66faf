//! End-to-end acceptance run: one line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgan::checkpoint::Checkpoint;
use sdgan::commands::{self, PretrainArgs, Session};
use sdgan::config::RunConfig;
use sdgan_core::gan::{sample_noise, GanConfig, GanModel, StageOutputs};
use sdgan_core::metrics::{generated_consistency, generated_inception_score, OracleClassifier};
use sdgan_core::nn::{Ctx, Group, GroupSet, ParamId, ParamStore};
use sdgan_core::norm::{batch_norm, vse, BatchNormLayer, CueLevel, ScbnMode, ScbnSite, TextCondition, WordHead, BN_EPS};
use sdgan_core::synth::{build_dataset, caption_words, render, Dataset};
use sdgan_core::text::{pretrain_matching, ImageEncoder, MatchingConfig, MatchingItem, TextEncoder, TextEncoderConfig, Vocabulary};
use sdgan_core::train::{combined_contrastive_value, contrastive_loss, LossConfig, LossReport, TrainConfig, TrainSet, Trainer};
use sdgan_core::{evaluate, grad_check, grad_check_with, Binary, CheckStatus, GradCheck, Graph, Tensor, Unary, Var};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, f: &dyn Fn(&mut Graph, Var) -> sdgan_core::Result<Var>, x: &Tensor| -> Result<(), String> {
        let r = grad_check(f, x, GradCheck::default()).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.status == CheckStatus::Passed, format!("{name}: {:?} rel err {:.2e}", r.status, r.max_rel_error))?;
        checked += 1;
        worst = worst.max(r.max_rel_error);
        Ok(())
    };
    let w = rand_tensor(&mut rng, &[97]);
    let wsum = |g: &mut Graph, y: Var| -> sdgan_core::Result<Var> {
        let n = g.value(y).len();
        let wv = g.constant(Tensor::new(g.value(y).shape(), w.data().iter().cycle().take(n).copied().collect())?);
        let p = g.mul(y, wv)?;
        g.sum(p)
    };
    let x = away_from_zero(&mut rng, &[2, 3]);
    let pos = Tensor::new(&[2, 3], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let other = away_from_zero(&mut rng, &[3]);
    let m = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    for u in [Unary::Relu, Unary::LeakyRelu, Unary::Tanh, Unary::Sigmoid, Unary::Neg, Unary::Square, Unary::Exp] {
        check(&format!("{u:?}"), &|g, v| { let y = g.unary(u, v)?; wsum(g, y) }, &x)?;
    }
    check("sqrt", &|g, v| { let y = g.sqrt(v)?; wsum(g, y) }, &pos)?;
    check("ln", &|g, v| { let y = g.ln(v)?; wsum(g, y) }, &pos)?;
    for op in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
        check(&format!("{op:?} lhs"), &|g, v| { let o = g.constant(other.clone()); let y = g.binary(op, v, o)?; wsum(g, y) }, &x)?;
        check(&format!("{op:?} rhs"), &|g, v| { let o = g.constant(pos.clone()); let y = g.binary(op, o, v)?; wsum(g, y) }, &other)?;
    }
    check("scale", &|g, v| { let y = g.scale(v, -1.7)?; wsum(g, y) }, &x)?;
    check("shift", &|g, v| { let y = g.shift(v, 0.3)?; wsum(g, y) }, &x)?;
    check("clamp_min", &|g, v| { let y = g.clamp_min(v, 0.02)?; wsum(g, y) }, &x)?;
    check("matmul lhs", &|g, v| { let c = g.constant(m.clone()); let y = g.matmul(v, c)?; wsum(g, y) }, &x)?;
    check("matmul rhs", &|g, v| { let a = g.constant(x.clone()); let y = g.matmul(a, v)?; wsum(g, y) }, &m)?;
    check("transpose", &|g, v| { let y = g.transpose(v)?; wsum(g, y) }, &x)?;
    check("reshape", &|g, v| { let y = g.reshape(v, &[3, 2])?; wsum(g, y) }, &x)?;
    check("expand", &|g, v| { let y = g.expand(v, &[4, 3])?; wsum(g, y) }, &other)?;
    check("concat", &|g, v| { let o = g.constant(b.clone()); let y = g.concat(&[v, o, v], 0)?; wsum(g, y) }, &x)?;
    check("slice", &|g, v| { let y = g.slice(v, 1, 1, 2)?; wsum(g, y) }, &x)?;
    check("index_rows", &|g, v| { let y = g.index_rows(v, &[1, 0, 1])?; wsum(g, y) }, &x)?;
    check("sum", &|g, v| { let y = g.scale(v, 2.0)?; g.sum(y) }, &x)?;
    check("mean", &|g, v| { let y = g.square(v)?; g.mean(y) }, &x)?;
    check("sum_axis", &|g, v| { let y = g.sum_axis(v, 0)?; wsum(g, y) }, &x)?;
    check("mean_axis", &|g, v| { let y = g.mean_axis(v, 1)?; wsum(g, y) }, &x)?;
    check("softmax", &|g, v| { let y = g.softmax(v, 1)?; wsum(g, y) }, &x)?;
    check("log_softmax", &|g, v| { let y = g.log_softmax(v, 0)?; wsum(g, y) }, &x)?;
    check("bce_with_logits", &|g, v| { let y = g.bce_with_logits(v, &[1.0, 0.0, 0.3, 1.0, 0.0, 0.5])?; wsum(g, y) }, &x)?;
    check("l2_distance", &|g, v| { let o = g.constant(b.clone()); g.l2_distance(v, o) }, &x)?;
    check("row_l2_distance", &|g, v| { let o = g.constant(b.clone()); let y = g.row_l2_distance(v, o)?; wsum(g, y) }, &x)?;

    let img = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let bias = rand_tensor(&mut rng, &[3]);
    for (ks, stride, pad) in [(3, 1, 1), (1, 1, 0), (4, 2, 1)] {
        let k = rand_tensor(&mut rng, &[3, 2, ks, ks]);
        check("conv2d x", &|g, v| { let kv = g.constant(k.clone()); let bv = g.constant(bias.clone()); let y = g.conv2d(v, kv, Some(bv), stride, pad)?; wsum(g, y) }, &img)?;
        check("conv2d k", &|g, v| { let xv = g.constant(img.clone()); let y = g.conv2d(xv, v, None, stride, pad)?; wsum(g, y) }, &k)?;
        check("conv2d bias", &|g, v| { let xv = g.constant(img.clone()); let kv = g.constant(k.clone()); let y = g.conv2d(xv, kv, Some(v), stride, pad)?; wsum(g, y) }, &bias)?;
    }
    check("upsample", &|g, v| { let y = g.upsample_nearest2x(v)?; wsum(g, y) }, &img)?;
    check("channel_mean", &|g, v| { let (mu, _) = g.channel_stats(v)?; wsum(g, mu) }, &img)?;
    check("channel_var", &|g, v| { let (_, s) = g.channel_stats(v)?; wsum(g, s) }, &img)?;

    // contrastive loss, away from both clamps
    let v2 = rand_tensor(&mut rng, &[3, 4]);
    let y = [1.0, 0.0, 1.0];
    let cfg = LossConfig::default();
    check("contrastive", &|g, v| { let o = g.constant(v2.clone()); contrastive_loss(g, v, o, &y, &cfg) }, &m)?;

    // composite normalization sites with woken heads
    for mode in [ScbnMode::Off, ScbnMode::Sentence, ScbnMode::Word, ScbnMode::Both, ScbnMode::Concat(CueLevel::Sentence), ScbnMode::Concat(CueLevel::Word)] {
        let mut store = ParamStore::new();
        let site = ScbnSite::new(&mut store, "site", 2, 3, mode, Group::Generator, &mut rng).unwrap();
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            for v in &mut store.get_mut(id).data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let xin = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let sentence = rand_tensor(&mut rng, &[2, 3]);
        let words = [rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3, 3])];
        let weights = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let r = grad_check_with(&xin, GradCheck::default(), |pt, with_grad| {
            let mut ctx = Ctx::new(&store, GroupSet::NONE, true);
            let xv = if with_grad { ctx.graph.param(pt.clone()) } else { ctx.constant(pt.clone()) };
            let cond = TextCondition {
                sentence: ctx.constant(sentence.clone()),
                words: words.iter().map(|w| ctx.constant(w.clone())).collect(),
            };
            let out = site.forward(&mut ctx, xv, &cond)?;
            let wv = ctx.constant(weights.clone());
            let out = ctx.graph.mul(out, wv)?;
            let loss = ctx.graph.sum(out)?;
            evaluate(&mut ctx.graph, xv, loss, with_grad)
        })
        .map_err(|e| e.to_string())?;
        ensure(r.status == CheckStatus::Passed, format!("site {}: {:?} {:.2e}", mode.name(), r.status, r.max_rel_error))?;
        checked += 1;
        worst = worst.max(r.max_rel_error);
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("{checked} checks, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

/// Loss of one pair at distance `d` along the first coordinate.
fn pair_loss(d: f64, y: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 2], vec![d, 0.0]).unwrap());
    let l = contrastive_loss(&mut g, a, b, &[y], &LossConfig::default()).unwrap();
    g.value(l).item()
}

fn contrastive_closed_forms() -> Outcome {
    let close = |x: f64, want: f64| (x - want).abs() < 5e-7;
    let v = pair_loss(0.0, 0.0);
    ensure(close(v, 0.5), format!("(y=0, d=0) gave {v}"))?;
    for d in [0.0, 0.05, 0.1] {
        let v = pair_loss(d, 1.0);
        ensure(close(v, 0.005), format!("(y=1, d={d}) gave {v}"))?;
    }
    for d in [1.0, 1.5, 7.0] {
        let v = pair_loss(d, 0.0);
        ensure(close(v, 0.0), format!("(y=0, d={d}) gave {v}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = rand_tensor(&mut rng, &[4, 6]);
        let b = rand_tensor(&mut rng, &[4, 6]);
        let y: Vec<f64> = (0..4).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        let run = |p: &Tensor, q: &Tensor| {
            let mut g = Graph::new();
            let (p, q) = (g.constant(p.clone()), g.constant(q.clone()));
            let l = contrastive_loss(&mut g, p, q, &y, &LossConfig::default()).unwrap();
            g.value(l).item()
        };
        ensure(run(&a, &b) == run(&b, &a), "loss(v1, v2) != loss(v2, v1)")?;
    }
    Ok("0.500000 / 0.005000 / 0.000000, symmetric on 100 random batches".into())
}

// ---------------------------------------------------------------- 3

fn normalization_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean: f64 = 0.0;
    for _ in 0..100 {
        let (n, c, h) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::new(&mut store, "bn", c, Group::Generator).unwrap();
        let mut x = rand_tensor(&mut rng, &[n, c, h, h]);
        let offset: f64 = rng.random_range(-5.0..5.0);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + offset);
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Generator]), true);
        let xv = ctx.constant(x);
        let xhat = bn.normalize(&mut ctx, xv).unwrap();
        let xhat = ctx.value(xhat);
        let hw = h * h;
        for ch in 0..c {
            let s: f64 = (0..n).flat_map(|b| (0..hw).map(move |p| (b * c + ch) * hw + p)).map(|i| xhat.data()[i]).sum();
            worst_mean = worst_mean.max((s / (n * hw) as f64).abs());
        }
    }
    ensure(worst_mean < 1e-6, format!("channel mean {worst_mean:.2e}"))?;

    let mut worst_scbn: f64 = 0.0;
    for mode in [ScbnMode::Sentence, ScbnMode::Word, ScbnMode::Both] {
        for _ in 0..20 {
            let mut store = ParamStore::new();
            let site = ScbnSite::new(&mut store, "s", 3, 6, mode, Group::Generator, &mut rng).unwrap();
            for v in &mut store.get_mut(site.bn.gamma).data {
                *v = rng.random_range(-1.0..1.0);
            }
            let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Generator]), true);
            let cond = TextCondition {
                sentence: ctx.constant(rand_tensor(&mut rng, &[2, 6])),
                words: vec![ctx.constant(rand_tensor(&mut rng, &[6, 2])), ctx.constant(rand_tensor(&mut rng, &[6, 4]))],
            };
            let xv = ctx.constant(rand_tensor(&mut rng, &[2, 3, 4, 4]));
            let y = site.forward(&mut ctx, xv, &cond).unwrap();
            let plain = batch_norm(&site.bn, &mut ctx, xv).unwrap();
            worst_scbn = worst_scbn.max(max_diff(ctx.value(y).data(), ctx.value(plain).data()));
        }
    }
    ensure(worst_scbn < 1e-12, format!("fresh SCBN vs BN {worst_scbn:.2e}"))?;

    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let (c, d, l, t) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let head = WordHead::new(&mut store, "w", d, c, Group::Generator, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, GroupSet::NONE, true);
        let x = ctx.constant(rand_tensor(&mut rng, &[c, l]));
        let w = ctx.constant(rand_tensor(&mut rng, &[d, t]));
        let out = vse(&head, &mut ctx, x, w).unwrap();
        let a = ctx.value(out.weights).data();
        for j in 0..l {
            worst_sum = worst_sum.max((a[j * t..(j + 1) * t].iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_sum < 1e-12, format!("VSE weight sum off by {worst_sum:.2e}"))?;

    for _ in 0..20 {
        let mut store = ParamStore::new();
        let head = WordHead::new(&mut store, "w", 5, 3, Group::Generator, &mut rng).unwrap();
        for v in &mut store.get_mut(head.perception.bias).data {
            *v = rng.random_range(-0.5..0.5);
        }
        let word = rand_tensor(&mut rng, &[5, 1]);
        let mut ctx = Ctx::new(&store, GroupSet::NONE, true);
        let x = ctx.constant(rand_tensor(&mut rng, &[3, 6]));
        let wv = ctx.constant(word.clone());
        let out = vse(&head, &mut ctx, x, wv).unwrap();
        let row = ctx.constant(Tensor::new(&[1, 5], word.data().to_vec()).unwrap());
        let f = head.perception.forward(&mut ctx, row).unwrap();
        let (f, v) = (ctx.value(f).data(), ctx.value(out.vse).data());
        for j in 0..6 {
            for c in 0..3 {
                ensure(v[c * 6 + j] == f[c], "T=1 VSE differs from f(w1)")?;
            }
        }
    }
    Ok(format!(
        "|mean| {worst_mean:.1e}, SCBN-vs-BN {worst_scbn:.1e}, VSE sum {worst_sum:.1e}, T=1 exact (eps {BN_EPS})"
    ))
}

// ---------------------------------------------------------------- 4

fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at(&[b, ic, iy as usize, ix as usize]) * k.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_vse(x: &[f64], c: usize, l: usize, words: &[f64], d: usize, t: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut proj = vec![0.0; t * c];
    for ti in 0..t {
        for ci in 0..c {
            proj[ti * c + ci] = b[ci] + (0..d).map(|di| words[di * t + ti] * w[di * c + ci]).sum::<f64>();
        }
    }
    let mut out = vec![0.0; c * l];
    for j in 0..l {
        let s: Vec<f64> = (0..t).map(|ti| (0..c).map(|ci| x[ci * l + j] * proj[ti * c + ci]).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        for ti in 0..t {
            for ci in 0..c {
                out[ci * l + j] += (s[ti] - m).exp() / z * proj[ti * c + ci];
            }
        }
    }
    out
}

fn oracles() -> Outcome {
    const N: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 5];
    for _ in 0..N {
        let mut g = Graph::new();
        // conv2d
        let (ks, stride, pad) = [(3, 1, 1), (1, 1, 0), (4, 2, 1), (3, 2, 0)][rng.random_range(0..4)];
        let (n, c, o, h) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(4..8));
        let x = rand_tensor(&mut rng, &[n, c, h, h]);
        let k = rand_tensor(&mut rng, &[o, c, ks, ks]);
        let bias = rand_tensor(&mut rng, &[o]);
        let want = naive_conv(&x, &k, bias.data(), stride, pad);
        let (xv, kv, bv) = (g.constant(x), g.constant(k), g.constant(bias));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(max_diff(g.value(y).data(), &want));
        // matmul
        let (m, kk, p) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = rand_tensor(&mut rng, &[m, kk]);
        let b = rand_tensor(&mut rng, &[kk, p]);
        let mut want = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for q in 0..kk {
                    want[i * p + j] += a.data()[i * kk + q] * b.data()[q * p + j];
                }
            }
        }
        let (av, bv) = (g.constant(a), g.constant(b));
        let y = g.matmul(av, bv).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(max_diff(g.value(y).data(), &want));
        // softmax over rows, with large offsets
        let (r, cols) = (rng.random_range(1..5), rng.random_range(1..9));
        let mut s = rand_tensor(&mut rng, &[r, cols]);
        let shift: f64 = rng.random_range(-50.0..50.0);
        s.data_mut().iter_mut().for_each(|v| *v = *v * 10.0 + shift);
        let mut want = vec![0.0; r * cols];
        for i in 0..r {
            let row = &s.data()[i * cols..(i + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..cols {
                want[i * cols + j] = (row[j] - mx).exp() / z;
            }
        }
        let sv = g.constant(s);
        let y = g.softmax(sv, 1).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(max_diff(g.value(y).data(), &want));
        // channel_stats
        let (n, c, h) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let x = rand_tensor(&mut rng, &[n, c, h, h]);
        let hw = h * h;
        let (mut wm, mut wv) = (vec![0.0; c], vec![0.0; c]);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| (0..hw).map(move |q| (b * c + ch) * hw + q)).map(|i| x.data()[i]).collect();
            wm[ch] = vals.iter().sum::<f64>() / vals.len() as f64;
            wv[ch] = vals.iter().map(|v| (v - wm[ch]).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        let xv = g.constant(x);
        let (mv, vv) = g.channel_stats(xv).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(max_diff(g.value(mv).data(), &wm)).max(max_diff(g.value(vv).data(), &wv));
        // VSE
        let (c, d, l, t) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let head = WordHead::new(&mut store, "w", d, c, Group::Generator, &mut rng).unwrap();
        for v in &mut store.get_mut(head.perception.bias).data {
            *v = rng.random_range(-0.5..0.5);
        }
        let f64s = |id: ParamId| store.get(id).data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let x = rand_tensor(&mut rng, &[c, l]);
        let words = rand_tensor(&mut rng, &[d, t]);
        let want = naive_vse(x.data(), c, l, words.data(), d, t, &f64s(head.perception.weight), &f64s(head.perception.bias));
        let mut ctx = Ctx::new(&store, GroupSet::NONE, true);
        let (xv, wv) = (ctx.constant(x), ctx.constant(words));
        let out = vse(&head, &mut ctx, xv, wv).map_err(|e| e.to_string())?;
        worst[4] = worst[4].max(max_diff(ctx.value(out.vse).data(), &want));
    }
    let names = ["conv2d", "matmul", "softmax", "channel_stats", "vse"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < 1e-10, format!("{name} off by {w:.2e}"))?;
    }
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("{N} instances each; max abs diff {}", detail.join(", ")))
}

// ---------------------------------------------------------------- 5

fn tiny_gan() -> GanConfig {
    GanConfig {
        z_dim: 8,
        text_dim: 6,
        g_channels: 8,
        d_channels: [4, 8, 8],
        feat_dim: 8,
        ..GanConfig::default()
    }
}

fn siamese_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = tiny_gan();
    let model = GanModel::new(&mut store, cfg, &mut rng).map_err(|e| e.to_string())?;
    let n = 3;
    let make_cond = |ctx: &mut Ctx, rng: &mut ChaCha8Rng| TextCondition {
        sentence: ctx.constant(rand_tensor(rng, &[n, cfg.text_dim])),
        words: (0..n).map(|i| ctx.constant(rand_tensor(rng, &[cfg.text_dim, 2 + i]))).collect(),
    };

    // sharing: both branches resolve every parameter to one tape node and
    // the shared gradient is the sum of the per-branch gradients
    let branch_grads = |which: &[bool; 2]| {
        let mut r = ChaCha8Rng::seed_from_u64(50);
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Generator, Group::Discriminator]), true);
        let za = ctx.constant(sample_noise(n, cfg.z_dim, &mut r));
        let zb = ctx.constant(sample_noise(n, cfg.z_dim, &mut r));
        let ca = make_cond(&mut ctx, &mut r);
        let cb = make_cond(&mut ctx, &mut r);
        let ga = model.generator.forward(&mut ctx, za, &ca).unwrap();
        let bound_a: Vec<Option<Var>> = store.iter().map(|(id, _)| ctx.bound(id)).collect();
        let gb = model.generator.forward(&mut ctx, zb, &cb).unwrap();
        let mut losses = Vec::new();
        for (k, d) in model.discriminators.iter().enumerate() {
            let oa = d.forward(&mut ctx, ga.images[k], ca.sentence).unwrap();
            let ob = d.forward(&mut ctx, gb.images[k], cb.sentence).unwrap();
            losses.push((oa, ob));
        }
        let bound_b: Vec<Option<Var>> = store.iter().map(|(id, _)| ctx.bound(id)).collect();
        let mut total: Option<Var> = None;
        for (oa, ob) in &losses {
            for (o, on) in [(oa, which[0]), (ob, which[1])] {
                if !on {
                    continue;
                }
                let s = ctx.graph.sum(o.feat_c).unwrap();
                total = Some(match total {
                    None => s,
                    Some(t) => ctx.graph.add(t, s).unwrap(),
                });
            }
        }
        ctx.backward(total.unwrap()).unwrap();
        (bound_a, bound_b, ctx.grads())
    };
    let (gen_a, after, both) = branch_grads(&[true, true]);
    for ((id, p), (ba, bb)) in store.iter().zip(gen_a.iter().zip(&after)) {
        if p.group == Group::Generator && p.trainable {
            ensure(ba.is_some() && ba == bb, format!("{} rebound by the second branch", p.name))?;
        }
        let _ = id;
    }
    let (_, _, only_a) = branch_grads(&[true, false]);
    let (_, _, only_b) = branch_grads(&[false, true]);
    let lookup = |gs: &[(ParamId, Vec<f64>)], id: ParamId| gs.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone());
    let mut worst: f64 = 0.0;
    for (id, g) in &both {
        let (a, b) = (lookup(&only_a, *id).unwrap(), lookup(&only_b, *id).unwrap());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        worst = worst.max(max_diff(g, &sum));
    }
    ensure(worst < 1e-9, format!("shared gradient differs from branch sum by {worst:.2e}"))?;

    // disjointness of the per-stage discriminators
    let sets: Vec<Vec<ParamId>> = (0..3).map(|k| GanModel::discriminator_params(&store, k)).collect();
    let all_d: Vec<ParamId> = store.iter().filter(|(_, p)| p.group == Group::Discriminator).map(|(id, _)| id).collect();
    ensure(sets.iter().all(|s| !s.is_empty()), "a discriminator owns no parameters")?;
    ensure(sets.iter().map(Vec::len).sum::<usize>() == all_d.len(), "discriminator sets do not partition the D group")?;
    for i in 0..3 {
        for j in i + 1..3 {
            ensure(sets[i].iter().all(|p| !sets[j].contains(p)), format!("D{i} and D{j} share a parameter"))?;
        }
    }
    for k in 0..3 {
        let mut ctx = Ctx::new(&store, GroupSet::of(&[Group::Discriminator]), true);
        let r = GanConfig::resolution(k);
        let img = ctx.constant(rand_tensor(&mut rng, &[n, 3, r, r]));
        let s = ctx.constant(rand_tensor(&mut rng, &[n, cfg.text_dim]));
        let o = model.discriminators[k].forward(&mut ctx, img, s).unwrap();
        let l = ctx.graph.sum(o.logit_c).unwrap();
        ctx.backward(l).unwrap();
        ensure(ctx.grads().iter().all(|(id, _)| sets[k].contains(id)), format!("D{k} loss reaches another stage"))?;
    }

    // stage-subset additivity
    let stage = |rng: &mut ChaCha8Rng| StageOutputs {
        image: Tensor::zeros(&[1]),
        score_u: vec![0.0; 4],
        score_c: vec![0.0; 4],
        feat_u: rand_tensor(rng, &[4, 5]),
        feat_c: rand_tensor(rng, &[4, 5]),
    };
    for _ in 0..50 {
        let a: Vec<StageOutputs> = (0..3).map(|_| stage(&mut rng)).collect();
        let b: Vec<StageOutputs> = (0..3).map(|_| stage(&mut rng)).collect();
        let y: Vec<f64> = (0..4).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        let with = |mask: [bool; 3]| {
            combined_contrastive_value(&a, &b, &y, &LossConfig { contrastive_stages: mask, ..LossConfig::default() }).unwrap()
        };
        let singles: Vec<f64> = (0..3).map(|k| with([k == 0, k == 1, k == 2])).collect();
        for mask in [[true, true, false], [true, false, true], [false, true, true], [true, true, true]] {
            let want = (0..3).filter(|&k| mask[k]).map(|k| singles[k]).reduce(|s, v| s + v).unwrap();
            ensure(with(mask) == want, format!("mask {mask:?} not additive"))?;
        }
        ensure(with([false; 3]) == 0.0, "empty subset is not zero")?;
    }
    Ok(format!("shared-gradient identity {worst:.1e}, {} D params in 3 disjoint sets, additivity exact", all_d.len()))
}

// ---------------------------------------------------------------- 6, 8, 9 fixture

struct Fixture {
    _dir: tempfile::TempDir,
    base: String,
}

impl Fixture {
    /// 512 scenes over all 32 classes and a small pretrained encoder.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let enc = dir.path().join("enc.bin");
        commands::gen_data(512, 0, 5, &data).unwrap();
        commands::pretrain_encoder(&PretrainArgs {
            data: data.clone(),
            out: enc.clone(),
            epochs: 1,
            seed: 0,
            embed_dim: 16,
            hidden: 16,
            batch_size: 16,
        })
        .unwrap();
        let base = format!(
            "data = {}\nencoder = {}\nout = {}\nz_dim = 32\ng_channels = 16\nd_channels = 8,16,32\nfeat_dim = 64\n",
            data.display(),
            enc.display(),
            dir.path().join("run").display()
        );
        Fixture { _dir: dir, base }
    }

    fn session(&self, extra: &str) -> Session {
        Session::new(RunConfig::parse(&format!("{}{extra}", self.base)).unwrap()).unwrap()
    }
}

fn run_steps(s: &mut Session, steps: usize) -> Result<Vec<LossReport>, String> {
    (0..steps).map(|_| s.trainer.train_step(&s.train).map_err(|e| e.to_string())).collect()
}

fn overfit_and_smoke(fx: &Fixture) -> Outcome {
    // overfit: discriminator updates on one frozen batch
    let ds = build_dataset(64, 0, 5).unwrap();
    let vocab = Vocabulary::from_words(caption_words());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let tc = TextEncoderConfig { vocab_size: vocab.len(), embed_dim: 16, hidden: 16 };
    let enc = TextEncoder::new(&mut store, tc, &mut rng).unwrap();
    let set = TrainSet::build(&store, &enc, &vocab, &ds.train[..16]).unwrap();
    let gan = GanConfig { text_dim: tc.feature_dim(), g_channels: 16, d_channels: [16, 32, 64], feat_dim: 256, ..GanConfig::default() };
    let cfg = TrainConfig { gan, batch_size: 2, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg, store, enc).map_err(|e| e.to_string())?;
    let input = t.draw(&set).map_err(|e| e.to_string())?;
    let mut last = LossReport::default();
    for _ in 0..200 {
        last = t.d_step_on(&set, &input).map_err(|e| e.to_string())?;
    }
    let adv: f64 = last.d_adv.iter().sum();
    ensure(adv < 0.05, format!("adversarial D loss {adv:.4} after 200 steps (total with contrastive {:.4})", last.d_total))?;

    // smoke: two epochs over the full split, twice from the same seed
    let t0 = Instant::now();
    let mut s = fx.session("epochs = 2\n");
    let steps = s.total_steps() as usize;
    let first = run_steps(&mut s, steps)?;
    let took = t0.elapsed();
    ensure(first.iter().all(LossReport::all_finite), "non-finite loss in the smoke run")?;
    let mut again = fx.session("epochs = 2\n");
    let second = run_steps(&mut again, steps)?;
    ensure(first == second, "replay diverged")?;
    ensure(s.checkpoint().to_bytes() == again.checkpoint().to_bytes(), "replayed parameters differ")?;
    Ok(format!(
        "overfit D adversarial {adv:.4} (total {:.4}); smoke {} scenes, {steps} steps in {:.0}s, finite, replay identical",
        last.d_total,
        s.train.len() + s.test.len(),
        took.as_secs_f64()
    ))
}

fn alpha_stability(fx: &Fixture) -> Outcome {
    let mut detail = Vec::new();
    for alpha in [0.01, 0.05, 0.1, 0.2] {
        let mut s = fx.session(&format!("alpha = {alpha}\nseed = 3\n"));
        let reports = run_steps(&mut s, 100)?;
        ensure(reports.iter().all(LossReport::all_finite), format!("alpha {alpha}: non-finite loss"))?;
        let r = reports.last().unwrap();
        detail.push(format!("a={alpha}: d {:.2} g {:.2}", r.d_total, r.g_total));
    }
    Ok(format!("100 steps each, finite; {}", detail.join(", ")))
}

fn checkpoint_round_trip(fx: &Fixture) -> Outcome {
    let mut s = fx.session("seed = 9\n");
    run_steps(&mut s, 100)?;
    let bytes = s.checkpoint().to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    s.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == bytes, "save -> load -> save changed the bytes")?;
    let mut restored = fx.session("seed = 9\n");
    restored.restore(&loaded).map_err(|e| e.to_string())?;
    ensure(restored.checkpoint().to_bytes() == bytes, "restored session does not re-serialize identically")?;

    let straight = run_steps(&mut s, 100)?;
    let resumed = run_steps(&mut restored, 100)?;
    ensure(straight == resumed, "resumed trajectory differs")?;
    ensure(s.checkpoint().to_bytes() == restored.checkpoint().to_bytes(), "final states differ")?;
    Ok(format!("{} bytes byte-identical; 100 resumed steps match exactly", bytes.len()))
}

// ---------------------------------------------------------------- 7

const ABLATION_SEEDS: u64 = 3;
const ABLATION_STEPS: usize = 1500;

struct Scores {
    is: f64,
    cr: f64,
}

fn ablation_world(seed: u64) -> (Dataset, ParamStore, TextEncoder, Vocabulary) {
    let ds = build_dataset(512, seed, 5).unwrap();
    let vocab = Vocabulary::from_words(caption_words());
    let items: Vec<MatchingItem> = ds
        .train
        .iter()
        .flat_map(|s| {
            let img = render(&s.spec, 32).unwrap();
            let v = &vocab;
            s.captions.iter().map(move |c| MatchingItem { image: img.clone(), tokens: v.tokenize(c).unwrap(), group: s.id })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let tc = TextEncoderConfig { vocab_size: vocab.len(), embed_dim: 32, hidden: 32 };
    let text = TextEncoder::new(&mut store, tc, &mut rng).unwrap();
    let image = ImageEncoder::new(&mut store, 32, tc.feature_dim(), &mut rng).unwrap();
    pretrain_matching(&mut store, &text, &image, &items, MatchingConfig::default(), &mut rng).unwrap();
    (ds, store, text, vocab)
}

fn ablation_run(world: &(Dataset, ParamStore, TextEncoder, Vocabulary), oracle: &OracleClassifier, seed: u64, full: bool) -> Result<Scores, String> {
    let (ds, store, text, vocab) = world;
    let train = TrainSet::build(store, text, vocab, &ds.train).map_err(|e| e.to_string())?;
    let test = TrainSet::build(store, text, vocab, &ds.test).map_err(|e| e.to_string())?;
    let gan = GanConfig {
        text_dim: text.config.feature_dim(),
        g_channels: 16,
        d_channels: [8, 16, 32],
        feat_dim: 256,
        scbn: if full { ScbnMode::Word } else { ScbnMode::Off },
        ..GanConfig::default()
    };
    let loss = LossConfig { contrastive_weight: if full { 1.0 } else { 0.0 }, ..LossConfig::default() };
    let cfg = TrainConfig { gan, loss, batch_size: 8, seed, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg, store.clone(), text.clone()).map_err(|e| e.to_string())?;
    for _ in 0..ABLATION_STEPS {
        let r = t.train_step(&train).map_err(|e| e.to_string())?;
        ensure(r.all_finite(), "non-finite loss")?;
    }
    let mut er = ChaCha8Rng::seed_from_u64(7);
    let (is, _) = generated_inception_score(&t.store, &t.model, oracle, &test, 10, &mut er).map_err(|e| e.to_string())?;
    let cr = generated_consistency(&t.store, &t.model, oracle, &test, 256, &mut er).map_err(|e| e.to_string())?;
    Ok(Scores { is, cr })
}

fn ablation() -> Outcome {
    let oracle = commands::train_oracle(100, 800).map_err(|e| e.to_string())?;
    let (mut full, mut base) = (Scores { is: 0.0, cr: 0.0 }, Scores { is: 0.0, cr: 0.0 });
    let mut per_seed = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let world = ablation_world(seed);
        let f = ablation_run(&world, &oracle, seed, true)?;
        let b = ablation_run(&world, &oracle, seed, false)?;
        per_seed.push(format!("seed {seed}: IS {:.3}/{:.3} CR {:.3}/{:.3}", f.is, b.is, f.cr, b.cr));
        full.is += f.is / ABLATION_SEEDS as f64;
        full.cr += f.cr / ABLATION_SEEDS as f64;
        base.is += b.is / ABLATION_SEEDS as f64;
        base.cr += b.cr / ABLATION_SEEDS as f64;
    }
    let summary = format!(
        "full vs baseline over {ABLATION_SEEDS} seeds: IS {:.3} vs {:.3}, consistency {:.4} vs {:.4} ({})",
        full.is,
        base.is,
        full.cr,
        base.cr,
        per_seed.join("; ")
    );
    ensure(full.is > base.is && full.cr < base.cr, summary.clone())?;
    Ok(summary)
}

// ----------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filters expect a libtest-like interface
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let quick: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient suite", gradients),
        ("2 contrastive closed forms", contrastive_closed_forms),
        ("3 BN/SCBN invariants", normalization_invariants),
        ("4 naive-loop oracles", oracles),
        ("5 Siamese structure", siamese_structure),
    ];
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {name}: PASS: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL: {d}")
            }
        }
    };
    for (name, f) in quick {
        report(name, f());
    }
    let fx = Fixture::new();
    report("6 overfit and smoke run", overfit_and_smoke(&fx));
    if std::env::var_os("SKIP7").is_some() {
        println!("criterion 7 directional ablation: SKIPPED (SKIP7 is set)");
    } else {
        report("7 directional ablation", ablation());
    }
    report("8 alpha stability", alpha_stability(&fx));
    report("9 checkpoint round trip", checkpoint_round_trip(&fx));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
