//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use condiff::config::RunConfig;
use condiff::data::{split_subjectwise, stack_images, ImageRecord, Label, SplitFractions};
use condiff::denoiser::{AnalyticGaussianDenoiser, Condition, ConditionalUNet, Denoiser, DiffusionModel, TrainableDenoiser, UNetConfig};
use condiff::diffusion_training::{diffusion_loss, train_diffusion};
use condiff::embedding_classifier::{
    end_to_end_predict, train_embedder, triplet_loss, EmbeddingConfig, EmbeddingNet, SyntheticSet, Validation,
};
use condiff::explain::{score_cam, DEFAULT_LAYER};
use condiff::metrics::{
    classification_metrics, frechet_distance, inception_style_score, silhouette_score, ConfusionCounts,
};
use condiff::pipeline::{ablate_t0, compare_samplers, evaluate_records, majority_baseline};
use condiff::rng::{component_rng, standard_normal};
use condiff::samplers::{
    cfg_noise, ddim_sample_from_noise, ddim_update, ddpm_update, synthesize_guided, SamplerKind, SynthesisConfig,
};
use condiff::schedules::{make_linear_schedule, NoiseSchedule};
use condiff_nn::{ParamStore, Tape};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn max_abs_diff(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

/// A small U-Net with every parameter jittered, so that no output head is
/// zero and the label matters.
fn tiny_unet<F: condiff_nn::Scalar>(t_train: usize, seed: u64) -> ConditionalUNet<F> {
    let cfg = UNetConfig { channels: [4, 4, 8], image_channels: 3, resolution: 8 };
    let mut rng = component_rng(seed, "acceptance/unet");
    let mut net: ConditionalUNet<F> = ConditionalUNet::new(cfg, t_train, &mut rng).unwrap();
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        for v in net.params_mut().get_mut(id).iter_mut() {
            *v = F::from_f64_lossy(v.to_f64_lossy() + rng.random_range(-0.2f64..0.2));
        }
    }
    net
}

fn tiny_embedder<F: condiff_nn::Scalar>(seed: u64) -> EmbeddingNet<F> {
    let cfg = EmbeddingConfig { channels: [4, 4, 6], dim: 8, image_channels: 3, resolution: 8 };
    EmbeddingNet::new(cfg, &mut component_rng(seed, "acceptance/embedder")).unwrap()
}

fn smooth_image(h: usize, phase: f32) -> Array3<f32> {
    Array3::from_shape_fn((h, h, 3), |(y, x, c)| (y as f32 * 0.9 + x as f32 * 0.4 + c as f32 + phase).sin() * 0.8)
}

fn schedule_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = component_rng(11, "acceptance/schedules");
    let n = 100_000;
    let x0 = 0.6;
    let mut worst: f64 = 0.0;
    for s in 0..5 {
        let t_max = rng.random_range(5..40);
        let mut betas: Vec<f64> = (0..t_max).map(|_| rng.random_range(1e-3..0.15)).collect();
        betas.sort_by(f64::total_cmp);
        let schedule = NoiseSchedule::from_betas(betas.clone());
        let mut x = vec![x0; n];
        for t in 1..=t_max {
            let (a, b) = ((1.0 - betas[t - 1]).sqrt(), betas[t - 1].sqrt());
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = a * *v + b * e;
            }
            if t == t_max || t == t_max / 2 {
                let ab = schedule.alpha_bar(t).unwrap();
                let (mean, var) = (ab.sqrt() * x0, 1.0 - ab);
                let m = x.iter().sum::<f64>() / n as f64;
                let v = x.iter().map(|u| (u - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let z_mean = (m - mean).abs() / (var / n as f64).sqrt();
                let z_var = (v - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt());
                worst = worst.max(z_mean).max(z_var);
                ensure(z_mean < 3.0 && z_var < 3.0, || {
                    format!("schedule {s} step {t}: mean off by {z_mean:.2} SE, variance by {z_var:.2} SE")
                })?;
            }
        }
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("worst deviation {worst:.2} SE over 5 schedules"))
}

fn analytic_recovery() -> Outcome {
    let start = Instant::now();
    let schedule = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let (mu, var) = (0.3, 0.25);
    let model = AnalyticGaussianDenoiser::new(mu, var, schedule.clone());
    let n = 10_000;
    let x = ddim_sample_from_noise(&schedule, &model, (n, 1, 1, 1), &vec![Condition::Null; n], 1000, None, 5).unwrap();
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let v = x.iter().map(|&u| (u as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    ensure((m - mu).abs() < 0.02, || format!("mean {m:.4} vs {mu}"))?;
    ensure((v / var - 1.0).abs() < 0.05, || format!("variance {v:.4} vs {var}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!("mean {m:.4} (target {mu}), variance {v:.4} (target {var})"))
}

fn determinism() -> Outcome {
    let schedule = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let make = || DiffusionModel::new(tiny_unet::<f32>(100, 3));
    let (m1, m2) = (make(), make());
    let conds = [Condition::Label(Label::NoInfection), Condition::Label(Label::Infection)];
    let a = ddim_sample_from_noise(&schedule, &m1, (2, 8, 8, 3), &conds, 10, None, 9).unwrap();
    let b = ddim_sample_from_noise(&schedule, &m2, (2, 8, 8, 3), &conds, 10, None, 9).unwrap();
    ensure(a == b, || "DDIM sampling differs between runs".into())?;

    let guide = smooth_image(8, 0.3);
    for kind in [SamplerKind::Ddim, SamplerKind::CfgDdim, SamplerKind::Ddpm] {
        let cfg = SynthesisConfig { sampler_kind: kind, sampler_steps: 5, t0: 0.6, seed: 17, ..Default::default() };
        let a = synthesize_guided(&schedule, &m1, &guide, Label::Infection, &cfg).unwrap();
        let b = synthesize_guided(&schedule, &m2, &guide, Label::Infection, &cfg).unwrap();
        ensure(a == b, || format!("{kind} guided synthesis differs between runs"))?;
    }

    let cfg = SynthesisConfig { sampler_steps: 5, seed: 4, ..Default::default() };
    let (e1, e2) = (tiny_embedder::<f32>(2), tiny_embedder::<f32>(2));
    let p1 = end_to_end_predict(&schedule, &m1, &e1, &guide, &cfg).unwrap();
    let p2 = end_to_end_predict(&schedule, &m2, &e2, &guide, &cfg).unwrap();
    ensure(p1.predicted_label == p2.predicted_label, || "end-to-end labels differ".into())?;
    ensure(
        p1.distances.iter().zip(&p2.distances).all(|((_, x), (_, y))| x.to_bits() == y.to_bits()),
        || "end-to-end distances differ".into(),
    )?;

    // Zero-variance ancestral updates along a DDIM trajectory.
    let mut x: Array4<f32> = standard_normal((2, 8, 8, 3), &mut component_rng(1, "acceptance/x_T"));
    let z = Array4::from_elem(x.raw_dim(), 1.0f32);
    let mut worst: f64 = 0.0;
    for t in (1..=100).rev() {
        let eps = m1.predict_noise(&x, &[t, t], &conds).unwrap();
        let ddim = ddim_update(&schedule, &x, &eps, t, t - 1).unwrap();
        let ddpm = ddpm_update(&schedule, &x, &eps, t, t - 1, 0.0, Some(&z)).unwrap();
        worst = worst.max(max_abs_diff(&ddim, &ddpm));
        x = ddim;
    }
    ensure(worst <= 1e-6, || format!("DDPM(σ=0) and DDIM differ by {worst:e}"))?;
    Ok(format!("bitwise repeatable; DDPM(σ=0) vs DDIM max step difference {worst:e}"))
}

fn cfg_algebra() -> Outcome {
    let model = DiffusionModel::new(tiny_unet::<f32>(50, 8));
    let x = stack_images([&smooth_image(8, 0.0), &smooth_image(8, 1.3)]).unwrap();
    let steps = [30, 7];
    let labels = [Label::Infection, Label::NoInfection];
    let e = |w: f64| cfg_noise(&model, &x, &steps, &labels, w).unwrap();
    let uncond = model.predict_noise(&x, &steps, &[Condition::Null; 2]).unwrap();
    let cond = model.predict_noise(&x, &steps, &[Condition::Label(labels[0]), Condition::Label(labels[1])]).unwrap();
    ensure(uncond != cond, || "the test model ignores the label".into())?;
    ensure(e(0.0) == uncond, || "ω=0 is not the unconditional prediction".into())?;
    ensure(e(1.0) == cond, || "ω=1 is not the conditional prediction".into())?;
    let mut worst: f64 = 0.0;
    for [w1, w2, w3] in [[0.0, 0.75, 7.5], [-1.0, 2.0, 3.0], [0.5, 1.5, 4.0]] {
        let (a, b, c) = (e(w1), e(w2), e(w3));
        let r = (w3 - w1) / (w2 - w1);
        for ((&a, &b), &c) in a.iter().zip(&b).zip(&c) {
            let on_line = a as f64 + r * (b as f64 - a as f64);
            worst = worst.max((c as f64 - on_line).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("collinearity residual {worst:e}"))?;
    Ok(format!("ω∈{{0,1}} exact, collinearity residual {worst:e}"))
}

fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let h = 1e-6;
    let schedule = make_linear_schedule(50, 1e-3, 0.05).unwrap();
    let mut net = tiny_unet::<f64>(50, 21);
    let images = stack_images([&smooth_image(8, 0.2), &smooth_image(8, 2.1), &smooth_image(8, 4.0)]).unwrap();
    let labels = [Label::Infection, Label::NoInfection, Label::Infection];
    let rng = component_rng(6, "acceptance/draw");
    let loss = |net: &ConditionalUNet<f64>| diffusion_loss::<f64, _, _>(&schedule, net, &images, &labels, 0.4, &mut rng.clone()).unwrap();
    let (_, grads) = loss(&net);
    let mut worst_unet: f64 = 0.0;
    let mut probes = 0;
    for (id, g) in grads.params() {
        let len = g.len();
        for i in (0..len).step_by((len / 5).max(1)) {
            let orig = net.params().get(id).as_slice().unwrap()[i];
            net.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
            let up = loss(&net).0;
            net.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
            let down = loss(&net).0;
            net.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice().unwrap()[i];
            if fd.abs().max(an.abs()) > 1e-7 {
                worst_unet = worst_unet.max(relative_error(fd, an));
            }
            probes += 1;
        }
    }
    ensure(worst_unet < 1e-4, || format!("diffusion loss gradient relative error {worst_unet:e}"))?;

    // Triplet loss on raw 3-d embeddings.
    let mut rng = component_rng(7, "acceptance/triplet");
    let mut store = ParamStore::<f64>::new();
    let rand3 = |rng: &mut rand_chacha::ChaCha8Rng| ArrayD::from_shape_fn(IxDyn(&[6, 3]), |_| rng.random_range(-1.0..1.0));
    let ids = [store.add("a", rand3(&mut rng)), store.add("p", rand3(&mut rng)), store.add("n", rand3(&mut rng))];
    let view = |s: &ParamStore<f64>, k: usize| s.get(ids[k]).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let value = |s: &ParamStore<f64>| triplet_loss(view(s, 0).view(), view(s, 1).view(), view(s, 2).view(), 1.0).unwrap();
    let mut tape = Tape::new();
    let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let l = tape.triplet_loss(vars[0], vars[1], vars[2], 1.0);
    let tape_value = tape.value(l).sum();
    ensure((tape_value - value(&store)).abs() < 1e-12, || "tape triplet value disagrees with triplet_loss".into())?;
    let grads = tape.backward(l).params();
    let mut worst_triplet: f64 = 0.0;
    for (id, g) in &grads {
        for i in 0..g.len() {
            let orig = store.get(*id).as_slice().unwrap()[i];
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig + h;
            let up = value(&store);
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig - h;
            let down = value(&store);
            store.get_mut(*id).as_slice_mut().unwrap()[i] = orig;
            worst_triplet = worst_triplet.max(relative_error((up - down) / (2.0 * h), g.as_slice().unwrap()[i]));
        }
    }
    ensure(worst_triplet < 1e-4, || format!("triplet gradient relative error {worst_triplet:e}"))?;

    // Triplet loss through the embedding network.
    let mut emb = tiny_embedder::<f64>(4);
    let to_input = |imgs: [&Array3<f32>; 2]| stack_images(imgs).unwrap().mapv(f64::from).into_dyn();
    let (xa, xp, xn) = (
        to_input([&smooth_image(8, 0.0), &smooth_image(8, 1.0)]),
        to_input([&smooth_image(8, 0.4), &smooth_image(8, 2.5)]),
        to_input([&smooth_image(8, 3.0), &smooth_image(8, 5.0)]),
    );
    let net_loss = |emb: &EmbeddingNet<f64>, want_grads: bool| {
        let mut tape = Tape::new();
        let p = emb.params();
        let outs: Vec<_> = [&xa, &xp, &xn].iter().map(|x| {
            let v = tape.constant((*x).clone());
            emb.forward(&mut tape, p, v)
        }).collect();
        let l = tape.triplet_loss(outs[0], outs[1], outs[2], 1.0);
        let value = tape.value(l).sum();
        (value, want_grads.then(|| tape.backward(l).params()))
    };
    let (v0, grads) = net_loss(&emb, true);
    ensure(v0 > 0.0, || "triplet loss is inactive; pick other inputs".into())?;
    let mut worst_net: f64 = 0.0;
    for (id, g) in grads.unwrap() {
        let len = g.len();
        for i in (0..len).step_by((len / 4).max(1)) {
            let orig = emb.params().get(id).as_slice().unwrap()[i];
            emb.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
            let up = net_loss(&emb, false).0;
            emb.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
            let down = net_loss(&emb, false).0;
            emb.params_mut().get_mut(id).as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice().unwrap()[i];
            if fd.abs().max(an.abs()) > 1e-7 {
                worst_net = worst_net.max(relative_error(fd, an));
            }
        }
    }
    ensure(worst_net < 1e-4, || format!("embedding-network triplet gradient relative error {worst_net:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "max relative error: denoiser {worst_unet:.1e} ({probes} probes), triplet {worst_triplet:.1e}, through embedder {worst_net:.1e}"
    ))
}

fn metric_oracles() -> Outcome {
    let close = |a: Option<f64>, b: f64, tol: f64| a.is_some_and(|a| (a - b).abs() <= tol);
    let hand = classification_metrics(ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 });
    ensure(
        close(hand.accuracy, 0.7, 1e-12)
            && close(hand.sensitivity, 0.6, 1e-12)
            && close(hand.specificity, 0.8, 1e-12)
            && close(hand.ppv, 0.75, 1e-12)
            && close(hand.f1, 2.0 / 3.0, 1e-12),
        || format!("hand example gave {hand:?}"),
    )?;
    let table = classification_metrics(ConfusionCounts { tp: 127, fp: 21, tn: 82, fn_: 21 });
    ensure(table.counts.total() == 251, || "reconstruction does not have 251 cases".into())?;
    ensure(close(table.accuracy, 0.833, 0.002) && close(table.f1, 0.858, 0.002), || format!("reconstruction gave {table:?}"))?;

    let mut rng = component_rng(12, "acceptance/fid");
    let n = 100_000;
    let (m1, s1, m2, s2) = (0.0, 1.0, 1.5, 2.0);
    let a = Array2::from_shape_fn((n, 1), |_| m1 + s1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let b = Array2::from_shape_fn((n, 1), |_| m2 + s2 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let fid = frechet_distance(a.view(), b.view()).map_err(|e| e.to_string())?;
    let exact = (m1 - m2).powi(2) + (s1 - s2).powi(2);
    ensure((fid / exact - 1.0).abs() < 0.02, || format!("1-D Fréchet distance {fid} vs {exact}"))?;

    let is = inception_style_score(ndarray::array![[0.8, 0.2], [0.2, 0.8]].view()).map_err(|e| e.to_string())?;
    let is_hand = (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln()).exp();
    ensure((is - is_hand).abs() < 1e-6, || format!("IS {is} vs {is_hand}"))?;
    let is_sharp = inception_style_score(ndarray::array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
    ensure((is_sharp - 2.0).abs() < 1e-6, || format!("IS of one-hot rows {is_sharp}"))?;

    let pts = ndarray::array![[0.0], [1.0], [4.0], [5.0]];
    let sil = silhouette_score(pts.view(), &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let sil_hand = (2.0 * (1.0 - 1.0 / 4.5) + 2.0 * (1.0 - 1.0 / 3.5)) / 4.0;
    ensure((sil - sil_hand).abs() < 1e-6, || format!("silhouette {sil} vs {sil_hand}"))?;
    Ok(format!(
        "reconstruction accuracy {:.4}, F1 {:.4}; FID {fid:.4} vs {exact}; IS and silhouette exact",
        table.accuracy.unwrap(),
        table.f1.unwrap()
    ))
}

/// Hand-written half-pixel bilinear resize, independent of the library's.
fn resize(map: &Array2<f64>, out: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sample = |src: usize, o: usize| {
        let f = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(src - 1), f - lo as f64)
    };
    Array2::from_shape_fn((out, out), |(oy, ox)| {
        let (y0, y1, fy) = sample(h, oy);
        let (x0, x1, fx) = sample(w, ox);
        let top = map[[y0, x0]] + fx * (map[[y0, x1]] - map[[y0, x0]]);
        let bot = map[[y1, x0]] + fx * (map[[y1, x1]] - map[[y1, x0]]);
        top + fy * (bot - top)
    })
}

fn score_cam_contract() -> Outcome {
    let model = tiny_embedder::<f32>(31);
    let guide = smooth_image(8, 0.7);
    let synthesis = smooth_image(8, 2.2).mapv(|v| v * 0.9 + 0.05);
    let cam = score_cam(&model, &guide, &synthesis, DEFAULT_LAYER).map_err(|e| e.to_string())?;
    let sum: f64 = cam.alpha.iter().sum();
    ensure((sum - 1.0).abs() < 1e-9, || format!("α sums to {sum}"))?;
    ensure(cam.heatmap.dim() == (8, 8), || format!("heatmap shape {:?}", cam.heatmap.dim()))?;
    ensure(cam.heatmap.iter().all(|&v| v >= 0.0), || "heatmap has negative values".into())?;

    let acts = model.activations(&synthesis.clone().insert_axis(Axis(0)), DEFAULT_LAYER).unwrap();
    let reference = model.embed(&guide.clone().insert_axis(Axis(0))).unwrap();
    let r = reference.row(0);
    let mut brute = Vec::new();
    for k in 0..acts.shape()[3] {
        let a = acts.index_axis(Axis(0), 0).index_axis(Axis(2), k).to_owned();
        let (lo, hi) = a.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let norm = if hi > lo { a.mapv(|v| (v - lo) / (hi - lo)) } else { Array2::zeros(a.dim()) };
        let mask = resize(&norm, 8);
        let masked = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (mask[[y, x]] * synthesis[[y, x, c]] as f64) as f32);
        let e = model.embed(&masked.insert_axis(Axis(0))).unwrap();
        let e = e.row(0);
        brute.push(r.dot(&e) / (r.dot(&r) * e.dot(&e)).sqrt());
    }
    ensure(brute.len() == cam.similarity.len(), || "channel counts differ".into())?;
    let worst = brute.iter().zip(&cam.similarity).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("similarities differ from brute force by {worst:e}"))?;
    Ok(format!("{} channels, α sum {sum:.12}, max similarity difference {worst:.1e}", brute.len()))
}

fn anti_leakage() -> Outcome {
    let mut rng = component_rng(99, "acceptance/cohorts");
    let mut records_seen = 0usize;
    for cohort in 0..1000 {
        let subjects = rng.random_range(3..30);
        let mut records = Vec::new();
        for s in 0..subjects {
            let label = if rng.random_bool(0.5) { Label::Infection } else { Label::NoInfection };
            for r in 0..rng.random_range(1..6) {
                let label = if rng.random_bool(0.1) { label.other() } else { label };
                records.push(ImageRecord {
                    id: format!("c{cohort}-s{s}-r{r}"),
                    image: Array3::zeros((1, 1, 1)),
                    label,
                    subject_id: format!("subject-{s}"),
                    magnification: None,
                });
            }
        }
        records.shuffle(&mut rng);
        let train = rng.random_range(0.3..0.8);
        let validation = rng.random_range(0.05..(0.95 - train));
        let fractions = SplitFractions { train, validation, test: 1.0 - train - validation };
        let n = records.len();
        let split = split_subjectwise(records, fractions, rng.random(), rng.random_bool(0.5)).map_err(|e| e.to_string())?;
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for (p, part) in split.partitions().iter().enumerate() {
            for r in part.iter() {
                ids.insert(r.id.as_str());
                if let Some(&q) = owner.get(r.subject_id.as_str()) {
                    ensure(q == p, || format!("cohort {cohort}: {} is in partitions {q} and {p}", r.subject_id))?;
                }
                owner.insert(&r.subject_id, p);
            }
        }
        ensure(ids.len() == n, || format!("cohort {cohort}: {} of {n} records survived the split", ids.len()))?;
        records_seen += n;
    }
    Ok(format!("1000 cohorts, {records_seen} records, no subject in two partitions"))
}

const TOY_CONFIG: &str = r#"
seed = 2024
[train]
steps = 2000
batch_size = 32
learning_rate = 1e-3
ema_decay = 0.995
[model]
channels = [16, 32, 64]
[embed.network]
channels = [16, 32, 64]
[embed.train]
epochs = 10
[synth]
omega = 7.5
t0 = 0.8
sampler_steps = 10
[eval]
gap_guides = 100
t0_list = [0.5, 0.6, 0.7, 0.8, 0.9]
"#;

/// Results of the toy benchmark shared by three criteria.
struct Toy {
    accuracy: f64,
    baseline: f64,
    samplers: [(SamplerKind, f64); 2],
    gaps: Vec<(f64, f64)>,
    elapsed: Duration,
}

fn run_toy_benchmark() -> Result<Toy, String> {
    let start = Instant::now();
    let config = RunConfig::from_toml_str(TOY_CONFIG, &[]).map_err(|e| e.to_string())?;
    let schedule = config.schedule.build().unwrap();
    let [train, validation, test] = config.load_partitions().map_err(|e| e.to_string())?;
    let mut net = ConditionalUNet::<f32>::new(config.model.clone(), config.schedule.t_train, &mut component_rng(config.train.seed, "diffusion/init"))
        .map_err(|e| e.to_string())?;
    let outcome = train_diffusion(&schedule, &mut net, &train, &config.train, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let mut model = DiffusionModel::new(net);
    model.sampling_params = outcome.ema;
    println!("  stage 1: {} steps in {:.0}s", config.train.steps, start.elapsed().as_secs_f64());

    let chunk = config.eval.chunk;
    let ds = SyntheticSet::build(&schedule, &model, &train, &config.synthetic_set_config(), chunk).map_err(|e| e.to_string())?;
    let vs = SyntheticSet::build(&schedule, &model, &validation, &config.synth, chunk).map_err(|e| e.to_string())?;
    let mut embedder = EmbeddingNet::<f32>::new(config.embed.network.clone(), &mut component_rng(config.embed.train.seed, "embed/init"))
        .map_err(|e| e.to_string())?;
    let val = Validation { records: &validation, synthetic: &vs };
    train_embedder(&mut embedder, &train, Some(&ds), Some(val), &config.embed.train, |_, _, _| {}).map_err(|e| e.to_string())?;
    println!("  stage 2 done at {:.0}s", start.elapsed().as_secs_f64());

    let eval = evaluate_records(&schedule, &model, &embedder, &test, &config.synth, chunk).map_err(|e| e.to_string())?;
    let rows = compare_samplers(&schedule, &model, &embedder, &test, &config.synth, chunk).map_err(|e| e.to_string())?;
    let sweep = ablate_t0(&schedule, &model, &embedder, &test, &config.synth, &config.eval.t0_list, config.eval.gap_guides, chunk)
        .map_err(|e| e.to_string())?;
    for row in &sweep {
        println!("  t0 {}: gap {:.2}, accuracy {:?}", row.t0, row.gap, row.metrics.accuracy);
    }
    Ok(Toy {
        accuracy: eval.metrics.accuracy.unwrap_or(0.0),
        baseline: majority_baseline(&test),
        samplers: rows.map(|r| (r.sampler, r.metrics.accuracy.unwrap_or(0.0))),
        gaps: sweep.iter().map(|r| (r.t0, r.gap)).collect(),
        elapsed: start.elapsed(),
    })
}

fn end_to_end(toy: &Result<Toy, String>) -> Outcome {
    let toy = toy.as_ref().map_err(Clone::clone)?;
    ensure(toy.accuracy >= 0.9, || format!("accuracy {:.3} below 0.90", toy.accuracy))?;
    ensure(toy.accuracy > toy.baseline, || format!("accuracy {:.3} not above baseline {:.3}", toy.accuracy, toy.baseline))?;
    within(toy.elapsed, 4.0 * 3600.0)?;
    Ok(format!("accuracy {:.3} vs majority baseline {:.3}; {:.0}s total", toy.accuracy, toy.baseline, toy.elapsed.as_secs_f64()))
}

fn sampler_trend(toy: &Result<Toy, String>) -> Outcome {
    let toy = toy.as_ref().map_err(Clone::clone)?;
    let [(_, ddim), (_, cfg)] = toy.samplers;
    ensure(cfg > ddim, || format!("CFG-DDIM {cfg:.3} not above DDIM {ddim:.3}"))?;
    Ok(format!("CFG-DDIM {cfg:.3} > DDIM {ddim:.3}"))
}

fn gap_trend(toy: &Result<Toy, String>) -> Outcome {
    let toy = toy.as_ref().map_err(Clone::clone)?;
    let mut violations = 0;
    for w in toy.gaps.windows(2) {
        let ((_, a), (t, b)) = (w[0], w[1]);
        if b < a {
            violations += 1;
            ensure((a - b) / a <= 0.05, || format!("gap drops {:.1}% at t0 {t}", 100.0 * (a - b) / a))?;
        }
    }
    ensure(violations <= 1, || format!("{violations} decreasing adjacent pairs"))?;
    let list: Vec<String> = toy.gaps.iter().map(|(t, g)| format!("{t}:{g:.1}")).collect();
    Ok(format!("gaps {}", list.join(" ")))
}

fn report(name: &str, outcome: Outcome, failures: &mut Vec<String>) {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(why) => {
            println!("FAIL  {name}: {why}");
            failures.push(name.to_string());
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let quick: [(&str, fn() -> Outcome); 8] = [
        ("schedule forward-process oracle", schedule_oracle),
        ("analytic-denoiser DDIM recovery", analytic_recovery),
        ("determinism suite", determinism),
        ("CFG algebra", cfg_algebra),
        ("gradient checks", gradient_checks),
        ("metric oracles", metric_oracles),
        ("Score-CAM contract", score_cam_contract),
        ("anti-leakage audit", anti_leakage),
    ];
    let mut failures = Vec::new();
    for (name, f) in quick {
        let start = Instant::now();
        let outcome = guarded(f);
        report(name, outcome.map(|d| format!("{d} [{:.1}s]", start.elapsed().as_secs_f64())), &mut failures);
    }
    let toy = catch_unwind(run_toy_benchmark).unwrap_or_else(|_| Err("toy benchmark panicked".into()));
    report("end-to-end toy benchmark", guarded(|| end_to_end(&toy)), &mut failures);
    report("CFG-DDIM beats DDIM", guarded(|| sampler_trend(&toy)), &mut failures);
    report("condition gap grows with t0", guarded(|| gap_trend(&toy)), &mut failures);
    if failures.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: {} of 11 criteria fail: {}", failures.len(), failures.join(", "));
        std::process::exit(1);
    }
}
