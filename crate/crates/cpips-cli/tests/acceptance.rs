//! Acceptance suite: runs every criterion in order and prints one
//! pass/fail line each. Exits nonzero if any criterion fails.
//!
//! Run with: cargo test -p cpips-cli --test acceptance

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use cpips_core::autodiff::Tape;
use cpips_core::codec::CodecRuntime;
use cpips_core::container;
use cpips_core::data::{self, ImageBuffer};
use cpips_core::density::DensityModel;
use cpips_core::entropy::{self, SymbolGrid};
use cpips_core::infer::Feature;
use cpips_core::metric::{self, LayerFeat, MetricWeightsData};
use cpips_core::models::{ArchConfig, DecoderModel, EncoderMode, EncoderModel, HeadModel, LEVELS};
use cpips_core::ops;
use cpips_core::params::{Constraint, ParamId, ParamStore};
use cpips_core::synth;
use cpips_core::tensor::Tensor;
use cpips_core::training::{self, TrainConfig};
use cpips_core::weights;

fn main() {
    let mut failures = Vec::new();
    let criteria: Vec<(usize, &str, fn() -> Result<String, String>)> = vec![
        (1, "gradient fidelity (primitives + composed objective)", criterion_1),
        (2, "entropy-coder optimality and round-trip exactness", criterion_2),
        (3, "rate-loss consistency with coded payload bits", criterion_3),
        (4, "codec round-trip and container identity/fuzzing", criterion_4),
        (5, "metric axioms", criterion_5),
        (6, "tap-shape law across sizes and scales", criterion_6),
        (7, "training smoke: pretrain, joint loss drop, lambda ordering", criterion_7),
        (8, "synthetic 2AFC metric training and hand-scored harness", criterion_8),
        (9, "speed property: full pipeline vs bitstream path", criterion_9),
        (10, "full-scale accuracy substitution note", criterion_10),
    ];
    for (num, name, f) in criteria {
        let t0 = Instant::now();
        match f() {
            Ok(detail) => {
                println!(
                    "criterion {num:2}: PASS ({:.1}s) — {name}: {detail}",
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(msg) => {
                println!(
                    "criterion {num:2}: FAIL ({:.1}s) — {name}: {msg}",
                    t0.elapsed().as_secs_f64()
                );
                failures.push(num);
            }
        }
    }
    if failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failures:?}");
        std::process::exit(1);
    }
}

fn lcg(n: usize, seed: &mut u64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn fd_param(
    store: &mut ParamStore,
    pid: ParamId,
    idx: usize,
    h: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(pid).data[idx];
    store.get_mut(pid).tensor.data[idx] = orig + h;
    let up = f(store);
    store.get_mut(pid).tensor.data[idx] = orig - h;
    let down = f(store);
    store.get_mut(pid).tensor.data[idx] = orig;
    (up - down) / (2.0 * h)
}

/// Full-coordinate gradient check of a scalar tape function.
fn check_all_coords(
    store: &mut ParamStore,
    forward: &mut dyn FnMut(&mut Tape, &ParamStore) -> cpips_core::autodiff::Var,
    tol: f64,
) -> Result<usize, String> {
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store);
    store.zero_grad();
    tape.backward_into(loss, store).map_err(|e| e.to_string())?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut checked = 0;
    for pid in ids {
        let n = store.value(pid).numel();
        let name = store.get(pid).name.clone();
        for idx in 0..n {
            let analytic = store.value(pid).grad.as_ref().map_or(0.0, |g| g[idx]);
            let numeric = fd_param(store, pid, idx, 1e-4, &mut |s| {
                let mut t = Tape::new();
                let l = forward(&mut t, s);
                t.value(l).item()
            });
            let re = rel_err(analytic, numeric);
            if re > tol && (analytic - numeric).abs() > 1e-8 {
                return Err(format!(
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {re:.2e})"
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn criterion_1() -> Result<String, String> {
    let t0 = Instant::now();
    let mut seed = 20240801;

    // each layer primitive under a squared-sum head
    let mut store = ParamStore::new();
    let x = store
        .register("x", Tensor::new(vec![2, 5, 5], lcg(50, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let cw = store
        .register("cw", Tensor::new(vec![3, 2, 3, 3], lcg(54, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let cb = store
        .register("cb", Tensor::new(vec![3], lcg(3, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let dw = store
        .register("dw", Tensor::new(vec![3, 2, 3, 3], lcg(54, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let db = store
        .register("db", Tensor::new(vec![2], lcg(2, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let pa = store
        .register("pa", Tensor::new(vec![2], vec![0.25, 0.6]).unwrap(), Constraint::None)
        .unwrap();
    let gbeta = store
        .register("gbeta", Tensor::new(vec![2], vec![1.0, 0.7]).unwrap(), Constraint::LowerBounded(1e-6))
        .unwrap();
    let ggamma = store
        .register(
            "ggamma",
            Tensor::new(vec![2, 2], lcg(4, &mut seed).iter().map(|v| v.abs() * 0.4 + 0.05).collect()).unwrap(),
            Constraint::NonNegative,
        )
        .unwrap();
    let lw = store
        .register("lw", Tensor::new(vec![4, 2], lcg(8, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let lb = store
        .register("lb", Tensor::new(vec![4], lcg(4, &mut seed)).unwrap(), Constraint::None)
        .unwrap();
    let n_prim = check_all_coords(
        &mut store,
        &mut |tape, s| {
            let xv = tape.param(s, x);
            let cwv = tape.param(s, cw);
            let cbv = tape.param(s, cb);
            let y = ops::conv2d(tape, xv, cwv, cbv, 2).unwrap();
            let dwv = tape.param(s, dw);
            let dbv = tape.param(s, db);
            let y = ops::deconv2d(tape, y, dwv, dbv, 2).unwrap();
            let pav = tape.param(s, pa);
            let y = ops::prelu(tape, y, pav).unwrap();
            let gb = tape.param(s, gbeta);
            let gg = tape.param(s, ggamma);
            let y = ops::gdn(tape, y, gb, gg, false).unwrap();
            let pooled = ops::avgpool_global(tape, y).unwrap();
            let lwv = tape.param(s, lw);
            let lbv = tape.param(s, lb);
            let logits = ops::linear(tape, pooled, lwv, lbv).unwrap();
            ops::softmax_cross_entropy(tape, logits, &[1]).unwrap()
        },
        1e-3,
    )?;

    // composed four-term objective on a quarter-scale model, 2x3x32x32
    let arch = ArchConfig {
        num_classes: 10,
        ..ArchConfig::with_scale(1, 4)
    };
    let cfg = TrainConfig {
        arch: arch.clone(),
        ..TrainConfig::default()
    };
    let mut store = ParamStore::new();
    let models = training::register_joint(&mut store, &arch, 7).map_err(|e| e.to_string())?;
    let mut s2 = 99u64;
    let batch = Tensor::new(vec![2, 3, 32, 32], lcg(2 * 3 * 32 * 32, &mut s2).iter().map(|v| v + 0.5).collect())
        .unwrap();
    let targets = [3usize, 7];
    let forward = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        let (loss, _) = training::total_loss(
            &mut tape, store, &models, batch.clone(), &targets, 0.01, &cfg, 0, &mut rng,
        )
        .unwrap();
        tape.value(loss).item()
    };
    // analytic gradients
    {
        let mut tape = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        let (loss, _) = training::total_loss(
            &mut tape, &store, &models, batch.clone(), &targets, 0.01, &cfg, 0, &mut rng,
        )
        .map_err(|e| e.to_string())?;
        store.zero_grad();
        tape.backward_into(loss, &mut store).map_err(|e| e.to_string())?;
    }
    // sample >= 100 coordinates across all parameters; coordinates whose
    // 1e-4 stencil would leave the constraint set (e.g. gamma entries at
    // exactly 0) are resampled — their gradients are covered by the
    // interior-valued primitive checks above
    let ids: Vec<ParamId> = store.ids().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(31337);
    let mut checked = 0usize;
    let mut retried = 0usize;
    let mut worst: f64 = 0.0;
    while checked < 120 {
        let pid = ids[rng.gen_range(0..ids.len())];
        let n = store.value(pid).numel();
        let idx = rng.gen_range(0..n);
        let value = store.value(pid).data[idx];
        let blocked = match store.get(pid).constraint {
            Constraint::NonNegative => value < 1e-4,
            Constraint::LowerBounded(b) => value - 1e-4 < b,
            Constraint::None => false,
        };
        if blocked {
            continue;
        }
        let analytic = store.value(pid).grad.as_ref().map_or(0.0, |g| g[idx]);
        let mut passed = false;
        let mut re = f64::INFINITY;
        // primary step 1e-4; a smaller step only to escape a kink crossing
        // (|.| and PReLU are piecewise linear, so a stencil that straddles a
        // kink misestimates the one-sided derivative)
        for (attempt, h) in [1e-4, 1e-5].into_iter().enumerate() {
            let numeric = fd_param(&mut store, pid, idx, h, &mut |s| forward(s));
            re = rel_err(analytic, numeric);
            if re <= 1e-3 || (analytic - numeric).abs() <= 1e-8 {
                passed = true;
                if attempt > 0 {
                    retried += 1;
                }
                break;
            }
        }
        if !passed {
            let name = &store.get(pid).name;
            return Err(format!(
                "composed loss {name}[{idx}]: analytic {analytic} vs finite difference (rel {re:.2e})"
            ));
        }
        worst = worst.max(re);
        checked += 1;
    }
    let elapsed = t0.elapsed().as_secs_f64();
    if elapsed >= 120.0 {
        return Err(format!("runtime {elapsed:.1}s exceeds the 2 minute budget"));
    }
    Ok(format!(
        "{n_prim} primitive coordinates + {checked} sampled composed-loss coordinates ({retried} kink retries), worst rel {worst:.2e}, {elapsed:.1}s"
    ))
}

fn criterion_2() -> Result<String, String> {
    let t0 = Instant::now();
    // 1e5 symbols from P = {0.9, 0.1}
    let total = 1u32 << 16;
    let p0 = (0.9f64 * total as f64).round() as u32;
    let grid = SymbolGrid {
        precision: 16,
        k_min: vec![0],
        cdf: vec![vec![0, p0, total]],
    };
    let mut rng = ChaCha20Rng::seed_from_u64(90210);
    let symbols: Vec<i64> = (0..100_000)
        .map(|_| if rng.gen::<f64>() < 0.9 { 0 } else { 1 })
        .collect();
    let (bytes, _) = entropy::encode_latent(&symbols, symbols.len(), &grid).map_err(|e| e.to_string())?;
    let measured = bytes.len() as f64 * 8.0;
    let shannon = {
        let h: f64 = -(0.9f64.log2() * 0.9 + 0.1f64.log2() * 0.1);
        100_000.0 * h
    };
    if (shannon - 46_899.0).abs() > 100.0 {
        return Err(format!("unexpected Shannon bound {shannon:.0}"));
    }
    // the drawn sample's ideal codelength under the quantized model
    let ideal = entropy::ideal_bits(&symbols, symbols.len(), &grid);
    let bound = ideal.max(shannon) * 1.01 + 64.0;
    if measured > bound {
        return Err(format!("measured {measured:.0} bits > bound {bound:.0}"));
    }
    let decoded = entropy::decode_latent(&bytes, symbols.len(), &grid).map_err(|e| e.to_string())?;
    if decoded != symbols {
        return Err("skewed round-trip mismatch".into());
    }

    // fuzz: 1e4 random (grid, symbols) pairs round-trip exactly
    for trial in 0..10_000 {
        let n_sym = rng.gen_range(1..24usize);
        let mut cdf = vec![0u32];
        for i in 1..n_sym {
            let remaining = total - (n_sym - i) as u32;
            let lo = cdf.last().unwrap() + 1;
            cdf.push(rng.gen_range(lo..=remaining));
        }
        cdf.push(total);
        let k_min = rng.gen_range(-50i64..50);
        let grid = SymbolGrid {
            precision: 16,
            k_min: vec![k_min],
            cdf: vec![cdf],
        };
        let count = rng.gen_range(0..200usize);
        let symbols: Vec<i64> = (0..count)
            .map(|_| k_min + rng.gen_range(0..n_sym) as i64)
            .collect();
        let (bytes, clamped) =
            entropy::encode_latent(&symbols, count, &grid).map_err(|e| e.to_string())?;
        if clamped != 0 {
            return Err(format!("trial {trial}: unexpected clamping"));
        }
        let back = entropy::decode_latent(&bytes, count, &grid).map_err(|e| e.to_string())?;
        if back != symbols {
            return Err(format!("trial {trial}: round-trip mismatch"));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    if elapsed >= 30.0 {
        return Err(format!("runtime {elapsed:.1}s exceeds the 30s budget"));
    }
    Ok(format!(
        "{measured:.0} bits vs Shannon {shannon:.0} (+{:.2}%), 10000 fuzz round-trips exact, {elapsed:.1}s",
        100.0 * (measured - shannon) / shannon
    ))
}

fn quarter_runtime(seed: u64) -> (ParamStore, CodecRuntime) {
    let arch = ArchConfig {
        num_classes: 10,
        ..ArchConfig::with_scale(1, 4)
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    EncoderModel::register(&mut store, &arch, &mut rng).unwrap();
    DecoderModel::register(&mut store, &arch, &mut rng).unwrap();
    HeadModel::register(&mut store, &arch, &mut rng).unwrap();
    DensityModel::register(&mut store, "density", arch.latent_channels().unwrap(), &mut rng).unwrap();
    let runtime = CodecRuntime::from_store(&store).unwrap();
    (store, runtime)
}

fn random_image(w: u32, h: u32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // smooth ramps + noise, so latents are not all in one bin
    let (wn, hn) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * wn * hn];
    let fx = rng.gen_range(0.5..3.0);
    let fy = rng.gen_range(0.5..3.0);
    for y in 0..hn {
        for x in 0..wn {
            for c in 0..3 {
                let v = 0.5
                    + 0.3 * (std::f64::consts::TAU * (fx * x as f64 / wn as f64 + 0.2 * c as f64)).sin()
                    + 0.15 * (std::f64::consts::TAU * fy * y as f64 / hn as f64).cos()
                    + 0.1 * (rng.gen::<f64>() - 0.5);
                data[(y * wn + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(w, h, data)
}

fn criterion_3() -> Result<String, String> {
    let (_store, runtime) = quarter_runtime(555);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..10 {
        let img = random_image(64, 64, 7000 + i);
        let (bytes, stats) = runtime.encode_image(&img, 1).map_err(|e| e.to_string())?;
        let payload_bits = (bytes.len() - container::HEADER_LEN) as f64 * 8.0;
        let bound = stats.rate_loss_bits * 1.02 + 64.0;
        worst = worst.max(payload_bits - bound);
        if payload_bits > bound {
            return Err(format!(
                "image {i}: payload {payload_bits:.0} bits > rate_loss bound {bound:.0}"
            ));
        }
    }
    Ok(format!("10 images, worst margin {worst:.1} bits under the bound"))
}

fn criterion_4() -> Result<String, String> {
    let (_store, runtime) = quarter_runtime(777);
    // round-trip determinism and exact latent reproduction
    let img = random_image(96, 64, 99);
    let (padded, _) = data::pad_to_multiple(&img, 32);
    let (symbols, _, _) = runtime.latent_symbols(&padded).map_err(|e| e.to_string())?;
    let (bytes_a, _) = runtime.encode_image(&img, 2).map_err(|e| e.to_string())?;
    let (bytes_b, _) = runtime.encode_image(&img, 2).map_err(|e| e.to_string())?;
    if bytes_a != bytes_b {
        return Err("two encodes differ".into());
    }
    let (_, latent) = runtime.decode_latent(&bytes_a).map_err(|e| e.to_string())?;
    let ints: Vec<i64> = latent.data.iter().map(|&v| v as i64).collect();
    if ints != symbols {
        return Err("decoded latents differ from encoder symbols".into());
    }
    let x1 = runtime.decode_image(&bytes_a).map_err(|e| e.to_string())?;
    let x2 = runtime.decode_image(&bytes_a).map_err(|e| e.to_string())?;
    if x1 != x2 {
        return Err("two decodes differ bitwise".into());
    }

    // 1e3 random valid headers round-trip
    let mut rng = ChaCha20Rng::seed_from_u64(123);
    for _ in 0..1000 {
        let header = container::ContainerHeader::new(
            rng.gen_range(0..8),
            rng.gen_range(1..4096),
            rng.gen_range(1..4096),
            rng.gen_range(1..1024),
            rng.gen(),
            rng.gen_range(0..64),
        );
        let payload: Vec<u8> = (0..header.payload_length).map(|_| rng.gen()).collect();
        let bytes = container::serialize(&header, &payload).map_err(|e| e.to_string())?;
        let (parsed, got) = container::parse(&bytes).map_err(|e| e.to_string())?;
        if parsed != header || got != payload {
            return Err("header round-trip mismatch".into());
        }
    }
    // 1e5 fuzz inputs: typed error or valid parse, no crash
    let mut errors = 0usize;
    for _ in 0..100_000 {
        let len = rng.gen_range(0..96usize);
        let mut buf: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        if len >= 4 && rng.gen_bool(0.3) {
            buf[..4].copy_from_slice(b"CPIC");
        }
        if container::parse(&buf).is_err() {
            errors += 1;
        }
    }
    Ok(format!(
        "latents exact, reconstruction bit-identical, 1000 headers round-tripped, 100000 fuzz inputs ({errors} rejected) crash-free"
    ))
}

fn criterion_5() -> Result<String, String> {
    let (_store, runtime) = quarter_runtime(888);
    let channels = runtime.arch.scaled_channels().map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(4096);
    let mut weights = MetricWeightsData::ones(channels);
    for w in weights.w.iter_mut() {
        for v in w.iter_mut() {
            *v = rng.gen_range(0.0..2.0);
        }
    }
    for trial in 0..50 {
        let mk = |rng: &mut ChaCha20Rng| Feature {
            c: channels[LEVELS - 1],
            h: 2,
            w: 2,
            data: (0..channels[LEVELS - 1] * 4)
                .map(|_| rng.gen_range(-4i32..=4) as f32)
                .collect(),
        };
        let ya = mk(&mut rng);
        let yb = mk(&mut rng);
        let ta = metric::normalized_taps(&runtime, &ya).map_err(|e| e.to_string())?;
        let tb = metric::normalized_taps(&runtime, &yb).map_err(|e| e.to_string())?;

        let d_aa = metric::cpips_distance(&ta, &ta, &weights).map_err(|e| e.to_string())?;
        if d_aa.abs() > 1e-12 {
            return Err(format!("trial {trial}: cpips(x,x) = {d_aa}"));
        }
        let d_ab = metric::cpips_distance(&ta, &tb, &weights).map_err(|e| e.to_string())?;
        let d_ba = metric::cpips_distance(&tb, &ta, &weights).map_err(|e| e.to_string())?;
        if d_ab != d_ba {
            return Err(format!("trial {trial}: symmetry violated ({d_ab} vs {d_ba})"));
        }
        if d_ab < 0.0 {
            return Err(format!("trial {trial}: negative distance {d_ab}"));
        }
        // five-layer decomposition against a monolithic direct evaluation
        let direct = {
            let mut total = 0.0;
            for l in 0..LEVELS {
                let (a, b) = (&ta.layers[l], &tb.layers[l]);
                let sp = a.h * a.w;
                let mut acc = 0.0;
                for s in 0..sp {
                    for ch in 0..a.c {
                        let d = weights.w[l][ch] * (a.data[ch * sp + s] - b.data[ch * sp + s]);
                        acc += d * d;
                    }
                }
                total += acc / sp as f64;
            }
            total
        };
        if rel_err(d_ab, direct) > 1e-10 {
            return Err(format!("trial {trial}: decomposition {d_ab} vs direct {direct}"));
        }
        // positive scaling of the weights leaves 2AFC ordering unchanged
        let scaled = MetricWeightsData {
            w: weights.w.clone().map(|w| w.iter().map(|v| 3.0 * v).collect()),
        };
        let d_s = metric::cpips_distance(&ta, &tb, &scaled).map_err(|e| e.to_string())?;
        if rel_err(d_s, 9.0 * d_ab) > 1e-9 {
            return Err(format!("trial {trial}: scaling broke c^2 law ({d_s} vs {})", 9.0 * d_ab));
        }
    }
    // eval_2afc invariance under weight scaling, on synthetic feature sets
    let feats: Vec<metric::JudgmentFeatures> = (0..40)
        .map(|_| {
            let mut mk = || -> [Vec<f64>; LEVELS] {
                let mut out: [Vec<f64>; LEVELS] = Default::default();
                for (l, slot) in out.iter_mut().enumerate() {
                    *slot = (0..channels[l]).map(|_| rng.gen_range(0.0..0.01)).collect();
                }
                out
            };
            metric::JudgmentFeatures {
                s0: mk(),
                s1: mk(),
                h: rng.gen_range(0.0..1.0),
                subset: None,
            }
        })
        .collect();
    let items = |w: &MetricWeightsData| -> Vec<(f64, f64, f64, Option<String>)> {
        feats
            .iter()
            .map(|f| {
                let (d0, d1) = metric::feature_distances(f, w);
                (d0, d1, f.h, None)
            })
            .collect()
    };
    let base = metric::eval_2afc(&items(&weights));
    let scaled = MetricWeightsData {
        w: weights.w.clone().map(|w| w.iter().map(|v| 2.5 * v).collect()),
    };
    let after = metric::eval_2afc(&items(&scaled));
    if base.accuracy != after.accuracy {
        return Err(format!(
            "2AFC accuracy changed under weight scaling: {} vs {}",
            base.accuracy, after.accuracy
        ));
    }
    Ok(format!(
        "50 instances: identity/symmetry/nonnegativity/decomposition hold; scaling invariance exact (accuracy {:.3})",
        base.accuracy
    ))
}

fn criterion_6() -> Result<String, String> {
    let sizes = [32usize, 64, 96, 128, 160];
    let mut combos = 0;
    for scale_den in [1u32, 4] {
        let arch = ArchConfig {
            num_classes: 10,
            ..ArchConfig::with_scale(1, scale_den)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(600 + scale_den as u64);
        let enc = EncoderModel::register(&mut store, &arch, &mut rng).map_err(|e| e.to_string())?;
        let dec = DecoderModel::register(&mut store, &arch, &mut rng).map_err(|e| e.to_string())?;
        for &h in &sizes {
            for &w in &sizes {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::zeros(vec![3, h, w]));
                let etaps = enc
                    .forward(&mut tape, &store, x, EncoderMode::Codec)
                    .map_err(|e| e.to_string())?;
                let dtaps = dec
                    .forward(&mut tape, &store, etaps.y[4])
                    .map_err(|e| e.to_string())?;
                for l in 0..4 {
                    let ys = tape.shape(etaps.y[l]).to_vec();
                    let es = tape.shape(dtaps.e[l]).to_vec();
                    if ys != es {
                        return Err(format!(
                            "scale 1/{scale_den}, {h}x{w}, level {}: y {ys:?} vs e {es:?}",
                            l + 1
                        ));
                    }
                }
                let xs = tape.shape(dtaps.x_hat).to_vec();
                if xs != vec![3, h, w] {
                    return Err(format!("reconstruction shape {xs:?} for input {h}x{w}"));
                }
                combos += 1;
            }
        }
    }
    Ok(format!("{combos} size/scale combinations verified"))
}

fn criterion_7() -> Result<String, String> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_manifest = synth::gen_classification_set(&dir.path().join("train"), 2000, 10, 32, 4001)
        .map_err(|e| e.to_string())?;
    let eval_manifest = synth::gen_classification_set(&dir.path().join("eval"), 400, 10, 32, 4002)
        .map_err(|e| e.to_string())?;
    let train = data::load_class_manifest(&train_manifest, 10).map_err(|e| e.to_string())?;
    let eval = data::load_class_manifest(&eval_manifest, 10).map_err(|e| e.to_string())?;

    let arch = ArchConfig {
        num_classes: 10,
        ..ArchConfig::with_scale(1, 4)
    };
    let mut lambda_table = std::collections::BTreeMap::new();
    lambda_table.insert("1".to_string(), 0.01);
    lambda_table.insert("2".to_string(), 0.1);
    let cfg = TrainConfig {
        arch: arch.clone(),
        lambda_table,
        epochs_stage1: 20,
        epochs_stage2: 100,
        batch_size: 16,
        crop_stage1: 32,
        crop_stage2: 32,
        seed: 2024,
        ..TrainConfig::default()
    };

    // stage 1: held-out top-1 must beat 40% (chance is 10%)
    let pre = training::pretrain_classifier(&train, &eval, &cfg).map_err(|e| e.to_string())?;
    let first_loss = pre.log.first().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    let top1 = pre
        .log
        .last()
        .and_then(|e| e.top1_eval)
        .ok_or("missing eval accuracy")?;
    if top1 <= 0.40 {
        return Err(format!("held-out top-1 {top1:.3} <= 0.40"));
    }
    if first_loss >= (10f64).ln() + 0.2 {
        return Err(format!("first-epoch loss {first_loss:.3} did not move below chance level"));
    }

    // stage 2 smoke at two lambdas from the same pretrained weights
    let pre_bytes = weights::store_to_bytes(&pre.store);
    let entries = weights::bytes_to_entries(&pre_bytes).map_err(|e| e.to_string())?;
    let smoke_cfg = TrainConfig {
        batch_size: 8,
        ..cfg.clone()
    };
    let jo_low = training::train_joint(&train, Some(&entries), &smoke_cfg, 1, Some(500))
        .map_err(|e| e.to_string())?;
    let totals: Vec<f64> = jo_low.log.iter().map(|b| b.total).collect();
    if totals.len() < 500 {
        return Err(format!("expected 500 steps, got {}", totals.len()));
    }
    let ma = training::moving_average(&totals, 50);
    let (ma50, ma500) = (ma[49], ma[499]);
    if !(ma500 <= 0.8 * ma50) {
        return Err(format!(
            "moving-average loss dropped only {:.1}% (from {ma50:.3} to {ma500:.3})",
            100.0 * (1.0 - ma500 / ma50)
        ));
    }
    let jo_high = training::train_joint(&train, Some(&entries), &smoke_cfg, 2, Some(500))
        .map_err(|e| e.to_string())?;

    // lambda ordering on held-out images through the real coder
    let (bpp_low, mse_low) =
        training::eval_rate_distortion(&jo_low.store, &eval, 20).map_err(|e| e.to_string())?;
    let (bpp_high, mse_high) =
        training::eval_rate_distortion(&jo_high.store, &eval, 20).map_err(|e| e.to_string())?;
    if !(mse_high < mse_low && bpp_high > bpp_low) {
        return Err(format!(
            "lambda ordering violated: low (bpp {bpp_low:.4}, mse {mse_low:.6}) vs high (bpp {bpp_high:.4}, mse {mse_high:.6})"
        ));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    if elapsed >= 1800.0 {
        return Err(format!("runtime {elapsed:.0}s exceeds the 30 minute budget"));
    }
    Ok(format!(
        "top-1 {top1:.3}, joint loss {ma50:.2} -> {ma500:.2} ({:.0}% drop), RD ordering (bpp {bpp_low:.3}<{bpp_high:.3}, mse {mse_low:.5}>{mse_high:.5}), {elapsed:.0}s",
        100.0 * (1.0 - ma500 / ma50)
    ))
}

fn criterion_8() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = synth::gen_judgment_set(dir.path(), 1000, 64, 808).map_err(|e| e.to_string())?;
    let records = data::load_judgment_manifest(&manifest).map_err(|e| e.to_string())?;
    let (_store, runtime) = quarter_runtime(909);
    let features = metric::judgment_features(&runtime, &records).map_err(|e| e.to_string())?;
    let channels = runtime.arch.scaled_channels().map_err(|e| e.to_string())?;

    let (train_feats, held_out) = features.split_at(800);
    let out = metric::train_metric(train_feats, channels, &metric::MetricTrainConfig::default())
        .map_err(|e| e.to_string())?;
    let trained = MetricWeightsData::from_store(&out.store).map_err(|e| e.to_string())?;
    // nonnegativity after training
    for (l, w) in trained.w.iter().enumerate() {
        if w.iter().any(|&v| v < 0.0) {
            return Err(format!("negative metric weight at layer {}", l + 1));
        }
    }
    let items: Vec<(f64, f64, f64, Option<String>)> = held_out
        .iter()
        .map(|f| {
            let (d0, d1) = metric::feature_distances(f, &trained);
            (d0, d1, f.h, f.subset.clone())
        })
        .collect();
    let eval = metric::eval_2afc(&items);
    if eval.accuracy < 0.85 {
        return Err(format!("held-out 2AFC accuracy {:.3} < 0.85", eval.accuracy));
    }
    // the judgment net predicts the right side for an easy pair
    let (d0, d1) = metric::feature_distances(&held_out[0], &trained);
    let h_hat = metric::judge(&out.store, d0, d1).map_err(|e| e.to_string())?;
    if !(h_hat > 0.0 && h_hat < 1.0) {
        return Err(format!("judgment output {h_hat} left (0,1)"));
    }

    // brute-force hand-scored fixture reproduced exactly
    let fixture = vec![
        (0.2, 0.1, 1.0, None), // prefers p1, humans prefer p1 -> 1.0
        (0.1, 0.2, 1.0, None), // prefers p0, humans prefer p1 -> 0.0
        (0.3, 0.3, 0.8, None), // tie -> 0.5
    ];
    let fx = metric::eval_2afc(&fixture);
    if (fx.accuracy - 0.5).abs() > 0.0 {
        return Err(format!("hand-scored fixture accuracy {} != 0.5", fx.accuracy));
    }
    Ok(format!(
        "held-out 2AFC accuracy {:.3} (n={}), BCE {:.3} -> {:.3}, fixture exact",
        eval.accuracy,
        eval.n,
        out.bce_log.first().unwrap(),
        out.bce_log.last().unwrap()
    ))
}

fn criterion_9() -> Result<String, String> {
    // full-size model, two 768x512 images
    let arch = ArchConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(9001);
    let enc = EncoderModel::register(&mut store, &arch, &mut rng).map_err(|e| e.to_string())?;
    let dec = DecoderModel::register(&mut store, &arch, &mut rng).map_err(|e| e.to_string())?;
    HeadModel::register(&mut store, &arch, &mut rng).map_err(|e| e.to_string())?;
    DensityModel::register(&mut store, "density", 320, &mut rng).map_err(|e| e.to_string())?;
    let runtime = CodecRuntime::from_store(&store).map_err(|e| e.to_string())?;
    let weights = MetricWeightsData::ones(arch.scaled_channels().map_err(|e| e.to_string())?);
    let supports = (0..runtime.grid.channels()).map(|c| runtime.grid.support(c)).collect();
    let reference = cpips_core::reference::ReferenceMetric::from_store(
        &store, &enc, &dec, weights.clone(), supports,
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..2u64 {
        let img = random_image(768, 512, 42 + i);
        data::save_ppm(&dir.path().join(format!("img{i}.ppm")), &img).map_err(|e| e.to_string())?;
    }

    // time the three pipelines over the prepared pairs (1 timed rep after
    // a discarded warm-up keeps the reference pipeline affordable here; the
    // CLI default is 10 reps)
    let inputs = prepare_bench_inputs(dir.path(), &runtime, 2)?;
    let time_method = |f: &mut dyn FnMut() -> f64| -> (f64, f64) {
        let warm = f();
        let t0 = Instant::now();
        let check = f();
        (t0.elapsed().as_secs_f64(), warm.max(check))
    };
    let (t_bits, _) = time_method(&mut || {
        inputs
            .iter()
            .map(|(_, _, a, b)| metric::distance_from_bitstreams(&runtime, &weights, a, b).unwrap())
            .sum()
    });
    let (t_pixels, _) = time_method(&mut || {
        inputs
            .iter()
            .map(|(a, b, _, _)| metric::distance_from_images(&runtime, &weights, a, b).unwrap())
            .sum()
    });
    let padded: Vec<(Tensor, Tensor)> = inputs
        .iter()
        .map(|(a, b, _, _)| (data::pad_to_multiple(a, 32).0, data::pad_to_multiple(b, 32).0))
        .collect();
    let (t_ref, _) = time_method(&mut || padded.iter().map(|(a, b)| reference.distance(a, b)).sum());

    let ratio_full = t_ref / t_bits;
    let ratio_pixels = t_pixels / t_bits;
    if ratio_pixels <= 1.0 {
        return Err(format!(
            "pixels/bitstream ratio {ratio_pixels:.2} <= 1 (bitstream path must skip encoder cost)"
        ));
    }
    if ratio_full < 10.0 {
        return Err(format!(
            "full-pipeline/bitstream ratio {ratio_full:.2} < 10 (bits {t_bits:.2}s, pixels {t_pixels:.2}s, reference {t_ref:.2}s)"
        ));
    }
    Ok(format!(
        "ratios: reference/bitstream {ratio_full:.1}, pixels/bitstream {ratio_pixels:.2} (bits {t_bits:.2}s, pixels {t_pixels:.2}s, reference {t_ref:.1}s)"
    ))
}

type BenchPair = (ImageBuffer, ImageBuffer, Vec<u8>, Vec<u8>);

fn prepare_bench_inputs(
    dir: &std::path::Path,
    runtime: &CodecRuntime,
    quality: u8,
) -> Result<Vec<BenchPair>, String> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let original = data::load_image(&p).map_err(|e| e.to_string())?;
        let (bytes_a, _) = runtime.encode_image(&original, quality).map_err(|e| e.to_string())?;
        let distorted = runtime.decode_image(&bytes_a).map_err(|e| e.to_string())?;
        let (bytes_b, _) = runtime.encode_image(&distorted, quality).map_err(|e| e.to_string())?;
        out.push((original, distorted, bytes_a, bytes_b));
    }
    Ok(out)
}

fn criterion_10() -> Result<String, String> {
    // Full-scale top-1 and 2AFC table values are out of desk-scale reach by
    // construction; criterion 7's above-chance bound and criterion 8's
    // constructed-ground-truth bound stand in for them. Nothing further to
    // assert here beyond their presence.
    Ok("substituted by criteria 7 and 8 (not asserted at full scale)".into())
}

// unused-helper guard: LayerFeat is exercised through criterion 5
#[allow(dead_code)]
fn _layer_feat_guard(f: LayerFeat) -> usize {
    f.c
}
