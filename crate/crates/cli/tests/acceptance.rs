//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use heatmark_core::augment::{sample_params, warp_image, warp_landmarks};
use heatmark_core::codec::{cone_value, decode, detect_double_attention, encode, indicator};
use heatmark_core::dataset::{synth_dataset, synth_generate};
use heatmark_core::gradcheck::{check_case, check_model, check_weighted_loss, primitive_cases};
use heatmark_core::loss::{plain_l1_loss, weighted_loss};
use heatmark_core::trainer::{evaluate, split, train, train_split};
use heatmark_core::{
    AffineParams, AugmentConfig, CodecConfig, HeatmapStack, LandmarkSet, ModelConfig, Point, Tensor, TrainConfig,
    UNetModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, grid: usize) -> LandmarkSet {
    let points = (0..n)
        .map(|_| Point::new(rng.random_range(0..grid as i64), rng.random_range(0..grid as i64)))
        .collect();
    LandmarkSet::new(points, grid).unwrap()
}

fn codec_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for grid in [32usize, 64, 128] {
        let config = CodecConfig::new(10.0, grid).map_err(err)?;
        for k in 0..1000 {
            let n = rng.random_range(1..=8);
            let l = random_set(&mut rng, n, grid);
            let back = decode(&encode(&l, &config).map_err(err)?);
            ensure(back == l, || format!("grid {grid} set {k}: {:?} decoded as {:?}", l.points(), back.points()))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("3000 sets exact in {secs:.2} s"))
}

fn cone_values() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut offsets = 0;
    for _ in 0..50 {
        let a = Point::new(rng.random_range(12..116), rng.random_range(12..116));
        let hm = encode(&LandmarkSet::new(vec![a], 128).map_err(err)?, &CodecConfig::default()).map_err(err)?;
        let map = hm.map(0);
        let mut support = 0;
        for dy in -12i64..=12 {
            for dx in -12i64..=12 {
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                let want = cone_value(d, 10.0) as f32;
                let got = map[((a.y + dy) * 128 + a.x + dx) as usize];
                ensure(got == want, || format!("offset ({dx}, {dy}) from {a:?}: {got} != {want}"))?;
                if d >= 10.0 {
                    ensure(got == 0.0, || format!("nonzero at d = {d}"))?;
                }
                support += (dx * dx + dy * dy < 100) as usize;
                offsets += 1;
            }
        }
        let nonzero = map.iter().filter(|&&v| v > 0.0).count();
        ensure(nonzero == support, || format!("support {nonzero} vs lattice count {support}"))?;
    }
    Ok(format!("{offsets} offsets exact, support 305 matches lattice count"))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let codec = CodecConfig::new(10.0, 64).map_err(err)?;
    for k in 0..1000 {
        let n = rng.random_range(1..=4);
        let gt = encode(&random_set(&mut rng, n, 64), &codec).map_err(err)?;
        let pred = HeatmapStack::new(Tensor::from_fn(&[n, 64, 64], |_| rng.random_range(0.0..=1.0f32))).map_err(err)?;
        let w = weighted_loss(&pred, &gt, &indicator(&gt)).map_err(err)?.value;
        let p = plain_l1_loss(&pred, &gt).map_err(err)?;
        ensure((0.0..=1.0).contains(&w) && (0.0..=1.0).contains(&p), || format!("stack {k}: {w}, {p}"))?;
    }
    for c in [0.0f32, 0.2, 1.0] {
        let gt = encode(&random_set(&mut rng, 3, 64), &codec).map_err(err)?;
        let pred = HeatmapStack::new(gt.maps().map(|g| if g + c <= 1.0 { g + c } else { g - c })).map_err(err)?;
        let w = weighted_loss(&pred, &gt, &indicator(&gt)).map_err(err)?.value;
        let p = plain_l1_loss(&pred, &gt).map_err(err)?;
        ensure((w - c as f64).abs() <= 1e-6 && (p - c as f64).abs() <= 1e-6, || {
            format!("gap {c}: weighted {w}, plain {p}")
        })?;
    }
    let gt = encode(&LandmarkSet::new(vec![Point::new(64, 64)], 128).map_err(err)?, &CodecConfig::default())
        .map_err(err)?;
    let zeros = HeatmapStack::new(Tensor::zeros(&[1, 128, 128])).map_err(err)?;
    let w = weighted_loss(&zeros, &gt, &indicator(&gt)).map_err(err)?.value;
    let p = plain_l1_loss(&zeros, &gt).map_err(err)?;
    ensure(w >= 10.0 * p, || format!("all-black weighted {w} vs plain {p}"))?;
    Ok(format!("1000 stacks in [0, 1]; gaps exact; all-black weighted/plain = {:.1}", w / p))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cases = primitive_cases();
    for case in &cases {
        let e = check_case(case, 50).map_err(err)?;
        ensure(e <= 1e-4, || format!("{}: relative error {e:e}", case.name))?;
        worst = worst.max(e);
    }
    for seed in 0..50 {
        let e = check_weighted_loss(seed).map_err(err)?;
        ensure(e <= 1e-4, || format!("weighted loss seed {seed}: {e:e}"))?;
        worst = worst.max(e);
        let (d, c) = check_model(seed).map_err(err)?;
        ensure(d <= 1e-4 && c <= 1e-4, || format!("full model seed {seed}: {d:e}, {c:e}"))?;
        worst = worst.max(d).max(c);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} primitives + loss + U-Net over 50 seeds, worst {worst:.1e}, {secs:.1} s", cases.len()))
}

fn shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seen = Vec::new();
    for (s, n, b) in [(16usize, 1usize, 2usize), (64, 4, 3), (512, 52, 1)] {
        let model = UNetModel::<f32>::build(ModelConfig {
            input_size: s,
            num_landmarks: n,
            ..ModelConfig::default()
        })
        .map_err(err)?;
        let x = Tensor::from_fn(&[b, 3, s, s], |_| rng.random_range(0.0..1.0f32));
        let out = model.predict(&x).map_err(err)?;
        ensure(out.shape() == [b, n, s / 4, s / 4], || format!("S={s}: shape {:?}", out.shape()))?;
        ensure(out.data().iter().all(|&v| v > 0.0 && v < 1.0), || format!("S={s}: value outside (0, 1)"))?;
        seen.push(format!("{s}->{b}x{n}x{}x{}", s / 4, s / 4));
    }
    Ok(seen.join(", "))
}

/// Epoch budget for the desk run.
const DESK_EPOCHS: usize = 120;
const OVERFIT_EPOCHS: usize = 150;

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let ds = synth_dataset(200, 64, 2024).map_err(err)?;
    let config = TrainConfig {
        epochs: DESK_EPOCHS,
        seed: 11,
        codec: CodecConfig::new(10.0, 16).map_err(err)?,
        ..TrainConfig::default()
    };
    let mut model = UNetModel::build(ModelConfig {
        seed: 11,
        ..ModelConfig::default()
    })
    .map_err(err)?;
    let outcome = train(&mut model, &ds, &config, &mut |_| Ok(())).map_err(err)?;
    let records = &outcome.history.records;
    let (first, last) = (&records[0], &records[records.len() - 1]);
    let (_, val_idx) = split(ds.len(), config.split_ratio, config.seed).map_err(err)?;
    let metrics = evaluate(&model, &ds.subset(&val_idx), &config.codec).map_err(err)?;

    let one = synth_dataset(1, 64, 77).map_err(err)?;
    let mut single = UNetModel::build(ModelConfig::default()).map_err(err)?;
    let overfit_config = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        augment: AugmentConfig::disabled(),
        ..config.clone()
    };
    let overfit = train_split(&mut single, &one, &[0], &[], &overfit_config, &mut |_| Ok(())).map_err(err)?;
    let overfit_loss = overfit.history.records.last().unwrap().val_loss;
    let secs = start.elapsed().as_secs_f64();

    let detail = format!(
        "{DESK_EPOCHS} epochs: val {:.4} (epoch 1 {:.4}), val px error {:.3}, within 2px {:.3}, \
         overfit-one {:.4} after {OVERFIT_EPOCHS} epochs, {:.0} s",
        last.val_loss, first.val_loss, metrics.mean_pixel_error, metrics.within_2px, overfit_loss, secs
    );
    ensure(last.val_loss <= 0.15, || format!("val loss too high; {detail}"))?;
    ensure(metrics.mean_pixel_error <= 2.0, || format!("pixel error too high; {detail}"))?;
    ensure(overfit_loss <= 0.05, || format!("overfit-one too high; {detail}"))?;
    ensure(last.val_loss < 0.5 * first.val_loss, || format!("not monotone enough; {detail}"))?;
    ensure(secs <= 15.0 * 60.0, || format!("too slow; {detail}"))?;
    Ok(detail)
}

fn augmentation_consistency() -> Outcome {
    let s = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for draw in 0..200 {
        let params = sample_params(&AugmentConfig::default(), &mut rng, s, s);
        let p = Point::new(rng.random_range(16..48), rng.random_range(16..48));
        let mut img = Tensor::zeros(&[3, s, s]);
        for c in 0..3 {
            img.data_mut()[c * s * s + p.y as usize * s + p.x as usize] = 1.0;
        }
        let warped = warp_image(&img, &params).map_err(err)?;
        let (_, idx) = heatmark_core::tensor::max_with_index(&warped.data()[..s * s]).ok_or("empty")?;
        let found = Point::new((idx % s) as i64, (idx / s) as i64);
        let (moved, _) = warp_landmarks(&LandmarkSet::new(vec![p], s).map_err(err)?, &params).map_err(err)?;
        let d = found.distance(moved.points()[0]);
        ensure(d <= 1.0, || format!("draw {draw}: image peak {found:?}, landmark {:?}", moved.points()[0]))?;
        worst = worst.max(d);
    }
    let img = Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0f32));
    let id = AffineParams::identity(AffineParams::image_center(s, s));
    ensure(warp_image(&img, &id).map_err(err)? == img, || "identity changed the image".into())?;
    let l = random_set(&mut rng, 6, s);
    ensure(warp_landmarks(&l, &id).map_err(err)?.0 == l, || "identity moved landmarks".into())?;
    Ok(format!("200 draws, worst disagreement {worst:.3} px; identity exact"))
}

fn run_train(data: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_heatmark"))
        .args(["train", "--data"])
        .arg(data)
        .arg("--out")
        .arg(out)
        .args(["--epochs", "3", "--seed", "5"])
        .output()
        .map_err(err)?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (_, manifest) = synth_generate(24, 64, 9, &dir.path().join("data")).map_err(err)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_train(&manifest, &a.join("model.gmrk"))?;
    run_train(&manifest, &b.join("model.gmrk"))?;
    for name in ["losses.csv", "model.gmrk", "model.gmrk.best"] {
        let (x, y) = (std::fs::read(a.join(name)).map_err(err)?, std::fs::read(b.join(name)).map_err(err)?);
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok("losses.csv, model.gmrk and model.gmrk.best byte-identical across two CLI runs".into())
}

fn double_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let codec = CodecConfig::new(10.0, 64).map_err(err)?;
    let mut fixtures = 0;
    for _ in 0..200 {
        let gt = encode(&random_set(&mut rng, 4, 64), &codec).map_err(err)?;
        for i in 0..4 {
            let peaks = detect_double_attention(gt.map(i), 64, 0.5, 10.0).len();
            ensure(peaks == 1, || format!("ground truth map with {peaks} peaks"))?;
        }
        let a = Point::new(rng.random_range(0..64), rng.random_range(0..64));
        let b = loop {
            let b = Point::new(rng.random_range(0..64), rng.random_range(0..64));
            if a.distance(b) >= 20.0 {
                break b;
            }
        };
        let two = encode(&LandmarkSet::new(vec![a, b], 64).map_err(err)?, &codec).map_err(err)?;
        let merged: Vec<f32> = two.map(0).iter().zip(two.map(1)).map(|(x, y)| x.max(*y)).collect();
        let peaks = detect_double_attention(&merged, 64, 0.5, 10.0);
        ensure(peaks.len() == 2, || format!("two-cone fixture {a:?} {b:?}: {} peaks", peaks.len()))?;
        fixtures += 1;
    }
    Ok(format!("800 ground-truth maps with no double attention; {fixtures} two-cone fixtures give 2 peaks"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("codec exactness", codec_exactness),
        ("cone values", cone_values),
        ("loss bounds and identities", loss_identities),
        ("gradient correctness", gradient_correctness),
        ("shape contract", shape_contract),
        ("end-to-end desk training", end_to_end),
        ("augmentation consistency", augmentation_consistency),
        ("determinism", determinism),
        ("double-attention detector", double_attention),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
