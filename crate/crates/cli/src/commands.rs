use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use psrnn::data::{
    context_window, degrade, load_image, multi_scale, read_manifest, sample_contexts, save_pgm, synth_texture,
    synthetic_corpus, AvailabilityMode, ContextBlock, CorpusSpec, DegradeConfig, GrayImage, SampleConfig,
    TextureKind,
};
use psrnn::eval::{audit_report, evaluate, ModelSet, Predictor};
use psrnn::intra::{best_mode_search, build_reference_samples, lambda, predict_mode, Choice};
use psrnn::model::{PsRnnNetwork, PsRnnPlus, SavedModel};
use psrnn::rng::SeedStreams;
use psrnn::train::{self, init_network, LossKind, TrainOutcome};
use psrnn::{Error, Result, Tensor};

use crate::config::{DataSource, ImageSource, RunConfig};

const INDEX_HEADER: &str = "clean,degraded,scale,qp,width,height";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn finish(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write(dir, "resolved.cfg", &cfg.resolved())
}

pub fn prepare(cfg: &RunConfig, _oracle: bool) -> Result<()> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Usage("prepare needs manifest=PATH".into()))?;
    let inputs = read_manifest(manifest)?;
    if inputs.is_empty() {
        return Err(Error::Usage("no inputs".into()));
    }
    let dir = out_dir(cfg)?;
    let mut index = format!("{INDEX_HEADER}\n");
    let mut counts: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut loaded = 0;
    for (i, path) in inputs.iter().enumerate() {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                continue;
            }
        };
        let scaled = if cfg.scales {
            match multi_scale(&img) {
                Ok(s) => s.to_vec(),
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    continue;
                }
            }
        } else {
            vec![img]
        };
        loaded += 1;
        for (s, clean) in scaled.iter().enumerate() {
            let clean_name = format!("img{i:04}_s{s}_clean.pgm");
            save_pgm(clean, &dir.join(&clean_name))?;
            for &qp in &cfg.qps {
                let name = format!("img{i:04}_s{s}_qp{qp}.pgm");
                save_pgm(&degrade(clean, &DegradeConfig { qp, block: 8 })?, &dir.join(&name))?;
                let _ = writeln!(index, "{clean_name},{name},{s},{qp},{},{}", clean.width(), clean.height());
                *counts.entry((s, qp)).or_default() += 1;
            }
        }
    }
    if loaded == 0 {
        return Err(Error::Format("every input failed to load".into()));
    }
    write(dir, "index.csv", &index)?;
    finish(cfg, dir)?;
    println!("prepared {loaded} of {} inputs", inputs.len());
    for ((s, qp), n) in counts {
        println!("scale {s} qp {qp}: {n} images");
    }
    Ok(())
}

fn archive_pairs(dir: &Path) -> Result<Vec<(GrayImage, GrayImage)>> {
    let text = fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Format(format!("{}: not a prepared archive", dir.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("bad index row {l:?}")));
            }
            Ok((load_image(&dir.join(f[0]))?, load_image(&dir.join(f[1]))?))
        })
        .collect()
}

/// Training samples for block size `n`.
fn samples(cfg: &RunConfig, n: usize) -> Result<Vec<ContextBlock>> {
    let seed = SeedStreams::new(cfg.seed).child("data").seed();
    let sampling = SampleConfig {
        four_block_fraction: cfg.four_block_fraction,
        ..SampleConfig::default()
    };
    match &cfg.data {
        DataSource::Synthetic => {
            let spec = CorpusSpec {
                families: cfg.families.clone(),
                noise_sigma: cfg.noise_sigma,
                qps: cfg.qps.clone(),
                sampling,
                ..CorpusSpec::new(n, cfg.samples)
            };
            synthetic_corpus(&spec, seed)
        }
        DataSource::Archive(dir) => {
            let pairs = archive_pairs(dir)?;
            if pairs.is_empty() {
                return Err(Error::Usage(format!("{}: archive is empty", dir.display())));
            }
            let per = cfg.samples.div_ceil(pairs.len());
            let mut out = Vec::with_capacity(cfg.samples);
            for (i, (clean, deg)) in pairs.iter().enumerate() {
                let take = per.min(cfg.samples - out.len());
                out.extend(sample_contexts(clean, deg, n, take, &sampling, seed.wrapping_add(i as u64))?);
            }
            Ok(out)
        }
    }
}

/// Held-out evaluation images, never drawn from the training streams.
fn eval_images(cfg: &RunConfig) -> Result<Vec<GrayImage>> {
    match &cfg.eval_images {
        ImageSource::Manifest(p) => {
            let paths = read_manifest(p)?;
            if paths.is_empty() {
                return Err(Error::Usage("no inputs".into()));
            }
            paths.iter().map(|p| load_image(p)).collect()
        }
        ImageSource::Synthetic => {
            let mut rng = SeedStreams::new(cfg.seed).stream("eval-images");
            (0..cfg.eval_count)
                .map(|i| {
                    let fam = cfg.families[i % cfg.families.len()];
                    let kind = fam.draw(cfg.eval_size, &mut rng);
                    synth_texture(&kind, cfg.eval_size, cfg.eval_size, cfg.noise_sigma, rng.random())
                })
                .collect()
        }
    }
}

fn report_outcome<M>(out: &TrainOutcome<M>, loss: LossKind, secs: f64) {
    let (init, best) = (out.initial(), out.best());
    eprintln!("trained in {secs:.1} s");
    println!(
        "loss={} initial_val={:.6} best_val={:.6} best_iteration={} val_satd {:.6} -> {:.6}",
        loss.name(),
        init.val_loss,
        best.val_loss,
        out.best_iteration,
        init.val_satd,
        best.val_satd
    );
}

fn write_log<M>(dir: &Path, out: &TrainOutcome<M>) -> Result<()> {
    write(dir, "train_log.csv", &out.log.to_csv())?;
    write(dir, "train_metrics.csv", &out.log.metrics_csv())
}

pub fn train(cfg: &RunConfig, _oracle: bool) -> Result<()> {
    let dir = out_dir(cfg)?;
    let start = Instant::now();
    let saved = if cfg.plus_target == 0 {
        let data = samples(cfg, cfg.network.pu_size)?;
        let net = init_network(cfg.network.clone(), cfg.seed)?;
        let out = train::train(net, &data, &cfg.train)?;
        report_outcome(&out, cfg.train.loss, start.elapsed().as_secs_f64());
        write_log(dir, &out)?;
        SavedModel::Network(out.model)
    } else {
        let path = cfg
            .base_model
            .as_ref()
            .ok_or_else(|| Error::Usage("plus_target needs base_model=PATH".into()))?;
        let base: PsRnnNetwork<f32> = match SavedModel::load(path)? {
            SavedModel::Network(n) => n,
            SavedModel::Plus(_) => return Err(Error::Usage("base_model must be a per-size network".into())),
        };
        let plus = PsRnnPlus::build(base, cfg.plus_target, &mut SeedStreams::new(cfg.seed).stream("plus-init"))?;
        let data = samples(cfg, cfg.plus_target)?;
        let tc = psrnn::train::TrainConfig {
            pu_size: cfg.plus_target,
            ..cfg.train.clone()
        };
        let out = train::train(plus, &data, &tc)?;
        report_outcome(&out, cfg.train.loss, start.elapsed().as_secs_f64());
        write_log(dir, &out)?;
        SavedModel::Plus(out.model)
    };
    saved.save(&dir.join("model.psrnn"))?;
    finish(cfg, dir)
}

fn load_models(paths: &[PathBuf]) -> Result<ModelSet> {
    let mut set = ModelSet::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Usage(format!("model {} does not exist", p.display())));
        }
        let m = SavedModel::load(p)?;
        match m {
            SavedModel::Network(ref n) => match n.config.availability {
                Some(mode) => set.insert_for_mode(m, mode),
                None => set.insert(m),
            },
            SavedModel::Plus(_) => set.insert(m),
        }
    }
    Ok(set)
}

fn predictor(cfg: &RunConfig, oracle: bool) -> Result<Predictor> {
    if oracle {
        Ok(Predictor::Oracle)
    } else if cfg.models.is_empty() {
        Ok(Predictor::BaselineOnly)
    } else {
        Ok(Predictor::Models(load_models(&cfg.models)?))
    }
}

pub fn eval(cfg: &RunConfig, oracle: bool) -> Result<()> {
    let predictor = predictor(cfg, oracle)?;
    let images = eval_images(cfg)?;
    let report = evaluate(&predictor, &images, cfg.qp, &cfg.eval)?;
    audit_report(&report, &predictor, &images, cfg.qp, &cfg.eval)?;
    let dir = out_dir(cfg)?;
    write(dir, "blocks.csv", &report.blocks_csv())?;
    write(dir, "summary.json", &report.summary_json())?;
    finish(cfg, dir)?;
    let s = &report.summary;
    println!(
        "blocks={} cost_reduction_pct={:.4} selection_rate_pct={:.4}",
        s.blocks, s.cost_reduction_pct, s.selection_rate_pct
    );
    Ok(())
}

fn to_image(t: &Tensor<f32>) -> Result<GrayImage> {
    let s = t.shape();
    GrayImage::new(s[1], s[0], t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn to_image64(t: &Tensor<f64>) -> Result<GrayImage> {
    let s = t.shape();
    GrayImage::new(s[1], s[0], t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
}

pub fn demo(cfg: &RunConfig, _oracle: bool) -> Result<()> {
    let path = cfg
        .models
        .first()
        .ok_or_else(|| Error::Usage("demo needs a trained model (models=PATH)".into()))?;
    if !path.exists() {
        return Err(Error::Usage(format!("model {} does not exist", path.display())));
    }
    let model = SavedModel::load(path)?;
    let n = model.pu_size();
    let size = cfg.eval_size.max(4 * n);
    let mut rng = SeedStreams::new(cfg.seed).stream("demo");
    let mut cases: Vec<(String, GrayImage)> = Vec::new();
    for i in 0..cfg.demo_cases {
        let dir_kind = TextureKind::Directional { angle: rng.random_range(0.0..180.0) };
        let sin_kind = TextureKind::Sinusoid {
            freq: rng.random_range(1.0 / 32.0..1.0 / 6.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            angle: rng.random_range(0.0..180.0),
        };
        for (name, kind) in [("flat", TextureKind::Flat { value: 0.5 }), ("directional", dir_kind), ("sinusoid", sin_kind)] {
            cases.push((format!("{name}_{i}"), synth_texture(&kind, size, size, 0.0, rng.random())?));
        }
    }
    if let ImageSource::Manifest(p) = &cfg.eval_images {
        for (i, path) in read_manifest(p)?.iter().enumerate() {
            cases.push((format!("natural_{i}"), load_image(path)?));
        }
    }
    let dir = out_dir(cfg)?;
    let mut table = String::from("case,x,y,baseline_mode,baseline_satd,network_satd\n");
    let intra = cfg.intra();
    for (name, clean) in &cases {
        if clean.width() < 2 * n || clean.height() < 2 * n {
            return Err(Error::Size(format!("{name} is smaller than a {0}x{0} context", 2 * n)));
        }
        let recon = degrade(clean, &DegradeConfig { qp: cfg.qp, block: 8 })?;
        let origin = (
            rng.random_range(n..=clean.width() - n),
            rng.random_range(n..=clean.height() - n),
        );
        let mode = AvailabilityMode::ThreeBlock;
        let ctx = context_window(&recon, origin, n, mode, 0.5)?;
        let target = clean.crop(origin.0, origin.1, n, n)?;
        let pred = model.predict(&ctx)?.reshape(&[n, n])?;
        let refs = build_reference_samples(&recon, origin, n, mode)?;
        let best = best_mode_search(&refs, &target, lambda(cfg.qp), &intra)?;
        let Choice::Mode(m) = best.choice else { unreachable!("baseline search returns a mode") };
        let base = predict_mode(&refs, m, intra.smoothing)?;
        let pred64 = Tensor::new(&[n, n], pred.data().iter().map(|&v| v as f64).collect())?;
        let net_satd = psrnn::intra::block_satd(&pred64, &target, &intra.satd)?;
        save_pgm(&to_image(&ctx)?, &dir.join(format!("{name}_context.pgm")))?;
        save_pgm(&to_image(&pred)?, &dir.join(format!("{name}_psrnn.pgm")))?;
        save_pgm(&to_image64(&base)?, &dir.join(format!("{name}_baseline.pgm")))?;
        save_pgm(&to_image(&target)?, &dir.join(format!("{name}_truth.pgm")))?;
        let _ = writeln!(table, "{name},{},{},{},{:.6},{:.6}", origin.0, origin.1, m.index(), best.satd, net_satd);
    }
    write(dir, "demo.csv", &table)?;
    finish(cfg, dir)?;
    println!("wrote {} cases to {}", cases.len(), dir.display());
    Ok(())
}

pub fn compare_losses(cfg: &RunConfig, _oracle: bool) -> Result<()> {
    let data = samples(cfg, cfg.network.pu_size)?;
    let cmp = train::compare_losses(&data, &cfg.network, &cfg.train, &cfg.seeds, (LossKind::Satd, LossKind::Mse))?;
    let dir = out_dir(cfg)?;
    write(dir, "compare_losses.csv", &cmp.to_csv())?;
    finish(cfg, dir)?;
    println!(
        "median val_satd: satd-trained {:.6} mse-trained {:.6} gap {:.6}",
        cmp.median_satd_of_satd, cmp.median_satd_of_mse, cmp.median_gap
    );
    Ok(())
}

pub fn ablate_units(cfg: &RunConfig, _oracle: bool) -> Result<()> {
    let data = samples(cfg, cfg.network.pu_size)?;
    let rows = train::ablate_units(&data, &cfg.unit_counts, &cfg.network, &cfg.train)?;
    let images = eval_images(cfg)?;
    let eval_cfg = psrnn::eval::EvalConfig {
        block_sizes: vec![cfg.network.pu_size],
        ..cfg.eval.clone()
    };
    let dir = out_dir(cfg)?;
    let mut csv = String::from("units,params,val_satd,val_mse,cost_reduction_pct,selection_rate_pct\n");
    for r in rows {
        let mut set = ModelSet::new();
        set.insert(SavedModel::Network(r.model.clone()));
        let rep = evaluate(&Predictor::Models(set), &images, cfg.qp, &eval_cfg)?;
        let _ = writeln!(
            csv,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.units, r.params, r.val_satd, r.val_mse, rep.summary.cost_reduction_pct, rep.summary.selection_rate_pct
        );
        SavedModel::Network(r.model).save(&dir.join(format!("units{}.psrnn", r.units)))?;
        println!(
            "units={} val_satd={:.6} cost_reduction_pct={:.4}",
            r.units, r.val_satd, rep.summary.cost_reduction_pct
        );
    }
    write(dir, "ablation.csv", &csv)?;
    finish(cfg, dir)
}
