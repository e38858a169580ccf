//! RDO-lite evaluation: every block picks the cheaper of the best baseline
//! mode and the network prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{context_window, degrade, AvailabilityMode, DegradeConfig, GrayImage};
use crate::error::{Error, Result};
use crate::intra::{
    best_mode_search, block_satd, build_reference_samples, lambda, predict_mode, Choice, IntraConfig, IntraMode,
    ModeCost,
};
use crate::model::SavedModel;
use crate::tensor::Tensor;

/// Rate-distortion proxy `satd + lambda * bits`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdCost {
    pub satd: f64,
    pub bits_proxy: f64,
    pub lambda: f64,
    pub total: f64,
}

impl RdCost {
    pub fn new(satd: f64, bits_proxy: f64, lambda: f64) -> Self {
        Self {
            satd,
            bits_proxy,
            lambda,
            total: satd + lambda * bits_proxy,
        }
    }
}

impl From<ModeCost> for RdCost {
    fn from(c: ModeCost) -> Self {
        Self::new(c.satd, c.bits, c.lambda)
    }
}

/// Trained models keyed by block size, optionally specialised per availability mode.
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    models: BTreeMap<(usize, Option<AvailabilityMode>), SavedModel>,
}

impl ModelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Model for every availability mode at its block size.
    pub fn insert(&mut self, model: SavedModel) {
        self.models.insert((model.pu_size(), None), model);
    }

    pub fn insert_for_mode(&mut self, model: SavedModel, mode: AvailabilityMode) {
        self.models.insert((model.pu_size(), Some(mode)), model);
    }

    pub fn get(&self, n: usize, mode: AvailabilityMode) -> Option<&SavedModel> {
        self.models.get(&(n, Some(mode))).or_else(|| self.models.get(&(n, None)))
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.models.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }
}

/// Source of the candidate prediction competing with the baseline.
#[derive(Clone, Debug)]
pub enum Predictor {
    Models(ModelSet),
    /// Returns the ground-truth block; an upper bound for the harness.
    Oracle,
    /// No candidate; every block uses the baseline.
    BaselineOnly,
}

impl Predictor {
    fn check_sizes(&self, sizes: &[usize]) -> Result<()> {
        if let Self::Models(set) = self {
            for &n in sizes {
                for mode in [AvailabilityMode::FourBlock, AvailabilityMode::ThreeBlock] {
                    if set.get(n, mode).is_none() {
                        return Err(Error::Config(format!("no model for {n}x{n} blocks ({})", mode.name())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Prediction on the `[0, 1]` scale, or `None` for baseline-only runs.
    fn predict(&self, recon: &GrayImage, clean: &GrayImage, block: &BlockSpec) -> Result<Option<Tensor<f64>>> {
        let (x, y) = block.origin;
        let n = block.n;
        match self {
            Self::BaselineOnly => Ok(None),
            Self::Oracle => Ok(Some(to_f64(&clean.crop(x, y, n, n)?)?)),
            Self::Models(set) => {
                let model = set
                    .get(n, block.mode)
                    .ok_or_else(|| Error::Config(format!("no model for {n}x{n} blocks")))?;
                let ctx = context_window(recon, block.origin, n, block.mode, CONTEXT_FILL)?;
                let pred = model.predict(&ctx)?;
                Ok(Some(to_f64(&pred.reshape(&[n, n])?)?))
            }
        }
    }
}

const CONTEXT_FILL: f32 = 0.5;

fn to_f64(t: &Tensor<f32>) -> Result<Tensor<f64>> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPolicy {
    /// Uniform tiling at each requested size.
    Fixed,
    /// Top-down: keep a block whole unless its four quarters plus the split flag are cheaper.
    GreedySplit,
}

impl BlockPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::GreedySplit => "greedy-split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "greedy-split" => Ok(Self::GreedySplit),
            _ => Err(Error::Config(format!("unknown block policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub block_sizes: Vec<usize>,
    pub policy: BlockPolicy,
    pub intra: IntraConfig,
    /// Flag cost charged to a split in greedy mode.
    pub split_bits: f64,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            block_sizes: vec![8],
            policy: BlockPolicy::Fixed,
            intra: IntraConfig::default(),
            split_bits: 1.0,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() {
            return Err(Error::Config("no block sizes requested".into()));
        }
        if let Some(&n) = self.block_sizes.iter().find(|&&n| ![4, 8, 16, 32].contains(&n)) {
            return Err(Error::Config(format!("block size {n} is not one of 4, 8, 16, 32")));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.intra.satd.validate()
    }

    fn sizes_desc(&self) -> Vec<usize> {
        let mut v = self.block_sizes.clone();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v.dedup();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BlockSpec {
    origin: (usize, usize),
    n: usize,
    mode: AvailabilityMode,
}

/// Z-order position inside the parent `2N` unit decides what is coded below-left:
/// only the first quarter sees a finished block there.
fn availability(origin: (usize, usize), n: usize, height: usize) -> AvailabilityMode {
    let (x, y) = origin;
    let first_quarter = (x / n) % 2 == 0 && (y / n) % 2 == 0;
    if first_quarter && x >= n && y + 2 * n <= height {
        AvailabilityMode::FourBlock
    } else {
        AvailabilityMode::ThreeBlock
    }
}

fn block_at(origin: (usize, usize), n: usize, height: usize) -> BlockSpec {
    BlockSpec {
        origin,
        n,
        mode: availability(origin, n, height),
    }
}

/// Block origins on the `n` grid whose context window lies inside the image,
/// in raster order of the top-level units.
fn tiles(width: usize, height: usize, n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut y = n;
    while y + n <= height {
        let mut x = n;
        while x + n <= width {
            v.push((x, y));
            x += n;
        }
        y += n;
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub image: usize,
    pub origin: (usize, usize),
    pub n: usize,
    pub mode: AvailabilityMode,
    pub baseline_mode: IntraMode,
    pub baseline: RdCost,
    /// `None` in baseline-only runs.
    pub network: Option<RdCost>,
    pub winner: Choice,
    /// Mean squared error on the 8-bit scale.
    pub baseline_mse: f64,
    pub network_mse: Option<f64>,
}

impl BlockRecord {
    pub fn winner_cost(&self) -> f64 {
        match self.winner {
            Choice::Network => self.network.expect("network won").total,
            Choice::Mode(_) => self.baseline.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub qp: u32,
    pub blocks: usize,
    pub network_blocks: usize,
    pub selection_rate_pct: f64,
    /// Relative drop of the summed total cost against baseline-only coding.
    pub cost_reduction_pct: f64,
    pub baseline_total_cost: f64,
    pub chosen_total_cost: f64,
    pub mean_satd_baseline: f64,
    pub mean_satd_network: f64,
    pub mean_mse_baseline: f64,
    pub mean_mse_network: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<BlockRecord>,
    pub summary: EvalSummary,
}

pub const BLOCK_CSV_HEADER: &str = "image,x,y,n,availability,baseline_mode,baseline_satd,baseline_bits,baseline_total,network_satd,network_bits,network_total,lambda,winner,baseline_mse,network_mse";

fn mse_255(pred: &Tensor<f64>, target: &Tensor<f32>) -> f64 {
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| ((p - *t as f64) * 255.0).powi(2))
        .sum();
    s / pred.len() as f64
}

fn summarize(records: &[BlockRecord], qp: u32) -> EvalSummary {
    let blocks = records.len();
    let network_blocks = records.iter().filter(|r| r.winner == Choice::Network).count();
    let baseline_total: f64 = records.iter().map(|r| r.baseline.total).sum();
    let chosen_total: f64 = records.iter().map(BlockRecord::winner_cost).sum();
    let with_net: Vec<&BlockRecord> = records.iter().filter(|r| r.network.is_some()).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>, count: usize| {
        if count == 0 {
            0.0
        } else {
            v.sum::<f64>() / count as f64
        }
    };
    EvalSummary {
        qp,
        blocks,
        network_blocks,
        selection_rate_pct: if blocks == 0 { 0.0 } else { 100.0 * network_blocks as f64 / blocks as f64 },
        cost_reduction_pct: if baseline_total > 0.0 {
            100.0 * (baseline_total - chosen_total) / baseline_total
        } else {
            0.0
        },
        baseline_total_cost: baseline_total,
        chosen_total_cost: chosen_total,
        mean_satd_baseline: mean(&mut records.iter().map(|r| r.baseline.satd), blocks),
        mean_satd_network: mean(&mut with_net.iter().map(|r| r.network.expect("filtered").satd), with_net.len()),
        mean_mse_baseline: mean(&mut records.iter().map(|r| r.baseline_mse), blocks),
        mean_mse_network: mean(
            &mut with_net.iter().map(|r| r.network_mse.expect("filtered")),
            with_net.len(),
        ),
    }
}

struct ImageCtx<'a> {
    index: usize,
    clean: &'a GrayImage,
    recon: GrayImage,
    lambda: f64,
}

fn eval_block(ctx: &ImageCtx, predictor: &Predictor, block: &BlockSpec, cfg: &EvalConfig) -> Result<BlockRecord> {
    let (x, y) = block.origin;
    let n = block.n;
    let target = ctx.clean.crop(x, y, n, n)?;
    let refs = build_reference_samples(&ctx.recon, block.origin, n, block.mode)?;
    let base = best_mode_search(&refs, &target, ctx.lambda, &cfg.intra)?;
    let Choice::Mode(baseline_mode) = base.choice else {
        unreachable!("baseline search returns a mode")
    };
    let baseline_mse = mse_255(&predict_mode(&refs, baseline_mode, cfg.intra.smoothing)?, &target);
    let (network, network_mse) = match predictor.predict(&ctx.recon, ctx.clean, block)? {
        Some(pred) => (
            Some(RdCost::new(
                block_satd(&pred, &target, &cfg.intra.satd)?,
                cfg.intra.network_bits,
                ctx.lambda,
            )),
            Some(mse_255(&pred, &target)),
        ),
        None => (None, None),
    };
    // Ties keep the baseline.
    let winner = match network {
        Some(c) if c.total < base.total => Choice::Network,
        _ => base.choice,
    };
    Ok(BlockRecord {
        image: ctx.index,
        origin: block.origin,
        n,
        mode: block.mode,
        baseline_mode,
        baseline: base.into(),
        network,
        winner,
        baseline_mse,
        network_mse,
    })
}

/// Greedy top-down partition of one block; returns the kept leaves and their summed cost.
fn greedy(
    ctx: &ImageCtx,
    predictor: &Predictor,
    block: BlockSpec,
    sizes: &[usize],
    cfg: &EvalConfig,
) -> Result<(Vec<BlockRecord>, f64)> {
    let whole = eval_block(ctx, predictor, &block, cfg)?;
    let whole_cost = whole.winner_cost();
    let half = block.n / 2;
    if !sizes.contains(&half) {
        return Ok((vec![whole], whole_cost));
    }
    let (x, y) = block.origin;
    let mut leaves = Vec::new();
    let mut split_cost = ctx.lambda * cfg.split_bits;
    for (dx, dy) in [(0, 0), (half, 0), (0, half), (half, half)] {
        let child = block_at((x + dx, y + dy), half, ctx.clean.height());
        let (l, c) = greedy(ctx, predictor, child, sizes, cfg)?;
        leaves.extend(l);
        split_cost += c;
    }
    if split_cost < whole_cost {
        Ok((leaves, split_cost))
    } else {
        Ok((vec![whole], whole_cost))
    }
}

fn image_records(ctx: &ImageCtx, predictor: &Predictor, cfg: &EvalConfig) -> Result<Vec<BlockRecord>> {
    let (w, h) = (ctx.clean.width(), ctx.clean.height());
    let sizes = cfg.sizes_desc();
    let mut out = Vec::new();
    match cfg.policy {
        BlockPolicy::Fixed => {
            for &n in &sizes {
                for origin in tiles(w, h, n) {
                    out.push(eval_block(ctx, predictor, &block_at(origin, n, h), cfg)?);
                }
            }
        }
        BlockPolicy::GreedySplit => {
            let top = sizes[0];
            for origin in tiles(w, h, top) {
                out.extend(greedy(ctx, predictor, block_at(origin, top, h), &sizes, cfg)?.0);
            }
        }
    }
    Ok(out)
}

fn prepare<'a>(images: &'a [GrayImage], qp: u32) -> Result<Vec<ImageCtx<'a>>> {
    images
        .iter()
        .enumerate()
        .map(|(index, clean)| {
            Ok(ImageCtx {
                index,
                clean,
                recon: degrade(clean, &DegradeConfig { qp, block: 8 })?,
                lambda: lambda(qp),
            })
        })
        .collect()
}

/// Evaluates every image: references and contexts come from the image
/// degraded at `qp`, targets from the clean image.
pub fn evaluate(predictor: &Predictor, images: &[GrayImage], qp: u32, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Usage("no images to evaluate".into()));
    }
    predictor.check_sizes(&cfg.block_sizes)?;
    let ctxs = prepare(images, qp)?;
    let per_image: Vec<Vec<BlockRecord>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| ctxs.par_iter().map(|c| image_records(c, predictor, cfg)).collect::<Result<_>>())?
    } else {
        ctxs.iter().map(|c| image_records(c, predictor, cfg)).collect::<Result<_>>()?
    };
    let records: Vec<BlockRecord> = per_image.into_iter().flatten().collect();
    Ok(EvalReport {
        summary: summarize(&records, qp),
        records,
    })
}

/// Independent second pass: recomputes every recorded block with a plain
/// per-mode loop and checks the report's costs, winners and summary exactly.
pub fn audit_report(
    report: &EvalReport,
    predictor: &Predictor,
    images: &[GrayImage],
    qp: u32,
    cfg: &EvalConfig,
) -> Result<()> {
    let ctxs = prepare(images, qp)?;
    let mismatch = |what: String| Err(Error::Usage(format!("audit mismatch: {what}")));
    for r in &report.records {
        let ctx = ctxs
            .get(r.image)
            .ok_or_else(|| Error::Usage(format!("record refers to missing image {}", r.image)))?;
        let (x, y) = r.origin;
        let target = ctx.clean.crop(x, y, r.n, r.n)?;
        let refs = build_reference_samples(&ctx.recon, r.origin, r.n, r.mode)?;
        let mut min_baseline = f64::INFINITY;
        for mode in IntraMode::all() {
            let pred = predict_mode(&refs, mode, cfg.intra.smoothing)?;
            let satd = block_satd(&pred, &target, &cfg.intra.satd)?;
            min_baseline = min_baseline.min(satd + ctx.lambda * cfg.intra.mode_bits);
        }
        if min_baseline != r.baseline.total {
            return mismatch(format!("baseline cost at {:?}", r.origin));
        }
        let spec = BlockSpec { origin: r.origin, n: r.n, mode: r.mode };
        let net = match predictor.predict(&ctx.recon, ctx.clean, &spec)? {
            Some(p) => block_satd(&p, &target, &cfg.intra.satd)? + ctx.lambda * cfg.intra.network_bits,
            None => f64::INFINITY,
        };
        if r.network.map_or(f64::INFINITY, |c| c.total) != net {
            return mismatch(format!("network cost at {:?}", r.origin));
        }
        if r.winner_cost() != min_baseline.min(net) {
            return mismatch(format!("winner at {:?}", r.origin));
        }
    }
    if summarize(&report.records, qp) != report.summary {
        return mismatch("summary".into());
    }
    Ok(())
}

fn choice_name(c: Choice) -> String {
    match c {
        Choice::Network => "network".into(),
        Choice::Mode(m) => format!("mode{}", m.index()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.17e}"))
}

impl EvalReport {
    pub fn blocks_csv(&self) -> String {
        let mut s = format!("{BLOCK_CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.17e},{},{:.17e},{},{},{},{:.17e},{},{:.17e},{}",
                r.image,
                r.origin.0,
                r.origin.1,
                r.n,
                r.mode.name(),
                r.baseline_mode.index(),
                r.baseline.satd,
                r.baseline.bits_proxy,
                r.baseline.total,
                opt(r.network.map(|c| c.satd)),
                r.network.map_or_else(String::new, |c| c.bits_proxy.to_string()),
                opt(r.network.map(|c| c.total)),
                r.baseline.lambda,
                choice_name(r.winner),
                r.baseline_mse,
                opt(r.network_mse),
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let s = &self.summary;
        format!(
            "{{\n  \"qp\": {},\n  \"blocks\": {},\n  \"network_blocks\": {},\n  \"selection_rate_pct\": {:.17e},\n  \"cost_reduction_pct\": {:.17e},\n  \"baseline_total_cost\": {:.17e},\n  \"chosen_total_cost\": {:.17e},\n  \"mean_satd_baseline\": {:.17e},\n  \"mean_satd_network\": {:.17e},\n  \"mean_mse_baseline\": {:.17e},\n  \"mean_mse_network\": {:.17e}\n}}\n",
            s.qp,
            s.blocks,
            s.network_blocks,
            s.selection_rate_pct,
            s.cost_reduction_pct,
            s.baseline_total_cost,
            s.chosen_total_cost,
            s.mean_satd_baseline,
            s.mean_satd_network,
            s.mean_mse_baseline,
            s.mean_mse_network,
        )
    }
}

/// Selection rate and cost reduction recomputed from a per-block CSV.
pub fn summary_from_csv(csv: &str) -> Result<(f64, f64)> {
    let mut lines = csv.lines();
    if lines.next() != Some(BLOCK_CSV_HEADER) {
        return Err(Error::Format("unexpected block CSV header".into()));
    }
    let (mut blocks, mut wins, mut base, mut chosen) = (0usize, 0usize, 0.0, 0.0);
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(Error::Format(format!("bad block row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        let b = num(f[8])?;
        blocks += 1;
        base += b;
        if f[13] == "network" {
            wins += 1;
            chosen += num(f[11])?;
        } else {
            chosen += b;
        }
    }
    let sel = if blocks == 0 { 0.0 } else { 100.0 * wins as f64 / blocks as f64 };
    let red = if base > 0.0 { 100.0 * (base - chosen) / base } else { 0.0 };
    Ok((sel, red))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_texture, TextureKind};

    fn images() -> Vec<GrayImage> {
        vec![
            synth_texture(&TextureKind::Sinusoid { freq: 0.1, phase: 0.3, angle: 30.0 }, 48, 40, 0.0, 1).unwrap(),
            synth_texture(&TextureKind::Directional { angle: 70.0 }, 40, 48, 0.0, 2).unwrap(),
        ]
    }

    #[test]
    fn oracle_always_wins_with_zero_satd() {
        let imgs = images();
        let cfg = EvalConfig::default();
        let r = evaluate(&Predictor::Oracle, &imgs, 32, &cfg).unwrap();
        assert!(r.summary.blocks > 0);
        assert_eq!(r.summary.selection_rate_pct, 100.0);
        assert!(r.records.iter().all(|b| b.network.unwrap().satd == 0.0));
        audit_report(&r, &Predictor::Oracle, &imgs, 32, &cfg).unwrap();
        let (sel, red) = summary_from_csv(&r.blocks_csv()).unwrap();
        assert_eq!(sel, 100.0);
        assert!((red - r.summary.cost_reduction_pct).abs() < 1e-9);
    }

    #[test]
    fn baseline_only_has_no_reduction() {
        let imgs = images();
        let cfg = EvalConfig { block_sizes: vec![4, 8], ..EvalConfig::default() };
        let r = evaluate(&Predictor::BaselineOnly, &imgs, 27, &cfg).unwrap();
        assert_eq!(r.summary.cost_reduction_pct, 0.0);
        assert_eq!(r.summary.selection_rate_pct, 0.0);
        audit_report(&r, &Predictor::BaselineOnly, &imgs, 27, &cfg).unwrap();
    }

    #[test]
    fn greedy_split_leaves_tile_the_top_blocks() {
        let imgs = images();
        let cfg = EvalConfig { block_sizes: vec![4, 8, 16], policy: BlockPolicy::GreedySplit, ..EvalConfig::default() };
        let r = evaluate(&Predictor::Oracle, &imgs, 32, &cfg).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let area: usize = r.records.iter().filter(|b| b.image == i).map(|b| b.n * b.n).sum();
            assert_eq!(area, tiles(img.width(), img.height(), 16).len() * 256);
        }
        // The oracle's flag bit is cheapest at the largest size.
        assert!(r.records.iter().all(|b| b.n == 16));
    }

    #[test]
    fn missing_model_is_a_config_error() {
        let p = Predictor::Models(ModelSet::new());
        assert!(matches!(evaluate(&p, &images(), 32, &EvalConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn availability_follows_z_order() {
        assert_eq!(availability((8, 8), 4, 64), AvailabilityMode::FourBlock);
        assert_eq!(availability((12, 8), 4, 64), AvailabilityMode::ThreeBlock);
        assert_eq!(availability((8, 12), 4, 64), AvailabilityMode::ThreeBlock);
        assert_eq!(availability((8, 56), 4, 60), AvailabilityMode::ThreeBlock);
    }
}
