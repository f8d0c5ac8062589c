use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use casunext::ablation::{self, Variant};
use casunext::cascade::{self, CascadeRecord};
use casunext::image::{overlay, Image, Mask};
use casunext::metrics::MetricsReport;
use casunext::phantom;
use casunext::train::{self, ExperimentData, Role};
use casunext::Network;
use serde::Serialize;

use crate::config::{Ablation, RunConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    /// Content hashes of the checkpoints read or written, by role.
    pub checkpoints: BTreeMap<String, String>,
}

pub struct Run {
    command: String,
    config: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    checkpoints: BTreeMap<String, String>,
    start: Instant,
}

impl Run {
    pub fn new(command: &str, config: RunConfig, out: &Path) -> Self {
        Self {
            command: command.into(),
            config,
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoints: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(PathBuf::from(name));
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
            checkpoints: self.checkpoints,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.out.join(RUN_MANIFEST), text + "\n")?;
        Ok(())
    }
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn gen_phantoms(mut run: Run) -> Result<()> {
    // generate fully before touching the output directory
    let samples = phantom::generate(&run.config.phantom)?;
    run.create_out()?;
    phantom::write_dataset(&run.out, &samples)?;
    run.outputs.push(PathBuf::from(phantom::MANIFEST_FILE));
    let train = samples.iter().filter(|s| s.split == phantom::Split::Train).count();
    println!(
        "wrote {} phantoms ({} train, {} test) to {}",
        samples.len(),
        train,
        samples.len() - train,
        run.out.display()
    );
    run.finish()
}

fn load_data(run: &mut Run, data: &Path) -> Result<ExperimentData> {
    run.input(data);
    let samples = phantom::read_dataset(data)
        .with_context(|| format!("reading dataset {}", data.display()))?;
    if samples.is_empty() {
        bail!("dataset {} is empty", data.display());
    }
    Ok(ExperimentData::new(&samples, &run.config.geometry, &run.config.train)?)
}

pub fn train(mut run: Run, data: &Path, role: Role, ablation: Ablation) -> Result<()> {
    let data = load_data(&mut run, data)?;
    let model = run.config.model_for(role, ablation);
    run.create_out()?;
    let log_path = run.path("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let mut log_err = None;
    let (net, outcome) = train::train_role(&data, &model, &run.config.train, role, |e| {
        let line = serde_json::to_string(e).map(|s| s + "\n");
        if let Err(err) = line.map_err(anyhow::Error::from).and_then(|l| {
            log.write_all(l.as_bytes())?;
            Ok(())
        }) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    let ckpt = run.path("checkpoint");
    net.save(&ckpt)?;
    run.checkpoints
        .insert(role_name(role).into(), net.content_hash());
    let report = match role {
        Role::Loc => train::evaluate(&net, &data.test)?,
        Role::Seg if model.use_cascade => {
            train::evaluate(&net, &cascade::crop_examples(&data.test, &data.geometry))?
        }
        Role::Seg => train::evaluate_full_frame(&net, &data)?,
    };
    run.write("test_metrics.json", serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} network: best epoch {}, held-out dice {:.4}, miou {:.4}",
        role_name(role),
        outcome.best_epoch,
        report.mean.dice,
        report.mean.miou
    );
    run.finish()
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Loc => "loc",
        Role::Seg => "seg",
    }
}

fn load_checkpoint(run: &mut Run, role: &str, dir: &Path) -> Result<Network> {
    run.input(dir);
    let net = Network::load(dir).with_context(|| format!("loading {role} checkpoint {}", dir.display()))?;
    run.checkpoints.insert(role.into(), net.content_hash());
    Ok(net)
}

/// `(id, path)` of every input image: a single file, or each `.pgm` in a
/// directory that is not a mask or a previous prediction.
fn list_images(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let id_of = |p: &Path| {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        stem.strip_suffix("_img").map(str::to_string).unwrap_or(stem)
    };
    if input.is_file() {
        return Ok(vec![(id_of(input), input.to_path_buf())]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
        let p = entry?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
        let excluded = ["_mask.pgm", "_pred.pgm", "_overlay.pgm"];
        if name.ends_with(".pgm") && !excluded.iter().any(|s| name.ends_with(s)) {
            found.push((id_of(&p), p));
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no input images in {}", input.display());
    }
    Ok(found)
}

pub fn segment(mut run: Run, loc: Option<&Path>, seg: &Path, input: &Path) -> Result<()> {
    let seg_net = load_checkpoint(&mut run, "seg", seg)?;
    let loc_net = match loc {
        Some(p) => Some(load_checkpoint(&mut run, "loc", p)?),
        None => None,
    };
    let cascaded = seg_net.config().use_cascade;
    if cascaded && loc_net.is_none() {
        bail!("a cascade fine network needs --loc");
    }
    run.input(input);
    let images = list_images(input)?;
    let geo = run.config.geometry;
    run.create_out()?;
    let mut records = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let raw = Image::read_pgm(path)?;
        let pre = cascade::preprocess(&raw, &geo)?;
        let (mask, record) = match &loc_net {
            Some(loc) if cascaded => {
                let res = cascade::run_cascade(loc, &seg_net, &raw, &geo)?;
                let rec = CascadeRecord::new(id, &res);
                (res.fine_mask_full, rec)
            }
            _ => {
                let m = cascade::run_full_frame(&seg_net, &raw, &geo)?;
                let n = geo.resize_to;
                let rec = CascadeRecord {
                    id: id.clone(),
                    top: 0,
                    left: 0,
                    side: n,
                    center_row: n / 2,
                    center_col: n / 2,
                    fallback: false,
                    constant_input: pre.constant,
                    foreground_pixels: m.count(),
                };
                (m, rec)
            }
        };
        let pred = run.path(&format!("{id}_pred.pgm"));
        mask.write_pgm(&pred)?;
        let over = run.path(&format!("{id}_overlay.pgm"));
        overlay(&pre.image, &mask).write_pgm(&over)?;
        records.push(record);
    }
    run.write("cascade.jsonl", json_lines(&records)?)?;
    println!("segmented {} images into {}", records.len(), run.out.display());
    run.finish()
}

/// Masks in `dir` keyed by id, preferring files with `suffix`.
fn read_masks(dir: &Path, suffixes: [&str; 2]) -> Result<BTreeMap<String, PathBuf>> {
    let mut found: BTreeMap<String, (usize, PathBuf)> = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
        for (rank, suffix) in suffixes.iter().enumerate() {
            if let Some(id) = name.strip_suffix(suffix) {
                let keep = found.get(id).map_or(true, |(r, _)| rank < *r);
                if keep {
                    found.insert(id.to_string(), (rank, p.clone()));
                }
            }
        }
    }
    Ok(found.into_iter().map(|(id, (_, p))| (id, p)).collect())
}

pub fn eval(mut run: Run, pred_dir: &Path, truth_dir: &Path) -> Result<()> {
    run.input(pred_dir);
    run.input(truth_dir);
    let preds = read_masks(pred_dir, ["_pred.pgm", "_mask.pgm"])?;
    let truths = read_masks(truth_dir, ["_mask.pgm", "_pred.pgm"])?;
    if preds.is_empty() {
        bail!("no predicted masks in {}", pred_dir.display());
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for (id, p) in &preds {
        let t = truths
            .get(id)
            .with_context(|| format!("no ground truth for {id} in {}", truth_dir.display()))?;
        let pred = Mask::read_pgm(p)?;
        let mut truth = Mask::read_pgm(t)?;
        if (truth.height(), truth.width()) != (pred.height(), pred.width()) {
            truth = cascade::preprocess_mask(&truth, &run.config.geometry)?;
        }
        pairs.push((id.clone(), pred, truth));
    }
    let report = MetricsReport::from_pairs(pairs.iter().map(|(id, p, t)| (id.as_str(), p, t)))?;
    run.create_out()?;
    run.write("metrics.json", serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.table();
    run.write("metrics.txt", &table)?;
    print!("{table}");
    run.finish()
}

pub fn ablate(mut run: Run, data: &Path) -> Result<()> {
    let data = load_data(&mut run, data)?;
    let cfg = run.config.clone();
    run.create_out()?;
    let loc_model = cfg.model_for(Role::Loc, Ablation::None);
    let (loc, _) = train::train_role(&data, &loc_model, &cfg.train, Role::Loc, |_| {})?;
    loc.save(&run.path("loc_checkpoint"))?;
    run.checkpoints.insert("loc".into(), loc.content_hash());
    let base = cfg.model_for(Role::Seg, Ablation::None);
    let report = ablation::ablate(&data, &loc, &base, &cfg.train, &[])?;
    run.write("ablation.json", serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.table();
    run.write("ablation.txt", &table)?;
    print!("{table}");
    if let (Some(full), Some(nc)) = (report.row(Variant::Full), report.row(Variant::WithoutCascade)) {
        log::info!("cascade gain {:+.4} dice", full.dice - nc.dice);
    }
    run.finish()
}
