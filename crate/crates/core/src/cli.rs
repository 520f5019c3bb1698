//! Command implementations behind the `usegnet` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate, export_overlay, segment_volume, EvalReport, Fusion};
use crate::net::{load_weights, LayerGraph, ModelVariant, NetConfig};
use crate::patch::{build_dataset, normalize_volume, Role, DEFAULT_MAX_BG_FRACTION};
use crate::train::{fit_with_progress, OptimConfig};
use crate::volume::{
    generate_phantom, load_labels_raw, load_nifti, load_raw, remap_labels, save_labels_raw, save_raw, split_volumes,
    Convention, Dims, Element, LabelVolume, PhantomSpec, Volume,
};

pub const VOLUME_MANIFEST: &str = "manifest.csv";
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const SPLIT_CSV: &str = "split.csv";
pub const TEST_REPORT: &str = "test_report.csv";

#[derive(Debug, Parser)]
#[command(
    name = "usegnet",
    version,
    about = "Brain tissue segmentation with U-SegNet and its baselines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom volumes with exact labels.
    Phantom(PhantomArgs),
    /// Train a network on the volumes listed in a manifest.
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Score predicted label volumes against ground truth.
    Evaluate(EvaluateArgs),
    /// Print learnable parameter counts.
    Params(ParamsArgs),
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid dims '{s}', expected XxYxZ"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match nums[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok(Dims::new(x, y, z)),
        _ => Err(format!("invalid dims '{s}', expected three positive sizes XxYxZ")),
    }
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 18)]
    pub count: usize,
    #[arg(long, value_parser = parse_dims, default_value = "64x64x16")]
    pub dims: Dims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise std as a fraction of the smallest tissue-mean gap.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Relative amplitude of the smooth bias field.
    #[arg(long)]
    pub bias: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Volume manifest CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train/validation/test volume counts, e.g. 6/3/9.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub max_bg_fraction: Option<f64>,
    /// Divide every layer width by this factor (1 = full widths).
    #[arg(long)]
    pub width_divisor: Option<usize>,
    /// Segment and score the test volumes after training.
    #[arg(long)]
    pub evaluate_test: bool,
    #[arg(long)]
    pub fusion: Option<String>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `.nii`/`.hdr` file, or a raw payload together with `--dims`.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long, default_value = "f64")]
    pub element: String,
    #[arg(long, default_value = "majority")]
    pub fusion: String,
    /// Predicted labels, u8 raw in the model convention.
    #[arg(long)]
    pub out: PathBuf,
    /// Write one PPM overlay per axial slice into this directory.
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted label volume; repeat once per volume.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth label volume, paired with `--pred` by position.
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
    /// Needed for raw label files.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long, default_value = "model")]
    pub truth_convention: String,
    #[arg(long, default_value = "model")]
    pub pred_convention: String,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a).map(|_| ()),
        Command::Train(a) => {
            let cfg = RunConfig::from_args(&a)?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Segment(a) => cmd_segment(&a),
        Command::Evaluate(a) => {
            print!("{}", cmd_evaluate(&a)?.table());
            Ok(())
        }
        Command::Params(a) => {
            print!("{}", cmd_params(&a)?);
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One row of a volume manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub dims: Dims,
    pub convention: Convention,
    pub seed: Option<u64>,
}

const MANIFEST_HEADER: [&str; 8] = ["id", "image", "labels", "x", "y", "z", "convention", "seed"];

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for e in entries {
        w.write_record([
            e.id.clone(),
            e.image.display().to_string(),
            e.labels.display().to_string(),
            e.dims.x.to_string(),
            e.dims.y.to_string(),
            e.dims.z.to_string(),
            e.convention.to_string(),
            e.seed.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let data_err = |msg: String| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| data_err(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(format!("missing column '{name}'")))
    };
    let cols: Vec<usize> = MANIFEST_HEADER[..7].iter().map(|c| col(c)).collect::<Result<_>>()?;
    let seed_col = headers.iter().position(|h| h == "seed");
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let field = |i: usize| rec.get(cols[i]).unwrap_or("").trim().to_string();
        let num = |i: usize| {
            field(i).parse::<usize>().map_err(|_| {
                data_err(format!(
                    "row {}: invalid {} '{}'",
                    line + 1,
                    MANIFEST_HEADER[i],
                    field(i)
                ))
            })
        };
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            id: field(0),
            image: resolve(field(1)),
            labels: resolve(field(2)),
            dims: Dims::new(num(3)?, num(4)?, num(5)?),
            convention: field(6).parse()?,
            seed: seed_col.and_then(|c| rec.get(c)).and_then(|s| s.trim().parse().ok()),
        });
    }
    Ok(out)
}

fn is_nifti(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("nii" | "hdr"))
}

/// Loads an intensity volume from NIfTI or an f64 raw payload.
pub fn load_volume(path: &Path, dims: Option<Dims>, element: Element) -> Result<Volume> {
    if is_nifti(path) {
        let (v, _) = load_nifti(path)?;
        if let Some(d) = dims {
            if d != v.dims() {
                return Err(Error::InvalidArgument(format!(
                    "{}: file dims {} differ from requested {d}",
                    path.display(),
                    v.dims()
                )));
            }
        }
        return Ok(v);
    }
    let dims = dims.ok_or_else(|| Error::InvalidArgument(format!("{}: raw volumes need --dims", path.display())))?;
    load_raw(path, dims, element)
}

pub fn load_label_volume(path: &Path, dims: Option<Dims>, convention: Convention) -> Result<LabelVolume> {
    if is_nifti(path) {
        let (v, _) = load_nifti(path)?;
        return LabelVolume::from_volume(&v, convention);
    }
    let dims =
        dims.ok_or_else(|| Error::InvalidArgument(format!("{}: raw label volumes need --dims", path.display())))?;
    load_labels_raw(path, dims, convention)
}

/// Loads every manifest entry, labels converted to the model convention.
pub fn load_cohort(entries: &[ManifestEntry]) -> Result<Vec<(Volume, LabelVolume)>> {
    entries
        .iter()
        .map(|e| {
            let v = load_volume(&e.image, Some(e.dims), Element::F64)?;
            let lv = load_label_volume(&e.labels, Some(e.dims), e.convention)?;
            if lv.dims() != v.dims() {
                return Err(Error::InvalidArgument(format!(
                    "{}: label dims differ from image dims",
                    e.id
                )));
            }
            Ok((v, remap_labels(&lv, Convention::Model)))
        })
        .collect()
}

/// Writes `count` phantom pairs and `manifest.csv` into `args.out`.
pub fn cmd_phantom(args: &PhantomArgs) -> Result<Vec<ManifestEntry>> {
    create_dir(&args.out)?;
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let mut spec = PhantomSpec::new(args.dims, seed);
        if let Some(n) = args.noise {
            spec.noise_std = n;
        }
        if let Some(b) = args.bias {
            spec.bias_amplitude = b;
        }
        let (v, lv) = generate_phantom(&spec)?;
        let id = format!("phantom_{i:03}");
        let image = PathBuf::from(format!("{id}_image.raw"));
        let labels = PathBuf::from(format!("{id}_labels.raw"));
        save_raw(&v, args.out.join(&image))?;
        save_labels_raw(&lv, args.out.join(&labels))?;
        entries.push(ManifestEntry {
            id,
            image,
            labels,
            dims: args.dims,
            convention: Convention::Model,
            seed: Some(seed),
        });
    }
    write_manifest(&args.out.join(VOLUME_MANIFEST), &entries)?;
    Ok(entries)
}

/// Flat training configuration; every field can come from a key=value file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelVariant,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub optim: OptimConfig,
    pub split: [usize; 3],
    pub split_seed: u64,
    pub max_bg_fraction: f64,
    pub width_divisor: usize,
    pub evaluate_test: bool,
    pub fusion: Fusion,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelVariant::USegNet,
            data: None,
            out: None,
            optim: OptimConfig::default(),
            split: [6, 3, 9],
            split_seed: 0,
            max_bg_fraction: DEFAULT_MAX_BG_FRACTION,
            width_divisor: 1,
            evaluate_test: false,
            fusion: Fusion::Majority,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_split(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['/', ',']).collect();
    match parts[..] {
        [a, b, c] => Ok([
            parse_value("split", a)?,
            parse_value("split", b)?,
            parse_value("split", c)?,
        ]),
        _ => Err(Error::InvalidArgument(format!(
            "invalid split '{s}', expected train/val/test counts"
        ))),
    }
}

impl RunConfig {
    /// Applies one key; unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "model" => self.model = v.parse()?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "learning_rate" | "lr" => self.optim.learning_rate = parse_value(key, v)?,
            "momentum" => self.optim.momentum = parse_value(key, v)?,
            "l2" => self.optim.l2 = parse_value(key, v)?,
            "batch_size" => self.optim.batch_size = parse_value(key, v)?,
            "max_epochs" | "epochs" => self.optim.max_epochs = parse_value(key, v)?,
            "seed" => self.optim.seed = parse_value(key, v)?,
            "split" => self.split = parse_split(v)?,
            "split_seed" => self.split_seed = parse_value(key, v)?,
            "max_bg_fraction" => self.max_bg_fraction = parse_value(key, v)?,
            "width_divisor" => self.width_divisor = parse_value(key, v)?,
            "evaluate_test" => self.evaluate_test = parse_value(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            // written into run manifests; derived from the model, so only checked for syntax
            "param_count" => {
                parse_value::<usize>(key, v)?;
            }
            other => return Err(Error::InvalidArgument(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then explicit flags.
    pub fn from_args(a: &TrainArgs) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = &a.config {
            cfg.apply_file(p)?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("model", a.model.clone()),
            ("data", a.data.as_ref().map(|p| p.display().to_string())),
            ("out", a.out.as_ref().map(|p| p.display().to_string())),
            ("max_epochs", a.epochs.map(|v| v.to_string())),
            ("learning_rate", a.lr.map(|v| v.to_string())),
            ("momentum", a.momentum.map(|v| v.to_string())),
            ("l2", a.l2.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
            ("split", a.split.clone()),
            ("split_seed", a.split_seed.map(|v| v.to_string())),
            ("max_bg_fraction", a.max_bg_fraction.map(|v| v.to_string())),
            ("width_divisor", a.width_divisor.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if a.evaluate_test {
            cfg.evaluate_test = true;
        }
        if let Some(f) = &a.fusion {
            cfg.set("fusion", f)?;
        }
        Ok(cfg)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::InvalidArgument(format!(
                "width_divisor {} must divide 64",
                self.width_divisor
            )));
        }
        Ok(NetConfig::reduced(self.width_divisor, self.optim.seed))
    }

    /// Every hyperparameter as `key=value` lines, readable back with
    /// [`RunConfig::apply_file`]. The output path is omitted so identical runs
    /// in different directories produce identical files.
    pub fn to_manifest(&self, param_count: usize) -> String {
        let o = &self.optim;
        let mut s = String::new();
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: [(&str, String); 15] = [
            ("model", self.model.to_string()),
            ("param_count", param_count.to_string()),
            ("data", data),
            ("learning_rate", o.learning_rate.to_string()),
            ("momentum", o.momentum.to_string()),
            ("l2", o.l2.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("max_epochs", o.max_epochs.to_string()),
            ("seed", o.seed.to_string()),
            (
                "split",
                format!("{}/{}/{}", self.split[0], self.split[1], self.split[2]),
            ),
            ("split_seed", self.split_seed.to_string()),
            ("max_bg_fraction", self.max_bg_fraction.to_string()),
            ("width_divisor", self.width_divisor.to_string()),
            ("evaluate_test", self.evaluate_test.to_string()),
            ("fusion", self.fusion.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub param_count: usize,
    pub best_epoch: Option<usize>,
    pub history: Vec<crate::train::EpochRecord>,
    pub test_report: Option<EvalReport>,
}

fn split_rows(train: &[ManifestEntry], val: &[ManifestEntry], test: &[ManifestEntry]) -> String {
    let mut s = String::from("id,role\n");
    for (role, set) in [("train", train), ("val", val), ("test", test)] {
        for e in set {
            let _ = writeln!(s, "{},{role}", e.id);
        }
    }
    s
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing data manifest (--data)".into()))?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing output directory (--out)".into()))?;
    cfg.optim.validate()?;
    let net = cfg.net_config()?;

    let entries = read_manifest(data)?;
    let [n_train, n_val, n_test] = cfg.split;
    let (train, val, test) = split_volumes(&entries, n_train, n_val, n_test, cfg.split_seed)?;
    create_dir(out)?;
    write_file(&out.join(SPLIT_CSV), split_rows(&train, &val, &test))?;

    let dataset = |set: &[ManifestEntry], role: Role| -> Result<_> {
        let (v, l): (Vec<_>, Vec<_>) = load_cohort(set)?.into_iter().unzip();
        build_dataset(&v, &l, role, cfg.max_bg_fraction)
    };
    let train_ds = dataset(&train, Role::Train)?;
    let val_ds = dataset(&val, Role::Val)?;

    let mut graph = LayerGraph::build(cfg.model, &net);
    let param_count = graph.param_count();
    write_file(&out.join(RUN_MANIFEST), cfg.to_manifest(param_count))?;
    eprintln!(
        "{}: {} parameters, {} training patches, {} validation patches",
        cfg.model,
        param_count,
        train_ds.len(),
        val_ds.len()
    );
    let fit = fit_with_progress(&mut graph, &train_ds, &val_ds, &cfg.optim, out, |r| {
        eprintln!(
            "epoch {} train_loss {:.5} val_loss {:.5}",
            r.epoch, r.train_loss, r.val_loss
        );
    })?;

    let test_report = if cfg.evaluate_test && !test.is_empty() {
        let cohort = load_cohort(&test)?;
        let normalized = cohort
            .iter()
            .map(|(v, _)| normalize_volume(v).map(|(n, _)| n))
            .collect::<Result<Vec<_>>>()?;
        let cases = test
            .iter()
            .zip(&normalized)
            .zip(&cohort)
            .map(|((e, n), (_, l))| (e.id.clone(), n, l));
        let report = evaluate(&graph, cases, cfg.fusion)?;
        write_file(&out.join(TEST_REPORT), report.to_csv())?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome {
        out_dir: out.clone(),
        param_count,
        best_epoch: fit.best_epoch,
        history: fit.history,
        test_report,
    })
}

fn width_config(divisor: usize) -> Result<NetConfig> {
    RunConfig {
        width_divisor: divisor,
        ..RunConfig::default()
    }
    .net_config()
}

pub fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let variant: ModelVariant = a.model.parse()?;
    let fusion: Fusion = a.fusion.parse()?;
    let element: Element = a.element.parse()?;
    let mut graph = LayerGraph::build(variant, &width_config(a.width_divisor)?);
    load_weights(&mut graph, &a.checkpoint)?;
    let volume = load_volume(&a.volume, a.dims, element)?;
    let (normalized, _) = normalize_volume(&volume)?;
    let pred = segment_volume(&graph, &normalized, fusion)?;
    save_labels_raw(&pred, &a.out)?;
    if let Some(dir) = &a.overlay_dir {
        create_dir(dir)?;
        for z in 0..pred.dims().z {
            export_overlay(&pred, z, dir.join(format!("slice_{z:03}.ppm")))?;
        }
    }
    let counts = pred.class_counts();
    eprintln!(
        "segmented {} ({}): bg {} gm {} wm {} csf {}",
        a.volume.display(),
        pred.dims(),
        counts[0],
        counts[crate::volume::GM as usize],
        counts[crate::volume::WM as usize],
        counts[crate::volume::CSF as usize]
    );
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalReport> {
    if a.pred.len() != a.truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --pred files but {} --truth files",
            a.pred.len(),
            a.truth.len()
        )));
    }
    let truth_conv: Convention = a.truth_convention.parse()?;
    let pred_conv: Convention = a.pred_convention.parse()?;
    let mut pairs = Vec::with_capacity(a.pred.len());
    for (p, t) in a.pred.iter().zip(&a.truth) {
        let pred = remap_labels(&load_label_volume(p, a.dims, pred_conv)?, Convention::Model);
        let truth = remap_labels(&load_label_volume(t, a.dims, truth_conv)?, Convention::Model);
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        pairs.push((id, pred, truth));
    }
    let report = EvalReport::from_predictions(pairs.iter().map(|(id, p, t)| (id.clone(), p, t)))?;
    if let Some(out) = &a.out {
        write_file(out, report.to_csv())?;
    }
    Ok(report)
}

pub fn cmd_params(a: &ParamsArgs) -> Result<String> {
    let variant: ModelVariant = a.model.parse()?;
    let graph = LayerGraph::build(variant, &width_config(a.width_divisor)?);
    let mut s = format!("{variant} learnable parameters: {}\n", graph.param_count());
    for (name, n) in graph.param_breakdown() {
        let _ = writeln!(s, "  {name:<12} {n:>9}");
    }
    Ok(s)
}
