//! Command-line driver: dataset generation, training, sampling, sweeps and
//! evaluation.
//!
//! Settings are layered, lowest first: built-in defaults (or the chosen
//! preset), the `DEBLUR_SEED` environment variable, the `--config` file, then
//! command-line flags. Every command writes `run.json` into `--out` and keeps
//! a `.incomplete` marker there until it has finished.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::blursynth::{make_dataset, read_dataset, write_dataset, BlurConfig};
use crate::error::{Error, Result};
use crate::evalkit::{psnr, ssim, sweep_csv, sweep_report};
use crate::imagecore::{load_image, save_image};
use crate::model::Model;
use crate::sampler::{default_grid, Sampler, SamplerConfig};
use crate::trainer::{load_checkpoint, parse_kv, save_checkpoint, train_until, LossRecord, Preset, TrainConfig, TrainState};

pub const SEED_ENV: &str = "DEBLUR_SEED";
pub const INCOMPLETE: &str = ".incomplete";
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "deblur", version, about = "Guided diffusion deblurring toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "max-var")]
    max_var: Option<f64>,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    /// addition, concat, adanorm or none.
    #[arg(long)]
    mode: Option<String>,
    /// micro or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Any settings key, applied after the other flags. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic blur dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of pairs.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Drop the guidance regression loss.
        #[arg(long = "no-guidance-loss")]
        no_guidance_loss: bool,
        /// Continue from a checkpoint; its stored settings take over.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Deblur PNG files with a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run the sampler grid over a dataset and report metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare same-named PNGs in two directories.
    Eval {
        #[command(flatten)]
        common: Common,
        dir_a: PathBuf,
        dir_b: PathBuf,
    },
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub kind: String,
    pub n: usize,
    pub size: usize,
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub preset: Option<Preset>,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub sampler: SamplerConfig,
}

impl Settings {
    pub fn new(preset: Option<Preset>) -> Self {
        Self {
            preset,
            train: preset.map(TrainConfig::preset).unwrap_or_default(),
            data: DataSettings {
                kind: "train".into(),
                n: 8,
                size: 64,
            },
            sampler: SamplerConfig::default(),
        }
    }

    /// Sets one key. `seed` drives data, training and sampling together.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = |what: &str| Error::Config(format!("cannot parse {v:?} for key {what:?}"));
        match key {
            "preset" => return Err(Error::Config("preset must come first (use --preset or the file)".into())),
            "seed" => {
                let s: u64 = v.parse().map_err(|_| num(key))?;
                self.train.seed = s;
                self.sampler.seed = s;
            }
            "data.kind" => {
                BlurConfig::named(v, 0)?;
                self.data.kind = v.to_string();
            }
            "data.n" => self.data.n = v.parse().map_err(|_| num(key))?,
            "data.size" => self.data.size = v.parse().map_err(|_| num(key))?,
            "sampler.steps" => self.sampler.steps = v.parse().map_err(|_| num(key))?,
            "sampler.max_var" => self.sampler.max_var = v.parse().map_err(|_| num(key))?,
            "sampler.n_samples" => self.sampler.n_samples = v.parse().map_err(|_| num(key))?,
            "sampler.clip" => self.sampler.clip = v.parse().map_err(|_| num(key))?,
            "schedule.kind" => self.train.set("schedule", v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    /// Canonical `(key, value)` listing; the config hash is taken over it.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![(
            "preset".to_string(),
            self.preset.map_or("none".to_string(), |p| p.to_string()),
        )];
        out.extend(
            self.train
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| *k != "schedule")
                .map(|(k, v)| (k.to_string(), v)),
        );
        out.push(("schedule.kind".into(), self.train.model.schedule.to_string()));
        out.push(("data.kind".into(), self.data.kind.clone()));
        out.push(("data.n".into(), self.data.n.to_string()));
        out.push(("data.size".into(), self.data.size.to_string()));
        out.push(("sampler.steps".into(), self.sampler.steps.to_string()));
        out.push(("sampler.max_var".into(), self.sampler.max_var.to_string()));
        out.push(("sampler.n_samples".into(), self.sampler.n_samples.to_string()));
        out.push(("sampler.clip".into(), self.sampler.clip.to_string()));
        out
    }

    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(text, "{k} = {v}").unwrap();
        }
        hex(&Sha256::digest(text.as_bytes()))
    }

    fn blur_config(&self) -> Result<BlurConfig> {
        let mut c = BlurConfig::named(&self.data.kind, self.train.seed)?;
        c.size = self.data.size;
        c.validate()?;
        Ok(c)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds settings from the four layers. `env_seed` is the raw value of
/// `DEBLUR_SEED`, if set.
fn resolve(common: &Common, env_seed: Option<&str>) -> Result<Settings> {
    let file = match &common.config {
        Some(p) => parse_kv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    let preset_text = common
        .preset
        .clone()
        .or_else(|| file.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()));
    let preset = match preset_text.as_deref() {
        None | Some("none") => None,
        Some(p) => Some(p.parse::<Preset>()?),
    };
    let mut s = Settings::new(preset);
    if let Some(seed) = env_seed {
        s.set("seed", seed)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
    }
    for (k, v) in file.iter().filter(|(k, _)| k != "preset") {
        s.set(k, v)?;
    }
    if let Some(v) = common.seed {
        s.set("seed", &v.to_string())?;
    }
    if let Some(v) = common.steps {
        s.sampler.steps = v;
    }
    if let Some(v) = common.max_var {
        s.sampler.max_var = v;
    }
    if let Some(v) = common.n_samples {
        s.sampler.n_samples = v;
    }
    if let Some(v) = &common.mode {
        s.set("mode", v)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), v)?;
    }
    Ok(s)
}

/// An output directory flagged incomplete until `finish` is called.
struct OutDir {
    path: PathBuf,
}

impl OutDir {
    fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let marker = path.join(INCOMPLETE);
        fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
        Ok(Self { path: path.to_path_buf() })
    }

    fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn finish(self, command: &str, settings: &Settings, extra: Value) -> Result<()> {
        let config: Map<String, Value> = settings
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        let mut record = json!({
            "command": command,
            "code_version": env!("CARGO_PKG_VERSION"),
            "seed": settings.train.seed,
            "config_hash": settings.hash(),
            "config": config,
        });
        if let (Value::Object(r), Value::Object(e)) = (&mut record, extra) {
            r.extend(e);
        }
        let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Config(e.to_string()))?;
        self.write(RUN_RECORD, text + "\n")?;
        let marker = self.join(INCOMPLETE);
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(common: &Common, n: Option<usize>, env_seed: Option<&str>) -> Result<()> {
    let mut s = resolve(common, env_seed)?;
    if let Some(n) = n {
        s.data.n = n;
    }
    let ds = make_dataset(&s.blur_config()?, s.data.n)?;
    let out = OutDir::open(&common.out)?;
    write_dataset(&ds, &out.path)?;
    println!("wrote {} pairs to {}", ds.len(), common.out.display());
    out.finish("gen-data", &s, json!({ "pairs": ds.len() }))
}

fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iter,lambda,lr,guidance,denoise,total,r1,r2,r3,grad_norm\n");
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.lambda,
            r.lr,
            r.guidance,
            r.denoise,
            r.total,
            r.per_scale[0],
            r.per_scale[1],
            r.per_scale[2],
            r.grad_norm
        )
        .unwrap();
    }
    s
}

fn train(common: &Common, data: &Path, no_guidance_loss: bool, resume: Option<&Path>, env_seed: Option<&str>) -> Result<()> {
    let mut s = resolve(common, env_seed)?;
    if no_guidance_loss {
        s.train.guidance_loss = false;
    }
    let mut state = match resume {
        Some(p) => {
            let st = load_checkpoint(p)?;
            s.train = st.config.clone();
            st
        }
        None => TrainState::new(s.train.clone())?,
    };
    let ds = read_dataset(data)?;
    let out = OutDir::open(&common.out)?;
    let every = state.config.checkpoint_every;
    let ckpt_dir = out.join("checkpoints");
    let start = state.iter;
    let records = train_until(&mut state, &ds.pairs, s.train.iterations, |st, _| {
        if every > 0 && st.iter % every == 0 {
            save_checkpoint(st, &ckpt_dir.join(format!("iter_{:08}.ckpt", st.iter)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &out.join("model.ckpt"))?;
    out.write("losses.csv", loss_csv(&records))?;
    let last = records.last();
    println!(
        "trained iterations {start}..{} final total loss {}",
        state.iter,
        last.map_or(f64::NAN, |r| r.total)
    );
    out.finish(
        "train",
        &s,
        json!({
            "data": path_str(data),
            "resumed_from": resume.map(path_str),
            "start_iter": start,
            "end_iter": state.iter,
            "guidance_loss": state.config.guidance_loss,
            "final_total_loss": last.map(|r| r.total),
        }),
    )
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(path)?.model)
}

fn sample_cmd(common: &Common, checkpoint: &Path, inputs: &[PathBuf], env_seed: Option<&str>) -> Result<()> {
    let s = resolve(common, env_seed)?;
    s.sampler.validate()?;
    let model = load_model(checkpoint)?;
    let out = OutDir::open(&common.out)?;
    let sampler = Sampler::new(&model);
    let mut written = Vec::new();
    for input in inputs {
        let y = load_image(input)?;
        let img = sampler.sample_average(&y, &s.sampler)?;
        let name = input
            .file_name()
            .ok_or_else(|| Error::Config(format!("input {} has no file name", input.display())))?;
        let dest = out.join(name).with_extension("png");
        save_image(&img, &dest)?;
        written.push(path_str(&dest));
    }
    println!("wrote {} samples to {}", written.len(), common.out.display());
    out.finish(
        "sample",
        &s,
        json!({ "checkpoint": path_str(checkpoint), "inputs": inputs.iter().map(|p| path_str(p)).collect::<Vec<_>>(), "outputs": written }),
    )
}

fn sweep_cmd(common: &Common, checkpoint: &Path, data: &Path, env_seed: Option<&str>) -> Result<()> {
    let s = resolve(common, env_seed)?;
    let grid = if common.steps.is_some() || common.max_var.is_some() {
        vec![s.sampler.clone()]
    } else {
        default_grid(&s.sampler)
    };
    for g in &grid {
        g.validate()?;
    }
    let model = load_model(checkpoint)?;
    let ds = read_dataset(data)?;
    let out = OutDir::open(&common.out)?;
    let records = Sampler::new(&model).grid_sweep(&ds.pairs, &grid, Some(&out.path))?;
    out.write("sweep.csv", sweep_csv(&records))?;
    let reports = if records.is_empty() { Vec::new() } else { sweep_report(&records, &out.path)? };
    for r in &reports {
        println!("T={} max_var={} mean_psnr={:.4} mean_ssim={:.4}", r.steps, r.max_var, r.mean_psnr, r.mean_ssim);
    }
    out.finish(
        "sweep",
        &s,
        json!({ "checkpoint": path_str(checkpoint), "data": path_str(data), "configs": grid.len(), "records": records.len() }),
    )
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn eval_cmd(common: &Common, a: &Path, b: &Path, env_seed: Option<&str>) -> Result<()> {
    let s = resolve(common, env_seed)?;
    let names = png_names(a)?;
    if names.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", a.display())));
    }
    let mut csv = String::from("image_id,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for name in &names {
        let x = load_image(&a.join(name))?;
        let y = load_image(&b.join(name))?;
        let (p, q) = (psnr(&x, &y)?, ssim(&x, &y)?);
        writeln!(csv, "{name},{p},{q}").unwrap();
        sp += p;
        ss += q;
    }
    let n = names.len() as f64;
    let (mean_psnr, mean_ssim) = (sp / n, ss / n);
    let out = OutDir::open(&common.out)?;
    out.write("eval.csv", csv)?;
    println!("n_images={} mean_psnr={mean_psnr} mean_ssim={mean_ssim}", names.len());
    out.finish(
        "eval",
        &s,
        json!({ "dir_a": path_str(a), "dir_b": path_str(b), "n_images": names.len(), "mean_psnr": mean_psnr, "mean_ssim": mean_ssim }),
    )
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { common, n } => gen_data(common, *n, env_seed),
        Cmd::Train {
            common,
            data,
            no_guidance_loss,
            resume,
        } => train(common, data, *no_guidance_loss, resume.as_deref(), env_seed),
        Cmd::Sample {
            common,
            checkpoint,
            inputs,
        } => sample_cmd(common, checkpoint, inputs, env_seed),
        Cmd::Sweep { common, checkpoint, data } => sweep_cmd(common, checkpoint, data, env_seed),
        Cmd::Eval { common, dir_a, dir_b } => eval_cmd(common, dir_a, dir_b, env_seed),
    }
}

/// One-line JSON error report.
fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status. Failures print a single JSON line on stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(cli, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line("runtime", &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(args: &[&str]) -> Common {
        let mut argv = vec!["deblur", "eval", "a", "b", "--out", "o"];
        argv.extend_from_slice(args);
        match Cli::try_parse_from(argv).unwrap().cmd {
            Cmd::Eval { common, .. } => common,
            _ => unreachable!(),
        }
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "seed = 5\nlr = 0.5\nsampler.steps = 20\n").unwrap();
        let cfg = f.to_str().unwrap();

        let s = resolve(&common(&[]), None).unwrap();
        assert_eq!(s, Settings::new(None));
        let s = resolve(&common(&[]), Some("3")).unwrap();
        assert_eq!((s.train.seed, s.sampler.seed), (3, 3));
        let s = resolve(&common(&["--config", cfg]), Some("3")).unwrap();
        assert_eq!((s.train.seed, s.train.lr, s.sampler.steps), (5, 0.5, 20));
        let s = resolve(&common(&["--config", cfg, "--seed", "7", "--steps", "30"]), Some("3")).unwrap();
        assert_eq!((s.train.seed, s.train.lr, s.sampler.steps), (7, 0.5, 30));
        let s = resolve(&common(&["--config", cfg, "--set", "lr=0.25"]), None).unwrap();
        assert_eq!(s.train.lr, 0.25);
    }

    #[test]
    fn preset_is_the_default_layer() {
        let s = resolve(&common(&["--preset", "micro"]), None).unwrap();
        assert_eq!(s.train, TrainConfig::preset(Preset::Micro));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.cfg");
        fs::write(&f, "preset = micro\nch = 8\n").unwrap();
        let s = resolve(&common(&["--config", f.to_str().unwrap()]), None).unwrap();
        assert_eq!(s.preset, Some(Preset::Micro));
        assert_eq!(s.train.model.ch, 8);
        assert_eq!(s.train.lr, TrainConfig::preset(Preset::Micro).lr);
    }

    #[test]
    fn unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.cfg");
        fs::write(&f, "learning_rate = 0.1\n").unwrap();
        assert!(resolve(&common(&["--config", f.to_str().unwrap()]), None).is_err());
        assert!(resolve(&common(&["--set", "sampler.stepz=3"]), None).is_err());
        assert!(resolve(&common(&["--mode", "multiply"]), None).is_err());
        assert!(resolve(&common(&[]), Some("minus one")).is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = Settings::new(None);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("guidance_loss", "false").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["deblur", "frobnicate"]), 2);
        assert_eq!(run(["deblur", "eval", "a"]), 2);
        assert_eq!(run(["deblur", "--help"]), 0);
    }

    #[test]
    fn error_line_is_single_json_line() {
        let l = error_line("runtime", "bad\nthing");
        assert!(!l.contains('\n'));
        let v: Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["message"], "bad thing");
    }
}
