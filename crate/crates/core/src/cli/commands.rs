//! Subcommand implementations. Each takes a resolved [`RunConfig`] and an
//! output directory and returns the paths it produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::audio::{
    build_dataset, encode_wav, read_wav, spectrogram_export, write_wav, MixtureExample, Waveform,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::{EmaState, ScoreModel, SeparatorModel};
use crate::pipeline::{evaluate, mean_std, EvalRow, Mode, Separation};
use crate::rng;
use crate::training::{
    finetune_fastgeco, train_geco, train_separator, Adam, Control, Stage, TrainReport, TrainState,
};

/// Where a run keeps its artifacts.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

/// Largest sample magnitude written to a WAV.
pub const EXPORT_PEAK: f64 = 0.99;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Workspace {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.jsonl"))
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.out.join(checkpoint_name(stage))
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::Exists(path.to_path_buf()));
        }
        Ok(())
    }

    fn write_config_echo(&self, name: &str) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        write_atomic(&self.out.join(format!("{name}.config.toml")), self.cfg.to_toml().as_bytes())
    }
}

pub fn checkpoint_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Separator => "separator.ckpt",
        Stage::Geco => "geco.ckpt",
        Stage::Finetune => "fastgeco.ckpt",
    }
}

fn command_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Separator => "train-sep",
        Stage::Geco => "train-geco",
        Stage::Finetune => "finetune",
    }
}

fn require(stage: &str, missing: &str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Ordering {
            stage: stage.into(),
            missing: missing.into(),
            path,
        })
    }
}

/// One line of a dataset manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: String,
    pub mixture: String,
    pub sources: Vec<String>,
    pub noise: String,
    pub snr_db: f64,
    pub num_samples: usize,
    pub sample_rate: u32,
    /// SHA-256 of the mixture WAV file.
    pub sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_wav_hashed(path: &Path, w: &Waveform) -> Result<String> {
    let bytes = encode_wav(w);
    write_atomic(path, &bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Builds the train/val/test splits, writes WAVs and one manifest per split.
pub fn cmd_simulate(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let dir = ws.data_dir();
    for split in SPLITS {
        ws.guard(&ws.manifest(split))?;
    }
    ws.write_config_echo("simulate")?;
    let mut manifests = Vec::new();
    for split in SPLITS {
        let n = match split {
            "train" => ws.cfg.splits.train,
            "val" => ws.cfg.splits.val,
            _ => ws.cfg.splits.test,
        };
        let sub = dir.join(split);
        fs::create_dir_all(&sub)?;
        let mut lines = String::new();
        if n > 0 {
            for mut ex in build_dataset(n, &ws.cfg.dataset, ws.cfg.split_seed(split))? {
                // 16-bit files saturate at full scale.
                ex.fit_peak(EXPORT_PEAK);
                ex.validate()?;
                let rel = |name: &str| format!("{split}/{}_{name}.wav", ex.id);
                let sha256 = write_wav_hashed(&dir.join(rel("mix")), &ex.mixture)?;
                let mut sources = Vec::new();
                for (k, s) in ex.sources.iter().enumerate() {
                    let r = rel(&format!("s{}", k + 1));
                    write_wav(dir.join(&r), s)?;
                    sources.push(r);
                }
                write_wav(dir.join(rel("noise")), &ex.noise)?;
                let row = ManifestRow {
                    id: ex.id.clone(),
                    split: split.into(),
                    mixture: rel("mix"),
                    sources,
                    noise: rel("noise"),
                    snr_db: ex.snr_db,
                    num_samples: ex.num_samples(),
                    sample_rate: ex.sample_rate(),
                    sha256,
                };
                lines.push_str(&serde_json::to_string(&row).expect("serializable"));
                lines.push('\n');
            }
        }
        let path = ws.manifest(split);
        write_atomic(&path, lines.as_bytes())?;
        log::info!("simulate: {n} {split} examples -> {}", path.display());
        manifests.push(path);
    }
    Ok(manifests)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads every example listed in a manifest.
pub fn load_examples(path: &Path) -> Result<Vec<MixtureExample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|row| {
            let ex = MixtureExample {
                mixture: read_wav(base.join(&row.mixture))?,
                sources: row
                    .sources
                    .iter()
                    .map(|s| read_wav(base.join(s)))
                    .collect::<Result<_>>()?,
                noise: read_wav(base.join(&row.noise))?,
                snr_db: row.snr_db,
                id: row.id,
            };
            Ok(ex)
        })
        .collect()
}

fn stage_data(ws: &Workspace, stage: Stage, data: Option<&Path>) -> Result<(Vec<MixtureExample>, Vec<MixtureExample>)> {
    let dir = data.map_or_else(|| ws.data_dir(), Path::to_path_buf);
    let train = require(command_name(stage), "simulate", dir.join("train.jsonl"))?;
    let train = load_examples(&train)?;
    let val_path = dir.join("val.jsonl");
    let val = if val_path.exists() {
        load_examples(&val_path)?
    } else {
        Vec::new()
    };
    Ok((train, val))
}

fn inference_params(stage: Stage, state: &TrainState) -> &[f64] {
    match stage {
        Stage::Geco => state.eval_params(),
        _ => state.best.as_ref().map_or(&state.params, |(_, p)| p),
    }
}

/// Checkpoint carrying both the inference model and the resume state.
fn stage_checkpoint(ws: &Workspace, stage: Stage, base: Checkpoint, state: &TrainState, complete: bool) -> Checkpoint {
    let mut ck = base;
    ck.params = inference_params(stage, state).to_vec();
    ck.step = state.adam.step;
    ck.config = ws.cfg.to_toml();
    ck.ema = state.ema.as_ref().map(|e| e.shadow.clone());
    ck.extras = vec![
        ("train.params".into(), state.params.clone()),
        ("adam.m".into(), state.adam.m.clone()),
        ("adam.v".into(), state.adam.v.clone()),
    ];
    if let Some((_, p)) = &state.best {
        ck.extras.push(("best.params".into(), p.clone()));
    }
    ck.meta = serde_json::json!({
        "stage": stage.name(),
        "complete": complete,
        "adam": state.adam,
        "ema_decay": state.ema.as_ref().map(|e| e.decay),
        "best_score": state.best.as_ref().map(|(s, _)| *s),
        "report": state.report,
    });
    ck
}

fn resume_state(ck: &Checkpoint) -> Result<TrainState> {
    let bad = |what: &str| Error::Config(format!("checkpoint cannot be resumed: {what}"));
    let meta = &ck.meta;
    let mut adam: Adam = serde_json::from_value(meta["adam"].clone()).map_err(|_| bad("optimizer state"))?;
    adam.m = ck.extra("adam.m").ok_or_else(|| bad("adam.m"))?.to_vec();
    adam.v = ck.extra("adam.v").ok_or_else(|| bad("adam.v"))?.to_vec();
    let report: TrainReport = serde_json::from_value(meta["report"].clone()).map_err(|_| bad("report"))?;
    let ema = match (&ck.ema, meta["ema_decay"].as_f64()) {
        (Some(shadow), Some(decay)) => Some(EmaState {
            shadow: shadow.clone(),
            decay,
        }),
        _ => None,
    };
    let best = match (meta["best_score"].as_f64(), ck.extra("best.params")) {
        (Some(s), Some(p)) => Some((s, p.to_vec())),
        _ => None,
    };
    Ok(TrainState {
        params: ck.extra("train.params").ok_or_else(|| bad("train.params"))?.to_vec(),
        adam,
        ema,
        best,
        report,
    })
}

fn load_model_checkpoint(stage: &str, missing: Stage, ws: &Workspace, models: Option<&Path>) -> Result<Checkpoint> {
    let dir = models.unwrap_or(&ws.out);
    let path = require(stage, command_name(missing), dir.join(checkpoint_name(missing)))?;
    Checkpoint::load(&path)
}

/// Runs one training stage; writes `<stage>.ckpt`, a JSONL report and a
/// config echo. With `resume`, continues from an existing checkpoint.
pub fn cmd_train(ws: &Workspace, stage: Stage, data: Option<&Path>, resume: bool) -> Result<PathBuf> {
    let cmd = command_name(stage);
    let ck_path = ws.checkpoint(stage);
    let prior = if resume && ck_path.exists() {
        Some(resume_state(&Checkpoint::load(&ck_path)?)?)
    } else {
        ws.guard(&ck_path)?;
        None
    };
    // Prerequisites are checked before any data is read.
    let separator = match stage {
        Stage::Separator => None,
        _ => Some(load_model_checkpoint(cmd, Stage::Separator, ws, None)?.to_separator()?),
    };
    let geco = match stage {
        Stage::Finetune => Some(load_model_checkpoint(cmd, Stage::Geco, ws, None)?.to_score()?),
        _ => None,
    };
    let (train, val) = stage_data(ws, stage, data)?;
    ws.write_config_echo(stage.name())?;
    let cfg = ws.cfg.train_config(stage);
    let base = match (stage, &geco) {
        (Stage::Separator, _) => Checkpoint::separator(&SeparatorModel::init(ws.cfg.model.separator, cfg.seed), ""),
        (_, Some(g)) => Checkpoint::score(g, ""),
        _ => Checkpoint::score(&ScoreModel::init(ws.cfg.model.score, cfg.seed), ""),
    };
    let hook_base = base.clone();
    let ctl = Control {
        resume: prior,
        on_checkpoint: Some(Box::new(|s: &TrainState| {
            stage_checkpoint(ws, stage, hook_base.clone(), s, false).save(&ck_path, true)
        })),
    };
    let bridge = &ws.cfg.bridge;
    let state = match stage {
        Stage::Separator => {
            let init = base.to_separator()?;
            train_separator(&train, &val, &init, cfg, ctl)?.1
        }
        Stage::Geco => {
            let init = base.to_score()?;
            train_geco(&train, &val, &init, separator.as_ref().expect("loaded"), bridge, cfg, ctl)?.1
        }
        Stage::Finetune => {
            let init = base.to_score()?;
            let sep = separator.as_ref().expect("loaded");
            finetune_fastgeco(&train, &val, &init, sep, bridge, cfg, ws.cfg.training.finetune_options, ctl)?.1
        }
    };
    let mut state = state;
    state.report.checkpoint = Some(ck_path.display().to_string());
    stage_checkpoint(ws, stage, base, &state, true).save(&ck_path, true)?;
    let report_path = ws.out.join(format!("{}.report.jsonl", stage.name()));
    write_atomic(&report_path, state.report.to_jsonl().as_bytes())?;
    log::info!("{cmd}: wrote {}", ck_path.display());
    Ok(ck_path)
}

/// Models needed for `mode`, loaded from `models` (default: the output dir).
pub struct LoadedModels {
    pub separator: SeparatorModel,
    pub score: Option<ScoreModel>,
}

pub fn load_models(ws: &Workspace, cmd: &str, mode: Mode, models: Option<&Path>) -> Result<LoadedModels> {
    let separator = load_model_checkpoint(cmd, Stage::Separator, ws, models)?.to_separator()?;
    let score = match mode {
        Mode::SepOnly => None,
        Mode::Geco | Mode::GecoOneStep => Some(load_model_checkpoint(cmd, Stage::Geco, ws, models)?.to_score()?),
        Mode::Fastgeco => Some(load_model_checkpoint(cmd, Stage::Finetune, ws, models)?.to_score()?),
    };
    if let Some(s) = &score {
        s.arch.check_bridge(&ws.cfg.bridge)?;
    }
    Ok(LoadedModels { separator, score })
}

fn separation<'a>(ws: &Workspace, mode: Mode, m: &'a LoadedModels) -> Separation<'a> {
    Separation {
        mode,
        separator: &m.separator,
        score: m.score.as_ref(),
        bridge: ws.cfg.bridge,
        reverse: ws.cfg.sampler.reverse_options(),
    }
}

/// Scales a signal down to [`EXPORT_PEAK`] if it would clip on export.
pub fn unclip(x: &mut [f64]) -> bool {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let k = EXPORT_PEAK / peak;
        x.iter_mut().for_each(|v| *v *= k);
        true
    } else {
        false
    }
}

/// Separates one mixture WAV into one WAV per source.
pub fn cmd_separate(ws: &Workspace, input: &Path, mode: Mode, models: Option<&Path>) -> Result<Vec<PathBuf>> {
    let loaded = load_models(ws, "separate", mode, models)?;
    let mix = read_wav(input)?;
    if mix.sample_rate != ws.cfg.dataset.sample_rate {
        return Err(Error::format(
            24,
            format!(
                "{}: sample rate {} Hz does not match the configured {} Hz",
                input.display(),
                mix.sample_rate,
                ws.cfg.dataset.sample_rate
            ),
        ));
    }
    let stem = input.file_stem().map_or("mixture".into(), |s| s.to_string_lossy().into_owned());
    let dir = ws.out.join("separated");
    let paths: Vec<PathBuf> = (1..=loaded.separator.arch.sources)
        .map(|k| dir.join(format!("{stem}_{mode}_s{k}.wav")))
        .collect();
    for p in &paths {
        ws.guard(p)?;
    }
    let outputs = separation(ws, mode, &loaded).run(&mix.samples, rng::derive(ws.cfg.seed, 0x5e9a))?;
    fs::create_dir_all(&dir)?;
    for (mut x, p) in outputs.into_iter().zip(&paths) {
        if unclip(&mut x) {
            log::warn!("separate: {} rescaled to avoid clipping", p.display());
        }
        write_wav(p, &Waveform::new(x, mix.sample_rate)?)?;
    }
    Ok(paths)
}

/// Mean and standard deviation of the per-source columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub rows: usize,
    pub si_snr_mean: f64,
    pub si_snr_std: f64,
    pub si_snri_mean: f64,
    pub si_snri_std: f64,
}

pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let (a, b) = mean_std(&rows.iter().map(|r| r.si_snr).collect::<Vec<_>>());
    let (c, d) = mean_std(&rows.iter().map(|r| r.si_snri).collect::<Vec<_>>());
    EvalSummary {
        rows: rows.len(),
        si_snr_mean: a,
        si_snr_std: b,
        si_snri_mean: c,
        si_snri_std: d,
    }
}

/// Per-row CSV followed by `mean` and `std` summary rows.
pub fn write_eval_csv(path: &Path, mode: &str, rows: &[EvalRow]) -> Result<EvalSummary> {
    let summary = summarize(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["id", "source", "mode", "snr_db", "si_snr", "si_snr_mixture", "si_snri"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.source.to_string(),
            mode.to_string(),
            r.snr_db.to_string(),
            r.si_snr.to_string(),
            r.si_snr_mixture.to_string(),
            r.si_snri.to_string(),
        ])
        .map_err(io)?;
    }
    let mix = |f: fn(&[f64]) -> (f64, f64), pick: usize| {
        let v: Vec<f64> = rows.iter().map(|r| r.si_snr_mixture).collect();
        let (m, s) = f(&v);
        [m, s][pick].to_string()
    };
    let snr = |pick: usize| {
        let (m, s) = mean_std(&rows.iter().map(|r| r.snr_db).collect::<Vec<_>>());
        [m, s][pick].to_string()
    };
    for (label, pick, a, b) in [
        ("mean", 0, summary.si_snr_mean, summary.si_snri_mean),
        ("std", 1, summary.si_snr_std, summary.si_snri_std),
    ] {
        w.write_record([
            label.to_string(),
            String::new(),
            mode.to_string(),
            snr(pick),
            a.to_string(),
            mix(mean_std, pick),
            b.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)?;
    Ok(summary)
}

/// Separates every example of a manifest and writes the SI-SNRi report.
pub fn cmd_eval(ws: &Workspace, manifest: Option<&Path>, mode: Mode, models: Option<&Path>) -> Result<(PathBuf, EvalSummary)> {
    let loaded = load_models(ws, "eval", mode, models)?;
    let manifest = manifest.map_or_else(|| ws.manifest("test"), Path::to_path_buf);
    let manifest = require("eval", "simulate", manifest)?;
    let examples = load_examples(&manifest)?;
    let out = ws.out.join(format!("eval_{mode}.csv"));
    ws.guard(&out)?;
    let rows = evaluate(&separation(ws, mode, &loaded), &examples, rng::derive(ws.cfg.seed, 0xe7a1))?;
    let summary = write_eval_csv(&out, mode.name(), &rows)?;
    Ok((out, summary))
}

/// Log-magnitude spectrogram of a WAV as CSV.
pub fn cmd_spectrogram(ws: &Workspace, input: &Path) -> Result<PathBuf> {
    let w = read_wav(input)?;
    let stem = input.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
    fs::create_dir_all(&ws.out)?;
    let out = ws.out.join(format!("{stem}.spectrogram.csv"));
    ws.guard(&out)?;
    spectrogram_export(&w, &out)?;
    Ok(out)
}
