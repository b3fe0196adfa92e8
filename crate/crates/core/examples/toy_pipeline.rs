//! Three-stage training on synthetic mixtures, then a comparison of the
//! inference modes. Checkpoints go to a temporary directory and are reloaded
//! before evaluation.
//!
//! Usage: `cargo run --release --example toy_pipeline -- [train_examples]`
//! The default of 300 finishes in about a minute; 2000 matches the CLI defaults.

use geco::cli::checkpoint::Checkpoint;
use geco::cli::config::RunConfig;
use geco::pipeline::{evaluate, mean_std, Mode, Separation};
use geco::training::{finetune_fastgeco, train_geco, train_separator, Control, Stage};
use geco::audio::build_dataset;
use geco::models::{ScoreModel, SeparatorModel};

fn main() -> geco::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let n_train: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = RunConfig::default();
    let train = build_dataset(n_train, &cfg.dataset, cfg.split_seed("train"))?;
    let val = build_dataset(cfg.splits.val, &cfg.dataset, cfg.split_seed("val"))?;
    let test = build_dataset(50, &cfg.dataset, cfg.split_seed("test"))?;
    let dir = std::env::temp_dir().join("geco-toy-pipeline");
    std::fs::create_dir_all(&dir)?;

    let sep0 = SeparatorModel::init(cfg.model.separator, cfg.train_config(Stage::Separator).seed);
    let (sep, _) = train_separator(&train, &val, &sep0, cfg.train_config(Stage::Separator), Control::none())?;
    Checkpoint::separator(&sep, &cfg.to_toml()).save(&dir.join("separator.ckpt"), true)?;

    let score0 = ScoreModel::init(cfg.model.score, cfg.train_config(Stage::Geco).seed);
    let (geco, _) = train_geco(&train, &val, &score0, &sep, &cfg.bridge, cfg.train_config(Stage::Geco), Control::none())?;
    Checkpoint::score(&geco, &cfg.to_toml()).save(&dir.join("geco.ckpt"), true)?;

    let (fast, _) = finetune_fastgeco(
        &train,
        &val,
        &geco,
        &sep,
        &cfg.bridge,
        cfg.train_config(Stage::Finetune),
        cfg.training.finetune_options,
        Control::none(),
    )?;
    Checkpoint::score(&fast, &cfg.to_toml()).save(&dir.join("fastgeco.ckpt"), true)?;

    let sep = Checkpoint::load(&dir.join("separator.ckpt"))?.to_separator()?;
    let geco = Checkpoint::load(&dir.join("geco.ckpt"))?.to_score()?;
    let fast = Checkpoint::load(&dir.join("fastgeco.ckpt"))?.to_score()?;
    println!("{:<14} {:>10} {:>8} {:>12}", "mode", "SI-SNRi", "std", "score calls");
    for mode in Mode::ALL {
        let s = Separation {
            mode,
            separator: &sep,
            score: match mode {
                Mode::SepOnly => None,
                Mode::Fastgeco => Some(&fast),
                _ => Some(&geco),
            },
            bridge: cfg.bridge,
            reverse: cfg.sampler.reverse_options(),
        };
        let rows = evaluate(&s, &test, 1)?;
        let (m, sd) = mean_std(&rows.iter().map(|r| r.si_snri).collect::<Vec<_>>());
        println!("{:<14} {m:>+10.2} {sd:>8.2} {:>12}", mode.name(), mode.score_calls(&cfg.bridge));
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}
