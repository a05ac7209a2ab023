use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bipose_core::error::Error;
use bipose_core::eval::{evaluate, predict_samples, prediction_records, write_jsonl, MetricReport};
use bipose_core::kernels::bench::{run_shape, to_csv, BenchShape};
use bipose_core::losses::{LossWeights, PoseLoss};
use bipose_core::model::{write_atomic, Network, NetworkConfig};
use bipose_core::synthdata::{generate, sample, Sample, Split, SynthSpec};
use bipose_core::train::{self, checkpoint_bytes, read_checkpoint, EpochRecord, RunConfig, TrainOutcome};

use crate::Failure;

const DEFAULT_SHAPES: [&str; 3] = ["64x64x3x32x32", "32x32x3x16x16", "16x16x1x32x32"];

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let bytes = read_file(path, "config")?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

fn load_network(path: &Path) -> Result<Network, Failure> {
    Ok(read_checkpoint(&read_file(path, "checkpoint")?)?.0)
}

fn default_log(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}

fn jsonl(records: &[EpochRecord]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    Ok(buf)
}

fn print_json(value: &MetricReport) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Core(Error::Format(e.to_string())))
}

fn log_line(r: &EpochRecord) {
    let val = r.val_pck.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  lr {:.0e}  loss {:.5}  pose {:.5}  kl {:.5}  val_pck {val}",
        r.epoch, r.lr, r.loss, r.pose, r.kl
    );
}

/// Writes checkpoint and log, then prints validation metrics.
fn finish(outcome: TrainOutcome, data_val: &[Sample], out: &Path, log: Option<PathBuf>) -> Result<(), Failure> {
    let TrainOutcome {
        mut model,
        history,
        state,
    } = outcome;
    let report = evaluate(&mut model, data_val)?;
    let log = log.unwrap_or_else(|| default_log(out));
    write_atomic(&log, &jsonl(&history)?)?;
    write_atomic(out, &checkpoint_bytes(&model, &state)?)?;
    println!("{}", print_json(&report)?);
    Ok(())
}

pub fn config(preset: &str) -> Result<(), Failure> {
    let cfg = match preset {
        "desk" => RunConfig::desk(),
        other => RunConfig {
            model: NetworkConfig::preset(other)?,
            ..RunConfig::desk()
        },
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}

pub fn train_teacher(config: &Path, seed: Option<u64>, out: &Path, log: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = generate(&cfg.data)?;
    let outcome = train::train_teacher(&cfg.model.teacher(), &data, &cfg.train, &mut log_line)?;
    finish(outcome, &data.val, out, log)
}

pub struct DistillArgs {
    pub teacher: Option<PathBuf>,
    pub config: PathBuf,
    pub alpha_mix: Option<f64>,
    pub loss: Option<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

pub fn distill(args: DistillArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(a) = args.alpha_mix {
        cfg.train.weights = LossWeights::new(a).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(l) = &args.loss {
        cfg.train.loss = l.parse::<PoseLoss>().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let mut teacher = match &args.teacher {
        Some(p) => Some(load_network(p)?),
        None if cfg.train.weights.alpha_mix < 1.0 => {
            return Err(Failure::Usage("--teacher is required unless --alpha-mix is 1".into()))
        }
        None => None,
    };
    let data = generate(&cfg.data)?;
    let outcome = train::distill(teacher.as_mut(), &cfg.model, &data, &cfg.train, &mut log_line)?;
    finish(outcome, &data.val, &args.out, args.log)
}

fn val_samples(net: &Network, config: Option<&Path>, count: Option<usize>) -> Result<Vec<Sample>, Failure> {
    let spec = match config {
        Some(p) => load_config(p)?.data,
        None => {
            let m = net.config();
            SynthSpec {
                height: m.input_h,
                width: m.input_w,
                ..SynthSpec::default()
            }
        }
    };
    spec.validate()?;
    let n = count.unwrap_or(spec.val_size);
    if n == 0 {
        return Err(Failure::Usage("at least one sample is needed".into()));
    }
    Ok((0..n).map(|i| sample(&spec, Split::Val, i)).collect())
}

pub fn eval(checkpoint: &Path, config: Option<&Path>, samples: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let mut net = load_network(checkpoint)?;
    let val = val_samples(&net, config, samples)?;
    let report = evaluate(&mut net, &val)?;
    let text = print_json(&report)?;
    if let Some(p) = out {
        write_atomic(p, format!("{text}\n").as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

pub fn bench(shapes: &[String], min_time_ms: u64, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let specs: Vec<String> = if shapes.is_empty() {
        DEFAULT_SHAPES.iter().map(|s| s.to_string()).collect()
    } else {
        shapes.to_vec()
    };
    let parsed = specs
        .iter()
        .map(|s| s.parse::<BenchShape>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = parsed
        .into_iter()
        .map(|s| run_shape(s, seed, Duration::from_millis(min_time_ms)))
        .collect::<Result<Vec<_>, _>>()?;
    let csv = to_csv(&rows);
    if let Some(bad) = rows.iter().find(|r| !r.outputs_match) {
        print!("{csv}");
        return Err(Error::InvalidInput(format!("binary and float outputs differ for {:?}", bad.shape)).into());
    }
    if let Some(p) = out {
        write_atomic(p, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

pub fn predict(checkpoint: &Path, config: Option<&Path>, count: usize, out: Option<&Path>) -> Result<(), Failure> {
    let mut net = load_network(checkpoint)?;
    let val = val_samples(&net, config, Some(count))?;
    let preds = predict_samples(&mut net, &val, 16)?;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &prediction_records(&preds))?;
    match out {
        Some(p) => write_atomic(p, &buf)?,
        None => std::io::stdout().write_all(&buf).map_err(Error::from)?,
    }
    Ok(())
}
