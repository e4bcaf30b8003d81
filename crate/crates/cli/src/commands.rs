use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use latentprobe::dims::{epoch_metrics, telemetry_hook};
use latentprobe::model::train as train_model;
use latentprobe::{
    analogy_accuracy, evaluate_latent, load_checkpoint, load_vectors, save_checkpoint,
    semantic_similarity_score, AnalogySet, EmbeddingTable, EvalBundle, ModelCheckpoint, ModelError,
    ModelKind, Prober, SimilarityPairset, TrainConfig, TrainingTrace,
};
use latentprobe_server::{ModelEntry, ServeError, SessionRegistry};
use serde_json::json;

use crate::table::{fmt_opt, Table};
use crate::{EvalArgs, Failure, InspectArgs, ProbeArgs, ServeArgs, TrainArgs, VectorArgs};

const DEFAULT_BETA: f64 = 1e-5;

fn load_table(args: &VectorArgs) -> Result<EmbeddingTable, Failure> {
    Ok(load_vectors(&args.embeddings, args.limit)
        .with_context(|| format!("reading {}", args.embeddings.display()))?)
}

fn load_model(path: &Path, table: &EmbeddingTable) -> Result<ModelCheckpoint, Failure> {
    let model = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    if model.input_dim() != table.dim() {
        return Err(anyhow!(
            "checkpoint expects {}-dimensional vectors but the embeddings have {}",
            model.input_dim(),
            table.dim()
        )
        .into());
    }
    Ok(model)
}

fn trace_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".trace.jsonl");
    PathBuf::from(name)
}

fn print_json(value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.into()))?;
    println!("{text}");
    Ok(())
}

fn parse_pair(pair: &str) -> Result<(String, String), Failure> {
    match pair.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok((a.trim().to_string(), b.trim().to_string()))
        }
        _ => Err(anyhow!("--pair must look like w1,w2, got {pair:?}").into()),
    }
}

pub fn train(args: TrainArgs, json: bool) -> Result<(), Failure> {
    let table = load_table(&args.vectors)?;
    if args.model == ModelKind::Ae && args.beta.is_some() {
        eprintln!("warning: --beta is ignored for ae models");
    }
    let hidden = args
        .hidden
        .iter()
        .filter(|h| !h.trim().is_empty())
        .map(|h| {
            h.trim()
                .parse::<usize>()
                .with_context(|| format!("bad --hidden width {h:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let config = TrainConfig {
        model_kind: args.model,
        input_dim: table.dim(),
        latent_dim: args.latent_dim,
        hidden,
        beta: args.beta.unwrap_or(DEFAULT_BETA),
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        learning_rate: args.lr,
        ..TrainConfig::default()
    };
    let pairs = args
        .semeval
        .as_deref()
        .map(SimilarityPairset::load)
        .transpose()?;
    let questions = args.analogy.as_deref().map(AnalogySet::load).transpose()?;
    let telemetry = pairs.is_some() || questions.is_some();
    let bundle = EvalBundle::for_telemetry(pairs, questions, args.analogy_sample);

    let epochs = config.epochs;
    let mut hook = telemetry_hook(&table, &bundle);
    let result = train_model(&table, config, |model, record| {
        if telemetry {
            hook(model, record);
        }
        eprintln!(
            "epoch {}/{epochs} recon {:.6} kl {} useful {} semeval {}",
            record.epoch,
            record.recon_loss,
            fmt_opt(record.kl_loss),
            record
                .useful_dims
                .map_or("-".to_string(), |u| u.to_string()),
            fmt_opt(record.semeval)
        );
    });
    let (model, trace) = match result {
        Ok(done) => done,
        Err(ModelError::NonFiniteLoss { epoch, last_finite }) => {
            save_checkpoint(&last_finite, &args.out)?;
            return Err(Failure::Internal(anyhow!(
                "loss became non-finite in epoch {epoch}; last finite checkpoint (epoch {}) written to {}",
                last_finite.epoch,
                args.out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&model, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let trace_file = trace_path(&args.out);
    let mut out = BufWriter::new(
        File::create(&trace_file).with_context(|| format!("writing {}", trace_file.display()))?,
    );
    trace.write_jsonl(&mut out)?;
    out.flush()?;

    let summary = epoch_metrics(&model, &table, &bundle)?;
    if json {
        return print_json(&json!({
            "checkpoint": args.out,
            "trace": trace_file,
            "metrics": summary,
        }));
    }
    let mut t = Table::new(["epoch", "recon", "kl", "useful_dims", "semeval", "analogy"]);
    t.row([
        summary.epoch.to_string(),
        format!("{:.6}", summary.recon_loss),
        fmt_opt(summary.kl_loss),
        summary.useful_dims.map_or("-".into(), |u| u.to_string()),
        fmt_opt(summary.semeval),
        fmt_opt(summary.analogy),
    ]);
    println!(
        "checkpoint {}\ntrace {}",
        args.out.display(),
        trace_file.display()
    );
    print!("{t}");
    Ok(())
}

/// Always prints JSON.
pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let table = load_table(&args.vectors)?;
    let pairs = args
        .semeval
        .as_deref()
        .map(SimilarityPairset::load)
        .transpose()?;
    let questions = args.analogy.as_deref().map(AnalogySet::load).transpose()?;
    let report = match &args.checkpoint {
        None => {
            let semeval = pairs
                .as_ref()
                .map(|p| semantic_similarity_score(&table, p))
                .transpose()?;
            let analogy = questions
                .as_ref()
                .map(|q| analogy_accuracy(&table, q, args.candidates));
            json!({ "source": "raw", "dims": table.dim(), "semeval": semeval, "analogy": analogy })
        }
        Some(path) => {
            let model = load_model(path, &table)?;
            let result = evaluate_latent(
                &model,
                &table,
                pairs.as_ref(),
                questions.as_ref(),
                args.dims,
                args.candidates,
            )?;
            json!({
                "source": path,
                "selection": args.dims,
                "dims": result.dims.len(),
                "useful_dims": result.useful_dims,
                "semeval": result.semeval,
                "analogy": result.analogy,
            })
        }
    };
    print_json(&report)
}

pub fn dims(args: InspectArgs, json: bool) -> Result<(), Failure> {
    let table = load_table(&args.vectors)?;
    let model = load_model(&args.checkpoint, &table)?;
    let mut profiles = latentprobe::dimension_profiles(&model, &table)?;
    profiles.sort_by(|a, b| b.entropy.total_cmp(&a.entropy).then(a.index.cmp(&b.index)));
    if json {
        return print_json(&json!({ "epoch": model.epoch, "dims": profiles }));
    }
    let mut t = Table::new([
        "dim",
        "entropy",
        "mean_min",
        "mean_max",
        "q1",
        "q3",
        "avg_sigma",
        "status",
    ]);
    for p in &profiles {
        t.row([
            p.index.to_string(),
            format!("{:.4}", p.entropy),
            format!("{:.4}", p.mean_min),
            format!("{:.4}", p.mean_max),
            format!("{:.4}", p.q1),
            format!("{:.4}", p.q3),
            fmt_opt(p.avg_sigma),
            if p.useful { "useful" } else { "deprecated" }.to_string(),
        ]);
    }
    let useful = profiles.iter().filter(|p| p.useful).count();
    println!(
        "{useful} useful, {} deprecated of {}",
        profiles.len() - useful,
        profiles.len()
    );
    print!("{t}");
    Ok(())
}

pub fn probe(args: ProbeArgs, json: bool) -> Result<(), Failure> {
    let (w1, w2) = parse_pair(&args.pair)?;
    let table = load_table(&args.inspect.vectors)?;
    let model = load_model(&args.inspect.checkpoint, &table)?;
    let prober = Prober::new(&model, &table)?;
    let dims = args.dim.map(|d| vec![d]);
    let set = prober.probe_all(&w1, &w2, dims.as_deref(), args.samples)?;
    if json {
        return print_json(
            &json!({ "epoch": model.epoch, "word1": w1, "word2": w2, "reports": set.reports, "histogram": set.histogram }),
        );
    }
    let mut t = Table::new([
        "dim",
        "theta",
        "phi",
        "level",
        "extent_w1",
        "extent_w2",
        "degenerate",
    ]);
    for r in &set.reports {
        t.row([
            r.dim.to_string(),
            format!("{:.2}", r.theta),
            format!("{:.2}", r.phi),
            format!("{:.2}", r.encoding_level),
            format!("{:.4e}", r.extent_w1),
            format!("{:.4e}", r.extent_w2),
            r.degenerate.to_string(),
        ]);
    }
    println!("{} reports for ({w1}, {w2})", set.reports.len());
    print!("{t}");
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<(), Failure> {
    let table = Arc::new(load_table(&args.vectors)?);
    let mut registry = SessionRegistry::new();
    for path in &args.checkpoint {
        let model = load_model(path, &table)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("cannot derive a model id from {}", path.display()))?
            .to_string();
        let trace_file = trace_path(path);
        let trace = if trace_file.exists() {
            let reader = std::io::BufReader::new(File::open(&trace_file)?);
            TrainingTrace::read_jsonl(reader)
                .with_context(|| format!("reading {}", trace_file.display()))?
        } else {
            TrainingTrace::default()
        };
        registry.insert(ModelEntry::new(id, model, table.clone(), trace)?)?;
    }
    let addr = std::net::SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.into()))?;
    runtime
        .block_on(async {
            let listener = latentprobe_server::bind(addr).await?;
            eprintln!(
                "serving {} model(s) on http://{}",
                registry.len(),
                listener.local_addr()?
            );
            latentprobe_server::serve_on(listener, registry).await
        })
        .map_err(|e| match e {
            ServeError::PortInUse(_) | ServeError::NoModels => Failure::Data(e.into()),
            ServeError::Io(_) => Failure::Internal(e.into()),
        })
}
