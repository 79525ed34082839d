use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tpr_core::analysis::{evaluate_probes_with_model, tag_role_histogram};
use tpr_core::data::{
    gen_heuristic_probes, gen_structured_tasks, load_tsv, write_tsv, Corpus, TsvSchema, Vocab,
    PROBE_LABELS,
};
use tpr_core::gradcheck::check_model_family;
use tpr_core::train::{self, encode_corpus, evaluate};
use tpr_core::transfer::{apply_transfer, run_transfer_matrix, GainTable, MatrixConfig, TaskData};
use tpr_core::{Checkpoint, Model, ModelConfig, ModelFamily};

use crate::config::{CliError, CliResult, Settings};

/// Creates the output directory and records the resolved settings in it.
fn out_dir(s: &Settings, out: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            PathBuf::from("runs").join(format!("{stamp}-seed{}", s.seed()?))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    write(&dir.join("config.resolved"), &s.resolved_text())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Whether the file has a `sentence2` column, and its label strings in
/// sorted order.
fn sniff(path: &Path) -> CliResult<(bool, Vec<String>)> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let col = header
        .iter()
        .position(|&h| h == "label")
        .ok_or_else(|| CliError::Data(format!("{}: no label column", path.display())))?;
    let labels: BTreeSet<String> = lines
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| l.split('\t').nth(col).map(|x| x.trim().to_string()))
        .collect();
    Ok((header.contains(&"sentence2"), labels.into_iter().collect()))
}

/// Label set for a corpus: the `labels` setting if given, else the sorted
/// labels found in `path`.
fn label_set(s: &Settings, path: &Path) -> CliResult<(bool, Vec<String>)> {
    let (paired, found) = sniff(path)?;
    let labels = match s.raw("labels") {
        "" => found,
        l => l.split(',').map(|x| x.trim().to_string()).collect(),
    };
    if labels.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no labeled rows",
            path.display()
        )));
    }
    Ok((paired, labels))
}

fn load(path: &Path, paired: bool, labels: &[String], max_len: usize) -> CliResult<Corpus> {
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let loaded = load_tsv(path, &TsvSchema::new(paired, &refs, max_len))?;
    if loaded.truncated > 0 {
        eprintln!(
            "{}: truncated {} rows to {max_len} tokens",
            path.display(),
            loaded.truncated
        );
    }
    Ok(loaded.corpus)
}

/// Fills in the sizes the data determines unless the user pinned them.
fn fit_to_data(s: &Settings, mc: &mut ModelConfig, vocab: &Vocab, classes: usize) {
    if !s.is_explicit("vocab-size") {
        mc.backbone.vocab_size = vocab.len();
    }
    if !s.is_explicit("num-classes") {
        mc.num_classes = classes;
    }
}

pub fn gen_data(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let seed = s.seed()?;
    match s.raw("task") {
        "structured" => {
            let cfg = s.structured()?;
            let dir = out_dir(s, out)?;
            let t = gen_structured_tasks(seed, &cfg)?;
            for (name, c) in [
                ("source.train", &t.source.train),
                ("source.dev", &t.source.dev),
                ("target.train", &t.target.train),
                ("target.dev", &t.target.dev),
            ] {
                write_tsv(c, &dir.join(format!("{name}.tsv")))?;
            }
            t.vocab.save(&dir.join("vocab.txt"))?;
            println!(
                "wrote {} source and {} target examples to {}",
                t.source.train.len() + t.source.dev.len(),
                t.target.train.len() + t.target.dev.len(),
                dir.display()
            );
        }
        "probes" => {
            let spec = s.probes()?;
            let dir = out_dir(s, out)?;
            let probes = gen_heuristic_probes(&spec, seed)?;
            write_tsv(&probes, &dir.join("probes.tsv"))?;
            println!("wrote {} probes to {}", probes.len(), dir.display());
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown task {other:?} (expected structured or probes)"
            )))
        }
    }
    Ok(true)
}

pub fn train(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let seed = s.seed()?;
    let mut mc = s.model()?;
    let tc = s.train()?;
    let plan = s.plan()?;
    let train_path = s.required_input("train")?;
    let dev_path = s.required_input("dev")?;
    let source = s.input("source-ckpt")?;
    match (&source, plan.is_empty()) {
        (Some(_), true) => {
            return Err(CliError::Config(
                "--source-ckpt needs at least one of --transfer-backbone/--transfer-fillers/--transfer-roles".into(),
            ))
        }
        (None, false) => return Err(CliError::Config("transfer flags need --source-ckpt".into())),
        _ => {}
    }
    let (paired, labels) = label_set(s, &train_path)?;
    let source = source.map(|p| Checkpoint::load(&p)).transpose()?;
    let max_len = mc.backbone.max_len;
    let tr = load(&train_path, paired, &labels, max_len)?;
    let dv = load(&dev_path, paired, &labels, max_len)?;
    let vocab = match source.as_ref().map(|c| c.vocab()).transpose()?.flatten() {
        Some(v) => v,
        None => Vocab::from_corpora([tr.pairs.as_slice(), dv.pairs.as_slice()]),
    };
    fit_to_data(s, &mut mc, &vocab, labels.len());
    let dir = out_dir(s, out)?;

    let mut model = Model::init(mc, seed)?;
    if let Some(src) = &source {
        let copied = apply_transfer(&mut model, &src.params, plan)?;
        eprintln!("transferred {} tensors ({plan})", copied.len());
    }
    let outcome = train::train(
        model,
        &encode_corpus(&tr, &vocab),
        &encode_corpus(&dv, &vocab),
        &tc,
    )?;

    let mut ckpt = Checkpoint::from_model(&outcome.best, seed);
    ckpt.set_history(&outcome.dev_history());
    ckpt.set_vocab(&vocab);
    ckpt.set_labels(&labels);
    ckpt.save(&dir.join("model.ckpt"))?;
    let mut hist = String::from("epoch,mean_loss,dev_acc\n");
    for h in &outcome.history {
        let _ = writeln!(hist, "{},{:.6},{:.2}", h.epoch, h.mean_loss, h.dev_acc);
    }
    write(&dir.join("history.csv"), &hist)?;
    println!(
        "best dev accuracy {:.2} at epoch {} ({})",
        outcome.best_dev_acc,
        outcome.best_epoch,
        dir.display()
    );
    Ok(true)
}

pub fn transfer(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let seed = s.seed()?;
    let paths = ["source-train", "source-dev", "train", "dev"]
        .map(|k| s.required_input(k))
        .into_iter()
        .collect::<CliResult<Vec<_>>>()?;
    let families: Vec<String> = s
        .raw("model")
        .split(',')
        .map(|f| f.trim().to_string())
        .collect();
    let source_tc = s.source_train()?;
    let target_tc = s.train()?;
    let configs = families
        .iter()
        .map(|f| s.model_as(f))
        .collect::<CliResult<Vec<_>>>()?;
    let max_len = configs[0].backbone.max_len;

    let (src_paired, src_labels) = sniff(&paths[0])?;
    let (tgt_paired, tgt_labels) = label_set(s, &paths[2])?;
    let st = load(&paths[0], src_paired, &src_labels, max_len)?;
    let sd = load(&paths[1], src_paired, &src_labels, max_len)?;
    let tt = load(&paths[2], tgt_paired, &tgt_labels, max_len)?;
    let td = load(&paths[3], tgt_paired, &tgt_labels, max_len)?;
    let vocab = Vocab::from_corpora([&st, &sd, &tt, &td].map(|c| c.pairs.as_slice()));
    let enc = [&st, &sd, &tt, &td].map(|c| encode_corpus(c, &vocab));
    let target_name = paths[2]
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .unwrap_or("target")
        .to_string();
    let dir = out_dir(s, out)?;

    let mut table = GainTable { rows: Vec::new() };
    for (fam, mut mc) in families.iter().zip(configs) {
        fit_to_data(s, &mut mc, &vocab, tgt_labels.len());
        let cfg = MatrixConfig {
            model: mc,
            source_classes: src_labels.len(),
            source_train: source_tc.clone(),
            target_train: target_tc.clone(),
            baseline_seeds: s.get("baseline-seeds")?,
            seed,
            target_name: target_name.clone(),
            jobs: s.get("jobs")?,
        };
        let t = run_transfer_matrix::<f64>(
            TaskData {
                train: &enc[0],
                dev: &enc[1],
            },
            TaskData {
                train: &enc[2],
                dev: &enc[3],
            },
            &cfg,
        )?;
        let w = t.winner().expect("seven plan rows");
        println!(
            "{fam}: baseline {:.2}, best plan {} at {:.2} ({})",
            t.rows[0].baseline_acc,
            w.plan,
            w.finetuned_acc,
            tpr_core::transfer::format_gain(w.gain)
        );
        table.rows.extend(t.rows);
    }
    write(&dir.join("gains.csv"), &table.to_csv())?;
    Ok(true)
}

pub fn eval(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let dev_path = s.required_input("dev")?;
    let (model, vocab, labels) = match s.input("ckpt")? {
        Some(p) => {
            let c = Checkpoint::load(&p)?;
            let vocab = c.vocab()?.ok_or_else(|| {
                CliError::Data(format!("{}: checkpoint has no vocabulary", p.display()))
            })?;
            let labels = match c.labels() {
                Some(l) if s.raw("labels").is_empty() => l,
                _ => label_set(s, &dev_path)?.1,
            };
            (c.to_model()?, vocab, labels)
        }
        None => {
            let (paired, labels) = label_set(s, &dev_path)?;
            let mut mc = s.model()?;
            let c = load(&dev_path, paired, &labels, mc.backbone.max_len)?;
            let vocab = Vocab::from_corpora([c.pairs.as_slice()]);
            fit_to_data(s, &mut mc, &vocab, labels.len());
            (Model::init(mc, s.seed()?)?, vocab, labels)
        }
    };
    let (paired, _) = sniff(&dev_path)?;
    let dev = load(&dev_path, paired, &labels, model.config.backbone.max_len)?;
    let acc = evaluate(&model, &encode_corpus(&dev, &vocab))?;
    let dir = out_dir(s, out)?;
    write(
        &dir.join("eval.csv"),
        &format!("examples,accuracy\n{},{acc:.2}\n", dev.len()),
    )?;
    println!("accuracy {acc:.2} on {} examples", dev.len());
    Ok(true)
}

pub fn analyze(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let ckpt_path = s.required_input("ckpt")?;
    let dev_path = s.input("dev")?;
    let probes_path = s.input("probes")?;
    if dev_path.is_none() && probes_path.is_none() {
        return Err(CliError::Config(
            "analyze needs --dev (tagged corpus) and/or --probes".into(),
        ));
    }
    let k: usize = s.get("k")?;
    let c = Checkpoint::load(&ckpt_path)?;
    let model = c.to_model()?;
    let vocab = c.vocab()?.ok_or_else(|| {
        CliError::Data(format!(
            "{}: checkpoint has no vocabulary",
            ckpt_path.display()
        ))
    })?;
    let max_len = model.config.backbone.max_len;
    let dir = out_dir(s, out)?;

    if let Some(p) = dev_path {
        let (paired, found) = sniff(&p)?;
        let labels = c.labels().unwrap_or(found);
        let corpus = load(&p, paired, &labels, max_len)?;
        let h = tag_role_histogram(&model, &corpus, &vocab, k)?;
        write(&dir.join("analysis.csv"), &h.to_csv())?;
        write(&dir.join("analysis.normalized.csv"), &h.to_normalized_csv())?;
        write(&dir.join("analysis.dat"), &h.to_gnuplot())?;
        println!("{} tokens over {} tags", h.total(), h.counts.len());
    }
    if let Some(p) = probes_path {
        let labels: Vec<String> = PROBE_LABELS.iter().map(|l| l.to_string()).collect();
        let probes = load(&p, true, &labels, max_len)?;
        let rep = evaluate_probes_with_model(&model, &vocab, &probes)?;
        write(&dir.join("probes.csv"), &rep.to_csv())?;
        println!("probe accuracy {:.2} (mean of cells)", rep.overall());
    }
    Ok(true)
}

pub fn gradcheck(s: &Settings, out: Option<PathBuf>) -> CliResult<bool> {
    let seed = s.seed()?;
    let tol: f64 = s.get("tol")?;
    let families: Vec<ModelFamily> = if s.is_explicit("model") {
        s.raw("model")
            .split(',')
            .map(|f| f.trim().parse())
            .collect::<Result<_, _>>()?
    } else {
        ModelFamily::ALL.to_vec()
    };
    let dir = out_dir(s, out)?;
    let mut csv = String::from("model,parameter,checked,max_rel_err,max_abs_grad,passed\n");
    let mut all = true;
    for fam in families {
        let r = check_model_family::<f64>(fam, seed, tol)?;
        for p in &r.params {
            let _ = writeln!(
                csv,
                "{fam},{},{},{:.3e},{:.3e},{}",
                p.name,
                p.checked,
                p.max_rel_err,
                p.max_abs_grad,
                p.max_rel_err < tol
            );
        }
        let worst = r.worst().map_or(0.0, |w| w.max_rel_err);
        println!(
            "{fam}: {} ({} tensors, worst relative error {worst:.2e})",
            if r.passed() { "pass" } else { "FAIL" },
            r.params.len()
        );
        all &= r.passed();
    }
    write(&dir.join("gradcheck.csv"), &csv)?;
    Ok(all)
}
