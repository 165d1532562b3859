use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use log::info;
use modelguard_core::attacks::{finetune_attack, forgery_attack, prune_sweep, ForgeryMethod};
use modelguard_core::auth::{authorized_predict, unauthorized_predict, Session};
use modelguard_core::checkpoint::{load_checkpoint, save_checkpoint_with_metadata};
use modelguard_core::fingerprint::{
    build_library, evaluate_fo, FingerprintLibrary, Fo, LibraryConfig,
};
use modelguard_core::train::{evaluate, train};
use modelguard_core::watermark::{embed, extract, measure_range, EmbedMode, WatermarkSpec};
use modelguard_core::{build_lenet5, load_mnist, Classifier, ImageBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ExperimentConfig, ModelKind};
use crate::layout::{fail, hash_tag, Layout, EXIT_VERIFICATION};
use crate::report::{self, AttackRow, ExtractRow, FoRow, ModelRow, PathRow, UserRow};

const MODEL_NAME: &str = "LeNet-5";

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub layout: Layout,
    hash: String,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> anyhow::Result<Self> {
        let layout = Layout::new(&cfg.out);
        layout.create()?;
        Ok(Self {
            cfg,
            layout,
            hash: cfg.hash(),
        })
    }

    fn data(&self) -> anyhow::Result<(ImageBatch, ImageBatch)> {
        let (train, test) = load_mnist(&self.cfg.dataset)
            .with_context(|| format!("loading dataset from {}", self.cfg.dataset.display()))?;
        info!(
            "loaded {} training and {} test images",
            train.len(),
            test.len()
        );
        Ok((train, test))
    }

    fn fresh_model(&self) -> anyhow::Result<Classifier> {
        match self.cfg.model {
            ModelKind::Lenet5 => Ok(build_lenet5(10, self.cfg.seed)?),
        }
    }

    fn save_model(&self, model: &Classifier, path: &Path) -> anyhow::Result<()> {
        save_checkpoint_with_metadata(model, path, &hash_tag(self.cfg))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn protected_model(&self) -> anyhow::Result<Classifier> {
        let path = self.layout.watermarked_checkpoint();
        self.layout.require(&path, "embed")?;
        Ok(load_checkpoint(&path)?)
    }

    fn spec(&self) -> anyhow::Result<WatermarkSpec> {
        let path = self.layout.spec();
        self.layout.require(&path, "embed")?;
        Ok(WatermarkSpec::load(&path)?)
    }
}

fn digits_string(d: &[u8]) -> String {
    d.iter().map(|d| char::from(b'0' + d)).collect()
}

pub fn train_cmd(ctx: &Context) -> anyhow::Result<()> {
    let (train_data, test) = ctx.data()?;
    let mut model = ctx.fresh_model()?;
    let cfg = ctx.cfg.train_config(ctx.cfg.train.epochs);
    let training = train(&mut model, &train_data, &cfg)?;
    let accuracy = evaluate(&model, &test)?;
    println!("clean {MODEL_NAME}: test accuracy {:.2}%", accuracy * 100.0);
    ctx.save_model(&model, &ctx.layout.clean_checkpoint())?;
    let row = ModelRow {
        model: MODEL_NAME.into(),
        method: "clean".into(),
        epochs: cfg.epochs,
        accuracy,
        verification: "n/a".into(),
        config_hash: ctx.hash.clone(),
    };
    report::write_csv(&ctx.layout.report(report::TRAIN_CSV), &[row])?;
    ctx.layout.write_json_report(
        "train",
        ctx.cfg,
        &json!({ "accuracy": accuracy, "training": training }),
    )
}

pub fn embed_cmd(ctx: &Context) -> anyhow::Result<()> {
    let (train_data, test) = ctx.data()?;
    let mode = ctx.cfg.watermark.mode;
    let (mut model, epochs) = match mode {
        EmbedMode::FromScratch => (ctx.fresh_model()?, ctx.cfg.train.epochs),
        EmbedMode::FineTune => {
            let path = ctx.layout.clean_checkpoint();
            ctx.layout.require(&path, "train")?;
            (load_checkpoint(&path)?, ctx.cfg.watermark.finetune_epochs)
        }
    };
    let mut plan = ctx.cfg.watermark_plan();
    if mode == EmbedMode::FromScratch && ctx.cfg.watermark.range_from_clean {
        let path = ctx.layout.clean_checkpoint();
        ctx.layout.require(&path, "train")?;
        let clean = load_checkpoint(&path)?;
        plan.reference_range = Some(measure_range(clean.conv(&plan.layer)?, plan.range));
    }
    let cfg = ctx.cfg.train_config(epochs);
    let (spec, rep) = embed(&mut model, &train_data, &test, &plan, mode, &cfg)?;
    ctx.save_model(&model, &ctx.layout.watermarked_checkpoint())?;

    let mut doc = serde_json::to_value(&spec)?;
    doc["config_hash"] = json!(ctx.hash);
    fs::write(
        ctx.layout.spec(),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;

    let matched = rep.verification.matched;
    let method = match mode {
        EmbedMode::FromScratch => "watermarked (from scratch)",
        EmbedMode::FineTune => "watermarked (fine-tune)",
    };
    println!(
        "{method}: test accuracy {:.2}%, watermark {} (extracted {})",
        rep.accuracy * 100.0,
        if matched { "success" } else { "failure" },
        digits_string(&rep.verification.digits)
    );
    let row = ModelRow {
        model: MODEL_NAME.into(),
        method: method.into(),
        epochs,
        accuracy: rep.accuracy,
        verification: if matched { "success" } else { "failure" }.into(),
        config_hash: ctx.hash.clone(),
    };
    report::write_csv(&ctx.layout.report(report::EMBED_CSV), &[row])?;
    ctx.layout
        .write_json_report("embed", ctx.cfg, &json!({ "spec": spec, "report": rep }))?;
    if !matched {
        return Err(fail(
            EXIT_VERIFICATION,
            "watermark did not verify after embedding",
        ));
    }
    Ok(())
}

pub fn extract_cmd(
    ctx: &Context,
    checkpoint: Option<PathBuf>,
    spec_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let checkpoint = checkpoint.unwrap_or_else(|| ctx.layout.watermarked_checkpoint());
    ctx.layout.require(&checkpoint, "embed")?;
    let spec = match spec_path {
        Some(p) => {
            ctx.layout.require(&p, "embed")?;
            WatermarkSpec::load(&p)?
        }
        None => ctx.spec()?,
    };
    let model = load_checkpoint(&checkpoint)?;
    let result = extract(&model, &spec)?;
    println!(
        "expected  {}\nextracted {}\nverification {}",
        digits_string(&spec.digits),
        digits_string(&result.digits),
        if result.matched { "success" } else { "failure" }
    );
    let row = ExtractRow {
        checkpoint: checkpoint.display().to_string(),
        expected: digits_string(&spec.digits),
        extracted: digits_string(&result.digits),
        matched: result.matched,
        hamming: result.hamming,
        config_hash: ctx.hash.clone(),
    };
    report::write_csv(&ctx.layout.report(report::EXTRACT_CSV), &[row])?;
    ctx.layout.write_json_report("extract", ctx.cfg, &result)?;
    if !result.matched {
        return Err(fail(
            EXIT_VERIFICATION,
            format!(
                "watermark mismatch in {} ({} digits differ)",
                checkpoint.display(),
                result.hamming
            ),
        ));
    }
    Ok(())
}

pub fn genfp_cmd(ctx: &Context) -> anyhow::Result<()> {
    let model = ctx.protected_model()?;
    let (_, test) = ctx.data()?;
    let policy = ctx.cfg.policy();
    let gen = ctx.cfg.gen_config();

    let mut rows = Vec::new();
    let mut evaluations = Vec::new();
    for &class in &ctx.cfg.generation.fo_classes {
        for &confidence in &ctx.cfg.generation.fo_confidences {
            let fo = Fo { class, confidence };
            let e = evaluate_fo(
                &model,
                &test,
                fo,
                &policy,
                &gen,
                ctx.cfg.generation.per_fo,
                ctx.cfg.seed,
            )?;
            println!(
                "{fo}: {}/{} authenticated ({:.0}%)",
                e.authenticated,
                e.generated,
                e.success_rate * 100.0
            );
            rows.push(FoRow::new(&e, &ctx.hash));
            evaluations.push(e);
        }
    }
    report::write_csv(&ctx.layout.report(report::FINGERPRINTS_CSV), &rows)?;

    let lib_cfg = LibraryConfig {
        gen,
        attempts: ctx.cfg.generation.attempts,
        seed: ctx.cfg.seed,
    };
    let mut library = build_library(&model, &test, &policy, &lib_cfg)?;
    library.metadata = hash_tag(ctx.cfg);
    library.save(ctx.layout.fingerprints())?;
    println!(
        "fingerprint library: {} users issued, {} failed",
        library.records.len(),
        library.failures.len()
    );
    ctx.layout.write_json_report(
        "genfp",
        ctx.cfg,
        &json!({
            "evaluations": evaluations,
            "issued": library.records.len(),
            "failures": library.failures.iter().map(|(u, fo, why)| json!({"user_id": u, "fo": fo, "reason": why})).collect::<Vec<_>>(),
        }),
    )
}

pub fn auth_cmd(ctx: &Context) -> anyhow::Result<()> {
    let model = ctx.protected_model()?;
    let manifest = ctx.layout.fingerprints().join("manifest.json");
    ctx.layout.require(&manifest, "genfp")?;
    let library = FingerprintLibrary::load(ctx.layout.fingerprints())?;
    let (_, test) = ctx.data()?;

    let mut users = Vec::new();
    let mut granted = None;
    for r in &library.records {
        let session = Session::open(r, &model, &library.policy, &library.allocation);
        let ok = session.granted && session.user_id == Some(r.user_id);
        users.push(UserRow {
            user_id: r.user_id,
            class: r.target,
            confidence: r.confidence,
            authenticated: ok,
            config_hash: ctx.hash.clone(),
        });
        if ok && granted.is_none() {
            granted = Some(session);
        }
    }
    report::write_csv(&ctx.layout.report(report::USERS_CSV), &users)?;
    let passed = users.iter().filter(|u| u.authenticated).count();
    println!("{passed}/{} issued fingerprints authenticate", users.len());
    let Some(session) = granted else {
        return Err(fail(
            EXIT_VERIFICATION,
            "no fingerprint in the library authenticates",
        ));
    };

    let (labels, _) = authorized_predict(&session, &model, &test)?;
    let accuracy = |pred: &[usize]| {
        pred.iter()
            .zip(test.labels())
            .filter(|(p, l)| p == l)
            .count() as f64
            / test.len() as f64
    };
    let authorized = accuracy(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let unauthorized = accuracy(&unauthorized_predict(
        &model,
        &test,
        &library.policy,
        &mut rng,
    ));
    println!(
        "authorized accuracy {:.2}%, unauthorized accuracy {:.2}%",
        authorized * 100.0,
        unauthorized * 100.0
    );
    let rows =
        [("authorized", authorized), ("unauthorized", unauthorized)].map(|(path, accuracy)| {
            PathRow {
                path: path.into(),
                accuracy,
                samples: test.len(),
                config_hash: ctx.hash.clone(),
            }
        });
    report::write_csv(&ctx.layout.report(report::AUTH_CSV), &rows)?;
    ctx.layout.write_json_report(
        "auth",
        ctx.cfg,
        &json!({ "authenticated": passed, "issued": users.len(), "authorized_accuracy": authorized, "unauthorized_accuracy": unauthorized }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackKind {
    All,
    Forgery,
    Finetune,
    Prune,
}

pub fn attack_cmd(ctx: &Context, kind: AttackKind) -> anyhow::Result<()> {
    let model = ctx.protected_model()?;
    let spec = ctx.spec()?;
    let (_, test) = ctx.data()?;
    let a = &ctx.cfg.attacks;
    let mut reports = Vec::new();

    let baseline = extract(&model, &spec)?;
    reports.push(modelguard_core::AttackReport {
        attack: "none".into(),
        params: String::new(),
        accuracy: Some(evaluate(&model, &test)?),
        wm_matched: Some(baseline.matched),
        forgery_rate: None,
        seed: ctx.cfg.seed,
    });

    if matches!(kind, AttackKind::All | AttackKind::Forgery) {
        let policy = ctx.cfg.policy();
        let mut methods = vec![
            ForgeryMethod::Clean,
            ForgeryMethod::Fgsm { eps: a.fgsm_eps },
        ];
        if a.cw_forgery {
            methods.push(ForgeryMethod::cw());
        }
        let budget = a.forgery_budget.min(test.len());
        for m in methods {
            reports.push(forgery_attack(
                &model,
                &policy,
                &test,
                m,
                budget,
                ctx.cfg.seed,
            )?);
        }
    }
    if matches!(kind, AttackKind::All | AttackKind::Finetune) {
        let attack_data = test.head(a.finetune_samples.min(test.len()));
        for &epochs in &a.finetune_epochs {
            let (_, r) = finetune_attack(
                &model,
                &attack_data,
                &test,
                &spec,
                &ctx.cfg.train_config(epochs),
            )?;
            reports.push(r);
        }
    }
    if matches!(kind, AttackKind::All | AttackKind::Prune) {
        reports.extend(
            prune_sweep(&model, &spec, &a.prune_rates, &test)?
                .into_iter()
                .map(|(r, _)| r),
        );
    }

    for r in &reports {
        println!(
            "{:<9} {:<48} acc {:>7} wm {:>5} forgery {:>7}",
            r.attack,
            r.params,
            r.accuracy
                .map(|v| format!("{:.2}%", v * 100.0))
                .unwrap_or_default(),
            r.wm_matched.map(|v| v.to_string()).unwrap_or_default(),
            r.forgery_rate
                .map(|v| format!("{:.2}%", v * 100.0))
                .unwrap_or_default(),
        );
    }
    let rows: Vec<AttackRow> = reports
        .iter()
        .map(|r| AttackRow::new(r, &ctx.hash))
        .collect();
    report::write_csv(&ctx.layout.report(report::ATTACKS_CSV), &rows)?;
    ctx.layout.write_json_report("attack", ctx.cfg, &reports)
}

/// Collects the per-command CSVs into tables under `reports/tables/`.
pub fn report_cmd(ctx: &Context) -> anyhow::Result<()> {
    let src = |name: &str| ctx.layout.report(name);
    let tables = ctx.layout.reports().join("tables");
    fs::create_dir_all(&tables)?;
    let mut written = Vec::new();

    let mut models: Vec<ModelRow> = Vec::new();
    for name in [report::TRAIN_CSV, report::EMBED_CSV] {
        if src(name).exists() {
            models.extend(report::read_csv(&src(name))?);
        }
    }
    if !models.is_empty() {
        report::write_csv(&tables.join("watermark_accuracy.csv"), &models)?;
        written.push("watermark_accuracy.csv");
    }
    if src(report::FINGERPRINTS_CSV).exists() {
        let rows: Vec<FoRow> = report::read_csv(&src(report::FINGERPRINTS_CSV))?;
        report::write_csv(&tables.join("fingerprint_authentication.csv"), &rows)?;
        written.push("fingerprint_authentication.csv");
    }
    if src(report::AUTH_CSV).exists() {
        let rows: Vec<PathRow> = report::read_csv(&src(report::AUTH_CSV))?;
        report::write_csv(&tables.join("authorization.csv"), &rows)?;
        written.push("authorization.csv");
    }
    if src(report::ATTACKS_CSV).exists() {
        let rows: Vec<AttackRow> = report::read_csv(&src(report::ATTACKS_CSV))?;
        for (attack, file) in [
            ("forgery", "forgery.csv"),
            ("finetune", "finetune.csv"),
            ("prune", "pruning.csv"),
        ] {
            let subset: Vec<&AttackRow> = rows.iter().filter(|r| r.attack == attack).collect();
            if !subset.is_empty() {
                report::write_csv(&tables.join(file), &subset)?;
                written.push(file);
            }
        }
    }
    if written.is_empty() {
        return Err(fail(
            crate::layout::EXIT_DEPENDENCY,
            format!(
                "no reports under {}; run the other commands first",
                ctx.layout.reports().display()
            ),
        ));
    }
    for w in &written {
        println!("wrote {}", tables.join(w).display());
    }
    Ok(())
}
