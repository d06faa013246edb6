use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use serde_json::{json, Value};

use slidereg_core::dalosses::gradcheck;
use slidereg_core::datastore::{export_coco, generate_splits, Split, Store};
use slidereg_core::scopemodel::{fit_calibration, CalibrationEndpoint, CalibrationKind, StageCoord};
use slidereg_core::transfer::ChainParams;
use slidereg_core::virtualscope::RegionParams;
use slidereg_core::workflow::{
    self, content_hash, evaluate_transfer, simulate_store, store_profiles, transfer_store, SimulationRecord,
};
use slidereg_core::{AnnotationStatus, Magnification, ProfileSet};

use crate::config::Config;
use crate::{schema, usage, CalibrateArgs, Cli, Command, ExportArgs, LossesArgs, Report, ServeArgs, SimulateArgs,
    SplitArgs, StoreArgs, TransferArgs};

const DEFAULT_SEED: u64 = 1;

pub fn run(cli: &Cli, cfg: &Config) -> anyhow::Result<Option<Report>> {
    let workers = cli.workers.or(cfg.workers).unwrap_or_else(workflow::default_workers);
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let report = match &cli.command {
        Command::Simulate(a) => simulate(a, cfg, workers)?,
        Command::Calibrate(a) => calibrate(a)?,
        Command::Transfer(a) => transfer(a, cfg, workers)?,
        Command::Split(a) => split(a, cfg)?,
        Command::EvalTransfer(a) => eval_transfer(a, cfg)?,
        Command::LossesCheck(a) => losses_check(a, cfg)?,
        Command::ExportCoco(a) => export(a, cfg)?,
        Command::Schema(a) => {
            let text = schema::lookup(&a.command).ok_or_else(|| usage(format!("no schema for `{}`", a.command)))?;
            print!("{text}");
            return Ok(None);
        }
        Command::Serve(a) => {
            serve(a, cfg, workers)?;
            return Ok(None);
        }
    };
    Ok(Some(report))
}

fn store_dir(flag: &Option<PathBuf>, cfg: &Config, what: &str) -> anyhow::Result<PathBuf> {
    flag.clone().or_else(|| cfg.store.clone()).ok_or_else(|| usage(format!("{what} is required")))
}

fn open_existing(dir: &Path) -> anyhow::Result<Store> {
    if !dir.join(slidereg_core::datastore::MANIFEST_FILE).exists() {
        bail!("{} is not a store (no manifest)", dir.display());
    }
    Ok(Store::open(dir)?)
}

fn profiles_from(flag: &Option<PathBuf>, cfg: &Config) -> anyhow::Result<Option<ProfileSet>> {
    match flag.as_ref().or(cfg.profiles.as_ref()) {
        Some(d) => Ok(Some(ProfileSet::load_dir(d).with_context(|| format!("loading profiles from {}", d.display()))?)),
        None => Ok(None),
    }
}

fn simulate(a: &SimulateArgs, cfg: &Config, workers: usize) -> anyhow::Result<Report> {
    let out = store_dir(&a.out, cfg, "--out")?;
    if a.regions == 0 {
        return Err(usage("--regions must be at least 1"));
    }
    if out.join(slidereg_core::datastore::MANIFEST_FILE).exists() {
        bail!("{} already holds a store", out.display());
    }
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let profiles = if a.ideal {
        ProfileSet::ideal()
    } else {
        profiles_from(&a.profiles, cfg)?.unwrap_or_else(ProfileSet::defaults)
    };
    let (store, _) = simulate_store(&out, seed, a.regions, &profiles, &RegionParams::default(), workers)?;
    let regions: Vec<Value> = store
        .manifest
        .regions
        .iter()
        .map(|r| json!({"region_id": r.region_id, "annotations": r.class_counts().iter().sum::<usize>()}))
        .collect();
    let mut text = format!("simulated {} regions into {} (seed {seed})\n", regions.len(), out.display());
    for r in &regions {
        let _ = writeln!(text, "  {}  {} expert boxes", r["region_id"].as_str().unwrap_or(""), r["annotations"]);
    }
    Ok(Report {
        result: json!({"out": out.display().to_string(), "seed": seed, "regions": regions}),
        text,
        ok: true,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairsFile {
    from: Option<CalibrationEndpoint>,
    to: Option<CalibrationEndpoint>,
    pairs: Vec<[[f64; 2]; 2]>,
}

fn parse_endpoint(s: &str) -> anyhow::Result<CalibrationEndpoint> {
    let (scope, mag) = s.split_once(':').ok_or_else(|| usage(format!("endpoint `{s}` is not microscope:magnification")))?;
    let value: u32 = mag.trim_end_matches('x').parse().map_err(|_| usage(format!("bad magnification in `{s}`")))?;
    let magnification = Magnification::try_from(value).map_err(|e| usage(e.to_string()))?;
    Ok(CalibrationEndpoint { microscope: scope.to_string(), magnification })
}

fn calibrate(a: &CalibrateArgs) -> anyhow::Result<Report> {
    let text = std::fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let file: PairsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.pairs.display()))?;
    let kind = match a.kind.as_str() {
        "cross_microscope" => CalibrationKind::CrossMicroscope,
        _ => CalibrationKind::CrossMagnification,
    };
    let from = match &a.from {
        Some(s) => parse_endpoint(s)?,
        None => file.from.ok_or_else(|| usage("no source endpoint: pass --from or set `from` in the pairs file"))?,
    };
    let to = match &a.to {
        Some(s) => parse_endpoint(s)?,
        None => file.to.ok_or_else(|| usage("no destination endpoint: pass --to or set `to` in the pairs file"))?,
    };
    let pairs: Vec<(StageCoord, StageCoord)> = file
        .pairs
        .iter()
        .map(|[p, q]| (StageCoord::new(p[0], p[1]), StageCoord::new(q[0], q[1])))
        .collect();
    let map = fit_calibration(&pairs, kind, from, to)?;
    let mut body = serde_json::to_string_pretty(&map)?;
    body.push('\n');
    std::fs::write(&a.out, body).with_context(|| format!("writing {}", a.out.display()))?;
    let text = format!(
        "{} {}:{} -> {}:{}  scale {:.6}  offset ({:.4}, {:.4}) mm  rms {:.5} mm\nwrote {}\n",
        a.kind,
        map.from.microscope,
        map.from.magnification,
        map.to.microscope,
        map.to.magnification,
        map.scale,
        map.offset_mm[0],
        map.offset_mm[1],
        map.rms_mm,
        a.out.display()
    );
    Ok(Report { result: json!({"out": a.out.display().to_string(), "map": map}), text, ok: true })
}

fn transfer(a: &TransferArgs, cfg: &Config, workers: usize) -> anyhow::Result<Report> {
    let dir = store_dir(&a.store, cfg, "--store")?;
    let mut store = open_existing(&dir)?;
    let mut ids: Vec<String> = if a.all {
        store.manifest.regions.iter().map(|r| r.region_id.clone()).collect()
    } else {
        a.regions.clone()
    };
    ids.sort();
    ids.dedup();
    for id in &ids {
        store.manifest.region(id)?;
    }
    let profiles = match profiles_from(&a.profiles, cfg)? {
        Some(p) => p,
        None => store_profiles(&dir)?,
    };
    let params = ChainParams::default();
    let hashes: Vec<String> = ids
        .iter()
        .map(|id| content_hash(&dir, store.manifest.region(id).expect("checked"), &profiles, &params))
        .collect::<Result<_, _>>()?;
    let outcomes = transfer_store(&dir, &mut store, &ids, &profiles, &params, workers)?;

    let mut rows = Vec::new();
    let mut text = String::from("region         edges  confirmed  review  out_of_fov  status\n");
    let mut halted = 0;
    for (o, hash) in outcomes.iter().zip(&hashes) {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        if let Some(last) = o.records.last() {
            for ann in &last.annotations {
                let k = match ann.status {
                    AnnotationStatus::Confirmed => "confirmed",
                    AnnotationStatus::NeedsReview => "needs_review",
                    AnnotationStatus::OutOfFov => "out_of_fov",
                };
                *counts.entry(k).or_default() += 1;
            }
        }
        let status = match &o.halted {
            Some(f) => {
                halted += 1;
                format!("halted at {} -> {}: {}", f.src, f.dst, f.error)
            }
            None => "ok".to_string(),
        };
        let c = |k: &str| counts.get(k).copied().unwrap_or(0);
        let _ = writeln!(
            text,
            "{:<14} {:>5}  {:>9}  {:>6}  {:>10}  {status}",
            o.region_id,
            o.records.len(),
            c("confirmed"),
            c("needs_review"),
            c("out_of_fov")
        );
        rows.push(json!({
            "region_id": o.region_id,
            "content_hash": hash,
            "records": o.records.len(),
            "halted": o.halted,
            "final": {"confirmed": c("confirmed"), "needs_review": c("needs_review"), "out_of_fov": c("out_of_fov")},
        }));
    }
    let _ = writeln!(text, "{} regions, {halted} halted", outcomes.len());
    Ok(Report { result: json!({"regions": rows, "halted": halted}), text, ok: halted == 0 })
}

fn split(a: &SplitArgs, cfg: &Config) -> anyhow::Result<Report> {
    let dir = store_dir(&a.store, cfg, "--store")?;
    let fractions = a.fractions;
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let mut store = open_existing(&dir)?;
    let (manifest, report) = generate_splits(&store.manifest.summaries(), fractions, seed, a.tolerance)?;
    store.manifest.splits = Some(manifest);
    store.save(&dir)?;
    let mut text = format!(
        "train {}  test {}  val {}  (seed {seed})\n",
        report.sizes[0], report.sizes[1], report.sizes[2]
    );
    for (class, f) in &report.class_fractions {
        let _ = writeln!(text, "  {:<12} {:.3} {:.3} {:.3}", class.name(), f[0], f[1], f[2]);
    }
    let _ = writeln!(
        text,
        "max class deviation {:.4} ({}), {} swaps",
        report.max_deviation,
        if report.within_tolerance { "within tolerance" } else { "outside tolerance" },
        report.swaps
    );
    for w in &report.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let result = json!({
        "seed": seed,
        "fractions": fractions,
        "sizes": {"train": report.sizes[0], "test": report.sizes[1], "val": report.sizes[2]},
        "class_fractions": report.class_fractions,
        "max_deviation": report.max_deviation,
        "within_tolerance": report.within_tolerance,
        "swaps": report.swaps,
        "warnings": report.warnings,
    });
    Ok(Report { result, text, ok: true })
}

fn eval_transfer(a: &StoreArgs, cfg: &Config) -> anyhow::Result<Report> {
    let dir = store_dir(&a.store, cfg, "--store")?;
    let store = open_existing(&dir)?;
    if !dir.join(workflow::SIMULATION_FILE).exists() {
        bail!("{} has no simulation record; eval-transfer needs a simulated store", dir.display());
    }
    let sim = SimulationRecord::load(&dir)?;
    let report = evaluate_transfer(&store, &sim)?;
    let fmt = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "-".into() };
    let mut text = String::from("edge                       compared  missed  median   mean     min\n");
    for e in &report.edges {
        let _ = writeln!(
            text,
            "{:<26} {:>8}  {:>6}  {:>6}  {:>6}  {:>6}",
            format!("{} -> {}", e.src, e.dst),
            e.compared,
            e.missed,
            fmt(e.median_iou),
            fmt(e.mean_iou),
            fmt(e.min_iou)
        );
    }
    let _ = writeln!(
        text,
        "{} regions scored ({} untransferred), {} halted; leaving cells flagged {}/{}, wrongly flagged {}",
        report.regions,
        report.untransferred.len(),
        report.halted.len(),
        report.leaving_flagged,
        report.leaving,
        report.wrongly_flagged
    );
    Ok(Report { result: serde_json::to_value(&report)?, text, ok: true })
}

fn losses_check(a: &LossesArgs, cfg: &Config) -> anyhow::Result<Report> {
    if a.points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let seed = a.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let rows = gradcheck::run_suite(seed, a.points)?;
    let passed = rows.iter().all(|r| r.passed);
    let mut text = String::from("kernel                 points  max rel error  result\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<22} {:>6}  {:>13.3e}  {}",
            r.kernel,
            r.points,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(text, "tolerance {:.0e}, step {:.0e}", gradcheck::TOLERANCE, gradcheck::STEP);
    let result = json!({
        "seed": seed,
        "tolerance": gradcheck::TOLERANCE,
        "step": gradcheck::STEP,
        "rows": rows,
        "passed": passed,
    });
    Ok(Report { result, text, ok: passed })
}

fn export(a: &ExportArgs, cfg: &Config) -> anyhow::Result<Report> {
    let dir = store_dir(&a.store, cfg, "--store")?;
    let store = open_existing(&dir)?;
    let only: Option<Split> = a.split.as_deref().map(|s| s.parse().map_err(usage)).transpose()?;
    if only.is_some() && store.manifest.splits.is_none() {
        bail!("store has no split assignment; run `split` first");
    }
    let data = export_coco(&store.manifest, only);
    let mut body = serde_json::to_string_pretty(&data)?;
    body.push('\n');
    std::fs::write(&a.out, body).with_context(|| format!("writing {}", a.out.display()))?;
    let text = format!(
        "wrote {} images, {} annotations to {}\n",
        data.images.len(),
        data.annotations.len(),
        a.out.display()
    );
    let result = json!({
        "out": a.out.display().to_string(),
        "split": a.split,
        "images": data.images.len(),
        "annotations": data.annotations.len(),
    });
    Ok(Report { result, text, ok: true })
}

fn serve(a: &ServeArgs, cfg: &Config, workers: usize) -> anyhow::Result<()> {
    let listen = a.listen.or(cfg.listen).unwrap_or_else(|| "127.0.0.1:8080".parse().expect("valid address"));
    let store = store_dir(&a.store, cfg, "--store")?;
    let mut config = slidereg_service::ServiceConfig::new(listen, store);
    config.profiles = a.profiles.clone().or_else(|| cfg.profiles.clone());
    config.workers = workers;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(slidereg_service::serve(config)).context("service stopped")?;
    Ok(())
}
