use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ape_core::checkpoint::load_checkpoint_for;
use ape_core::dataset::{self, Split};
use ape_core::eval::{center_embeddings, localization_items, EmbeddedPhantom};
use ape_core::localization::{localization_protocol, LocalizationDetail, OrganReport};
use ape_core::model::sliding_window_embed;
use ape_core::retrieval::{cluster_stats, retrieval_protocol, summarize_by, LandmarkSet, RetrievalCase};
use ape_core::seed::derive_seed;
use ape_core::train::{self, CHECKPOINT_FILE};
use ape_core::volume::{load_embedding_map, save_embedding_map};
use ape_core::{ApeModel, EmbeddingMap, PhantomSample, Point3};

use crate::config::ExperimentConfig;
use crate::{plots, CliError};

pub const QUERIES_CSV: &str = "queries.csv";
pub const RETRIEVAL_RESULTS_CSV: &str = "retrieval_results.csv";
pub const RETRIEVAL_REPORT_CSV: &str = "retrieval_report.csv";
pub const LOCALIZATION_DETAIL_CSV: &str = "localization_detail.csv";
pub const LOCALIZATION_REPORT_CSV: &str = "localization_report.csv";
pub const CENTERS_CSV: &str = "center_embeddings.csv";
pub const CLUSTER_CSV: &str = "cluster_stats.csv";

type CmdResult = Result<(), CliError>;

/// A validated config plus the output root.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.data)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.run)
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.embeddings)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.reports)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match &self.cfg.paths.checkpoint {
            Some(p) => self.resolve(p),
            None => self.run_dir().join(CHECKPOINT_FILE),
        }
    }

    fn load_model(&self) -> Result<ApeModel<f32>, CliError> {
        Ok(load_checkpoint_for(self.checkpoint_path(), &self.cfg.model)?.model)
    }

    fn eval_phantoms(&self) -> Result<Vec<(String, PhantomSample)>, CliError> {
        Ok(dataset::load_split(&self.data_dir(), Split::Eval)?)
    }

    fn load_maps(&self, phantoms: &[(String, PhantomSample)]) -> Result<Vec<EmbeddingMap>, CliError> {
        let dir = self.embeddings_dir();
        phantoms
            .iter()
            .map(|(id, _)| Ok(load_embedding_map(dir.join(format!("{id}.apem")))?))
            .collect()
    }

    fn reports(&self) -> Result<PathBuf, CliError> {
        let dir = self.reports_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn warn_plot(what: &str, r: Result<(), Box<dyn std::error::Error>>) {
    if let Err(e) = r {
        log::warn!("could not render {what}: {e}");
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> CmdResult
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn pt(p: Point3) -> [String; 3] {
    p.map(|v| v.to_string())
}

pub fn generate(ctx: &Context) -> CmdResult {
    let d = &ctx.cfg.dataset;
    let entries = dataset::plan_dataset(d.train_count, d.eval_count, ctx.cfg.seed);
    let dir = ctx.data_dir();
    dataset::generate_dataset(&ctx.cfg.phantom, &entries, &dir)?;
    log::info!("wrote {} phantoms to {}", entries.len(), dir.display());
    Ok(())
}

pub fn train(ctx: &Context, resume: bool) -> CmdResult {
    let pool: Vec<_> = dataset::load_split(&ctx.data_dir(), Split::Train)?
        .into_iter()
        .map(|(_, s)| s.volume)
        .collect();
    let setup = ctx.cfg.train_setup();
    let run = ctx.run_dir();
    let outcome = train::train(&setup, &pool, &run, resume)?;
    let curve: Vec<(f64, f64)> = outcome.rows.iter().map(|r| (r.step as f64, r.loss)).collect();
    warn_plot("loss curve", plots::loss_curve(&run.join("loss.svg"), &curve));
    log::info!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

pub fn embed(ctx: &Context) -> CmdResult {
    let model = ctx.load_model()?;
    let dir = ctx.embeddings_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    for (id, sample) in ctx.eval_phantoms()? {
        let start = Instant::now();
        let map = sliding_window_embed(&model, &sample.volume, &ctx.cfg.inference)?;
        let voxels = sample.volume.data.len() as f64;
        log::info!("{id}: {:.0} voxels/s", voxels / start.elapsed().as_secs_f64());
        save_embedding_map(&map, dir.join(format!("{id}.apem")))?;
    }
    Ok(())
}

/// Landmarks of the configured kinds, named `<organ>_<kind>`.
fn landmarks(sample: &PhantomSample, kinds: &[String]) -> Vec<(String, Point3)> {
    let mut out = Vec::new();
    for o in &sample.organs {
        for kind in kinds {
            let p = match kind.as_str() {
                "center" => o.landmarks.center,
                k => {
                    let i = ape_core::localization::EDGE_NAMES.iter().position(|e| *e == k).expect("validated kind");
                    o.landmarks.edges[i]
                }
            };
            out.push((format!("{}_{kind}", o.label), p));
        }
    }
    out
}

pub fn eval_retrieval(ctx: &Context) -> CmdResult {
    let phantoms = ctx.eval_phantoms()?;
    let maps = ctx.load_maps(&phantoms)?;
    let sets: Vec<LandmarkSet> = phantoms
        .iter()
        .zip(&maps)
        .map(|((id, s), m)| LandmarkSet {
            id: id.clone(),
            map: m,
            landmarks: landmarks(s, &ctx.cfg.eval.landmarks),
        })
        .collect();
    let cases = retrieval_protocol(&sets)?;
    let dir = ctx.reports()?;

    write_rows(
        &dir.join(QUERIES_CSV),
        &["volume_id", "landmark", "x_mm", "y_mm", "z_mm"],
        sets.iter().flat_map(|s| {
            s.landmarks.iter().map(|(name, p)| {
                let [x, y, z] = pt(*p);
                vec![s.id.clone(), name.clone(), x, y, z]
            })
        }),
    )?;
    write_rows(
        &dir.join(RETRIEVAL_RESULTS_CSV),
        &[
            "train_id", "test_id", "landmark", "query_x_mm", "query_y_mm", "query_z_mm", "truth_x_mm",
            "truth_y_mm", "truth_z_mm", "retrieved_i", "retrieved_j", "retrieved_k", "retrieved_x_mm",
            "retrieved_y_mm", "retrieved_z_mm", "embedding_distance", "radial_error_mm",
        ],
        cases.iter().map(result_row),
    )?;
    let mut report = summarize_by(&cases, |c| c.landmark.clone())?;
    report.extend(summarize_by(&cases, |_| "all".to_string())?);
    write_rows(
        &dir.join(RETRIEVAL_REPORT_CSV),
        &["landmark", "cases", "mre_mm", "std_mm"],
        report.iter().map(|(k, n, m, s)| vec![k.clone(), n.to_string(), m.to_string(), s.to_string()]),
    )?;
    let errors: Vec<f64> = cases.iter().map(|c| c.radial_error).collect();
    warn_plot(
        "MRE histogram",
        plots::histogram(&dir.join("mre_hist.svg"), "landmark retrieval radial error", &errors, 30),
    );
    let (_, n, m, s) = report.last().expect("an overall row");
    log::info!("MRE {m:.2} ± {s:.2} mm over {n} cases");
    Ok(())
}

fn result_row(c: &RetrievalCase) -> Vec<String> {
    let mut r = vec![c.train_id.clone(), c.test_id.clone(), c.landmark.clone()];
    r.extend(pt(c.query_mm));
    r.extend(pt(c.truth_mm));
    r.extend(c.retrieved_index.map(|i| i.to_string()));
    r.extend(pt(c.retrieved_mm));
    r.push(c.embedding_distance.to_string());
    r.push(c.radial_error.to_string());
    r
}

fn embedded<'a>(phantoms: &'a [(String, PhantomSample)], maps: &'a [EmbeddingMap]) -> Vec<EmbeddedPhantom<'a>> {
    phantoms
        .iter()
        .zip(maps)
        .map(|((id, s), m)| EmbeddedPhantom {
            id: id.clone(),
            sample: s,
            map: m,
        })
        .collect()
}

pub fn eval_localization(ctx: &Context) -> CmdResult {
    let phantoms = ctx.eval_phantoms()?;
    let maps = ctx.load_maps(&phantoms)?;
    let items = embedded(&phantoms, &maps);
    let loc = localization_items(&items);
    let (details, reports) = localization_protocol(&loc, ctx.cfg.eval.shots, derive_seed(ctx.cfg.seed, "folds", 0))?;
    let dir = ctx.reports()?;
    write_rows(
        &dir.join(LOCALIZATION_DETAIL_CSV),
        &[
            "fold", "organ", "test_id", "pred_min_x", "pred_min_y", "pred_min_z", "pred_max_x", "pred_max_y",
            "pred_max_z", "truth_min_x", "truth_min_y", "truth_min_z", "truth_max_x", "truth_max_y",
            "truth_max_z", "iou", "recall",
        ],
        details.iter().map(detail_row),
    )?;
    let mut rows: Vec<Vec<String>> = reports.iter().map(report_row).collect();
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&OrganReport) -> f64| (reports.iter().map(f).sum::<f64>() / n).to_string();
    rows.push(vec![
        "avg".into(),
        reports.iter().map(|r| r.cases).sum::<usize>().to_string(),
        avg(&|r| r.iou_mean),
        avg(&|r| r.iou_std),
        String::new(),
        avg(&|r| r.vr.alpha_used),
        avg(&|r| r.vr.mean_recall),
        avg(&|r| r.vr.vr_mean),
        avg(&|r| r.vr.vr_std),
    ]);
    write_rows(
        &dir.join(LOCALIZATION_REPORT_CSV),
        &[
            "organ", "cases", "iou_mean", "iou_std", "alpha", "alpha_used", "mean_recall", "vr_mean", "vr_std",
        ],
        rows,
    )?;
    log::info!(
        "mean IoU {:.3}",
        reports.iter().map(|r| r.iou_mean).sum::<f64>() / n
    );
    Ok(())
}

fn detail_row(d: &LocalizationDetail) -> Vec<String> {
    let mut r = vec![d.fold.to_string(), d.organ.clone(), d.test_id.clone()];
    for b in [&d.predicted, &d.truth] {
        r.extend(pt(b.min));
        r.extend(pt(b.max));
    }
    r.push(d.iou.to_string());
    r.push(d.recall.to_string());
    r
}

fn report_row(o: &OrganReport) -> Vec<String> {
    vec![
        o.organ.clone(),
        o.cases.to_string(),
        o.iou_mean.to_string(),
        o.iou_std.to_string(),
        o.vr.alpha.map(|a| a.to_string()).unwrap_or_default(),
        o.vr.alpha_used.to_string(),
        o.vr.mean_recall.to_string(),
        o.vr.vr_mean.to_string(),
        o.vr.vr_std.to_string(),
    ]
}

pub fn export_centers(ctx: &Context) -> CmdResult {
    let phantoms = ctx.eval_phantoms()?;
    let maps = ctx.load_maps(&phantoms)?;
    let rows = center_embeddings(&embedded(&phantoms, &maps));
    let dir = ctx.reports()?;
    write_rows(
        &dir.join(CENTERS_CSV),
        &["volume_id", "organ", "e1", "e2", "e3"],
        rows.iter().map(|r| {
            let mut v = vec![r.volume_id.clone(), r.organ.clone()];
            v.extend(r.embedding.map(|e| e.to_string()));
            v
        }),
    )?;
    let stats = cluster_stats(&rows)?;
    write_rows(
        &dir.join(CLUSTER_CSV),
        &["inter_centroid", "intra_spread", "ratio"],
        [vec![
            stats.inter_centroid.to_string(),
            stats.intra_spread.to_string(),
            (stats.inter_centroid / stats.intra_spread).to_string(),
        ]],
    )?;
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in &rows {
        let p = (r.embedding[0] as f64, r.embedding[1] as f64);
        match groups.iter_mut().find(|g| g.0 == r.organ) {
            Some(g) => g.1.push(p),
            None => groups.push((r.organ.clone(), vec![p])),
        }
    }
    warn_plot(
        "center scatter",
        plots::scatter(&dir.join("centers.svg"), "organ-center embeddings (e1, e2)", &groups),
    );
    log::info!(
        "inter-centroid {:.3}, intra-organ spread {:.3}",
        stats.inter_centroid,
        stats.intra_spread
    );
    Ok(())
}
