//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory and returns the in-memory results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};
use suap_core::detector::{Detection, Detector};
use suap_core::metrics::{self, AttackReport, MetricScores};
use suap_core::report;
use suap_core::scene::{self, BitDepth, FrameSequence};
use suap_core::solvers::{self, AttackOutcome};
use suap_core::tensor::{self, Tensor};

use crate::{svg, CliError, Result, RunConfig, Solver, Source};

fn prepare_out(rc: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&rc.out)?;
    fs::write(rc.out.join("effective.ini"), rc.effective().to_string())?;
    Ok(&rc.out)
}

fn detector_for(rc: &RunConfig, seq: &FrameSequence) -> Result<Detector> {
    Ok(Detector::new(rc.detector.clone(), seq.channels())?)
}

/// Renders the configured scene into `frame_NNNN.png` files plus `truth.csv`.
pub fn cmd_gen_scene(rc: &RunConfig) -> Result<Vec<PathBuf>> {
    let Source::Scene(spec) = &rc.source else {
        return Err(CliError::Usage("gen-scene needs a [scene] config, not a frames directory".into()));
    };
    let generated = scene::generate_scene(spec)?;
    let out = prepare_out(rc)?;
    let files = scene::save_frames(&generated.frames, out, BitDepth::Sixteen)?;
    let mut w = csv::Writer::from_path(out.join("truth.csv")).map_err(suap_core::Error::from)?;
    w.write_record(["frame", "object", "x0", "y0", "x1", "y1", "area"]).map_err(suap_core::Error::from)?;
    for (b, (boxes, masks)) in generated.truth.boxes.iter().zip(&generated.truth.masks).enumerate() {
        for (k, (bb, mask)) in boxes.iter().zip(masks).enumerate() {
            let area = mask.iter().filter(|&&m| m).count();
            w.write_record([
                b.to_string(),
                k.to_string(),
                bb.x0.to_string(),
                bb.y0.to_string(),
                bb.x1.to_string(),
                bb.y1.to_string(),
                area.to_string(),
            ])
            .map_err(suap_core::Error::from)?;
        }
    }
    w.flush()?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub clean: FrameSequence,
    pub adversarial: FrameSequence,
    pub outcome: AttackOutcome,
    pub report: AttackReport,
}

fn run_solver(rc: &RunConfig, seq: &FrameSequence, det: &Detector) -> Result<AttackOutcome> {
    Ok(match &rc.solver {
        Solver::AoExp(c) => solvers::ao_exp_attack(seq, det, rc.weights, c)?,
        Solver::LoraPgd(c) => solvers::lora_pgd_attack(seq, det, rc.weights, c)?,
        Solver::FwNucl(c) => solvers::fw_nucl_attack(seq, det, rc.weights, c)?,
    })
}

fn trace_svg(outcome: &AttackOutcome, method: &str) -> String {
    let pts = |f: &dyn Fn(&solvers::TraceRow) -> f64| -> Vec<(f64, f64)> {
        outcome.trace.iter().map(|r| (r.iteration as f64, f(r))).collect()
    };
    svg::line_plot(
        &format!("{method} trace"),
        "iteration",
        &[
            ("objective", pts(&|r| r.objective)),
            ("L_total", pts(&|r| r.losses.l_total)),
            ("nuclear norm", pts(&|r| r.nuclear_norm)),
        ],
    )
}

/// Optimizes a perturbation and writes `delta.uapt`, `trace.csv`,
/// `trace.svg`, `adv/frame_NNNN.png`, `report.csv` and `effective.ini`.
pub fn cmd_attack(rc: &RunConfig) -> Result<AttackRun> {
    let clean = rc.frames()?;
    let det = detector_for(rc, &clean)?;
    let outcome = run_solver(rc, &clean, &det)?;
    let adversarial = solvers::apply_perturbation(&clean, &outcome.delta)?;
    let mut rep = metrics::evaluate_attack(&clean, &adversarial, &outcome.delta, &det)?;
    rep.method = rc.method.name().to_string();
    rep.instance = rc.instance.clone();
    rep.config_hash = rc.config_hash();

    let out = prepare_out(rc)?;
    tensor::save_tensor(&Tensor::from_array3_f64(outcome.delta.view()), out.join("delta.uapt"))?;
    let mut trace = Vec::new();
    solvers::write_trace_csv(&outcome.trace, &mut trace)?;
    fs::write(out.join("trace.csv"), trace)?;
    fs::write(out.join("trace.svg"), trace_svg(&outcome, rc.method.name()))?;
    scene::save_frames(&adversarial, out.join("adv"), BitDepth::Sixteen)?;
    fs::write(out.join("report.csv"), report::report_to_string(&rep)?)?;
    Ok(AttackRun {
        clean,
        adversarial,
        outcome,
        report: rep,
    })
}

/// Runs the detector on every frame and writes `detections.csv`.
pub fn cmd_detect(rc: &RunConfig) -> Result<Vec<Vec<Detection>>> {
    let seq = rc.frames()?;
    let det = detector_for(rc, &seq)?;
    let all = seq
        .frames()
        .iter()
        .map(|f| det.detect_frame(f))
        .collect::<suap_core::Result<Vec<_>>>()?;
    let out = prepare_out(rc)?;
    let mut w = csv::Writer::from_path(out.join("detections.csv")).map_err(suap_core::Error::from)?;
    w.write_record(["frame", "label", "score", "x0", "y0", "x1", "y1", "area"])
        .map_err(suap_core::Error::from)?;
    for (b, dets) in all.iter().enumerate() {
        for d in dets {
            w.write_record([
                b.to_string(),
                d.label.to_string(),
                d.score.to_string(),
                d.bbox.x0.to_string(),
                d.bbox.y0.to_string(),
                d.bbox.x1.to_string(),
                d.bbox.y1.to_string(),
                d.support.len().to_string(),
            ])
            .map_err(suap_core::Error::from)?;
        }
    }
    w.flush()?;
    Ok(all)
}

/// What `eval` compares the clean frames against.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalInput {
    Delta(PathBuf),
    AdvFrames(PathBuf),
}

impl EvalInput {
    pub fn from_flags(delta: Option<PathBuf>, adv_dir: Option<PathBuf>) -> Result<Self> {
        match (delta, adv_dir) {
            (Some(d), None) => Ok(EvalInput::Delta(d)),
            (None, Some(a)) => Ok(EvalInput::AdvFrames(a)),
            (None, None) => Err(CliError::Usage("eval needs --delta or --adv-dir".into())),
            (Some(_), Some(_)) => Err(CliError::Usage("give only one of --delta and --adv-dir".into())),
        }
    }
}

/// Mean of `adv_b - clean_b` over frames; the perturbation implied by a set
/// of adversarial frames when no tensor is available.
fn implied_delta(clean: &FrameSequence, adv: &FrameSequence) -> Array3<f64> {
    let mut delta = Array3::<f64>::zeros(clean.dims());
    for (c, a) in clean.frames().iter().zip(adv.frames()) {
        Zip::from(&mut delta).and(c).and(a).for_each(|d, &c, &a| *d += f64::from(a) - f64::from(c));
    }
    delta.mapv_inplace(|d| d / clean.len() as f64);
    delta
}

/// Scores an attack given as a perturbation tensor or as adversarial frames
/// and writes `report.csv`.
pub fn cmd_eval(rc: &RunConfig, input: &EvalInput) -> Result<AttackReport> {
    let clean = rc.frames()?;
    let det = detector_for(rc, &clean)?;
    let (adv, delta) = match input {
        EvalInput::Delta(path) => {
            let delta = tensor::load_tensor(path)?.to_array3_f64()?;
            (solvers::apply_perturbation(&clean, &delta)?, delta)
        }
        EvalInput::AdvFrames(dir) => {
            let adv = scene::load_frames(dir)?;
            if adv.len() != clean.len() || adv.dims() != clean.dims() {
                return Err(suap_core::Error::Shape(format!(
                    "adversarial frames {}x{:?} do not match clean frames {}x{:?}",
                    adv.len(),
                    adv.dims(),
                    clean.len(),
                    clean.dims()
                ))
                .into());
            }
            let delta = implied_delta(&clean, &adv);
            (adv, delta)
        }
    };
    let mut rep = metrics::evaluate_attack(&clean, &adv, &delta, &det)?;
    rep.method = rc.method.name().to_string();
    rep.instance = rc.instance.clone();
    rep.config_hash = rc.config_hash();
    let out = prepare_out(rc)?;
    fs::write(out.join("report.csv"), report::report_to_string(&rep)?)?;
    Ok(rep)
}

pub const COMPARE_METRICS: [&str; 3] = ["iou_acc", "adv_br", "nuclear_norm"];

/// Average ranks of methods over instances; lower is better for every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub methods: Vec<String>,
    pub instances: Vec<String>,
    /// Average rank over all metrics and instances, per method.
    pub average_rank: Vec<f64>,
    /// `[metric][method]` average rank over instances.
    pub metric_ranks: Vec<Vec<f64>>,
    /// `[metric][method]` mean value over instances.
    pub metric_means: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let width = self.methods.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  avg_rank", "method");
        for m in COMPARE_METRICS {
            let _ = write!(s, "  {:>12}", format!("rank_{m}"));
        }
        s.push('\n');
        for (k, m) in self.methods.iter().enumerate() {
            let _ = write!(s, "{m:<width$}  {:>8.3}", self.average_rank[k]);
            for r in &self.metric_ranks {
                let _ = write!(s, "  {:>12.3}", r[k]);
            }
            s.push('\n');
        }
        s
    }
}

/// Groups reports by method; a method that reports the same instance twice
/// is split into `name#2`, `name#3`, ...
struct Grouped<'a> {
    methods: Vec<String>,
    instances: Vec<String>,
    /// `[method][instance]`, instances in sorted order.
    rows: Vec<Vec<&'a AttackReport>>,
}

fn group_reports(reports: &[AttackReport]) -> Result<Grouped<'_>> {
    let mut methods: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<&AttackReport>> = Vec::new();
    for r in reports {
        let mut k = 1;
        loop {
            let name = if k == 1 { r.method.clone() } else { format!("{}#{k}", r.method) };
            match methods.iter().position(|m| *m == name) {
                Some(i) if rows[i].iter().any(|o| o.instance == r.instance) => k += 1,
                Some(i) => {
                    rows[i].push(r);
                    break;
                }
                None => {
                    methods.push(name);
                    rows.push(vec![r]);
                    break;
                }
            }
        }
    }
    let mut instances: Vec<String> = rows[0].iter().map(|r| r.instance.clone()).collect();
    instances.sort();
    for (m, row) in methods.iter().zip(rows.iter_mut()) {
        row.sort_by(|a, b| a.instance.cmp(&b.instance));
        if row.iter().map(|r| &r.instance).ne(instances.iter()) {
            return Err(CliError::Usage(format!(
                "method {m} covers different instances than {}",
                methods[0]
            )));
        }
    }
    Ok(Grouped { methods, instances, rows })
}

fn metric_value(r: &AttackReport, metric: &str) -> f64 {
    match metric {
        "iou_acc" => r.iou_acc,
        "adv_br" => r.adv_br,
        _ => r.nuclear_norm,
    }
}

/// Ranks methods across reports and writes `ranks.csv`, `ranks.svg` and
/// `adv_br.svg` into `out`.
pub fn cmd_compare(paths: &[PathBuf], out: &Path) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    let reports = paths
        .iter()
        .map(|p| -> Result<AttackReport> {
            report::parse_report(&fs::read(p)?).map_err(|e| {
                CliError::Core(suap_core::Error::Format(format!("{}: {e}", p.display())))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = reports[0].channel_nuclear.len();
    if let Some((p, _)) = paths.iter().zip(&reports).find(|(_, r)| r.channel_nuclear.len() != channels) {
        return Err(suap_core::Error::Format(format!(
            "{} has a different channel count than {}",
            p.display(),
            paths[0].display()
        ))
        .into());
    }
    let Grouped { methods, instances, rows } = group_reports(&reports)?;
    if methods.len() < 2 {
        return Err(CliError::Usage("compare needs reports from at least two methods".into()));
    }
    let tables: Vec<MetricScores> = COMPARE_METRICS
        .iter()
        .map(|m| MetricScores {
            values: rows.iter().map(|row| row.iter().map(|r| metric_value(r, m)).collect()).collect(),
            lower_is_better: true,
        })
        .collect();
    let average_rank = metrics::average_ranks(&tables)?;
    let metric_ranks = tables
        .iter()
        .map(|t| metrics::average_ranks(std::slice::from_ref(t)))
        .collect::<suap_core::Result<Vec<_>>>()?;
    let metric_means: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| t.values.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect())
        .collect();
    let cmp = Comparison {
        methods,
        instances,
        average_rank,
        metric_ranks,
        metric_means,
    };

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("ranks.csv")).map_err(suap_core::Error::from)?;
    let mut header = vec!["method".to_string(), "average_rank".to_string()];
    header.extend(COMPARE_METRICS.iter().map(|m| format!("rank_{m}")));
    header.extend(COMPARE_METRICS.iter().map(|m| format!("mean_{m}")));
    w.write_record(&header).map_err(suap_core::Error::from)?;
    for (k, m) in cmp.methods.iter().enumerate() {
        let mut row = vec![m.clone(), cmp.average_rank[k].to_string()];
        row.extend(cmp.metric_ranks.iter().map(|r| r[k].to_string()));
        row.extend(cmp.metric_means.iter().map(|r| r[k].to_string()));
        w.write_record(&row).map_err(suap_core::Error::from)?;
    }
    w.flush()?;
    fs::write(
        out.join("ranks.svg"),
        svg::bar_chart("average rank (lower is better)", &cmp.methods, &cmp.average_rank),
    )?;
    fs::write(
        out.join("adv_br.svg"),
        svg::bar_chart("mean adversarial box ratio", &cmp.methods, &cmp.metric_means[1]),
    )?;
    Ok(cmp)
}
