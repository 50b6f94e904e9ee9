//! Monte Carlo evaluation: ARMSE with divergence accounting, paired runs of
//! every filter, random-search tuning and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Episode, Regime, NX};
use crate::error::{Error, Result};
use crate::imm::{cv_ct_modes, run_imm, transition_matrix, ImmState};
use crate::ma_ukf::{run_ma_ukf, MaTrack, MaUkf};
use crate::rng::{self, Stream};
use crate::ukf::{initial_belief, run_ukf, FilterModel, Track, UtWeights};

/// Position error beyond which an episode counts as diverged; also the ARMSE cap.
pub const DIVERGENCE_CAP: f64 = 1e4;

/// Root-mean-square position error over the filtered steps.
pub fn armse(track: &Track, ep: &Episode) -> f64 {
    let t = track.len();
    let sum: f64 = track
        .states()
        .enumerate()
        .map(|(k, x)| {
            let truth = ep.truth[k + 1];
            (x[0] - truth[0]).powi(2) + (x[2] - truth[2]).powi(2)
        })
        .sum();
    (sum / t as f64).sqrt()
}

pub fn max_position_error(track: &Track, ep: &Episode) -> f64 {
    track
        .states()
        .enumerate()
        .map(|(k, x)| (x[0] - ep.truth[k + 1][0]).hypot(x[2] - ep.truth[k + 1][2]))
        .fold(0.0, |a, e| if e.is_nan() { f64::INFINITY } else { a.max(e) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeScore {
    pub armse: f64,
    pub diverged: bool,
}

impl EpisodeScore {
    /// Scores a run; failures and runaway tracks are capped.
    pub fn of(track: Option<&Track>, ep: &Episode) -> Self {
        match track {
            Some(track) if track.len() == ep.steps() => {
                let a = armse(track, ep);
                if a.is_finite() && max_position_error(track, ep) <= DIVERGENCE_CAP {
                    Self { armse: a, diverged: false }
                } else {
                    Self::diverged()
                }
            }
            _ => Self::diverged(),
        }
    }

    pub fn diverged() -> Self {
        Self {
            armse: DIVERGENCE_CAP,
            diverged: true,
        }
    }
}

/// Mean and sample standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Across-episode statistics, with diverged episodes both capped and excluded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub episodes: usize,
    pub divergences: usize,
    pub mean: f64,
    pub std: f64,
    pub completed_mean: f64,
    pub completed_std: f64,
}

pub fn summarize(scores: &[EpisodeScore]) -> Summary {
    let capped: Vec<f64> = scores.iter().map(|s| s.armse).collect();
    let completed: Vec<f64> = scores.iter().filter(|s| !s.diverged).map(|s| s.armse).collect();
    let (mean, std) = mean_std(&capped);
    let (completed_mean, completed_std) = mean_std(&completed);
    Summary {
        episodes: scores.len(),
        divergences: scores.len() - completed.len(),
        mean,
        std,
        completed_mean,
        completed_std,
    }
}

/// Shared filter setup: model, initial covariance diagonal.
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: FilterModel,
    pub p0: [f64; NX],
}

#[derive(Clone, Debug)]
pub enum Filter {
    Ukf(UtWeights),
    Imm { weights: UtWeights, stay: f64 },
    Ma(MaUkf),
}

impl Filter {
    pub fn run(&self, setup: &Setup, ep: &Episode) -> Result<Track> {
        let b0 = initial_belief(ep, &setup.p0);
        match self {
            Filter::Ukf(w) => run_ukf(ep, w, &setup.model, &b0),
            Filter::Imm { weights, stay } => {
                let modes = cv_ct_modes(&setup.model, weights)?;
                let init = ImmState::new(&b0, vec![0.5, 0.5], transition_matrix(2, *stay)?)?;
                Ok(run_imm(ep, &modes, &init)?.track)
            }
            Filter::Ma(f) => Ok(run_ma_ukf(ep, f, &b0, false)?.track),
        }
    }

    pub fn score(&self, setup: &Setup, ep: &Episode) -> EpisodeScore {
        EpisodeScore::of(self.run(setup, ep).ok().as_ref(), ep)
    }
}

/// Scores every episode; runs in parallel on the current rayon pool, results in episode order.
pub fn evaluate(filter: &Filter, setup: &Setup, episodes: &[Episode]) -> Vec<EpisodeScore> {
    episodes.par_iter().map(|ep| filter.score(setup, ep)).collect()
}

/// Mean wall-clock seconds per filter step, run sequentially.
pub fn step_time(filter: &Filter, setup: &Setup, episodes: &[Episode]) -> f64 {
    let start = Instant::now();
    let mut steps = 0usize;
    for ep in episodes {
        let _ = filter.run(setup, ep);
        steps += ep.steps();
    }
    start.elapsed().as_secs_f64() / steps.max(1) as f64
}

// ---------------------------------------------------------------------------
// tuning

/// Search bounds for the unscented parameters.
pub const ALPHA_RANGE: (f64, f64) = (1e-2, 30.0);
pub const BETA_RANGE: (f64, f64) = (0.0, 5.0);
pub const KAPPA_RANGE: (f64, f64) = (-(NX as f64) + 0.1, 5.0);
pub const STAY_RANGE: (f64, f64) = (0.8, 0.999);

/// Nominal baseline configuration.
pub const NOMINAL: (f64, f64, f64) = (1.0, 2.0, -2.0);
pub const NOMINAL_STAY: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneKind {
    Ukf,
    Imm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub kind: TuneKind,
    /// 0 is the nominal incumbent.
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub stay: f64,
    pub mean_armse: f64,
    pub divergences: usize,
}

impl Trial {
    pub fn filter(&self) -> Result<Filter> {
        let w = UtWeights::classic(self.alpha, self.beta, self.kappa, NX)?;
        Ok(match self.kind {
            TuneKind::Ukf => Filter::Ukf(w),
            TuneKind::Imm => Filter::Imm { weights: w, stay: self.stay },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

fn sample_trial(kind: TuneKind, index: usize, rng: &mut Stream) -> Trial {
    let alpha = rng::uniform(rng, ALPHA_RANGE.0.ln(), ALPHA_RANGE.1.ln()).exp();
    let beta = rng::uniform(rng, BETA_RANGE.0, BETA_RANGE.1);
    let kappa = rng::uniform(rng, KAPPA_RANGE.0, KAPPA_RANGE.1);
    let stay = match kind {
        TuneKind::Ukf => NOMINAL_STAY,
        TuneKind::Imm => rng::uniform(rng, STAY_RANGE.0, STAY_RANGE.1),
    };
    Trial {
        kind,
        index,
        alpha,
        beta,
        kappa,
        stay,
        mean_armse: f64::NAN,
        divergences: 0,
    }
}

/// Random search; trial 0 is the nominal incumbent, so the best never scores worse than it.
pub fn tune(kind: TuneKind, setup: &Setup, episodes: &[Episode], trials: usize, seed: u64) -> Result<TuneResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("tuning needs at least one trial".into()));
    }
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("tuning set is empty".into()));
    }
    let mut rng = rng::stream(seed);
    let mut log = Vec::with_capacity(trials + 1);
    log.push(Trial {
        kind,
        index: 0,
        alpha: NOMINAL.0,
        beta: NOMINAL.1,
        kappa: NOMINAL.2,
        stay: NOMINAL_STAY,
        mean_armse: f64::NAN,
        divergences: 0,
    });
    for i in 1..=trials {
        log.push(sample_trial(kind, i, &mut rng));
    }
    for t in &mut log {
        let s = summarize(&evaluate(&t.filter()?, setup, episodes));
        t.mean_armse = s.mean;
        t.divergences = s.divergences;
    }
    let best = *log
        .iter()
        .fold(&log[0], |b, t| if t.mean_armse < b.mean_armse { t } else { b });
    info!(
        "{:?} search: best trial {} (α={:.4}, β={:.4}, κ={:.4}, Π={:.4}) ARMSE {:.3}",
        kind, best.index, best.alpha, best.beta, best.kappa, best.stay, best.mean_armse
    );
    Ok(TuneResult { best, trials: log })
}

pub fn trial_log_csv(results: &[&TuneResult]) -> String {
    let mut out = String::from("kind,trial,alpha,beta,kappa,stay,mean_armse,divergences,best\n");
    for r in results {
        for t in &r.trials {
            let kind = match t.kind {
                TuneKind::Ukf => "ukf",
                TuneKind::Imm => "imm",
            };
            let _ = writeln!(
                out,
                "{kind},{},{},{},{},{},{},{},{}",
                t.index,
                t.alpha,
                t.beta,
                t.kappa,
                t.stay,
                t.mean_armse,
                t.divergences,
                (t.index == r.best.index) as u8
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// reports

/// One method on one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub regime: Regime,
    pub method: String,
    pub summary: Summary,
    /// Seconds per step; kept out of the CSV so it stays reproducible.
    pub step_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<MethodRow>,
    pub config_hash: String,
    pub dataset_hashes: Vec<(Regime, String)>,
    pub config_snapshot: String,
}

pub const REPORT_HEADER: &str =
    "regime,method,episodes,divergences,armse_mean,armse_std,armse_completed_mean,armse_completed_std";

impl BenchReport {
    pub fn row(&self, regime: Regime, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.regime == regime && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.regime.name(),
                r.method,
                s.episodes,
                s.divergences,
                s.mean,
                s.std,
                s.completed_mean,
                s.completed_std
            );
        }
        out
    }

    /// Parses [`BenchReport::to_csv`] output back into rows (timings are not stored).
    pub fn rows_from_csv(text: &str) -> Result<Vec<MethodRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format("unexpected report header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 8 {
                    return Err(Error::Format(format!("bad report row: {line}")));
                }
                let regime = match f[0] {
                    "train-ct" => Regime::TrainCt,
                    "eval-weave" => Regime::EvalWeave,
                    other => return Err(Error::Format(format!("unknown regime {other}"))),
                };
                let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
                let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{s}: {e}")));
                Ok(MethodRow {
                    regime,
                    method: f[1].to_string(),
                    summary: Summary {
                        episodes: int(f[2])?,
                        divergences: int(f[3])?,
                        mean: num(f[4])?,
                        std: num(f[5])?,
                        completed_mean: num(f[6])?,
                        completed_std: num(f[7])?,
                    },
                    step_time: f64::NAN,
                })
            })
            .collect()
    }

    /// Side-by-side table of both regimes.
    pub fn to_text(&self) -> String {
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "Monte Carlo benchmark (ARMSE in m, mean ± std across episodes)");
        let _ = writeln!(out, "config {}", self.config_hash);
        for (regime, hash) in &self.dataset_hashes {
            let _ = writeln!(out, "dataset {} {hash}", regime.name());
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<10} | {:>22} {:>5} | {:>22} {:>5} | {:>10}",
            "method", "train-ct (capped)", "div", "eval-weave (capped)", "div", "µs/step"
        );
        let _ = writeln!(out, "{}", "-".repeat(88));
        for m in &methods {
            let cell = |regime| match self.row(regime, m) {
                Some(r) => (format!("{:.2} ± {:.2}", r.summary.mean, r.summary.std), r.summary.divergences.to_string()),
                None => ("-".into(), "-".into()),
            };
            let (a, ad) = cell(Regime::TrainCt);
            let (b, bd) = cell(Regime::EvalWeave);
            let t = self
                .rows
                .iter()
                .filter(|r| r.method == *m && r.step_time.is_finite())
                .map(|r| r.step_time)
                .fold(f64::NAN, |acc: f64, v| if acc.is_nan() { v } else { acc.max(v) });
            let t = if t.is_nan() { "-".to_string() } else { format!("{:.1}", t * 1e6) };
            let _ = writeln!(out, "{m:<10} | {a:>22} {ad:>5} | {b:>22} {bd:>5} | {t:>10}");
        }
        out.push_str("\nCompleted episodes only:\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "  {:<10} {:<10} {:.2} ± {:.2} over {} episodes",
                r.method,
                r.regime.name(),
                r.summary.completed_mean,
                r.summary.completed_std,
                r.summary.episodes - r.summary.divergences
            );
        }
        if !self.config_snapshot.is_empty() {
            out.push_str("\nConfig:\n");
            out.push_str(&self.config_snapshot);
        }
        out
    }
}

/// SHA-256 of the episodes' JSON encoding.
pub fn dataset_hash(episodes: &[Episode]) -> Result<String> {
    let mut h = Sha256::new();
    for ep in episodes {
        h.update(serde_json::to_vec(ep)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// A sample track for the trajectory figure.
pub struct Sample<'a> {
    pub method: String,
    pub episode: &'a Episode,
    pub track: Track,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Plot {
    width: f64,
    height: f64,
    margin: f64,
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

impl Plot {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            let span = (hi - lo).max(1e-9);
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        Self {
            width: 640.0,
            height: 480.0,
            margin: 50.0,
            x: pad(x),
            y: pad(y),
            body: String::new(),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            self.height - self.margin - (y - self.y.0) / (self.y.1 - self.y.0) * h,
        )
    }

    fn line(&mut self, pts: &[(f64, f64)], color: &str, dash: bool) {
        let mut d = String::new();
        for (x, y) in pts {
            let (px, py) = self.map(*x, *y);
            let _ = write!(d, "{px:.2},{py:.2} ");
        }
        let dash = if dash { " stroke-dasharray=\"6 3\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            d.trim_end()
        );
    }

    fn render(&self, title: &str, xlabel: &str, ylabel: &str, legend: &[(&str, &str)]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">",
            self.width, self.height
        );
        let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            self.width - 2.0 * self.margin,
            self.height - 2.0 * self.margin,
            m = self.margin
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"25\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", self.width / 2.0);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>",
            self.width / 2.0,
            self.height - 12.0
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{ylabel}</text>",
            self.height / 2.0,
            self.height / 2.0
        );
        for (i, (x, y)) in [(self.x.0, self.y.0), (self.x.1, self.y.1)].iter().enumerate() {
            let (px, py) = self.map(*x, *y);
            let anchor = if i == 0 { "start" } else { "end" };
            let _ = writeln!(s, "<text x=\"{px:.1}\" y=\"{}\" text-anchor=\"{anchor}\">{x:.1}</text>", self.height - self.margin + 15.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{py:.1}\" text-anchor=\"end\">{y:.2}</text>", self.margin - 4.0);
        }
        s.push_str(&self.body);
        for (i, (label, color)) in legend.iter().enumerate() {
            let y = self.margin + 15.0 + 15.0 * i as f64;
            let x = self.width - self.margin - 110.0;
            let _ = writeln!(s, "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>", x + 20.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{label}</text>", x + 25.0, y + 4.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    points.filter(|(x, y)| x.is_finite() && y.is_finite()).fold(
        ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY)),
        |((x0, x1), (y0, y1)), (x, y)| ((x0.min(x), x1.max(x)), (y0.min(y), y1.max(y))),
    )
}

/// Ground truth and estimate in the plane.
pub fn trajectory_svg(sample: &Sample) -> String {
    let truth: Vec<(f64, f64)> = sample.episode.truth.iter().map(|x| (x[0], x[2])).collect();
    let est: Vec<(f64, f64)> = sample
        .track
        .states()
        .map(|x| (x[0], x[2]))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (bx, by) = bounds(truth.iter().chain(&est).copied());
    let mut plot = Plot::new(bx, by);
    plot.line(&truth, "#000000", false);
    plot.line(&est, PALETTE[0], true);
    plot.render(
        &format!("{} on episode {}", sample.method, sample.episode.seed),
        "p_x (m)",
        "p_y (m)",
        &[("truth", "#000000"), (&sample.method, PALETTE[0])],
    )
}

/// One polyline per mean weight over time, plus the glint steps as ticks.
pub fn weights_svg(log: &MaTrack, glint_steps: &[usize]) -> String {
    let t = log.weights.len();
    let m = log.weights.first().map_or(0, UtWeights::points);
    let (_, wy) = bounds(log.weights.iter().flat_map(|w| w.w_mean.iter().map(|v| (0.0, *v))));
    let mut plot = Plot::new((1.0, t.max(2) as f64), (wy.0.min(0.0), wy.1.max(1.0 / m.max(1) as f64)));
    for &k in glint_steps {
        let (x, _) = plot.map(k as f64, 0.0);
        let _ = writeln!(
            plot.body,
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#ccc\"/>",
            plot.margin,
            plot.height - plot.margin
        );
    }
    for i in 0..m {
        let pts: Vec<(f64, f64)> = log.weights.iter().enumerate().map(|(k, w)| ((k + 1) as f64, w.w_mean[i])).collect();
        plot.line(&pts, PALETTE[i % PALETTE.len()], i >= PALETTE.len());
    }
    plot.render("Mean sigma-point weights", "step k", "weight", &[("W_0", PALETTE[0]), ("W_1", PALETTE[1])])
}

/// Writes the table, and figures when samples are given.
pub fn emit_report(
    dir: &Path,
    report: &BenchReport,
    samples: &[Sample],
    weight_log: Option<(&MaTrack, &[usize])>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    for s in samples {
        let name: String = s
            .method
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else if c == '*' { 's' } else { '_' })
            .collect();
        fs::write(dir.join(format!("trajectory_{name}.svg")), trajectory_svg(s))?;
    }
    if let Some((log, glints)) = weight_log {
        if !log.weights.is_empty() {
            fs::write(dir.join("weights.svg"), weights_svg(log, glints))?;
            fs::write(dir.join("weights.csv"), log.weights_csv())?;
        }
    }
    Ok(())
}
