//! Config-driven experiment stages shared by the command line and the acceptance suite.

use std::path::Path;

use log::info;

use crate::bench::{
    self, dataset_hash, emit_report, evaluate, step_time, summarize, trial_log_csv, BenchReport, Filter, MethodRow, Sample, Setup,
    TuneKind, TuneResult, NOMINAL, NOMINAL_STAY,
};
use crate::config::Config;
use crate::dynamics::{generate, Episode, Regime};
use crate::error::Result;
use crate::ma_ukf::{run_ma_ukf, MaTrack, MaUkf};
use crate::policy::{Dims, PolicyParams};
use crate::rng::{self, Split};
use crate::train::{training_data, TrainState, Trainer};
use crate::ukf::{initial_belief, FilterModel, UtWeights};

pub const METHODS: [&str; 5] = ["UKF", "UKF*", "IMM-UKF", "IMM-UKF*", "MA-UKF"];

pub fn setup(cfg: &Config) -> Setup {
    Setup {
        model: FilterModel::ct(cfg.dt, cfg.noise.q(cfg.dt), cfg.noise.r()).with_angles(cfg.filter.angles),
        p0: cfg.filter.p0_diag,
    }
}

/// Held-out benchmark episodes of one regime; weave uses the evaluation glint scale.
pub fn bench_episodes(cfg: &Config, regime: Regime, count: usize) -> Result<Vec<Episode>> {
    let (split, world) = match regime {
        Regime::TrainCt => (Split::BenchTrain, cfg.noise.train_model(cfg.dt)?),
        Regime::EvalWeave => (Split::BenchWeave, cfg.noise.eval_model(cfg.dt)?),
    };
    generate(regime, rng::split_seed(cfg.seed, split), count, cfg.steps, cfg.dt, &world)
}

pub fn tuning_episodes(cfg: &Config) -> Result<Vec<Episode>> {
    let world = cfg.noise.train_model(cfg.dt)?;
    generate(
        Regime::TrainCt,
        rng::split_seed(cfg.seed, Split::Tuning),
        cfg.bench.tune_episodes,
        cfg.steps,
        cfg.dt,
        &world,
    )
}

pub fn tune_both(cfg: &Config) -> Result<(TuneResult, TuneResult)> {
    let s = setup(cfg);
    let eps = tuning_episodes(cfg)?;
    let search = rng::split_seed(cfg.seed, Split::Search);
    let ukf = bench::tune(TuneKind::Ukf, &s, &eps, cfg.bench.tune_trials, search)?;
    let imm = bench::tune(TuneKind::Imm, &s, &eps, cfg.bench.tune_trials, rng::episode_seed(search, 1))?;
    Ok((ukf, imm))
}

/// Trains from scratch, or continues `resume`, writing outputs into `out` when given.
pub fn train_policy(cfg: &Config, out: Option<&Path>, resume: Option<TrainState>) -> Result<TrainState> {
    let world = cfg.noise.train_model(cfg.dt)?;
    let (train, val) = training_data(&cfg.train, cfg.seed, cfg.dt, &world)?;
    let trainer = Trainer {
        cfg: cfg.train.clone(),
        seed: cfg.seed,
        setup: setup(cfg),
        gamma: cfg.filter.gamma,
        dims: Dims::default(),
        train: &train,
        val: &val,
    };
    let mut st = match resume {
        Some(st) => st,
        None => trainer.init_state()?,
    };
    trainer.train(&mut st, out)?;
    Ok(st)
}

pub struct BenchOutcome {
    pub report: BenchReport,
    pub ukf_tune: TuneResult,
    pub imm_tune: TuneResult,
    /// Weight log of the adaptive filter on the first weave episode.
    pub weight_log: MaTrack,
}

/// Tunes the baselines, evaluates every method on both regimes and writes the report into `out`.
pub fn run_bench(cfg: &Config, policy: &PolicyParams, out: &Path) -> Result<BenchOutcome> {
    let s = setup(cfg);
    let (ukf_tune, imm_tune) = tune_both(cfg)?;
    let nominal = UtWeights::classic(NOMINAL.0, NOMINAL.1, NOMINAL.2, crate::dynamics::NX)?;
    let ma = MaUkf::new(s.model.clone(), policy, cfg.filter.gamma)?;
    let filters = [
        Filter::Ukf(nominal.clone()),
        ukf_tune.best.filter()?,
        Filter::Imm {
            weights: nominal,
            stay: NOMINAL_STAY,
        },
        imm_tune.best.filter()?,
        Filter::Ma(ma.clone()),
    ];
    let mut report = BenchReport {
        config_hash: cfg.hash()?,
        config_snapshot: cfg.to_toml()?,
        ..BenchReport::default()
    };
    let mut samples = Vec::new();
    let mut weave0 = None;
    for regime in [Regime::TrainCt, Regime::EvalWeave] {
        let eps = bench_episodes(cfg, regime, cfg.bench.episodes)?;
        report.dataset_hashes.push((regime, dataset_hash(&eps)?));
        let timing = &eps[..cfg.bench.timing_episodes.min(eps.len())];
        for (name, f) in METHODS.iter().zip(&filters) {
            let summary = summarize(&evaluate(f, &s, &eps));
            info!("{} {name}: ARMSE {:.3} ± {:.3}, {} diverged", regime.name(), summary.mean, summary.std, summary.divergences);
            report.rows.push(MethodRow {
                regime,
                method: name.to_string(),
                summary,
                step_time: step_time(f, &s, timing),
            });
            if regime == Regime::EvalWeave {
                if let Ok(track) = f.run(&s, &eps[0]) {
                    samples.push((name.to_string(), track));
                }
            }
        }
        if regime == Regime::EvalWeave {
            weave0 = Some(eps.into_iter().next().expect("at least one episode"));
        }
    }
    let weave0 = weave0.expect("weave regime evaluated");
    let weight_log = run_ma_ukf(&weave0, &ma, &initial_belief(&weave0, &s.p0), true)?;
    let samples: Vec<Sample> = samples
        .into_iter()
        .map(|(method, track)| Sample {
            method,
            episode: &weave0,
            track,
        })
        .collect();
    emit_report(out, &report, &samples, Some((&weight_log, &weave0.glint_steps)))?;
    std::fs::write(out.join("trial_log.csv"), trial_log_csv(&[&ukf_tune, &imm_tune]))?;
    Ok(BenchOutcome {
        report,
        ukf_tune,
        imm_tune,
        weight_log,
    })
}
