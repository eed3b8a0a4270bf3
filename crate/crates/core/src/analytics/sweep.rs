//! Parameter sweeps. A surface sweep measures PBFT commit rates over a grid
//! of detector operating points with Bernoulli detection; a scenario sweep
//! runs the full simulator over a grid of configuration overrides.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pbft::run_pbft_trial;
use super::{f_raw_max, f_raw_max_active_set, spec_err, tidy, AnalyticsError, OperatingPoint};
use crate::consensus::{tolerance_bound, Behavior, PeerIdentity, PeerKind, SlotOutcome, ToleranceInputs};
use crate::ids::{OrgId, PeerId};
use crate::netsim::{presets, run_scenario, Corruption, RunOptions, ScenarioConfig};
use crate::par;
use crate::synth::rng_for;

pub const FAIL_ZONE: &str = "fail zone";

/// Inclusive range `start, start + step, ..., <= stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| tidy(self.start + k as f64 * self.step)).collect()
    }

    fn check(&self, key: &str) -> Result<(), AnalyticsError> {
        let finite = [self.start, self.stop, self.step].iter().all(|x| x.is_finite());
        if !finite || self.step <= 0.0 || self.stop < self.start {
            return Err(spec_err(key, "needs finite start <= stop and a positive step"));
        }
        Ok(())
    }

    fn check_unit(&self, key: &str) -> Result<(), AnalyticsError> {
        self.check(key)?;
        if self.start < 0.0 || self.stop > 1.0 {
            return Err(spec_err(key, "probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub seed: u64,
    pub trials: u32,
    /// Exactly one of `surface` and `scenario` is set.
    #[serde(default)]
    pub surface: Option<SurfaceSpec>,
    #[serde(default)]
    pub scenario: Option<ScenarioSweep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepMode<'a> {
    Surface(&'a SurfaceSpec),
    Scenario(&'a ScenarioSweep),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    /// One peer per organization.
    pub peers: u32,
    pub p_d: Axis,
    pub p_fa: Axis,
    pub f_raw: Axis,
    #[serde(default = "default_success_level")]
    pub success_level: f64,
    #[serde(default = "default_behavior")]
    pub behavior: Behavior,
}

fn default_success_level() -> f64 {
    0.95
}

fn default_behavior() -> Behavior {
    Behavior::Silent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSweep {
    /// A preset name; ignored when `base` is set.
    #[serde(default)]
    pub preset: Option<String>,
    /// Scenario file, relative to the sweep file.
    #[serde(default)]
    pub base: Option<String>,
    /// Overrides the base scenario's slot count.
    #[serde(default)]
    pub slots: Option<u64>,
    pub axes: Vec<ParamAxis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    FRaw,
    PFa,
    Epsilon,
    SpikeMagnitude,
    Orgs,
    PeersPerOrg,
}

impl Param {
    pub fn as_str(self) -> &'static str {
        match self {
            Param::FRaw => "f_raw",
            Param::PFa => "p_fa",
            Param::Epsilon => "epsilon",
            Param::SpikeMagnitude => "spike_magnitude",
            Param::Orgs => "orgs",
            Param::PeersPerOrg => "peers_per_org",
        }
    }

    fn apply(self, cfg: &mut ScenarioConfig, v: f64) -> Result<(), AnalyticsError> {
        let count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as u32)
            } else {
                Err(spec_err(self.as_str(), format!("{v} is not a positive integer")))
            }
        };
        match self {
            Param::FRaw => cfg.adversary.malicious_device_fraction = v,
            Param::PFa => cfg.detector.p_fa = v,
            Param::Epsilon => cfg.detector.epsilon = v,
            Param::SpikeMagnitude => match &mut cfg.adversary.corruption {
                Corruption::Spike { magnitude, .. } => *magnitude = v,
                _ => {
                    return Err(spec_err(
                        "spike_magnitude",
                        "base scenario does not use spike corruption",
                    ))
                }
            },
            Param::Orgs => cfg.topology.orgs = count(v)?,
            Param::PeersPerOrg => {
                let n = count(v)?;
                let e = cfg.topology.endorsing_per_org;
                if n < e {
                    return Err(spec_err("peers_per_org", format!("fewer than the {e} endorsing peers")));
                }
                cfg.topology.regular_per_org = n - e;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamAxis {
    pub param: Param,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl SweepSpec {
    pub fn from_toml(s: &str) -> Result<Self, AnalyticsError> {
        let spec: Self = toml::from_str(s).map_err(|e| AnalyticsError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn mode(&self) -> Result<SweepMode<'_>, AnalyticsError> {
        match (&self.surface, &self.scenario) {
            (Some(s), None) => Ok(SweepMode::Surface(s)),
            (None, Some(s)) => Ok(SweepMode::Scenario(s)),
            _ => Err(spec_err("surface", "set exactly one of [surface] and [scenario]")),
        }
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.trials == 0 {
            return Err(spec_err("trials", "must be at least 1"));
        }
        match self.mode()? {
            SweepMode::Surface(s) => {
                if s.peers == 0 {
                    return Err(spec_err("peers", "must be positive"));
                }
                s.p_d.check_unit("p_d")?;
                s.p_fa.check_unit("p_fa")?;
                s.f_raw.check_unit("f_raw")?;
                if !(s.success_level > 0.0 && s.success_level <= 1.0) {
                    return Err(spec_err("success_level", "must be in (0, 1]"));
                }
                if s.behavior == Behavior::Honest {
                    return Err(spec_err("behavior", "malicious peers need silent or equivocate"));
                }
            }
            SweepMode::Scenario(s) => {
                if s.axes.is_empty() {
                    return Err(spec_err("axes", "at least one axis"));
                }
                let mut seen = BTreeSet::new();
                for a in &s.axes {
                    let key = a.param.as_str();
                    if !seen.insert(a.param) {
                        return Err(spec_err(key, "axis listed twice"));
                    }
                    Axis {
                        start: a.start,
                        stop: a.stop,
                        step: a.step,
                    }
                    .check(key)?;
                }
                if s.base.is_none() && s.preset.as_deref().and_then(presets::by_name).is_none() {
                    return Err(spec_err(
                        "preset",
                        format!("set `base` or one of: {}", presets::NAMES.join(", ")),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The two CSV documents a sweep produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub grid_csv: String,
    pub surface_csv: String,
}

/// Runs a sweep. `dir` resolves a scenario sweep's relative `base` path.
pub fn run_sweep(spec: &SweepSpec, dir: &Path) -> Result<SweepOutput, AnalyticsError> {
    spec.validate()?;
    match spec.mode()? {
        SweepMode::Surface(s) => Ok(surface(spec.seed, spec.trials, s)),
        SweepMode::Scenario(s) => scenario(spec.seed, spec.trials, s, dir),
    }
}

struct SurfaceTrial {
    malicious: usize,
    detected: usize,
    false_alarms: usize,
    active: usize,
    byzantine_active: usize,
    outcome: SlotOutcome,
}

fn surface(seed: u64, trials: u32, s: &SurfaceSpec) -> SweepOutput {
    let (pds, pfas, fs) = (s.p_d.values(), s.p_fa.values(), s.f_raw.values());
    let mut points = Vec::with_capacity(pds.len() * pfas.len() * fs.len());
    for &pd in &pds {
        for &pfa in &pfas {
            points.extend(fs.iter().map(|&f| (pd, pfa, f)));
        }
    }
    let n = s.peers as usize;
    let results: Vec<Vec<SurfaceTrial>> = par::map_range(points.len(), |k| {
        let (p_d, p_fa, f) = points[k];
        (0..trials)
            .map(|trial| {
                let mut rng = rng_for(seed.wrapping_add(k as u64), u64::from(trial));
                let m = ((f * n as f64).round() as usize).min(n);
                let bad: BTreeSet<usize> = sample(&mut rng, n, m).into_iter().collect();
                let mut excluded = BTreeSet::new();
                let (mut detected, mut false_alarms) = (0, 0);
                for i in 0..n {
                    let is_bad = bad.contains(&i);
                    if rng.random_bool(if is_bad { p_d } else { p_fa }) {
                        excluded.insert(OrgId(i as u32));
                        if is_bad {
                            detected += 1;
                        } else {
                            false_alarms += 1;
                        }
                    }
                }
                let peers: Vec<PeerIdentity> = (0..n)
                    .map(|i| PeerIdentity {
                        peer: PeerId(i as u32),
                        org: OrgId(i as u32),
                        kind: PeerKind::Endorsing,
                        behavior: if bad.contains(&i) { s.behavior } else { Behavior::Honest },
                    })
                    .collect();
                let r = run_pbft_trial(&peers, &excluded, &mut rng);
                SurfaceTrial {
                    malicious: m,
                    detected,
                    false_alarms,
                    active: r.active,
                    byzantine_active: r.byzantine_active,
                    outcome: r.outcome,
                }
            })
            .collect()
    });

    let mut grid = String::from(
        "point,p_d,p_fa,f_raw,trial,peers,malicious,detected,false_alarms,active,byzantine_active,outcome\n",
    );
    for (k, ((p_d, p_fa, f), trials)) in points.iter().zip(&results).enumerate() {
        for (t, r) in trials.iter().enumerate() {
            writeln!(
                grid,
                "{k},{p_d},{p_fa},{f},{t},{n},{},{},{},{},{},{}",
                r.malicious,
                r.detected,
                r.false_alarms,
                r.active,
                r.byzantine_active,
                r.outcome.as_str()
            )
            .expect("writing to a String");
        }
    }

    let mut surface = String::from(
        "p_d,p_fa,f_det_at_one_third,zone,f_raw_max_analytic,f_raw_max_active_set,f_raw_max_empirical,\
min_success_rate\n",
    );
    let per_cell = fs.len();
    for (c, chunk) in results.chunks(per_cell).enumerate() {
        let (p_d, p_fa, _) = points[c * per_cell];
        let op = OperatingPoint::new(1.0 / 3.0, p_d, p_fa).expect("axes checked to lie in [0, 1]");
        let rates: Vec<f64> = chunk
            .iter()
            .map(|ts| ts.iter().filter(|t| t.outcome == SlotOutcome::Success).count() as f64 / ts.len() as f64)
            .collect();
        let empirical = fs
            .iter()
            .zip(&rates)
            .take_while(|(_, &r)| r >= s.success_level)
            .last()
            .map(|(f, _)| *f);
        let min_rate = rates.iter().copied().fold(1.0, f64::min);
        writeln!(
            surface,
            "{p_d},{p_fa},{},{},{},{},{},{min_rate}",
            op.f_det,
            if op.fail_zone() { FAIL_ZONE } else { "tolerated" },
            opt(f_raw_max(p_d, p_fa)),
            opt(f_raw_max_active_set(p_d, p_fa)),
            opt(empirical),
        )
        .expect("writing to a String");
    }
    SweepOutput {
        grid_csv: grid,
        surface_csv: surface,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn scenario(seed: u64, trials: u32, s: &ScenarioSweep, dir: &Path) -> Result<SweepOutput, AnalyticsError> {
    let mut base = match &s.base {
        Some(p) => ScenarioConfig::from_toml(&std::fs::read_to_string(dir.join(p))?)?,
        None => presets::by_name(s.preset.as_deref().unwrap_or_default()).expect("validated"),
    };
    if let Some(slots) = s.slots {
        base.slots = slots;
    }
    let axes: Vec<Vec<f64>> = s
        .axes
        .iter()
        .map(|a| {
            Axis {
                start: a.start,
                stop: a.stop,
                step: a.step,
            }
            .values()
        })
        .collect();
    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for vals in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    let mut cfgs = Vec::with_capacity(points.len() * trials as usize);
    for (k, p) in points.iter().enumerate() {
        for t in 0..trials {
            let mut c = base.clone();
            for (a, &v) in s.axes.iter().zip(p) {
                a.param.apply(&mut c, v)?;
            }
            c.seed = seed.wrapping_add(k as u64 * u64::from(trials) + u64::from(t));
            c.validate()?;
            cfgs.push(c);
        }
    }
    let runs = par::map_slice(&cfgs, |c| run_scenario(c, &RunOptions::default()).map(|r| r.summary));
    let summaries = runs.into_iter().collect::<Result<Vec<_>, _>>()?;

    let names: Vec<&str> = s.axes.iter().map(|a| a.param.as_str()).collect();
    let mut grid = format!(
        "point,{},trial,seed,outcome,success_rate,f_raw_measured,p_d,p_fa,mean_post_filter_fault_ratio,f_det\n",
        names.join(",")
    );
    let mut surface = format!(
        "point,{},trials,mean_success_rate,f_raw_measured,p_d,p_fa,f_det,f_raw_max,zone,mean_post_filter_fault_ratio\n",
        names.join(",")
    );
    let mean = |xs: &[Option<f64>]| {
        let v: Vec<f64> = xs.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    for (k, p) in points.iter().enumerate() {
        let vals = p.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let block = &summaries[k * trials as usize..(k + 1) * trials as usize];
        for (t, (sm, c)) in block.iter().zip(&cfgs[k * trials as usize..]).enumerate() {
            writeln!(
                grid,
                "{k},{vals},{t},{},{},{},{},{},{},{},{}",
                c.seed,
                sm.outcome.as_str(),
                sm.success_rate,
                sm.f_raw,
                opt(sm.p_d),
                opt(sm.p_fa),
                sm.mean_post_filter_fault_ratio,
                opt(sm.tolerance_bound),
            )
            .expect("writing to a String");
        }
        let rate = block.iter().map(|x| x.success_rate).sum::<f64>() / block.len() as f64;
        let f = block.iter().map(|x| x.f_raw).sum::<f64>() / block.len() as f64;
        let pd = mean(&block.iter().map(|x| x.p_d).collect::<Vec<_>>());
        let pfa = mean(&block.iter().map(|x| x.p_fa).collect::<Vec<_>>());
        let post = block.iter().map(|x| x.mean_post_filter_fault_ratio).sum::<f64>() / block.len() as f64;
        // without a detector nothing is filtered
        let (pd0, pfa0) = (pd.unwrap_or(0.0), pfa.unwrap_or(0.0));
        let f_det = tolerance_bound(ToleranceInputs {
            f_raw: f,
            p_d: pd0,
            p_fa: pfa0,
        })
        .map(|b| b.f_det)
        .ok();
        let op = OperatingPoint::new(1.0 / 3.0, pd0, pfa0)?;
        writeln!(
            surface,
            "{k},{vals},{trials},{rate},{f},{},{},{},{},{},{post}",
            opt(pd),
            opt(pfa),
            opt(f_det),
            opt(f_raw_max(pd0, pfa0)),
            if op.fail_zone() { FAIL_ZONE } else { "tolerated" },
        )
        .expect("writing to a String");
    }
    Ok(SweepOutput {
        grid_csv: grid,
        surface_csv: surface,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surface_spec() -> SweepSpec {
        SweepSpec::from_toml(
            r#"
seed = 4
trials = 10
[surface]
peers = 10
p_d = { start = 0.0, stop = 0.5, step = 0.5 }
p_fa = { start = 0.0, stop = 0.5, step = 0.5 }
f_raw = { start = 0.0, stop = 0.6, step = 0.1 }
"#,
        )
        .unwrap()
    }

    #[test]
    fn axis_values_are_inclusive_and_tidy() {
        let a = Axis {
            start: 0.0,
            stop: 0.3,
            step: 0.1,
        };
        assert_eq!(a.values(), vec![0.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn surface_shape_and_labels() {
        let out = run_sweep(&surface_spec(), Path::new(".")).unwrap();
        assert_eq!(out.grid_csv.lines().count(), 1 + 4 * 7 * 10);
        let rows: Vec<&str> = out.surface_csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        // p_d = 0, p_fa = 0.5 is beyond repair
        assert!(rows[1].starts_with("0,0.5,") && rows[1].contains(FAIL_ZONE));
        assert!(rows[0].starts_with("0,0,") && rows[0].contains("tolerated"));
        // with no detector the empirical limit is f <= 3/10 at ten peers
        let cells: Vec<&str> = rows[0].split(',').collect();
        assert_eq!(cells[6], "0.3");
    }

    #[test]
    fn surface_is_reproducible() {
        let a = run_sweep(&surface_spec(), Path::new(".")).unwrap();
        let b = run_sweep(&surface_spec(), Path::new(".")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_names_keys() {
        let bad = "seed = 1\ntrials = 0\n[surface]\npeers = 4\n\
p_d = { start = 0.0, stop = 1.0, step = 0.5 }\np_fa = { start = 0.0, stop = 1.0, step = 0.5 }\n\
f_raw = { start = 0.0, stop = 1.0, step = 0.5 }\n";
        assert!(matches!(SweepSpec::from_toml(bad), Err(AnalyticsError::Spec { key, .. }) if key == "trials"));
        let bad = bad
            .replace("trials = 0", "trials = 1")
            .replace("stop = 1.0, step = 0.5 }\np_fa", "stop = 1.5, step = 0.5 }\np_fa");
        assert!(matches!(SweepSpec::from_toml(&bad), Err(AnalyticsError::Spec { key, .. }) if key == "p_d"));
    }

    #[test]
    fn scenario_sweep_runs_points() {
        let spec = SweepSpec::from_toml(
            r#"
seed = 9
trials = 1
[scenario]
preset = "attack-attenuation-no-detector"
slots = 3
axes = [{ param = "f_raw", start = 0.0, stop = 0.375, step = 0.375 }]
"#,
        )
        .unwrap();
        let out = run_sweep(&spec, Path::new(".")).unwrap();
        let rows: Vec<&str> = out.surface_csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("0,0,1,1,"));
        assert!(rows[1].starts_with("1,0.375,1,0,"));
    }
}
