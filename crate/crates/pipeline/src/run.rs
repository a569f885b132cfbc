use std::time::Instant;

use crate::ablate::{run_ablations, seed_runs};
use crate::alloc;
use crate::baselines::run_baselines;
use crate::config::{Ablation, RunConfig};
use crate::motif_study::run_motif_study;
use crate::phase1::run_phase1;
use crate::phase2::{few_shot, run_phase2};
use crate::prepare::prepare;
use crate::report::{RunArtifacts, RuntimeRow};
use crate::riskbound_run::run_riskbound;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Generate,
    Phase1,
    Phase2,
    FewShot,
    Baselines,
    Seeds,
    Ablate,
    Motifs,
    Riskbound,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::Generate,
        Step::Phase1,
        Step::Phase2,
        Step::FewShot,
        Step::Baselines,
        Step::Seeds,
        Step::Ablate,
        Step::Motifs,
        Step::Riskbound,
    ];

    fn needs_phase1(self) -> bool {
        matches!(self, Step::Phase1 | Step::Phase2 | Step::FewShot | Step::Riskbound)
    }

    fn needs_corpus(self) -> bool {
        self.needs_phase1() || matches!(self, Step::Generate | Step::Baselines)
    }
}

fn timed<T>(runtime: &mut Vec<RuntimeRow>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    alloc::reset_peak();
    let start = Instant::now();
    let out = f()?;
    runtime.push(RuntimeRow {
        stage: name.to_string(),
        seconds: start.elapsed().as_secs_f64(),
        ms_per_task: None,
        peak_bytes: alloc::peak_bytes(),
    });
    Ok(out)
}

/// Runs the requested steps, preparing the corpus and phase 1 once when any
/// step depends on them.
pub fn run_steps(cfg: &RunConfig, steps: &[Step], ablations: &[Ablation]) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut run = RunArtifacts::default();
    let has = |s: Step| steps.contains(&s);
    if steps.iter().any(|s| s.needs_corpus()) {
        let prep = timed(&mut run.runtime, "generate", || prepare(cfg))?;
        run.log.record("generate", "corpus", &[("tasks", &prep.corpus.tasks.len()), ("hash", &cfg.hash())]);
        run.prepared = Some(prep);
    }
    if steps.iter().any(|s| s.needs_phase1()) {
        let prep = run.prepared.as_ref().expect("corpus prepared");
        let p1 = timed(&mut run.runtime, "phase1", || run_phase1(cfg, prep))?;
        run.log.extend(p1.log.clone());
        run.phase1 = Some(p1);
    }
    if has(Step::Phase2) {
        let (prep, p1) = (run.prepared.as_ref().expect("corpus"), run.phase1.as_ref().expect("phase1"));
        let p2 = timed(&mut run.runtime, "phase2", || run_phase2(cfg, prep, p1))?;
        run.log.extend(p2.log.clone());
        run.phase2 = Some(p2);
    }
    if has(Step::FewShot) {
        let (prep, p1) = (run.prepared.as_ref().expect("corpus"), run.phase1.as_ref().expect("phase1"));
        run.few_shot = Some(timed(&mut run.runtime, "few-shot", || few_shot(cfg, prep, p1))?);
    }
    if has(Step::Baselines) {
        let prep = run.prepared.as_ref().expect("corpus");
        run.baselines = Some(timed(&mut run.runtime, "baselines", || run_baselines(cfg, prep))?);
    }
    if has(Step::Seeds) {
        run.seeds = Some(timed(&mut run.runtime, "seeds", || seed_runs(cfg))?);
    }
    if has(Step::Ablate) {
        let mut log = std::mem::take(&mut run.log);
        let rows = timed(&mut run.runtime, "ablate", || run_ablations(cfg, ablations, &mut log));
        run.log = log;
        run.ablations = Some(rows?);
    }
    if has(Step::Motifs) {
        let mut log = std::mem::take(&mut run.log);
        let study = timed(&mut run.runtime, "motifs", || run_motif_study(cfg, &mut log));
        run.log = log;
        run.motifs = Some(study?);
    }
    if has(Step::Riskbound) {
        let (prep, p1) = (run.prepared.as_ref().expect("corpus"), run.phase1.as_ref().expect("phase1"));
        let rb = timed(&mut run.runtime, "riskbound", || run_riskbound(cfg, prep, p1))?;
        run.log.record(
            "riskbound",
            "summary",
            &[("tasks", &rb.1.n_tasks), ("triangle_rate", &rb.1.triangle_rate), ("task_bound_rate", &rb.1.task_bound_rate)],
        );
        run.riskbound = Some(rb);
    }
    Ok(run)
}
